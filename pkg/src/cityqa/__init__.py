"""Incomplete multimodal fusion QA at desk scale.

A variational fusion model over optional image/point features with an
autoregressive answer decoder, a scene-graph QA corpus generator, and a
judge-based evaluation kit, wired together by the `cityqa` CLI.
"""

__version__ = "0.1.0"
