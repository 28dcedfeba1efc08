"""Built-in verification suites behind `cityqa selftest`.

Four independent checks, each pitting an implementation against an oracle
that shares no code with it: analytic gradients vs central finite
differences, the closed-form KL vs a Monte-Carlo estimate, reparameterized
sample statistics vs their analytic moments, and generated QA answers vs the
brute-force geometry oracle. A sign flip or dropped term in any of the core
formulas turns at least one suite red.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import oracle, svmgen
from .imf import GaussianEmbedding, kl_loss, sample_z
from .numerics import finite_diff_grad, max_rel_error
from .seeding import derive_rng
from .training import (
    SyntheticTaskSpec,
    TrainConfig,
    Vocab,
    build_model,
    loss_and_grads,
    make_synthetic_dataset,
    total_loss,
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def check_gradients(seed: int = 0) -> SuiteResult:
    """Analytic grads of the full loss vs finite differences, rel err < 1e-4."""
    cfg = TrainConfig(
        image_dim=3, point_dim=3, encoder_hidden=4, encoded_dim=3,
        latent_dim=4, model_dim=6, ff_dim=5, vision_token_count=2,
        kl_weight=1e-3, seed=seed,
    )
    spec = SyntheticTaskSpec(image_dim=3, point_dim=3, train_size=4, test_size=2)
    ds = make_synthetic_dataset(spec, seed=seed)
    vocab = Vocab.build([e.question for e in ds.train] + [e.answer for e in ds.train])
    model = build_model(cfg, vocab)
    batch = ds.train[:2]

    def f() -> float:
        return total_loss(batch, model, derive_rng("selftest-eps", seed))[0]

    loss_and_grads(batch, model, derive_rng("selftest-eps", seed))
    params = model.parameters()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    numeric = finite_diff_grad(f, params)
    worst = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
    return SuiteResult(
        name="gradient-check",
        passed=worst < 1e-4,
        detail=f"max relative error {worst:.3e} over "
               f"{sum(p.value.size for p in params)} coordinates (limit 1e-4)",
    )


def check_kl_oracle(seed: int = 0, n_gaussians: int = 5,
                    n_samples: int = 200_000) -> SuiteResult:
    """Closed-form KL vs spot values and a Monte-Carlo estimate (3 SE)."""
    spot = [
        (GaussianEmbedding(mu=[0.0], log_sigma=[0.0]), 0.0),
        (GaussianEmbedding(mu=[1.0], log_sigma=[0.0]), 0.5),
        (GaussianEmbedding(mu=[0.0], log_sigma=[np.log(2.0)]), 1.5 - np.log(2.0)),
    ]
    for g, expected in spot:
        if abs(kl_loss(g) - expected) > 1e-12:
            return SuiteResult("kl-oracle", False,
                               f"closed form gives {kl_loss(g)}, expected {expected}")
    rng = derive_rng("selftest-kl", seed)
    for trial in range(n_gaussians):
        dim = int(rng.integers(1, 5))
        g = GaussianEmbedding(
            mu=rng.uniform(-2.0, 2.0, size=dim),
            log_sigma=rng.uniform(-1.0, 1.0, size=dim),
        )
        sigma = np.exp(g.log_sigma)
        eps = rng.standard_normal((n_samples, dim))
        z = g.mu + eps * sigma
        # log q(z) - log p(z) per sample, summed over dims
        log_q = -0.5 * (eps**2) - g.log_sigma - 0.5 * np.log(2.0 * np.pi)
        log_p = -0.5 * (z**2) - 0.5 * np.log(2.0 * np.pi)
        per_sample = (log_q - log_p).sum(axis=1)
        mc = per_sample.mean()
        se = per_sample.std(ddof=1) / np.sqrt(n_samples)
        closed = kl_loss(g)
        if abs(closed - mc) > 3.0 * se:
            return SuiteResult(
                "kl-oracle", False,
                f"trial {trial}: closed {closed:.6f} vs MC {mc:.6f} "
                f"(3 SE = {3 * se:.6f})",
            )
    return SuiteResult("kl-oracle", True,
                       f"{len(spot)} spot values exact; {n_gaussians} Monte-Carlo "
                       f"estimates within 3 standard errors")


def check_sampling_stats(seed: int = 0, n_samples: int = 100_000) -> SuiteResult:
    """Reparameterized samples must match the analytic mean and variance."""
    rng = derive_rng("selftest-sampling", seed)
    g = GaussianEmbedding(
        mu=np.array([0.5, -1.2, 2.0]),
        log_sigma=np.array([0.0, 0.4, -0.7]),
    )
    sigma = np.exp(g.log_sigma)
    eps = rng.standard_normal((n_samples, g.mu.size))
    z = g.mu + eps * sigma
    mean_err = np.abs(z.mean(axis=0) - g.mu)
    mean_lim = 4.0 * sigma / np.sqrt(n_samples)
    var_ratio = z.var(axis=0, ddof=1) / sigma**2
    if np.any(mean_err > mean_lim):
        return SuiteResult("sampling-statistics", False,
                           f"mean off by {mean_err} (limits {mean_lim})")
    if np.any(np.abs(var_ratio - 1.0) > 0.05):
        return SuiteResult("sampling-statistics", False,
                           f"variance ratios {var_ratio} outside 1 +/- 0.05")
    z0 = sample_z(g, np.zeros(g.mu.size))
    if not np.array_equal(z0, g.mu):
        return SuiteResult("sampling-statistics", False,
                           "sample_z with eps=0 is not bit-equal to mu")
    return SuiteResult("sampling-statistics", True,
                       f"{n_samples} samples: means within 4 sigma/sqrt(N), "
                       f"variances within 5%, eps=0 returns mu bit-exactly")


def check_qa_roundtrip(seed: int = 0, n_scenes: int = 25) -> SuiteResult:
    """Generated answers vs the geometry oracle, plus byte determinism."""
    scenes = svmgen.random_scenes(n_scenes, seed=seed)
    pairs = svmgen.generate_corpus(scenes)
    if not pairs:
        return SuiteResult("qa-roundtrip", False, "no pairs generated")
    bad = oracle.verify_corpus(pairs, scenes)
    if bad:
        return SuiteResult("qa-roundtrip", False,
                           f"{len(bad)} oracle disagreements, e.g. {bad[:3]}")
    again = svmgen.generate_corpus(svmgen.random_scenes(n_scenes, seed=seed))
    blob = lambda ps: "\n".join(json.dumps(p.to_dict()) for p in ps)  # noqa: E731
    if blob(pairs) != blob(again):
        return SuiteResult("qa-roundtrip", False, "regeneration is not byte-identical")
    for scene in scenes:
        graph = svmgen.build_scene_graph(scene)
        edges = set(graph.edges)
        for sub, rel, obj in graph.edges:
            if rel in svmgen.SYMMETRIC_RELATIONS:
                if (obj, rel, sub) in edges or sub >= obj:
                    return SuiteResult("qa-roundtrip", False,
                                       f"symmetric edge stored twice in {scene.scene_id}")
            elif (obj, svmgen.CONVERSE[rel], sub) not in edges:
                return SuiteResult("qa-roundtrip", False,
                                   f"missing converse edge in {scene.scene_id}")
        for p in pairs:
            if p.hops not in (1, 2) or len(p.provenance) != p.hops:
                return SuiteResult("qa-roundtrip", False,
                                   f"{p.id}: hops {p.hops} vs "
                                   f"{len(p.provenance)} provenance facts")
    return SuiteResult("qa-roundtrip", True,
                       f"{len(pairs)} pairs over {n_scenes} scenes: oracle agreement "
                       f"100%, regeneration byte-identical, graph invariants hold")


SUITES = (check_gradients, check_kl_oracle, check_sampling_stats, check_qa_roundtrip)


def run_selftest(seed: int = 0) -> list:
    return [suite(seed) for suite in SUITES]
