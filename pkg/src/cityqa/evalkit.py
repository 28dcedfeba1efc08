"""Judge-based evaluation: T/F verdicts over (question, gold, output) triplets.

Two judges share one verdict type: a deterministic offline judge that
compares normalized strings, and a remote LLM judge that sends each triplet
through a fixed prompt to a chat-completion-style endpoint and parses the
leading T/F of the reply. Triplets whose requests exhaust their retries are
excluded from every denominator and reported as unjudged. Aggregation is
per-question-type plus overall accuracy.
"""

from __future__ import annotations

import logging
import os
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import requests

logger = logging.getLogger("cityqa.evalkit")

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_ARTICLES = ("a", "an", "the")
_NUMBER_WORDS = {
    w: str(i)
    for i, w in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve "
        "thirteen fourteen fifteen sixteen seventeen eighteen nineteen "
        "twenty".split()
    )
}

JUDGE_PROMPT_TEMPLATE = (
    "Analyze two sentences and determine if they're referring to the same "
    "general object or concept, focusing on the type of object, not "
    "attributes such as color, size, or shape. Respond with `T' if they "
    "refer to the same thing and `F' if not. Also, provide a brief rationale "
    "for your judgment.\n"
    "\n"
    "Now, let's analyze the following:\n"
    "\n"
    "Input: 1. {ground_truth} 2. {model_output}\n"
    "\n"
    "Output:"
)


class VerdictParseError(ValueError):
    """Judge response contains neither a leading T nor F."""


class JudgeConfigError(RuntimeError):
    """Remote judge is missing its endpoint or credential."""


@dataclass
class Triplet:
    question: str
    ground_truth: str
    model_output: str
    qtype: str = "unknown"


@dataclass
class Verdict:
    value: str  # "T" | "F"
    rationale: str = ""
    judge: str = "exact"  # "exact" | "remote"


def normalize(s: str) -> str:
    """Lowercase, drop punctuation, collapse spaces, strip leading articles,
    and canonicalize the number words zero..twenty to digits."""
    tokens = s.lower().translate(_PUNCT_TABLE).split()
    while tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    return " ".join(_NUMBER_WORDS.get(t, t) for t in tokens)


def exact_judge(t: Triplet) -> Verdict:
    """T iff ground truth and model output normalize to the same string."""
    same = normalize(t.ground_truth) == normalize(t.model_output)
    return Verdict(value="T" if same else "F", rationale="", judge="exact")


def build_judge_prompt(t: Triplet) -> str:
    """The judging prompt with only the two slots substituted."""
    return (JUDGE_PROMPT_TEMPLATE
            .replace("{ground_truth}", t.ground_truth)
            .replace("{model_output}", t.model_output))


def parse_verdict(response: str) -> Verdict:
    """First alphabetic character decides: T/t -> T, F/f -> F, else error.

    Everything after the verdict character is kept as the rationale.
    """
    for i, ch in enumerate(response):
        if ch.isalpha():
            if ch in "Tt":
                return Verdict(value="T", rationale=response[i + 1:].lstrip(),
                               judge="remote")
            if ch in "Ff":
                return Verdict(value="F", rationale=response[i + 1:].lstrip(),
                               judge="remote")
            break
    raise VerdictParseError(f"no leading T/F verdict in {response!r}")


@dataclass
class JudgeConfig:
    endpoint: Optional[str] = None
    api_key_env: str = "JUDGE_API_KEY"
    model: str = "gpt-4"
    timeout: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 4
    backoff: float = 0.5  # seconds, doubled per retry

    def validate(self) -> None:
        if not self.endpoint:
            raise JudgeConfigError("remote judge endpoint is not configured")
        if not os.environ.get(self.api_key_env):
            raise JudgeConfigError(
                f"remote judge credential missing: set {self.api_key_env}"
            )


def _judge_once(prompt: str, cfg: JudgeConfig) -> Verdict:
    headers = {"Authorization": f"Bearer {os.environ[cfg.api_key_env]}"}
    resp = requests.post(
        cfg.endpoint,
        json={"model": cfg.model, "messages": [{"role": "user", "content": prompt}]},
        headers=headers,
        timeout=cfg.timeout,
    )
    resp.raise_for_status()
    content = resp.json()["choices"][0]["message"]["content"]
    return parse_verdict(content)


def _judge_with_retries(index: int, prompt: str, cfg: JudgeConfig) -> Optional[Verdict]:
    for attempt in range(cfg.max_retries + 1):
        try:
            return _judge_once(prompt, cfg)
        except (requests.RequestException, KeyError, IndexError, TypeError,
                ValueError) as exc:
            logger.warning("judge request %d attempt %d failed: %s",
                           index, attempt + 1, exc)
            if attempt < cfg.max_retries:
                time.sleep(cfg.backoff * (2 ** attempt))
    logger.warning("judge request %d excluded after %d attempts",
                   index, cfg.max_retries + 1)
    return None


def remote_judge(triplets: list, cfg: JudgeConfig) -> list:
    """One prompt per triplet through a bounded worker pool.

    Returns verdicts aligned with the input order; permanently failed
    triplets come back as None (the unjudged tally for aggregation).
    """
    cfg.validate()
    prompts = [build_judge_prompt(t) for t in triplets]

    def judge_one(indexed):
        index, prompt = indexed
        return _judge_with_retries(index, prompt, cfg)

    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        return list(pool.map(judge_one, enumerate(prompts)))


@dataclass
class QtypeStats:
    count: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


@dataclass
class EvalReport:
    per_qtype: dict
    total: int
    correct: int
    unjudged: int
    judge: str
    corpus_id: str = ""
    config_echo: dict = field(default_factory=dict)

    @property
    def overall_accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "judge": self.judge,
            "total_judged": self.total,
            "correct": self.correct,
            "unjudged": self.unjudged,
            "overall_accuracy": self.overall_accuracy,
            "per_qtype": {
                q: {"count": s.count, "correct": s.correct, "accuracy": s.accuracy}
                for q, s in sorted(self.per_qtype.items())
            },
            "config": self.config_echo,
        }

    def format_table(self) -> str:
        lines = [
            f"corpus:   {self.corpus_id or '-'}",
            f"judge:    {self.judge}",
            f"{'question type':<16}{'judged':>8}{'correct':>9}{'accuracy':>10}",
        ]
        for qtype, s in sorted(self.per_qtype.items()):
            lines.append(f"{qtype:<16}{s.count:>8}{s.correct:>9}{s.accuracy:>10.4f}")
        lines.append(
            f"{'overall':<16}{self.total:>8}{self.correct:>9}"
            f"{self.overall_accuracy:>10.4f}"
        )
        if self.unjudged:
            lines.append(f"unjudged (excluded from denominators): {self.unjudged}")
        return "\n".join(lines)


def aggregate(triplets: list, verdicts: list, judge: str = "exact",
              corpus_id: str = "") -> EvalReport:
    """Per-qtype and overall accuracy; None verdicts count only as unjudged."""
    if not triplets:
        raise ValueError("cannot aggregate an empty triplet list")
    if len(triplets) != len(verdicts):
        raise ValueError(
            f"{len(triplets)} triplets but {len(verdicts)} verdicts"
        )
    per_qtype: dict[str, QtypeStats] = {}
    total = correct = unjudged = 0
    for t, v in zip(triplets, verdicts):
        if v is None:
            unjudged += 1
            continue
        stats = per_qtype.setdefault(t.qtype, QtypeStats())
        stats.count += 1
        total += 1
        if v.value == "T":
            stats.correct += 1
            correct += 1
    return EvalReport(
        per_qtype=per_qtype,
        total=total,
        correct=correct,
        unjudged=unjudged,
        judge=judge,
        corpus_id=corpus_id,
    )
