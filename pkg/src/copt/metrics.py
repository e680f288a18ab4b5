"""Automatic response metrics: distinct-k, multi-reference BLEU, reward bins."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

BLEU_EPSILON = 1e-9
# Low [0, 0.33], Middle (0.33, 0.66], High (0.66, 1.0]
REWARD_BINS = (("low", 0.0, 0.33), ("middle", 0.33, 0.66), ("high", 0.66, 1.0))


def _ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_k(responses: Sequence[Sequence], k: int) -> float:
    """Unique k-grams over the whole response set divided by its word count."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(responses) == 0:
        raise ValueError("distinct_k needs at least one response")
    grams = set()
    words = 0
    for r in responses:
        words += len(r)
        grams.update(_ngrams(list(r), k))
    return len(grams) / words if words else 0.0


def bleu_k(hypotheses: Sequence[Sequence], reference_sets: Sequence[Sequence[Sequence]],
           k: int = 4) -> float:
    """Corpus BLEU (percent) with uniform weights over orders 1..k.

    Counts are clipped by the maximum count in any reference; the brevity
    penalty uses the reference length closest to each hypothesis (shorter on
    ties); zero precisions get an additive epsilon.
    """
    if len(hypotheses) != len(reference_sets):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(reference_sets)} reference sets")
    if k < 1:
        raise ValueError("k must be >= 1")
    matches = [0] * k
    totals = [0] * k
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, reference_sets):
        if not refs or any(len(r) == 0 for r in refs):
            raise ValueError("each hypothesis needs a non-empty set of non-empty references")
        hyp = list(hyp)
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, k + 1):
            counts = Counter(_ngrams(hyp, n))
            max_ref: Counter = Counter()
            for r in refs:
                for g, c in Counter(_ngrams(list(r), n)).items():
                    max_ref[g] = max(max_ref[g], c)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = m / t if (m and t) else BLEU_EPSILON / max(t, 1)
        log_p += math.log(p) / k
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def reward_histogram(rewards: Sequence[float]) -> dict:
    """Percent of rewards in the low/middle/high intervals, plus the mean."""
    if len(rewards) == 0:
        raise ValueError("reward_histogram needs at least one reward")
    counts = {name: 0 for name, _, _ in REWARD_BINS}
    for r in rewards:
        r = float(r)
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"reward {r} outside [0, 1]")
        if r <= 0.33:
            counts["low"] += 1
        elif r <= 0.66:
            counts["middle"] += 1
        else:
            counts["high"] += 1
    n = len(rewards)
    return {
        "shares": {name: 100.0 * c / n for name, c in counts.items()},
        "mean": math.fsum(float(r) for r in rewards) / n,
        "count": n,
    }


@dataclass
class EvalReport:
    distinct_1: float
    distinct_2: float
    bleu: dict[str, float]
    n_hypotheses: int
    n_references: int
    rewards: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def evaluate(hypotheses: Sequence[Sequence], reference_sets: Sequence[Sequence[Sequence]] | None
             = None) -> EvalReport:
    bleu = {}
    if reference_sets is not None:
        bleu = {f"bleu_{n}": bleu_k(hypotheses, reference_sets, n) for n in range(1, 5)}
    return EvalReport(
        distinct_1=distinct_k(hypotheses, 1),
        distinct_2=distinct_k(hypotheses, 2),
        bleu=bleu,
        n_hypotheses=len(hypotheses),
        n_references=max((len(r) for r in reference_sets), default=0) if reference_sets else 0,
    )
