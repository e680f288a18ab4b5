"""Gumbel-Max structural causal model over token choices.

A token is emitted as ``argmax(log_probs + u)`` where ``u`` is a vector of
independent standard Gumbel noise (the *scenario* for that step). Given an
observed token, :func:`posterior_scenario_step` draws ``u`` from its posterior
with the top-down (max first, then truncated rest) construction;
:func:`rejection_posterior` is the slow reference used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

UNIFORM_CLAMP = 1e-12
NORMALIZATION_TOL = 1e-9


class OracleTimeout(RuntimeError):
    """Rejection sampler gave up; the observed token is (nearly) impossible."""


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Distinct stream ids give statistically independent draws (they are
    separate spawn keys of one :class:`numpy.random.SeedSequence`).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed % 2**64, spawn_key=(self.stream_id % 2**64,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *keys: int) -> "RngStream":
        """Child stream determined only by this stream's identity and ``keys``."""
        ss = np.random.SeedSequence([self.seed % 2**64, self.stream_id % 2**64, *keys])
        child_id = int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])
        return RngStream(self.seed, child_id)

    def uniform(self, size) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def sample_standard_gumbel(n, rng: RngStream) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log(v))`` with ``v`` clamped away from 0 and 1.

    ``n`` may be an int or a shape tuple.
    """
    if isinstance(n, (int, np.integer)) and n < 1:
        raise ValueError("need at least one draw")
    v = np.clip(rng.uniform(n), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(v))


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _check_normalized(log_probs: np.ndarray) -> None:
    lse = _logsumexp(log_probs)
    if np.any(np.abs(lse) > NORMALIZATION_TOL):
        raise ValueError(f"log_probs not normalized (logsumexp off by {np.max(np.abs(lse)):.3g})")


def gumbel_argmax(log_probs, u) -> np.ndarray | int:
    """The causal mechanism: ``argmax(log_probs + u)``, lowest index on ties.

    Works row-wise on ``(..., V)`` arrays.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if log_probs.shape != u.shape:
        raise ValueError(f"length mismatch: log_probs {log_probs.shape} vs noise {u.shape}")
    idx = np.argmax(log_probs + u, axis=-1)
    return int(idx) if idx.ndim == 0 else idx


def truncated_gumbel(location, bound, rng: RngStream) -> np.ndarray | float:
    """Gumbel(location) conditioned on being at most ``bound``.

    Broadcasts over array arguments.
    """
    location = np.asarray(location, dtype=np.float64)
    bound = np.asarray(bound, dtype=np.float64)
    if not np.all(np.isfinite(bound)):
        raise ValueError("truncation bound must be finite")
    shape = np.broadcast_shapes(location.shape, bound.shape)
    g = sample_standard_gumbel(shape if shape else 1, rng)
    if not shape:
        g = g[0]
    # -log(e^-b + e^-(loc+g)) computed as b - log1p(e^(b - loc - g)), which
    # stays finite when loc = -inf (zero-probability tokens)
    z = bound - (location + g)
    out = np.where(
        z > 0,
        bound - (z + np.log1p(np.exp(-np.abs(z)))),
        bound - np.log1p(np.exp(np.minimum(z, 0.0))),
    )
    out = np.minimum(out, bound)
    return float(out) if out.ndim == 0 else out


def posterior_scenario_step(log_probs_mu, observed, rng: RngStream) -> np.ndarray:
    """Sample ``u`` from the posterior given ``argmax(log_probs_mu + u) == observed``.

    The maximum of the shifted Gumbels ``g = log_probs_mu + u`` is a
    Gumbel(logsumexp) = standard Gumbel draw, independent of which index wins;
    every other coordinate is a Gumbel(log p_i) truncated below that maximum.
    Row-wise on ``(B, V)`` input with a length-``B`` ``observed``.
    """
    lp = np.asarray(log_probs_mu, dtype=np.float64)
    single = lp.ndim == 1
    lp2 = lp[None] if single else lp
    obs = np.atleast_1d(np.asarray(observed))
    _check_normalized(lp2)
    B, V = lp2.shape
    if obs.shape != (B,):
        raise ValueError(f"need one observed token per row, got {obs.shape} for {B} rows")
    if np.any(obs < 0) or np.any(obs >= V):
        raise IndexError(f"observed token out of range [0, {V})")
    rows = np.arange(B)
    if np.any(~np.isfinite(lp2[rows, obs])):
        raise ValueError("observed token has zero probability under the behavior policy")

    top = sample_standard_gumbel(B, rng)
    g = truncated_gumbel(lp2, top[:, None], rng)
    g[rows, obs] = top
    finite = np.isfinite(lp2)
    u = np.where(finite, g - np.where(finite, lp2, 0.0), 0.0)
    # zero-probability tokens can never win; give them plain prior noise
    if not np.all(finite):
        fresh = sample_standard_gumbel((B, V), rng)
        u = np.where(finite, u, fresh)
    _enforce_winner(lp2, u, obs)
    return u[0] if single else u


def _enforce_winner(lp: np.ndarray, u: np.ndarray, obs: np.ndarray) -> None:
    # g_i < top holds exactly, but lp + (g - lp) can round up onto the max.
    # Nudge the observed coordinate by ulps until it strictly wins.
    rows = np.arange(lp.shape[0])
    for _ in range(64):
        bad = np.argmax(lp + u, axis=-1) != obs
        if not np.any(bad):
            return
        r = rows[bad]
        u[r, obs[bad]] = np.nextafter(u[r, obs[bad]], np.inf)
    raise FloatingPointError("could not make the observed token the strict argmax")


def rejection_posterior(log_probs_mu, observed: int, rng: RngStream,
                        max_tries: int = 1_000_000, return_tries: bool = False):
    """Reference posterior sampler: redraw prior noise until ``observed`` wins."""
    lp = np.asarray(log_probs_mu, dtype=np.float64)
    if not (0 <= observed < lp.shape[-1]) or not np.isfinite(lp[observed]):
        raise ValueError("observed token must have positive probability")
    for tries in range(1, max_tries + 1):
        u = sample_standard_gumbel(lp.shape[-1], rng)
        if np.argmax(lp + u) == observed:
            return (u, tries) if return_tries else u
    raise OracleTimeout(f"no acceptance in {max_tries} draws (p(observed) too small)")


@dataclass
class Scenario:
    """Per-step Gumbel noise ``u_j`` for one response."""

    steps: list[np.ndarray] = field(default_factory=list)
    origin: str = "fresh"
    source_length: int = 0

    def __len__(self) -> int:
        return len(self.steps)

    def noise(self, j: int, vocab_size: int, rng: RngStream | None = None) -> np.ndarray:
        """Noise for step ``j``; extends with fresh prior draws past the end."""
        while j >= len(self.steps):
            if rng is None:
                raise IndexError(f"scenario has {len(self.steps)} steps, step {j} requested")
            self.steps.append(sample_standard_gumbel(vocab_size, rng))
        return self.steps[j]

    def as_array(self) -> np.ndarray:
        return np.stack(self.steps) if self.steps else np.zeros((0, 0))

    @classmethod
    def fresh(cls, n_steps: int, vocab_size: int, rng: RngStream) -> "Scenario":
        draws = sample_standard_gumbel((n_steps, vocab_size), rng)
        return cls(steps=list(draws), origin="fresh", source_length=0)


def infer_scenario(behavior_log_prob_fn: Callable[[Sequence[int]], np.ndarray],
                   observed_response: Sequence[int], rng: RngStream) -> Scenario:
    """Infer the noise behind ``observed_response`` under the behavior policy.

    ``behavior_log_prob_fn(prefix)`` returns the policy's log-distribution for
    the next token after the teacher-forced ``prefix``. The response should
    already carry its end-of-sequence token.
    """
    steps = []
    for j, y in enumerate(observed_response):
        lp = np.asarray(behavior_log_prob_fn(list(observed_response[:j])), dtype=np.float64)
        steps.append(posterior_scenario_step(lp, int(y), rng))
    return Scenario(steps=steps, origin="inferred", source_length=len(steps))
