import math

import numpy as np
import pytest
from scipy import stats

from copt.gumbel import (OracleTimeout, RngStream, Scenario, gumbel_argmax, infer_scenario,
                         posterior_scenario_step, rejection_posterior, sample_standard_gumbel,
                         truncated_gumbel)

EULER_GAMMA = 0.5772156649


def histogram_tv(a, b, bins=20) -> float:
    """Total variation between two samples on shared equal-mass bins."""
    edges = np.quantile(np.concatenate([a, b]), np.linspace(0, 1, bins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    pa = np.histogram(a, edges)[0] / len(a)
    pb = np.histogram(b, edges)[0] / len(b)
    return 0.5 * float(np.abs(pa - pb).sum())


def test_rng_stream_reproducible_and_independent():
    a = RngStream(42, 1).uniform(5)
    assert np.array_equal(a, RngStream(42, 1).uniform(5))
    assert not np.array_equal(a, RngStream(42, 2).uniform(5))
    child = RngStream(42, 1).spawn(3, 4)
    assert child.stream_id == RngStream(42, 1).spawn(3, 4).stream_id
    x = RngStream(7, 1).uniform(20000)
    y = RngStream(7, 2).uniform(20000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


def test_standard_gumbel_moments():
    g = sample_standard_gumbel(10**6, RngStream(0))
    assert abs(g.mean() - EULER_GAMMA) <= 0.01
    assert abs((g <= 0).mean() - math.exp(-1)) <= 0.005
    assert np.array_equal(sample_standard_gumbel(4, RngStream(3)),
                          sample_standard_gumbel(4, RngStream(3)))


def test_gumbel_argmax_examples():
    one_hot = np.log(np.array([1.0, 1e-300, 1e-300]))
    rng = RngStream(1)
    for _ in range(100):
        assert gumbel_argmax(one_hot, sample_standard_gumbel(3, rng)) == 0
    assert gumbel_argmax(np.log([0.5, 0.5]), np.array([0.1, 0.0])) == 0
    assert gumbel_argmax(np.zeros(3), np.zeros(3)) == 0  # tie -> lowest index
    with pytest.raises(ValueError):
        gumbel_argmax(np.zeros(3), np.zeros(2))


def test_gumbel_argmax_frequencies_match_distribution():
    p = np.array([0.7, 0.2, 0.1])
    u = sample_standard_gumbel((10**5, 3), RngStream(5))
    freq = np.bincount(gumbel_argmax(np.broadcast_to(np.log(p), u.shape), u), minlength=3) / 1e5
    assert 0.5 * np.abs(freq - p).sum() <= 0.01


def test_truncated_gumbel_respects_bound():
    rng = RngStream(9)
    loc = np.random.default_rng(0).normal(size=10**5) * 3
    bound = np.random.default_rng(1).normal(size=10**5)
    assert np.all(truncated_gumbel(loc, bound, rng) <= bound)
    assert truncated_gumbel(0.3, 0.1, RngStream(2)) == truncated_gumbel(0.3, 0.1, RngStream(2))


def test_truncated_gumbel_untruncated_limit_matches_gumbel():
    n = 20000
    loc = 0.7
    t = truncated_gumbel(np.full(n, loc), 50.0, RngStream(3))
    direct = loc + sample_standard_gumbel(n, RngStream(4))
    assert stats.ks_2samp(t, direct).pvalue > 0.01


def test_posterior_step_always_reproduces_observation():
    rng = RngStream(11)
    gen = np.random.default_rng(0)
    logits = gen.normal(size=(10**5, 6)) * 2
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    obs = gen.integers(0, 6, size=10**5)
    u = posterior_scenario_step(lp, obs, rng)
    assert np.array_equal(gumbel_argmax(lp, u), obs)


def test_posterior_rejects_bad_input():
    with pytest.raises(ValueError):
        posterior_scenario_step(np.log([0.5, 0.6]), 0, RngStream(0))
    with pytest.raises(IndexError):
        posterior_scenario_step(np.log([0.5, 0.5]), 2, RngStream(0))


def test_posterior_matches_rejection_oracle():
    p = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    lp = np.log(p)
    observed = 1
    n = 50_000
    fast = posterior_scenario_step(np.tile(lp, (n, 1)), np.full(n, observed), RngStream(21))
    slow = np.stack([rejection_posterior(lp, observed, RngStream(22, i)) for i in range(n)])
    for k in range(5):
        assert histogram_tv(fast[:, k], slow[:, k]) <= 0.02


def test_round_trip_through_fresh_sample():
    rng = RngStream(31)
    for _ in range(200):
        logits = rng.generator.normal(size=8)
        lp = logits - np.log(np.exp(logits).sum())
        y = gumbel_argmax(lp, sample_standard_gumbel(8, rng))
        assert gumbel_argmax(lp, posterior_scenario_step(lp, y, rng)) == y


def test_posterior_handles_zero_probability_tokens():
    with np.errstate(divide="ignore"):
        lp = np.log(np.array([0.5, 0.0, 0.5]))
        u = posterior_scenario_step(lp, 2, RngStream(1))
    assert np.all(np.isfinite(u)) and gumbel_argmax(lp, u) == 2


def test_rejection_posterior_examples():
    one_hot = np.log(np.array([1e-300, 1.0, 1e-300]))
    for i in range(50):
        _, tries = rejection_posterior(one_hot, 1, RngStream(i), return_tries=True)
        assert tries == 1
    tries = [rejection_posterior(np.log([0.5, 0.5]), 0, RngStream(1, i), return_tries=True)[1]
             for i in range(10_000)]
    assert abs(np.mean(tries) - 2.0) < 0.06
    lp = np.log([0.2, 0.3, 0.5])
    for i in range(200):
        assert gumbel_argmax(lp, rejection_posterior(lp, 0, RngStream(2, i))) == 0
    with pytest.raises(OracleTimeout):
        rejection_posterior(np.log([1 - 1e-12, 1e-12]), 1, RngStream(0), max_tries=50)


def _toy_mu(prefix):
    """Vocab-3, length-2 behavior policy whose second step depends on the first token."""
    tables = {(): [0.5, 0.3, 0.2], (0,): [0.1, 0.6, 0.3], (1,): [0.3, 0.3, 0.4],
              (2,): [0.8, 0.1, 0.1]}
    return np.log(tables[tuple(prefix)])


def test_infer_scenario_shapes_and_deterministic_policy():
    one_hot = lambda prefix: np.log(np.array([1e-300, 1e-300, 1.0]))  # noqa: E731
    sc = infer_scenario(one_hot, [2, 2, 2], RngStream(0))
    assert len(sc) == 3 and sc.origin == "inferred" and sc.source_length == 3
    for u in sc.steps:
        assert gumbel_argmax(one_hot(()), u) == 2


def test_infer_scenario_joint_matches_rejection_oracle():
    y = [0, 1]
    n = 50_000
    fast = [infer_scenario(_toy_mu, y, RngStream(40, i)).as_array() for i in range(n)]
    fast = np.stack(fast)
    slow = np.stack([
        np.stack([rejection_posterior(_toy_mu(y[:j]), y[j], RngStream(41, 2 * i + j))
                  for j in range(2)])
        for i in range(n)
    ])
    for j in range(2):
        for k in range(3):
            assert histogram_tv(fast[:, j, k], slow[:, j, k]) <= 0.02


def test_inferred_noise_has_standard_gumbel_marginals():
    # sampling y ~ mu and then u | y must give back the prior over u
    n = 50_000
    rng = RngStream(50)
    lp = np.log(np.array([0.55, 0.25, 0.15, 0.05]))
    lps = np.tile(lp, (n, 1))
    y = gumbel_argmax(lps, sample_standard_gumbel((n, 4), rng))
    u = posterior_scenario_step(lps, y, rng)
    for k in range(4):
        assert stats.kstest(u[:, k], stats.gumbel_r.cdf).pvalue > 0.01


def test_gumbel_max_chi_square():
    V = 10
    p = np.random.default_rng(3).dirichlet(np.ones(V))
    n = 10**5
    u = sample_standard_gumbel((n, V), RngStream(60))
    counts = np.bincount(gumbel_argmax(np.tile(np.log(p), (n, 1)), u), minlength=V)
    assert stats.chisquare(counts, n * p).pvalue > 0.01


def test_scenario_extends_with_fresh_noise():
    sc = Scenario.fresh(2, 5, RngStream(0))
    assert len(sc) == 2 and sc.origin == "fresh"
    with pytest.raises(IndexError):
        sc.noise(3, 5)
    sc.noise(3, 5, RngStream(1))
    assert len(sc) == 4
