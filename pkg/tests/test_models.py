import numpy as np
import pytest

from copt import autodiff as ad
from copt.autodiff import Tensor, no_grad
from copt.corpus import BOS, EOS, pad_sequences
from copt.gumbel import RngStream, Scenario, infer_scenario
from copt.models import (Encoded, beam_search, greedy, rollout_with_scenario, sample,
                         sequence_log_prob)

from conftest import (finite_difference, make_deterministic, random_instance, rel_error,
                      tiny_discriminator, tiny_generator)


def test_encode_shapes_and_determinism():
    m = tiny_generator()
    enc = m.encode([5])
    assert enc.states.shape == (1, 1, m.hidden_dim)
    a = m.encode([4, 5, 6]).states.data
    b = m.encode([4, 5, 6]).states.data
    assert a.shape == (3, 1, m.hidden_dim) and np.array_equal(a, b)
    with pytest.raises(ValueError):
        m.encode([[]])
    with pytest.raises(IndexError):
        m.encode([99])


def test_encoder_gradient_wrt_embedding():
    m = tiny_generator(seed=5)
    loss = lambda: ad.sum(m.encode([4, 6, 5, 4]).states)  # noqa: E731
    (g,) = ad.backward(loss(), [m.embedding])
    assert rel_error(g, finite_difference(loss, m.embedding)) <= 1e-5


def test_attention_special_cases():
    m = tiny_generator()
    H = Tensor(np.random.default_rng(0).normal(size=(1, 1, m.hidden_dim)))
    enc = Encoded(H, np.zeros((1, 1)), [])
    ctx, alpha = m.attend(enc, Tensor(np.ones((1, m.hidden_dim))))
    assert np.array_equal(alpha.data, [[1.0]]) and np.allclose(ctx.data, H.data[0])
    same = Tensor(np.repeat(H.data, 2, axis=0))
    _, alpha = m.attend(Encoded(same, np.zeros((2, 1)), []), Tensor(np.ones((1, m.hidden_dim))))
    assert np.array_equal(alpha.data, [[0.5], [0.5]])


def test_attention_weights_sum_to_one():
    m = tiny_generator()
    rng = np.random.default_rng(1)
    for _ in range(1000):
        T, B = rng.integers(1, 6), rng.integers(1, 4)
        enc = Encoded(Tensor(rng.normal(size=(T, B, m.hidden_dim)) * 3), np.zeros((T, B)), [])
        _, alpha = m.attend(enc, Tensor(rng.normal(size=(B, m.hidden_dim)) * 3))
        assert np.all(alpha.data >= 0)
        assert np.max(np.abs(alpha.data.sum(axis=0) - 1.0)) <= 1e-12


def test_decode_step_normalized_deterministic_and_gradient():
    m = tiny_generator(seed=2)
    enc = m.encode([4, 5])
    _, lp = m.decode_step([BOS], m.initial_state(enc), enc)
    _, lp2 = m.decode_step([BOS], m.initial_state(enc), enc)
    assert lp.shape == (1, m.vocab_size)
    assert abs(np.log(np.exp(lp.data).sum())) <= 1e-9
    assert np.array_equal(lp.data, lp2.data)

    def loss():
        e = m.encode([4, 5])
        s, _ = m.decode_step([BOS], m.initial_state(e), e)
        _, out = m.decode_step([6], s, e)
        return ad.take(out, (0, 3))

    (g,) = ad.backward(loss(), [m.output])
    assert rel_error(g, finite_difference(loss, m.output)) <= 1e-5


def test_all_emitted_distributions_normalized():
    m = tiny_generator(seed=4, init_scale=1.0)
    rng = np.random.default_rng(0)
    for _ in range(30):
        x, y = random_instance(rng, m.vocab_size)
        hist, hm = pad_sequences([x])
        for lp in m.teacher_forced(hist, hm, np.asarray([y])):
            assert abs(np.log(np.exp(lp.data).sum())) <= 1e-9


def test_free_running_and_teacher_forced_agree_on_first_step():
    m = tiny_generator(seed=6)
    x = [4, 5, 6]
    hist, hm = pad_sequences([x])
    tf = m.teacher_forced(hist, hm, np.asarray([[5, 4, EOS]]))[0].data
    enc = m.encode(hist, hm)
    _, fr = m.decode_step([BOS], m.initial_state(enc), enc)
    assert np.array_equal(tf, fr.data)


def test_rollout_of_deterministic_policy_ignores_scenario():
    m = make_deterministic(tiny_generator(seed=3), 5)
    outs = {tuple(rollout_with_scenario([4, 6], Scenario.fresh(3, m.vocab_size, RngStream(i)),
                                        m, max_len=3, rng=RngStream(i)))
            for i in range(50)}
    assert outs == {(5, 5, 5)}


def test_null_intervention_identity_models():
    rng = np.random.default_rng(7)
    mu = tiny_generator(seed=8, init_scale=1.0)
    for i in range(200):
        x, y = random_instance(rng, mu.vocab_size)
        scenario = infer_scenario(mu.log_prob_fn(x), y, RngStream(1, i))
        assert rollout_with_scenario(x, scenario, mu, max_len=2 * len(y) + 20,
                                     rng=RngStream(2, i)) == y


def test_fresh_scenario_frequencies_match_first_step_distribution():
    m = tiny_generator(seed=9, init_scale=1.5)
    n = 10_000
    hist, hm = pad_sequences([[4, 5]] * n)
    toks = [r[0] for r in sample(m, hist, hm, RngStream(3), max_len=1)]
    freq = np.bincount(toks, minlength=m.vocab_size) / n
    enc = m.encode([4, 5])
    _, lp = m.decode_step([BOS], m.initial_state(enc), enc)
    assert 0.5 * np.abs(freq - np.exp(lp.data[0])).sum() <= 0.02


def test_rollout_requires_positive_length():
    m = tiny_generator()
    with pytest.raises(ValueError):
        rollout_with_scenario([4], Scenario.fresh(1, m.vocab_size, RngStream(0)), m, max_len=0)
    with pytest.raises(ValueError):
        rollout_with_scenario([4], Scenario(), m, max_len=3)


def test_beam_width_one_is_greedy_and_beam_dominates():
    rng = np.random.default_rng(10)
    worse = 0
    for i in range(100):
        m = tiny_generator(seed=100 + i, init_scale=1.0)
        x, _ = random_instance(rng, m.vocab_size)
        g = greedy(m, [x], max_len=8)[0]
        assert beam_search(m, x, width=1, max_len=8) == g
        b = beam_search(m, x, width=4, max_len=8, length_norm=False)
        if sequence_log_prob(m, x, b) < sequence_log_prob(m, x, g) - 1e-12:
            worse += 1
    assert worse == 0


def test_generation_deterministic():
    m = tiny_generator(seed=12, init_scale=1.0)
    assert beam_search(m, [4, 5], width=3) == beam_search(m, [4, 5], width=3)
    assert greedy(m, [[4, 5]]) == greedy(m, [[4, 5]])
    with pytest.raises(ValueError):
        beam_search(m, [4], width=0)


def test_discriminator_range_determinism_and_errors():
    d = tiny_discriminator(seed=1, init_scale=2.0)
    rng = np.random.default_rng(0)
    n = 10_000
    hist, hm = pad_sequences([list(rng.integers(0, 7, size=rng.integers(1, 5))) for _ in range(n)])
    prefix = rng.integers(0, 7, size=(n, 3))
    r = d.step_rewards(hist, hm, prefix)
    assert np.all((r > 0) & (r < 1))
    assert np.array_equal(r, d.step_rewards(hist, hm, prefix))
    assert d.reward([4, 5], [6]) == d.reward([4, 5], [6])
    with pytest.raises(ValueError):
        d.reward([4], [])


def test_discriminator_gradient_wrt_mlp():
    d = tiny_discriminator(seed=2)
    hist, hm = pad_sequences([[4, 5, 6]])

    def loss():
        z = d.step_logits(hist, hm, np.asarray([[5, 4]]))[-1]
        return ad.sum(ad.sigmoid(z))

    params = [d.mlp_w1, d.mlp_b1, d.mlp_w2, d.mlp_b2]
    grads = ad.backward(loss(), params)
    for g, p in zip(grads, params):
        assert rel_error(g, finite_difference(loss, p)) <= 1e-5


def test_final_logits_pick_each_rows_prefix_end():
    d = tiny_discriminator(seed=3)
    hist, hm = pad_sequences([[4, 5], [6]])
    prefix = np.asarray([[4, 5, 6], [6, 6, 0]])
    with no_grad():
        z = d.final_logits(hist, hm, prefix, [3, 1]).data
        steps = d.step_logits(hist, hm, prefix)
    assert z[0] == steps[2].data[0, 0] and z[1] == steps[0].data[1, 0]
