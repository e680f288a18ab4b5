import numpy as np
import pytest

from copt.autodiff import backward
from copt.corpus import EOS
from copt.models import Discriminator, Seq2Seq


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def finite_difference(loss_fn, param, h=1e-5) -> np.ndarray:
    """Central differences of scalar ``loss_fn()`` w.r.t. every entry of ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn().item()
        flat[i] = old - h
        down = loss_fn().item()
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def max_param_error(loss_fn, params, h=1e-5) -> float:
    analytic = backward(loss_fn(), params)
    return max(rel_error(g, finite_difference(loss_fn, p, h)) for g, p in zip(analytic, params))


def tiny_generator(vocab_size=7, seed=0, emb=3, hidden=4, layers=1, init_scale=0.5):
    return Seq2Seq(vocab_size, emb, hidden, layers, seed=seed, init_scale=init_scale)


def tiny_discriminator(vocab_size=7, seed=0, init_scale=0.5):
    return Discriminator(vocab_size, 3, 4, 3, seed=seed, init_scale=init_scale)


def make_deterministic(model, token):
    """Constant decoder state and a dominant output column: P_j is one-hot on ``token``."""
    H = model.hidden_dim
    for W, b in model.decoder.weights:
        W.data[...] = 0.0
        b.data[:H] = 50.0
        b.data[H:2 * H] = -50.0
        b.data[2 * H:3 * H] = 5.0
        b.data[3 * H:] = 50.0
    model.output.data[...] = 0.0
    model.output.data[:, token] = 1e4
    return model


@pytest.fixture
def gen_pair():
    return tiny_generator(seed=1), tiny_generator(seed=2)


def random_instance(rng: np.random.Generator, vocab_size: int, max_hist=5, max_resp=4):
    hist = list(rng.integers(4, vocab_size, size=int(rng.integers(1, max_hist + 1))))
    resp = list(rng.integers(4, vocab_size, size=int(rng.integers(1, max_resp + 1)))) + [EOS]
    return [int(t) for t in hist], [int(t) for t in resp]
