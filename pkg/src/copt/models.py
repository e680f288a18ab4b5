"""Attention encoder-decoder policy and the per-step discriminator.

Shapes are batch-first for token ids (``(B, T)``) and time-major for stacked
encoder states (``(T, B, H)``) so that reductions over time run in a fixed
sequential order and padded positions add exact zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import BOS, EOS, PAD, pad_sequences
from .gumbel import RngStream, Scenario, gumbel_argmax, sample_standard_gumbel

MASK_NEG = -1e30


def _uniform(rng: RngStream, shape, scale: float) -> np.ndarray:
    return rng.generator.uniform(-scale, scale, size=shape)


class LSTMStack:
    """Stacked LSTM; each layer has one fused ``[x, h] @ W + b`` gate matrix."""

    def __init__(self, prefix: str, input_dim: int, hidden_dim: int, n_layers: int,
                 rng: RngStream, init_scale: float):
        self.hidden_dim = hidden_dim
        self.weights: list[tuple[Tensor, Tensor]] = []
        for layer in range(n_layers):
            d_in = input_dim if layer == 0 else hidden_dim
            W = ad.parameter(_uniform(rng, (d_in + hidden_dim, 4 * hidden_dim), init_scale),
                             name=f"{prefix}.l{layer}.W")
            b = np.zeros(4 * hidden_dim)
            b[hidden_dim:2 * hidden_dim] = 1.0  # forget-gate bias
            self.weights.append((W, ad.parameter(b, name=f"{prefix}.l{layer}.b")))

    def parameters(self) -> list[Tensor]:
        return [p for pair in self.weights for p in pair]

    def zero_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        z = np.zeros((batch, self.hidden_dim))
        return [(Tensor(z), Tensor(z)) for _ in self.weights]

    def step(self, x: Tensor, states, mask: np.ndarray | None = None):
        """Advance one step; rows with ``mask == 0`` keep their previous state."""
        H = self.hidden_dim
        if mask is not None:
            keep_new = Tensor(mask[:, None])
            keep_old = Tensor(1.0 - mask[:, None])
        out = []
        inp = x
        for (W, b), (h, c) in zip(self.weights, states):
            z = ad.concat([inp, h], axis=1) @ W + b
            gates = ad.sigmoid(z)
            i = gates[:, :H]
            f = gates[:, H:2 * H]
            o = gates[:, 3 * H:]
            g = ad.tanh(z[:, 2 * H:3 * H])
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            if mask is not None:
                h_new = keep_new * h_new + keep_old * h
                c_new = keep_new * c_new + keep_old * c
            out.append((h_new, c_new))
            inp = h_new
        return out


@dataclass
class Encoded:
    states: Tensor            # (T, B, H) per-token encoder outputs
    mask_bias: np.ndarray     # (T, B) 0 for real tokens, MASK_NEG for padding
    final: list               # per-layer (h, c) after the last real token

    @property
    def batch_size(self) -> int:
        return self.mask_bias.shape[1]


@dataclass
class DecoderState:
    states: list              # per-layer (h, c)
    step: int = 0

    @property
    def top(self) -> Tensor:
        return self.states[-1][0]


def _check_ids(ids: np.ndarray, vocab_size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id outside [0, {vocab_size})")


def _as_batch(history) -> tuple[np.ndarray, np.ndarray]:
    """Accept a single id list, a list of id lists, or an (ids, mask) pair."""
    if isinstance(history, tuple) and len(history) == 2 and isinstance(history[0], np.ndarray):
        return history
    if len(history) and isinstance(history[0], (int, np.integer)):
        history = [history]
    if any(len(h) == 0 for h in history):
        raise ValueError("dialogue history must be non-empty")
    return pad_sequences(history)


class Seq2Seq:
    """Attention encoder-decoder: ``P_j = softmax(S_j @ O)`` with
    ``S_j = LSTM([e(y_{j-1}), C_j], S_{j-1})`` and scaled dot attention."""

    kind = "generator"

    def __init__(self, vocab_size: int, emb_dim: int = 64, hidden_dim: int = 64,
                 n_layers: int = 1, seed: int = 0, init_scale: float = 0.1):
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.seed = seed
        self.init_scale = init_scale
        rng = RngStream(seed, 0x6E4)
        self.embedding = ad.parameter(_uniform(rng, (vocab_size, emb_dim), init_scale), "embedding")
        self.encoder = LSTMStack("encoder", emb_dim, hidden_dim, n_layers, rng, init_scale)
        self.decoder = LSTMStack("decoder", emb_dim + hidden_dim, hidden_dim, n_layers, rng,
                                 init_scale)
        self.output = ad.parameter(_uniform(rng, (hidden_dim, vocab_size), init_scale), "output")

    def config(self) -> dict:
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim,
                "hidden_dim": self.hidden_dim, "n_layers": self.n_layers,
                "seed": self.seed, "init_scale": self.init_scale}

    def parameters(self) -> list[Tensor]:
        return [self.embedding, *self.encoder.parameters(), *self.decoder.parameters(),
                self.output]

    # -- forward pieces

    def encode(self, history, mask: np.ndarray | None = None) -> Encoded:
        if mask is None:
            history, mask = _as_batch(history)
        history = np.asarray(history)
        if history.shape[1] == 0 or np.any(mask.sum(axis=1) == 0):
            raise ValueError("dialogue history must be non-empty")
        _check_ids(history, self.vocab_size)
        B, T = history.shape
        full = bool(np.all(mask > 0))
        states = self.encoder.zero_state(B)
        outs = []
        for t in range(T):
            x = ad.embed(self.embedding, history[:, t])
            states = self.encoder.step(x, states, None if full else mask[:, t])
            outs.append(states[-1][0])
        bias = np.where(mask.T > 0, 0.0, MASK_NEG)
        return Encoded(ad.stack(outs, axis=0), bias, states)

    def attend(self, enc: Encoded, s_prev: Tensor) -> tuple[Tensor, Tensor]:
        """Context ``sum_i alpha_i H_i`` with ``alpha = softmax(H_i . s / sqrt(H))``."""
        scores = ad.sum(enc.states * s_prev, axis=2)                 # (T, B)
        scores = ad.scale(scores, 1.0 / math.sqrt(self.hidden_dim)) + enc.mask_bias
        alpha = ad.softmax(scores, axis=0)
        T, B = alpha.shape
        context = ad.sum(enc.states * ad.reshape(alpha, (T, B, 1)), axis=0)
        return context, alpha

    def initial_state(self, enc: Encoded) -> DecoderState:
        return DecoderState(list(enc.final), 0)

    def decode_step(self, prev_tokens, state: DecoderState, enc: Encoded
                    ) -> tuple[DecoderState, Tensor]:
        prev_tokens = np.atleast_1d(np.asarray(prev_tokens))
        _check_ids(prev_tokens, self.vocab_size)
        context, _ = self.attend(enc, state.top)
        x = ad.concat([ad.embed(self.embedding, prev_tokens), context], axis=1)
        states = self.decoder.step(x, state.states)
        log_probs = ad.log_softmax(states[-1][0] @ self.output, axis=-1)
        return DecoderState(states, state.step + 1), log_probs

    def teacher_forced(self, history, hmask, response: np.ndarray) -> list[Tensor]:
        """Per-step log-distributions with the observed response fed back."""
        enc = self.encode(history, hmask)
        state = self.initial_state(enc)
        B, T = response.shape
        prev = np.full(B, BOS)
        out = []
        for t in range(T):
            state, lp = self.decode_step(prev, state, enc)
            out.append(lp)
            prev = response[:, t]
        return out

    def nll(self, history, hmask, response, rmask) -> Tensor:
        """Summed token negative log-likelihood; padding contributes exact zeros."""
        total = None
        for t, lp in enumerate(self.teacher_forced(history, hmask, response)):
            ce = ad.cross_entropy(lp, response[:, t]) * rmask[:, t]
            step = ad.sum(ce)
            total = step if total is None else total + step
        return total

    def log_prob_fn(self, history: Sequence[int]) -> Callable[[Sequence[int]], np.ndarray]:
        """Callback ``prefix -> log P(next | history, prefix)`` for scenario inference."""
        hist, hmask = _as_batch(list(history))
        cache: dict[tuple, np.ndarray] = {}

        def fn(prefix: Sequence[int]) -> np.ndarray:
            key = tuple(prefix)
            if key not in cache:
                with no_grad():
                    resp = np.asarray([list(prefix) + [PAD]], dtype=np.int64)
                    cache[key] = self.teacher_forced(hist, hmask, resp)[-1].data[0]
            return cache[key]

        return fn


class Discriminator:
    """Reads the history and a response prefix; scores every prefix with an
    MLP over the decoder hidden state, ``D = sigmoid(mlp(h_j))``."""

    kind = "discriminator"

    def __init__(self, vocab_size: int, emb_dim: int = 64, hidden_dim: int = 64,
                 mlp_dim: int = 64, seed: int = 0, init_scale: float = 0.1):
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.mlp_dim = mlp_dim
        self.seed = seed
        self.init_scale = init_scale
        rng = RngStream(seed, 0xD15)
        self.embedding = ad.parameter(_uniform(rng, (vocab_size, emb_dim), init_scale), "embedding")
        self.encoder = LSTMStack("encoder", emb_dim, hidden_dim, 1, rng, init_scale)
        self.decoder = LSTMStack("decoder", emb_dim, hidden_dim, 1, rng, init_scale)
        self.mlp_w1 = ad.parameter(_uniform(rng, (hidden_dim, mlp_dim), init_scale), "mlp.w1")
        self.mlp_b1 = ad.parameter(np.zeros(mlp_dim), "mlp.b1")
        self.mlp_w2 = ad.parameter(_uniform(rng, (mlp_dim, 1), init_scale), "mlp.w2")
        self.mlp_b2 = ad.parameter(np.zeros(1), "mlp.b2")

    def config(self) -> dict:
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim,
                "hidden_dim": self.hidden_dim, "mlp_dim": self.mlp_dim,
                "seed": self.seed, "init_scale": self.init_scale}

    def parameters(self) -> list[Tensor]:
        return [self.embedding, *self.encoder.parameters(), *self.decoder.parameters(),
                self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]

    def step_logits(self, history, hmask, prefix: np.ndarray) -> list[Tensor]:
        """Pre-sigmoid score after each prefix position, as ``(B, 1)`` tensors."""
        history = np.asarray(history)
        prefix = np.asarray(prefix)
        if prefix.ndim != 2 or prefix.shape[1] == 0:
            raise ValueError("response prefix must be non-empty")
        _check_ids(history, self.vocab_size)
        _check_ids(prefix, self.vocab_size)
        B, T = history.shape
        full = bool(np.all(hmask > 0))
        states = self.encoder.zero_state(B)
        for t in range(T):
            x = ad.embed(self.embedding, history[:, t])
            states = self.encoder.step(x, states, None if full else hmask[:, t])
        out = []
        for t in range(prefix.shape[1]):
            states = self.decoder.step(ad.embed(self.embedding, prefix[:, t]), states)
            hidden = ad.tanh(states[-1][0] @ self.mlp_w1 + self.mlp_b1)
            out.append(hidden @ self.mlp_w2 + self.mlp_b2)
        return out

    def final_logits(self, history, hmask, prefix: np.ndarray, lengths) -> Tensor:
        """Logit for each row's prefix of length ``lengths[b]``, shape ``(B,)``."""
        lengths = np.asarray(lengths)
        if np.any(lengths < 1):
            raise ValueError("response prefix must be non-empty")
        steps = self.step_logits(history, hmask, prefix[:, : int(lengths.max())])
        stacked = ad.stack(steps, axis=0)  # (T, B, 1)
        return stacked[lengths - 1, np.arange(len(lengths)), 0]

    def step_rewards(self, history, hmask, response: np.ndarray) -> np.ndarray:
        """``D(y_j | x, y_{<j})`` for every position, shape ``(B, T)``; no graph."""
        with no_grad():
            steps = self.step_logits(history, hmask, response)
        z = np.concatenate([s.data for s in steps], axis=1)
        return ad.sigmoid(Tensor(z)).data

    def reward(self, history: Sequence[int], prefix: Sequence[int]) -> float:
        """Single-instance reward for the last token of ``prefix``."""
        if len(prefix) == 0:
            raise ValueError("response prefix must be non-empty")
        hist, hmask = _as_batch(list(history))
        r = self.step_rewards(hist, hmask, np.asarray([list(prefix)]))
        return float(r[0, -1])


# ---------------------------------------------------------------- decoding


def rollout(model: Seq2Seq, history, hmask, noise_fn: Callable[[int], np.ndarray],
            max_len) -> list[list[int]]:
    """Free-running decode emitting ``argmax(log P_j + noise_fn(j))`` per step.

    ``max_len`` is an int or one limit per row. Returns one token list per
    row; a list ends with EOS unless its length limit cut it short.
    """
    with no_grad():
        enc = model.encode(history, hmask)
        B = enc.batch_size
        limits = np.broadcast_to(np.asarray(max_len), (B,))
        if np.any(limits < 1):
            raise ValueError("max_len must be >= 1")
        state = model.initial_state(enc)
        prev = np.full(B, BOS)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        for j in range(int(limits.max())):
            state, lp = model.decode_step(prev, state, enc)
            tok = np.asarray(gumbel_argmax(lp.data, noise_fn(j))).reshape(B)
            for b in np.flatnonzero(~done):
                out[b].append(int(tok[b]))
            done |= (tok == EOS) | (limits <= j + 1)
            if done.all():
                break
            prev = np.where(done, PAD, tok)
    return out


def strip_eos(tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens


def rollout_with_scenario(history: Sequence[int], scenario: Scenario, model: Seq2Seq,
                          max_len: int, rng: RngStream | None = None) -> list[int]:
    """Counterfactual decode of one response under ``model`` in ``scenario``.

    Noise is reused by step index; steps past the scenario's end get fresh
    prior noise from ``rng``. The returned list keeps the EOS token.
    """
    if len(scenario) < 1:
        raise ValueError("scenario must have at least one step")
    hist, hmask = _as_batch(list(history))
    V = model.vocab_size

    def noise(j):
        return scenario.noise(j, V, rng)[None, :]

    return rollout(model, hist, hmask, noise, max_len)[0]


def greedy(model: Seq2Seq, history, hmask=None, max_len: int = 20) -> list[list[int]]:
    if hmask is None:
        history, hmask = _as_batch(history)
    B = history.shape[0]
    zeros = np.zeros((B, model.vocab_size))
    return rollout(model, history, hmask, lambda j: zeros, max_len)


def sample(model: Seq2Seq, history, hmask, rng: RngStream, max_len: int) -> list[list[int]]:
    """Ancestral sampling via fresh Gumbel noise each step."""
    B = np.asarray(history).shape[0]
    return rollout(model, history, hmask,
                   lambda j: sample_standard_gumbel((B, model.vocab_size), rng), max_len)


def _select_state(state: DecoderState, idx: np.ndarray) -> DecoderState:
    return DecoderState([(Tensor(h.data[idx]), Tensor(c.data[idx])) for h, c in state.states],
                        state.step)


def beam_search(model: Seq2Seq, history: Sequence[int], width: int = 4, max_len: int = 20,
                length_norm: bool = True) -> list[int]:
    """Beam search for one history; returns the best finished hypothesis (with EOS).

    Hypotheses are ranked by total log-probability, divided by length when
    ``length_norm``. Without normalisation the search stops once no live beam
    can still beat the best finished one.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    hist, hmask = _as_batch(list(history))
    finished: list[tuple[float, list[int]]] = []

    def rank(score: float, length: int) -> float:
        return score / length if length_norm else score

    with no_grad():
        enc = model.encode(hist, hmask)
        state = model.initial_state(enc)
        seqs: list[list[int]] = [[]]
        scores = np.zeros(1)
        for t in range(max_len):
            k = len(seqs)
            enc_k = Encoded(Tensor(np.repeat(enc.states.data, k, axis=1)),
                            np.repeat(enc.mask_bias, k, axis=1), [])
            prev = np.asarray([s[-1] if s else BOS for s in seqs])
            state, lp = model.decode_step(prev, state, enc_k)
            cand = (scores[:, None] + lp.data).ravel()
            order = np.argsort(-cand, kind="stable")[:width]
            keep_rows, new_seqs, new_scores = [], [], []
            for flat in order:
                row, tok = divmod(int(flat), model.vocab_size)
                seq = seqs[row] + [tok]
                if tok == EOS or t == max_len - 1:
                    finished.append((float(cand[flat]), seq))
                else:
                    keep_rows.append(row)
                    new_seqs.append(seq)
                    new_scores.append(float(cand[flat]))
            if not new_seqs:
                break
            best_done = max((rank(s, len(q)) for s, q in finished), default=-np.inf)
            if length_norm:
                if len(finished) >= width:
                    break
            elif best_done >= max(new_scores):
                break
            state = _select_state(state, np.asarray(keep_rows))
            seqs, scores = new_seqs, np.asarray(new_scores)
    best = max(finished, key=lambda sq: (rank(sq[0], len(sq[1]))))
    return best[1]


def sequence_log_prob(model: Seq2Seq, history: Sequence[int], response: Sequence[int]) -> float:
    hist, hmask = _as_batch(list(history))
    resp = np.asarray([list(response)])
    with no_grad():
        lps = model.teacher_forced(hist, hmask, resp)
    return float(sum(lp.data[0, y] for lp, y in zip(lps, response)))
