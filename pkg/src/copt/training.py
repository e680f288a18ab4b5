"""Counterfactual off-policy adversarial training.

Pipeline: MLE pre-training of the target policy ``pi`` and the behavior
policy ``mu`` (different initialisations), discriminator pre-training on
prefixes, then alternating generator updates (policy gradient on
counterfactual or standard responses) and discriminator updates (observed
prefixes vs prefixes of standard responses). ``mu`` stays frozen after
pre-training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Adam, Tensor, no_grad
from .corpus import (EOS, Batch, DialogueInstance, EncodedCorpus, Vocab, build_vocab,
                     endless_batches, pad_sequences, split_and_batch)
from .gumbel import RngStream, infer_scenario, posterior_scenario_step, sample_standard_gumbel
from .metrics import reward_histogram
from .models import Discriminator, Seq2Seq, greedy, rollout, rollout_with_scenario

logger = logging.getLogger(__name__)

MODES = ("copt", "standard")


class NumericalError(FloatingPointError):
    """A loss or gradient went non-finite."""


@dataclass
class TrainConfig:
    pretrain_epochs: int = 10
    adversarial_epochs: int = 10
    d_pretrain_epochs: int = 12
    g_steps: int = 1
    d_steps: int = 5
    batch_size: int = 64
    g_lr: float = 1e-5
    d_lr: float = 1e-5
    pretrain_lr: float = 1e-3
    d_pretrain_lr: float = 1e-3
    beam_width: int = 4
    seed: int = 0
    mode: str = "copt"
    baseline: bool = False
    baseline_decay: float = 0.9
    clip_norm: float | None = None
    emb_dim: int = 64
    hidden_dim: int = 64
    n_layers: int = 1
    d_emb_dim: int = 64
    d_hidden_dim: int = 64
    d_mlp_dim: int = 64
    max_vocab: int = 10_000
    max_len: int = 20
    analysis_size: int = 256
    d_pretrain_negatives: str = "sample"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("g_steps", "d_steps", "batch_size", "beam_width", "emb_dim", "hidden_dim",
                     "n_layers", "d_emb_dim", "d_hidden_dim", "d_mlp_dim", "max_len",
                     "analysis_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "adversarial_epochs", "d_pretrain_epochs"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("g_lr", "d_lr", "pretrain_lr", "d_pretrain_lr"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.d_pretrain_negatives not in ("greedy", "sample"):
            raise ValueError("d_pretrain_negatives must be 'greedy' or 'sample'")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")
        if self.max_vocab <= 4:
            raise ValueError("max_vocab must exceed the 4 reserved ids")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    vocab: Vocab
    pi: Seq2Seq
    mu: Seq2Seq
    disc: Discriminator
    config: TrainConfig
    pi_opt: Adam | None = None
    d_opt: Adam | None = None
    epoch: int = 0
    log: list[dict] = field(default_factory=list)
    pretrain_log: dict = field(default_factory=dict)
    mu_checksum: str = ""
    reward_baseline: float = 0.0

    def check_mu_frozen(self) -> None:
        if checkpoint.checksum(self.mu) != self.mu_checksum:
            raise RuntimeError("behavior policy parameters changed during adversarial training")


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}: {value}")
    return value


def _grads(loss: Tensor, params) -> list[np.ndarray]:
    grads = ad.backward(loss, params)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
    return grads


def rollout_limits(response_lengths) -> np.ndarray:
    """Counterfactual length cap: twice the observed length, at least 20."""
    return np.maximum(2 * np.asarray(response_lengths), 20)


# ---------------------------------------------------------------- rollouts


def counterfactual_rollout(x: Sequence[int], y: Sequence[int], mu: Seq2Seq, pi: Seq2Seq,
                           rng: RngStream, max_len: int | None = None) -> list[int]:
    """Infer the scenario of ``y`` under ``mu`` and replay it under ``pi``.

    ``y`` is an id list; EOS is appended when missing. The result keeps its EOS.
    """
    y = list(y)
    if not y or y[-1] != EOS:
        y.append(EOS)
    scenario = infer_scenario(mu.log_prob_fn(x), y, rng)
    if max_len is None:
        max_len = int(rollout_limits(len(y)))
    return rollout_with_scenario(x, scenario, pi, max_len, rng)


def standard_rollout(x: Sequence[int], pi: Seq2Seq, rng: RngStream, max_len: int = 20
                     ) -> list[int]:
    """A response sampled under a fresh scenario."""
    hist, hmask = pad_sequences([list(x)])
    V = pi.vocab_size
    return rollout(pi, hist, hmask, lambda j: sample_standard_gumbel((1, V), rng), max_len)[0]


def infer_batch_scenarios(batch: Batch, mu: Seq2Seq, rng: RngStream) -> np.ndarray:
    """Posterior noise ``(B, T_y, V)`` for every observed step (zeros past the end)."""
    with no_grad():
        lps = mu.teacher_forced(batch.history, batch.history_mask, batch.response)
    B, T = batch.response.shape
    u = np.zeros((B, T, mu.vocab_size))
    for t, lp in enumerate(lps):
        rows = np.flatnonzero(batch.response_mask[:, t] > 0)
        if rows.size:
            u[rows, t] = posterior_scenario_step(lp.data[rows], batch.response[rows, t], rng)
    return u


def counterfactual_rollout_batch(batch: Batch, mu: Seq2Seq, pi: Seq2Seq, rng: RngStream
                                 ) -> list[list[int]]:
    u = infer_batch_scenarios(batch, mu, rng)
    lengths = batch.response_mask.sum(axis=1).astype(int)
    B, T, V = u.shape

    def noise(j):
        fresh = sample_standard_gumbel((B, V), rng)
        if j < T:
            inferred = (j < lengths)[:, None]
            return np.where(inferred, u[:, j], fresh)
        return fresh

    return rollout(pi, batch.history, batch.history_mask, noise, rollout_limits(lengths))


def standard_rollout_batch(batch: Batch, pi: Seq2Seq, rng: RngStream) -> list[list[int]]:
    lengths = batch.response_mask.sum(axis=1).astype(int)
    B, V = len(batch), pi.vocab_size
    return rollout(pi, batch.history, batch.history_mask,
                   lambda j: sample_standard_gumbel((B, V), rng), rollout_limits(lengths))


# ---------------------------------------------------------------- generator


def reinforce_loss(pi: Seq2Seq, history, hmask, responses: Sequence[Sequence[int]],
                   rewards: np.ndarray, baseline: float = 0.0) -> Tensor:
    """Surrogate whose gradient is ``-(1/B) sum_b sum_j (r_bj - b) grad log pi(y_bj)``.

    ``rewards`` is ``(B, T)`` aligned with the padded responses; padding is
    masked out.
    """
    resp, mask = pad_sequences(responses)
    weights = (np.asarray(rewards)[:, : resp.shape[1]] - baseline) * mask
    total = None
    for t, lp in enumerate(pi.teacher_forced(history, hmask, resp)):
        logp = ad.neg(ad.cross_entropy(lp, resp[:, t]))
        term = ad.sum(logp * weights[:, t])
        total = term if total is None else total + term
    return ad.scale(total, -1.0 / len(responses))


def _step_rewards(disc: Discriminator, history, hmask, responses) -> tuple[np.ndarray, np.ndarray]:
    resp, mask = pad_sequences(responses)
    return disc.step_rewards(history, hmask, resp) * mask, mask


def response_scores(disc: Discriminator, history, hmask, responses) -> np.ndarray:
    """Mean per-step reward of each response."""
    r, mask = _step_rewards(disc, history, hmask, responses)
    return r.sum(axis=1) / mask.sum(axis=1)


def generator_update(batch: Batch, state: TrainState, rng: RngStream) -> dict:
    """One policy-gradient step on ``pi``; rewards from ``D`` are constants."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg = state.config
    if cfg.mode == "copt":
        responses = counterfactual_rollout_batch(batch, state.mu, state.pi, rng)
    else:
        responses = standard_rollout_batch(batch, state.pi, rng)
    rewards, mask = _step_rewards(state.disc, batch.history, batch.history_mask, responses)
    baseline = state.reward_baseline if cfg.baseline else 0.0
    loss = reinforce_loss(state.pi, batch.history, batch.history_mask, responses, rewards,
                          baseline)
    _finite(loss.item(), "generator loss")
    state.pi_opt.step(_grads(loss, state.pi.parameters()))
    mean_reward = float((rewards.sum(axis=1) / mask.sum(axis=1)).mean())
    if cfg.baseline:
        step_mean = float(rewards.sum() / mask.sum())
        state.reward_baseline = (cfg.baseline_decay * state.reward_baseline
                                 + (1.0 - cfg.baseline_decay) * step_mean)
    return {"loss": loss.item(), "mean_reward": mean_reward}


# ---------------------------------------------------------------- discriminator


def random_prefixes(seqs: Sequence[Sequence[int]], rng: RngStream) -> list[list[int]]:
    """Prefix of each sequence with length uniform on ``[1, len]``."""
    out = []
    for s in seqs:
        n = int(rng.integers(1, len(s) + 1))
        out.append(list(s[:n]))
    return out


def discriminator_loss(disc: Discriminator, history, hmask, positives, negatives) -> Tensor:
    """Class-balanced binary cross-entropy.

    Half of ``-mean log D(pos) - mean log(1 - D(neg))``, so a discriminator
    that cannot tell the classes apart sits at ``ln 2``. ``history`` rows
    align with ``positives`` then ``negatives``.
    """
    prefixes = list(positives) + list(negatives)
    ids, _ = pad_sequences(prefixes)
    lengths = np.asarray([len(p) for p in prefixes])
    z = disc.final_logits(history, hmask, ids, lengths)
    n_pos = len(positives)
    sign = np.concatenate([np.ones(n_pos), -np.ones(len(negatives))])
    weight = np.concatenate([np.full(n_pos, 0.5 / n_pos),
                             np.full(len(negatives), 0.5 / len(negatives))])
    return ad.neg(ad.sum(ad.log_sigmoid(z * sign) * weight))


def _doubled(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([batch.history, batch.history]),
            np.concatenate([batch.history_mask, batch.history_mask]))


def _observed(batch: Batch) -> list[list[int]]:
    lengths = batch.response_mask.sum(axis=1).astype(int)
    return [list(batch.response[b, :n]) for b, n in enumerate(lengths)]


def discriminator_step(batch: Batch, negatives_full: Sequence[Sequence[int]], disc: Discriminator,
                       opt: Adam, rng: RngStream) -> float:
    pos = random_prefixes(_observed(batch), rng)
    neg = random_prefixes(negatives_full, rng)
    hist, hmask = _doubled(batch)
    loss = discriminator_loss(disc, hist, hmask, pos, neg)
    _finite(loss.item(), "discriminator loss")
    opt.step(_grads(loss, disc.parameters()))
    return loss.item()


def discriminator_update(batch: Batch, state: TrainState, rng: RngStream) -> float:
    """Observed prefixes against prefixes of standard (never counterfactual) responses."""
    negatives = standard_rollout_batch(batch, state.pi, rng)
    return discriminator_step(batch, negatives, state.disc, state.d_opt, rng)


# ---------------------------------------------------------------- pre-training


def pretrain_mle(corpus: EncodedCorpus, model: Seq2Seq, config: TrainConfig, rng: RngStream,
                 epochs: int | None = None, on_epoch: Callable[[int, float], None] | None = None
                 ) -> list[float]:
    """Teacher-forced token cross-entropy with ADAM; returns mean loss per epoch."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    epochs = config.pretrain_epochs if epochs is None else epochs
    opt = Adam(model.parameters(), lr=config.pretrain_lr, clip_norm=config.clip_norm)
    history = []
    for epoch in range(epochs):
        total, tokens = 0.0, 0.0
        for batch in split_and_batch(corpus, config.batch_size, rng.spawn(epoch)):
            n_tok = float(batch.response_mask.sum())
            loss = model.nll(batch.history, batch.history_mask, batch.response,
                             batch.response_mask)
            _finite(loss.item(), "MLE loss")
            opt.step(_grads(ad.scale(loss, 1.0 / n_tok), model.parameters()))
            total += loss.item()
            tokens += n_tok
        history.append(total / tokens)
        if on_epoch:
            on_epoch(epoch, history[-1])
    return history


def mean_nll(corpus: EncodedCorpus, model: Seq2Seq, batch_size: int = 256) -> float:
    total, tokens = 0.0, 0.0
    with no_grad():
        for batch in split_and_batch(corpus, batch_size, RngStream(0), shuffle=False):
            total += model.nll(batch.history, batch.history_mask, batch.response,
                               batch.response_mask).item()
            tokens += float(batch.response_mask.sum())
    return total / tokens


def pretrain_discriminator(corpus: EncodedCorpus, pi: Seq2Seq, disc: Discriminator,
                           config: TrainConfig, rng: RngStream, epochs: int | None = None
                           ) -> list[float]:
    """Observed prefixes vs prefixes of the pre-trained generator's outputs."""
    epochs = config.d_pretrain_epochs if epochs is None else epochs
    opt = Adam(disc.parameters(), lr=config.d_pretrain_lr, clip_norm=config.clip_norm)
    losses = []
    for epoch in range(epochs):
        ep_rng = rng.spawn(epoch)
        vals = []
        for batch in split_and_batch(corpus, config.batch_size, ep_rng):
            if config.d_pretrain_negatives == "greedy":
                lengths = batch.response_mask.sum(axis=1).astype(int)
                negatives = greedy(pi, batch.history, batch.history_mask,
                                   max_len=int(rollout_limits(lengths).max()))
            else:
                negatives = standard_rollout_batch(batch, pi, ep_rng)
            vals.append(discriminator_step(batch, negatives, disc, opt, ep_rng))
        losses.append(float(np.mean(vals)))
    return losses


# ---------------------------------------------------------------- analysis


def analyze_rewards(pi: Seq2Seq, mu: Seq2Seq, disc: Discriminator, corpus: EncodedCorpus,
                    rng: RngStream, index: Sequence[int] | None = None, batch_size: int = 64
                    ) -> dict:
    """Score one counterfactual and one standard response per instance with the same D.

    Each response is scored by its mean per-step reward; the result holds the
    low/middle/high shares and means per kind plus the raw paired scores.
    """
    index = np.arange(len(corpus)) if index is None else np.asarray(index)
    if len(index) == 0:
        raise ValueError("no instances to analyse")
    cf_scores, std_scores = [], []
    for start in range(0, len(index), batch_size):
        batch = corpus.batch(index[start:start + batch_size])
        b_rng = rng.spawn(start)
        cf = counterfactual_rollout_batch(batch, mu, pi, b_rng)
        std = standard_rollout_batch(batch, pi, b_rng)
        cf_scores.extend(response_scores(disc, batch.history, batch.history_mask, cf))
        std_scores.extend(response_scores(disc, batch.history, batch.history_mask, std))
    cf_scores = np.asarray(cf_scores)
    std_scores = np.asarray(std_scores)
    return {
        "counterfactual": reward_histogram(cf_scores),
        "standard": reward_histogram(std_scores),
        "scores": {"counterfactual": cf_scores, "standard": std_scores},
    }


# ---------------------------------------------------------------- orchestration


def _model_seed(root: RngStream, key: int) -> int:
    return int(root.spawn(key).stream_id % 2**63)


def init_state(corpus: EncodedCorpus, vocab: Vocab, config: TrainConfig) -> TrainState:
    """Fresh (untrained) policies and discriminator with distinct initialisations."""
    root = RngStream(config.seed, 0)
    V = len(vocab)
    pi = Seq2Seq(V, config.emb_dim, config.hidden_dim, config.n_layers, _model_seed(root, 1))
    mu = Seq2Seq(V, config.emb_dim, config.hidden_dim, config.n_layers, _model_seed(root, 2))
    disc = Discriminator(V, config.d_emb_dim, config.d_hidden_dim, config.d_mlp_dim,
                         _model_seed(root, 3))
    return TrainState(vocab=vocab, pi=pi, mu=mu, disc=disc, config=config)


def pretrain(corpus: EncodedCorpus, vocab: Vocab, config: TrainConfig) -> TrainState:
    """MLE for pi and mu, then discriminator pre-training."""
    state = init_state(corpus, vocab, config)
    root = RngStream(config.seed, 0)
    state.pretrain_log["pi_nll"] = pretrain_mle(corpus, state.pi, config, root.spawn(11))
    state.pretrain_log["mu_nll"] = pretrain_mle(corpus, state.mu, config, root.spawn(12))
    state.pretrain_log["d_loss"] = pretrain_discriminator(corpus, state.pi, state.disc, config,
                                                          root.spawn(13))
    logger.info("pretraining done: %s", {k: v[-1] if v else None
                                        for k, v in state.pretrain_log.items()})
    return state


def encode_corpus(instances: Sequence[DialogueInstance], config: TrainConfig,
                  vocab: Vocab | None = None) -> tuple[EncodedCorpus, Vocab]:
    if not instances:
        raise ValueError("empty corpus")
    vocab = vocab or build_vocab(instances, config.max_vocab)
    return EncodedCorpus.from_instances(instances, vocab), vocab


def train_adversarial(corpus: EncodedCorpus, config: TrainConfig, state: TrainState | None = None,
                      vocab: Vocab | None = None, out_dir=None,
                      on_epoch: Callable[[dict], None] | None = None) -> TrainState:
    """Run the adversarial loop (pre-training first when ``state`` is None).

    Per epoch: ``g_steps`` generator updates, then ``d_steps`` discriminator
    updates, then a reward analysis on a fixed instance subset appended to
    ``state.log``. With ``out_dir``, per-epoch checkpoints and a
    ``metrics.jsonl`` log are written there.
    """
    if state is None:
        if vocab is None:
            raise ValueError("need a vocabulary to pretrain from scratch")
        state = pretrain(corpus, vocab, config)
    else:
        state.config = config
    state.mu_checksum = state.mu_checksum or checkpoint.checksum(state.mu)
    if state.pi_opt is None:
        state.pi_opt = Adam(state.pi.parameters(), lr=config.g_lr, clip_norm=config.clip_norm)
    if state.d_opt is None:
        state.d_opt = Adam(state.disc.parameters(), lr=config.d_lr, clip_norm=config.clip_norm)

    root = RngStream(config.seed, 1)
    g_batches = endless_batches(corpus, config.batch_size, root.spawn(1))
    d_batches = endless_batches(corpus, config.batch_size, root.spawn(2))
    analysis_index = np.sort(root.spawn(3).permutation(len(corpus))[: config.analysis_size])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("", encoding="utf-8")

    for epoch in range(state.epoch + 1, state.epoch + config.adversarial_epochs + 1):
        ep = root.spawn(100 + epoch)
        g_stats = [generator_update(next(g_batches), state, ep.spawn(1, g))
                   for g in range(config.g_steps)]
        d_losses = [discriminator_update(next(d_batches), state, ep.spawn(2, d))
                    for d in range(config.d_steps)]
        state.check_mu_frozen()
        analysis = analyze_rewards(state.pi, state.mu, state.disc, corpus, ep.spawn(3),
                                   analysis_index, config.batch_size)
        record = {
            "epoch": epoch,
            "mode": config.mode,
            "mean_counterfactual_reward": analysis["counterfactual"]["mean"],
            "mean_standard_reward": analysis["standard"]["mean"],
            "generator_reward": float(np.mean([s["mean_reward"] for s in g_stats])),
            "generator_loss": float(np.mean([s["loss"] for s in g_stats])),
            "discriminator_loss": float(np.mean(d_losses)),
            "bins": {"counterfactual": analysis["counterfactual"]["shares"],
                     "standard": analysis["standard"]["shares"]},
        }
        state.log.append(record)
        state.epoch = epoch
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            save_checkpoints(state, out_dir, f"epoch{epoch:03d}")
        if on_epoch:
            on_epoch(record)
        logger.info("epoch %d: %s", epoch, record)
    return state


def save_checkpoints(state: TrainState, out_dir, tag: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "pi": checkpoint.save(out_dir / f"pi_{tag}.ckpt", state.pi, state.vocab),
        "mu": checkpoint.save(out_dir / f"mu_{tag}.ckpt", state.mu, state.vocab),
        "disc": checkpoint.save(out_dir / f"disc_{tag}.ckpt", state.disc, state.vocab),
    }
