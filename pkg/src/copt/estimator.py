"""Scikit-learn style wrapper around the full training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_consistent_length, check_is_fitted, check_scalar

from .corpus import EOU, DialogueInstance, EncodedCorpus, tokenize
from .gumbel import RngStream
from .models import beam_search, strip_eos
from .training import TrainConfig, analyze_rewards, encode_corpus, mean_nll, train_adversarial


def _utterances(history) -> list[list[str]]:
    if isinstance(history, str):
        parts = [tokenize(u) for u in history.split(EOU)]
    else:
        parts = [tokenize(u) if isinstance(u, str) else [str(t) for t in u] for u in history]
    parts = [p for p in parts if p]
    if not parts:
        raise ValueError("empty dialogue history")
    return parts[-3:]


def check_histories(X) -> list[list[list[str]]]:
    """Normalise histories to token lists.

    A history is either one string with utterances separated by ``__eou__``
    or a sequence of utterance strings; only the last three are kept.
    """
    if isinstance(X, str) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of dialogue histories")
    if len(X) == 0:
        raise ValueError("X is empty")
    return [_utterances(h) for h in X]


def check_dialogues(X, y) -> list[DialogueInstance]:
    histories = check_histories(X)
    if isinstance(y, str):
        raise TypeError("y must be a sequence of responses")
    check_consistent_length(histories, y)
    out = []
    for h, r in zip(histories, y):
        toks = tokenize(r) if isinstance(r, str) else [str(t) for t in r]
        if not toks:
            raise ValueError("empty response")
        out.append(DialogueInstance(h, toks))
    return out


class COPTDialogueModel(BaseEstimator):
    """Dialogue generator trained with counterfactual (or standard) adversarial updates.

    ``fit`` pre-trains the target and behavior policies plus the
    discriminator, then runs the adversarial loop; ``predict`` decodes with
    beam search.
    """

    def __init__(self, mode: str = "copt", pretrain_epochs: int = 10,
                 adversarial_epochs: int = 10, d_pretrain_epochs: int = 12,
                 batch_size: int = 64, g_lr: float = 1e-5, d_lr: float = 1e-5,
                 pretrain_lr: float = 1e-3, beam_width: int = 4, emb_dim: int = 64,
                 hidden_dim: int = 64, max_vocab: int = 10_000, max_len: int = 20,
                 seed: int = 0):
        self.mode = mode
        self.pretrain_epochs = pretrain_epochs
        self.adversarial_epochs = adversarial_epochs
        self.d_pretrain_epochs = d_pretrain_epochs
        self.batch_size = batch_size
        self.g_lr = g_lr
        self.d_lr = d_lr
        self.pretrain_lr = pretrain_lr
        self.beam_width = beam_width
        self.emb_dim = emb_dim
        self.hidden_dim = hidden_dim
        self.max_vocab = max_vocab
        self.max_len = max_len
        self.seed = seed

    def _config(self) -> TrainConfig:
        p = self.get_params()
        return TrainConfig(d_emb_dim=p["emb_dim"], d_hidden_dim=p["hidden_dim"],
                           d_mlp_dim=p["hidden_dim"], **p)

    def fit(self, X, y):
        config = self._config()
        instances = check_dialogues(X, y)
        corpus, vocab = encode_corpus(instances, config)
        self.state_ = train_adversarial(corpus, config, vocab=vocab)
        self.vocab_ = vocab
        self.history_ = list(self.state_.log)
        self.n_train_ = len(instances)
        return self

    def _encode_histories(self, X) -> list[list[int]]:
        return [self.vocab_.encode_history(h) for h in check_histories(X)]

    def predict(self, X) -> list[str]:
        check_is_fitted(self)
        out = []
        for h in self._encode_histories(X):
            ids = beam_search(self.state_.pi, h, self.beam_width, self.max_len)
            out.append(" ".join(self.vocab_.decode(strip_eos(ids))))
        return out

    def score(self, X, y) -> float:
        """Negative mean per-token cross-entropy of the target policy."""
        check_is_fitted(self)
        corpus = EncodedCorpus.from_instances(check_dialogues(X, y), self.vocab_)
        return -mean_nll(corpus, self.state_.pi)

    def analyze_rewards(self, X, y, n: int | None = None, seed: int = 0) -> dict:
        """Reward histograms of counterfactual and standard responses under the same D."""
        check_is_fitted(self)
        corpus = EncodedCorpus.from_instances(check_dialogues(X, y), self.vocab_)
        index = np.arange(len(corpus))
        if n is not None:
            check_scalar(n, "n", int, min_val=1, max_val=len(corpus))
            index = np.sort(RngStream(seed, 7).permutation(len(corpus))[:n])
        s = self.state_
        return analyze_rewards(s.pi, s.mu, s.disc, corpus, RngStream(seed, 8), index,
                               self.batch_size)

