"""Dialogue corpora: file loading, instance windows, vocabulary, batching.

Also hosts a synthetic corpus whose response policy is known exactly, so
tests can compare learned distributions against the truth.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .gumbel import RngStream

logger = logging.getLogger(__name__)

EOU = "__eou__"
PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
MAX_HISTORY_UTTERANCES = 3


@dataclass
class DialogueInstance:
    history: list[list[str]]
    response: list[str]

    def __post_init__(self):
        if not self.history or not any(self.history):
            raise ValueError("dialogue history must be non-empty")
        if not self.response:
            raise ValueError("response must be non-empty")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Token <-> id maps with PAD/UNK/BOS/EOS fixed at ids 0-3.

    EOS doubles as the separator between history utterances.
    """

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def encode_history(self, utterances: Sequence[Sequence[str]]) -> list[int]:
        ids: list[int] = []
        for k, utt in enumerate(utterances):
            if k:
                ids.append(EOS)
            ids.extend(self.encode(utt))
        return ids

    def encode_response(self, tokens: Sequence[str]) -> list[int]:
        """Response ids terminated by EOS (EOS is a generation step)."""
        return self.encode(tokens) + [EOS]

    @property
    def content_tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def build_vocab(instances: Sequence[DialogueInstance], max_size: int = 10_000) -> Vocab:
    """Most frequent tokens (ties broken lexicographically), reserved ids included in ``max_size``."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed the {len(RESERVED)} reserved ids")
    counts: Counter[str] = Counter()
    for inst in instances:
        for utt in inst.history:
            counts.update(utt)
        counts.update(inst.response)
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([t for t, _ in ranked[: max_size - len(RESERVED)]])


def dialogue_to_instances(utterances: Sequence[Sequence[str]]) -> list[DialogueInstance]:
    """A K-utterance dialogue gives K-1 instances with a history window of three."""
    out = []
    for i in range(1, len(utterances)):
        lo = max(0, i - MAX_HISTORY_UTTERANCES)
        history = [list(u) for u in utterances[lo:i]]
        out.append(DialogueInstance(history=history, response=list(utterances[i])))
    return out


def parse_dialogue_line(line: str) -> list[list[str]]:
    parts = line.split(EOU)
    return [toks for toks in (tokenize(p) for p in parts) if toks]


def load_dialogues(path) -> list[DialogueInstance]:
    """Read ``__eou__``-delimited dialogues (one per line) into instances."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read dialogue file {path}: {exc}") from exc
    instances: list[DialogueInstance] = []
    skipped = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        utts = parse_dialogue_line(line)
        if len(utts) < 2:
            skipped += 1
            continue
        instances.extend(dialogue_to_instances(utts))
    if skipped:
        logger.warning("skipped %d dialogue(s) with fewer than 2 utterances", skipped)
    return instances


def write_dialogues(path, dialogues: Sequence[Sequence[Sequence[str]]]) -> None:
    lines = [f" {EOU} ".join(" ".join(u) for u in d) + f" {EOU}" for d in dialogues]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def corpus_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SyntheticSpec:
    vocab_size: int = 200
    n_templates: int = 20
    min_len: int = 3
    max_len: int = 8
    temperature: float = 1.0
    n_instances: int = 5000
    max_dialogue_len: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be at least 8 (4 reserved ids + content)")
        if self.n_templates < 2:
            raise ValueError("need at least two templates")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("template length range must satisfy 1 <= min_len <= max_len")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_instances < 1 or self.max_dialogue_len < 2:
            raise ValueError("need n_instances >= 1 and max_dialogue_len >= 2")


@dataclass
class SyntheticPolicy:
    """Ground truth: the next utterance is a template drawn from
    ``softmax(scores[last] / temperature)`` where ``last`` is the template the
    previous utterance instantiates."""

    templates: list[list[str]]
    scores: list[list[float]]
    temperature: float
    content_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {tuple(t): k for k, t in enumerate(self.templates)}

    def template_id(self, utterance: Sequence[str]) -> int:
        return self._index[tuple(utterance)]

    def template_probs(self, history: Sequence[Sequence[str]]) -> np.ndarray:
        s = np.asarray(self.scores[self.template_id(history[-1])]) / self.temperature
        e = np.exp(s - s.max())
        return e / e.sum()

    def response_distribution(self, history) -> dict[tuple[str, ...], float]:
        out: dict[tuple[str, ...], float] = {}
        for t, p in zip(self.templates, self.template_probs(history)):
            out[tuple(t)] = out.get(tuple(t), 0.0) + float(p)
        return out

    def step_distribution(self, history, prefix: Sequence[str]) -> dict[str, float]:
        """Exact next-token distribution after ``prefix``; ``"<eos>"`` ends the response."""
        mass: dict[str, float] = {}
        total = 0.0
        n = len(prefix)
        for t, p in self.response_distribution(history).items():
            if list(t[:n]) != list(prefix):
                continue
            nxt = t[n] if n < len(t) else RESERVED[EOS]
            mass[nxt] = mass.get(nxt, 0.0) + p
            total += p
        if total == 0.0:
            raise ValueError("prefix has zero probability under the policy")
        return {k: v / total for k, v in mass.items()}

    def sample_response(self, history, rng: RngStream) -> list[str]:
        p = self.template_probs(history)
        k = int(rng.generator.choice(len(p), p=p))
        return list(self.templates[k])

    def to_json(self) -> str:
        return json.dumps(
            {
                "temperature": self.temperature,
                "templates": [" ".join(t) for t in self.templates],
                "scores": self.scores,
                "weights": [
                    [round(float(w), 12) for w in self.template_probs([t])]
                    for t in self.templates
                ],
                "content_tokens": self.content_tokens,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticPolicy":
        d = json.loads(text)
        return cls(
            templates=[t.split() for t in d["templates"]],
            scores=d["scores"],
            temperature=d["temperature"],
            content_tokens=d.get("content_tokens", []),
        )


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    dialogues: list[list[list[str]]]
    instances: list[DialogueInstance]
    policy: SyntheticPolicy

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        corpus_path = out_dir / "dialogues.txt"
        policy_path = out_dir / "policy.json"
        write_dialogues(corpus_path, self.dialogues)
        policy_path.write_text(self.policy.to_json() + "\n", encoding="utf-8")
        (out_dir / "spec.json").write_text(
            json.dumps(asdict(self.spec), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
        return corpus_path, policy_path


def gen_synthetic(spec: SyntheticSpec, seed: int | None = None) -> SyntheticCorpus:
    """Markov-chain dialogues over a fixed template set.

    Each dialogue starts from a uniformly chosen template; every following
    utterance is drawn from the ground-truth policy given the previous one.
    The last dialogue is cut so exactly ``spec.n_instances`` instances result.
    """
    seed = spec.seed if seed is None else seed
    rng = RngStream(seed, 0x5EED)
    gen = rng.generator
    content = [f"w{i}" for i in range(spec.vocab_size - len(RESERVED))]
    templates: list[list[str]] = []
    seen: set[tuple[str, ...]] = set()
    while len(templates) < spec.n_templates:
        n = int(gen.integers(spec.min_len, spec.max_len + 1))
        t = [content[int(i)] for i in gen.integers(0, len(content), size=n)]
        if tuple(t) not in seen:
            seen.add(tuple(t))
            templates.append(t)
    scores = gen.normal(size=(spec.n_templates, spec.n_templates)).round(6).tolist()
    policy = SyntheticPolicy(templates, scores, spec.temperature, content)

    dialogues: list[list[list[str]]] = []
    remaining = spec.n_instances
    while remaining > 0:
        k = int(gen.integers(2, spec.max_dialogue_len + 1))
        k = min(k, remaining + 1)
        utts = [list(templates[int(gen.integers(0, spec.n_templates))])]
        for _ in range(k - 1):
            utts.append(policy.sample_response(utts, rng))
        dialogues.append(utts)
        remaining -= k - 1
    instances = [inst for d in dialogues for inst in dialogue_to_instances(d)]
    return SyntheticCorpus(spec, dialogues, instances, policy)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """PAD-padded id matrices (time-major masks are derived by the models)."""

    history: np.ndarray        # (B, T_x) int
    history_mask: np.ndarray   # (B, T_x) float, 1 for real tokens
    response: np.ndarray       # (B, T_y) int, EOS-terminated
    response_mask: np.ndarray  # (B, T_y)
    index: np.ndarray          # (B,) instance ids into the source list

    def __len__(self) -> int:
        return self.history.shape[0]


def pad_sequences(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    T = max(min_len, max((len(s) for s in seqs), default=0))
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.float64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        mask[b, : len(s)] = 1.0
    return ids, mask


@dataclass
class EncodedCorpus:
    """Instances mapped through a vocabulary; what models consume."""

    histories: list[list[int]]
    responses: list[list[int]]  # EOS-terminated

    def __len__(self) -> int:
        return len(self.histories)

    @classmethod
    def from_instances(cls, instances: Sequence[DialogueInstance], vocab: Vocab) -> "EncodedCorpus":
        return cls(
            [vocab.encode_history(i.history) for i in instances],
            [vocab.encode_response(i.response) for i in instances],
        )

    def batch(self, index: Sequence[int]) -> Batch:
        index = np.asarray(index, dtype=np.int64)
        h, hm = pad_sequences([self.histories[i] for i in index])
        r, rm = pad_sequences([self.responses[i] for i in index])
        return Batch(h, hm, r, rm, index)


def split_and_batch(corpus: EncodedCorpus, batch_size: int, rng: RngStream,
                    shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of padded batches; the final batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(corpus)) if shuffle else np.arange(len(corpus))
    for start in range(0, len(order), batch_size):
        yield corpus.batch(order[start:start + batch_size])


def endless_batches(corpus: EncodedCorpus, batch_size: int, rng: RngStream) -> Iterator[Batch]:
    epoch = 0
    while True:
        yield from split_and_batch(corpus, batch_size, rng.spawn(epoch))
        epoch += 1


def train_test_split(instances: Sequence[DialogueInstance], test_fraction: float,
                     rng: RngStream) -> tuple[list[DialogueInstance], list[DialogueInstance]]:
    order = rng.permutation(len(instances))
    n_test = int(round(len(instances) * test_fraction))
    test = [instances[i] for i in sorted(order[:n_test])]
    train = [instances[i] for i in sorted(order[n_test:])]
    return train, test
