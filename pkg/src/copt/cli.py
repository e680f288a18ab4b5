"""Command line entry point: ``copt <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every run-producing command writes ``manifest.json`` into its run directory
before any training starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__, checkpoint
from .autodiff import DomainError
from .corpus import SyntheticSpec, corpus_checksum, gen_synthetic, load_dialogues, tokenize
from .gumbel import RngStream
from .metrics import evaluate
from .models import beam_search, greedy, strip_eos
from .training import (NumericalError, TrainConfig, TrainState, analyze_rewards, encode_corpus,
                       pretrain, save_checkpoints, train_adversarial)

logger = logging.getLogger("copt")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
RUN_DIR_ENV = "COPT_RUN_DIR"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    corpus: str
    corpus_checksum: str
    tool_version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__
    started_at: str = ""
    finished_at: str | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _run_dir(args) -> Path:
    path = args.run_dir or os.environ.get(RUN_DIR_ENV)
    if not path:
        raise UsageError(f"give --run-dir or set {RUN_DIR_ENV}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config(path: str | None, overrides: dict) -> TrainConfig:
    """YAML (or JSON) key-value file, then non-None flag overrides on top."""
    values: dict = {}
    if path:
        try:
            values = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise UsageError(f"config {path} must be a mapping")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _load_corpus(path: str):
    try:
        instances = load_dialogues(path)
    except OSError as exc:
        raise UsageError(f"cannot read corpus {path}: {exc}") from exc
    if not instances:
        raise UsageError(f"corpus {path} has no usable dialogues")
    return instances


def _load_model(path: str, expect_hash: str | None = None):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return checkpoint.load(path, expect_hash)
    except checkpoint.CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _write_json(path: Path | None, payload) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_synthetic(args) -> int:
    try:
        spec = SyntheticSpec(vocab_size=args.vocab, n_templates=args.templates,
                             min_len=args.min_len, max_len=args.max_len,
                             temperature=args.temperature, n_instances=args.size, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sc = gen_synthetic(spec)
    corpus_path, policy_path = sc.write(args.out)
    print(f"wrote {len(sc.instances)} instances to {corpus_path} (policy: {policy_path})")
    return 0


def _config_overrides(args) -> dict:
    return {
        "mode": getattr(args, "mode", None),
        "adversarial_epochs": getattr(args, "adversarial_epochs", None),
        "pretrain_epochs": getattr(args, "pretrain_epochs", None),
        "seed": getattr(args, "seed", None),
    }


def _start_run(args, command: str):
    config = load_config(args.config, _config_overrides(args))
    instances = _load_corpus(args.corpus)
    run_dir = _run_dir(args)
    manifest = RunManifest(
        command=command,
        config=config.to_dict(),
        seeds={"seed": config.seed},
        corpus=str(Path(args.corpus).resolve()),
        corpus_checksum=corpus_checksum(args.corpus),
        started_at=_now(),
    )
    manifest.write(run_dir)
    corpus, vocab = encode_corpus(instances, config)
    return config, corpus, vocab, run_dir, manifest


def _finish(manifest: RunManifest, run_dir: Path, outputs: dict) -> None:
    manifest.outputs = {k: str(v) for k, v in outputs.items()}
    manifest.finished_at = _now()
    manifest.write(run_dir)


def cmd_pretrain(args) -> int:
    config, corpus, vocab, run_dir, manifest = _start_run(args, "pretrain")
    state = pretrain(corpus, vocab, config)
    paths = save_checkpoints(state, run_dir, "pretrain")
    _write_json(run_dir / "pretrain_log.json", state.pretrain_log)
    _finish(manifest, run_dir, paths)
    print(f"pretrained checkpoints in {run_dir}")
    return 0


def _resume(args, vocab, config) -> TrainState:
    """Pretrained pi, mu and D from ``--pretrained DIR`` (``*_pretrain.ckpt``)."""
    src = Path(args.pretrained)
    models = {}
    for name in ("pi", "mu", "disc"):
        model, v = _load_model(str(src / f"{name}_pretrain.ckpt"))
        if v.hash() != vocab.hash():
            raise UsageError(f"{name} checkpoint vocabulary does not match the corpus")
        models[name] = model
    return TrainState(vocab=vocab, pi=models["pi"], mu=models["mu"], disc=models["disc"],
                      config=config)


def cmd_train(args) -> int:
    config, corpus, vocab, run_dir, manifest = _start_run(args, "train")
    if args.pretrained:
        state = _resume(args, vocab, config)
    else:
        state = pretrain(corpus, vocab, config)
    outputs = dict(save_checkpoints(state, run_dir, "pretrain"))
    state = train_adversarial(corpus, config, state=state, out_dir=run_dir)
    outputs.update({f"{k}_final": v for k, v in save_checkpoints(state, run_dir, "final").items()})
    outputs["metrics"] = run_dir / "metrics.jsonl"
    _finish(manifest, run_dir, outputs)
    if state.log:
        last = state.log[-1]
        print(f"epoch {last['epoch']}: counterfactual reward "
              f"{last['mean_counterfactual_reward']:.4f}, standard reward "
              f"{last['mean_standard_reward']:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def _read_lines(path: str) -> list[list[str]]:
    try:
        return [tokenize(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _reference_sets(observed, ref_files) -> list[list[list[str]]]:
    sets = [[r] for r in observed] if observed is not None else None
    for path in ref_files or []:
        refs = _read_lines(path)
        if sets is None:
            sets = [[] for _ in refs]
        if len(refs) != len(sets):
            raise UsageError(f"{path}: {len(refs)} lines, expected {len(sets)}")
        for s, r in zip(sets, refs):
            if r:
                s.append(r)
    return sets


def cmd_eval(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    if model.kind != "generator":
        raise UsageError(f"{args.checkpoint} is not a generator checkpoint")
    instances = _load_corpus(args.corpus)
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    hyps = []
    for inst in instances:
        hist = vocab.encode_history(inst.history)
        if args.beam == 1:
            ids = greedy(model, [hist], max_len=args.max_len)[0]
        else:
            ids = beam_search(model, hist, args.beam, args.max_len)
        hyps.append(vocab.decode(strip_eos(ids)))
    refs = _reference_sets([i.response for i in instances], args.refs)
    report = evaluate(hyps, refs)
    if args.hyp_out:
        Path(args.hyp_out).write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
    _write_json(args.out, json.loads(report.to_json()))
    return 0


def cmd_score(args) -> int:
    hyps = _read_lines(args.hyp)
    if not hyps:
        raise UsageError(f"{args.hyp} is empty")
    refs = _reference_sets(None, args.refs) if args.refs else None
    if refs is not None and len(refs) != len(hyps):
        raise UsageError("hypothesis and reference files differ in length")
    try:
        report = evaluate(hyps, refs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_json(args.out, json.loads(report.to_json()))
    return 0


def format_reward_table(report: dict) -> str:
    rows = [f"{'kind':<15}{'low':>9}{'middle':>9}{'high':>9}{'mean':>9}"]
    for kind in ("counterfactual", "standard"):
        h = report[kind]
        s = h["shares"]
        rows.append(f"{kind:<15}{s['low']:>8.2f}%{s['middle']:>8.2f}%{s['high']:>8.2f}%"
                    f"{h['mean']:>9.4f}")
    return "\n".join(rows)


def cmd_analyze_rewards(args) -> int:
    pi, vocab = _load_model(args.pi)
    mu, _ = _load_model(args.mu, vocab.hash())
    disc, _ = _load_model(args.disc, vocab.hash())
    if (pi.kind, mu.kind, disc.kind) != ("generator", "generator", "discriminator"):
        raise UsageError("expected generator, generator and discriminator checkpoints")
    instances = _load_corpus(args.corpus)
    if not 1 <= args.n <= len(instances):
        raise UsageError(f"--n must lie in [1, {len(instances)}]")
    corpus, _ = encode_corpus(instances, TrainConfig(), vocab)
    index = np.sort(RngStream(args.seed, 7).permutation(len(corpus))[: args.n])
    result = analyze_rewards(pi, mu, disc, corpus, RngStream(args.seed, 8), index)
    scores = result.pop("scores")
    result["paired_difference_mean"] = float(np.mean(scores["counterfactual"]
                                                     - scores["standard"]))
    print(format_reward_table(result))
    if args.out:
        _write_json(Path(args.out), result)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="copt", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic corpus and its policy")
    g.add_argument("--vocab", type=int, default=200)
    g.add_argument("--templates", type=int, default=20)
    g.add_argument("--size", type=int, default=5000, help="number of instances")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    for name, func, help_ in (("pretrain", cmd_pretrain, "MLE and discriminator pretraining"),
                              ("train", cmd_train, "pretraining plus adversarial training")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config", help="YAML/JSON key-value file of training settings")
        t.add_argument("--corpus", required=True)
        t.add_argument("--run-dir", help=f"output directory (default: ${RUN_DIR_ENV})")
        t.add_argument("--seed", type=int)
        t.add_argument("--pretrain-epochs", type=int)
        if name == "train":
            t.add_argument("--mode", choices=["copt", "standard"])
            t.add_argument("--adversarial-epochs", type=int)
            t.add_argument("--pretrained", help="run directory holding *_pretrain.ckpt files")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="beam-search generation plus distinct/BLEU")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--refs", nargs="*", help="extra reference files, one line per instance")
    e.add_argument("--beam", type=int, default=4)
    e.add_argument("--max-len", type=int, default=20)
    e.add_argument("--hyp-out")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="distinct/BLEU of an existing hypothesis file")
    s.add_argument("--hyp", required=True)
    s.add_argument("--refs", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    a = sub.add_parser("analyze-rewards", help="counterfactual vs standard reward histogram")
    a.add_argument("--pi", required=True)
    a.add_argument("--mu", required=True)
    a.add_argument("--disc", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--n", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze_rewards)
    return p


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        # non-finite values are caught explicitly downstream
        with _thread_limit(args.threads), np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"copt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DomainError, FloatingPointError) as exc:
        print(f"copt {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
