"""``blankskip`` command line: gen-data, train, decode, bench, inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import DatasetFormatError, TaskConfig, dataset_path, gen_dataset, read_dataset, write_dataset
from .decoder import DecodeOptions

log = logging.getLogger("blankskip")


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    model: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)


def _known(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def load_config(path: str | None) -> CliConfig:
    """Read a YAML/JSON config; every section and key must be known."""
    from .encoder import ModelConfig
    from .train import TrainConfig

    if path is None:
        return CliConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {p}: top level must be a mapping")
    allowed = {
        "model": _known(ModelConfig),
        "task": _known(TaskConfig),
        "train": _known(TrainConfig) - {"model", "task"},
        "decode": _known(DecodeOptions),
    }
    bad = sorted(set(doc) - set(allowed))
    if bad:
        raise UsageError(f"config {p}: unknown sections {bad}")
    for section, keys in allowed.items():
        sub = doc.get(section) or {}
        unknown = sorted(set(sub) - keys)
        if unknown:
            raise UsageError(f"config {p}: unknown keys in '{section}': {unknown}")
    return CliConfig(**{s: dict(doc.get(s) or {}) for s in allowed})


def _task(cfg: CliConfig) -> TaskConfig:
    return TaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.task.items()})


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _tau_list(text: str) -> list[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from None
    if not taus or any(not 0 < t <= 1 for t in taus):
        raise argparse.ArgumentTypeError("tau values must lie in (0, 1]")
    return taus


def config_hash(task: TaskConfig) -> str:
    return hashlib.sha256(json.dumps(task.to_dict(), sort_keys=True).encode()).hexdigest()


def cmd_gen_data(args, cfg: CliConfig) -> int:
    if args.seed is not None:
        cfg.task["seed"] = args.seed
    for key in ("num_train", "num_test"):
        if getattr(args, key) is not None:
            cfg.task[key] = getattr(args, key)
    task = _task(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in ("train", "test"):
        utts = gen_dataset(task, split)
        write_dataset(out / f"{split}.jsonl", utts)
        counts[split] = len(utts)
    manifest = {"seed": task.seed, "config": task.to_dict(), "config_hash": config_hash(task), "counts": counts}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {counts['train']} train / {counts['test']} test utterances to {out} (hash {manifest['config_hash'][:12]})")
    return 0


def cmd_train(args, cfg: CliConfig) -> int:
    from .encoder import ModelConfig
    from .train import TrainConfig, save_checkpoint, train

    data = Path(args.data)
    manifest = data / "manifest.json"
    if manifest.is_file() and not cfg.task:
        cfg.task = json.loads(manifest.read_text(encoding="utf-8"))["config"]
    task = _task(cfg)
    model_kw = {"vocab_size": task.vocab_size, "input_dim": task.input_dim, **cfg.model}
    if args.factorized is not None:
        model_kw["factorized_heads"] = args.factorized
    train_kw = dict(cfg.train)
    for flag, key in (("epochs", "epochs"), ("lambda_kl", "lambda_kl"), ("use_kl", "use_kl"),
                      ("use_mtl", "use_mtl"), ("seed", "seed"), ("lr", "learning_rate")):
        if getattr(args, flag) is not None:
            train_kw[key] = getattr(args, flag)
    tcfg = TrainConfig(model=ModelConfig(**model_kw), task=task, **train_kw)
    train_set = read_dataset(dataset_path(data, "train"))
    test_path = dataset_path(data, "test")
    test_set = read_dataset(test_path) if data.is_dir() and test_path.is_file() else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train(tcfg, train_set, test_set, log_path=out / "train_log.jsonl",
                 callback=lambda r: None if r.get("header") else log.info("%s", r))
    save_checkpoint(ckpt, out / "checkpoint.json")
    last = ckpt.loss_history[-1]
    print(f"trained {ckpt.step} steps; final loss {last['total']:.4f}; held-out TER {last.get('ter', float('nan')):.4f}")
    return 0


def _load(args):
    from .train import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    utts = read_dataset(dataset_path(args.data, "test"))
    return ckpt.model, utts


def cmd_decode(args, cfg: CliConfig) -> int:
    from .decoder import corpus_ter, prefix_beam_search
    from .encoder import subsample

    model, utts = _load(args)
    d = {**cfg.decode}
    if args.beam is not None:
        d["beam_width"] = args.beam
    if args.nbest is not None:
        d["nbest"] = args.nbest
    tau = args.tau if args.tau is not None else d.get("tau_decode", model.cfg.tau_skip)
    d["tau_decode"] = tau
    if d.get("nbest", 1) > d.get("beam_width", DecodeOptions.beam_width):
        raise UsageError("--nbest cannot exceed --beam")
    opts = DecodeOptions(**d)
    skipping = not args.no_skip
    frames = [subsample(u.features, model.cfg.subsample_stride) for u in utts]
    refs, hyps = [], []
    skipped = total = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for u, f in zip(utts, frames):
            res = model.encode_skip(f, tau) if skipping else model.encode_full(f)
            nbest = prefix_beam_search(res.p, opts, frame_skipping=skipping)
            skipped += res.skipped
            total += res.frames
            refs.append(u.labels)
            hyps.append(nbest[0][0])
            fh.write(json.dumps({"id": u.id, "ref": list(u.labels),
                                 "nbest": [{"labels": list(p), "log_prob": lp} for p, lp in nbest]}) + "\n")
    print(f"utterances={len(utts)} tau={tau} skip_ratio={skipped / total:.4f} ter={corpus_ter(refs, hyps):.4f}")
    return 0


def cmd_bench(args, cfg: CliConfig) -> int:
    from .bench import run_bench, write_report

    model, utts = _load(args)
    d = {**cfg.decode}
    if args.beam is not None:
        d["beam_width"] = args.beam
    d.pop("tau_decode", None)
    rows = run_bench(model, utts, args.tau_list, DecodeOptions(**d), args.frame_period, args.repeats)
    write_report(rows, args.out, args.frame_period)
    for r in rows:
        tau = "baseline" if r.tau is None else f"{r.tau:g}"
        print(f"tau={tau:>8} skip={r.skip_ratio:.4f} layers={r.effective_layers:.3f} ter={r.ter:.4f} "
              f"enc={r.wall_encoder_s:.3f}s dec={r.wall_decode_s:.3f}s rtf={r.rtf:.5f}")
    return 0


def cmd_inspect(args, cfg: CliConfig) -> int:
    from .bench import inspect_dump, write_inspect_csv

    model, utts = _load(args)
    by_id = {u.id: u for u in utts}
    if args.utt_id not in by_id:
        shown = sorted(by_id)
        more = f" ... ({len(shown)} total)" if len(shown) > 20 else ""
        raise UsageError(f"unknown utterance id {args.utt_id!r}; available: {', '.join(shown[:20])}{more}")
    rec = inspect_dump(model, by_id[args.utt_id], args.tau)
    write_inspect_csv(rec, args.out)
    print(f"{rec.utt_id}: {rec.frames} frames, {sum(rec.skipped)} skipped at tau={rec.tau}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="blankskip", description="Blank-gated layer skipping for CTC encoders.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic train/test task", formatter_class=fmt)
    g.add_argument("--config", default=None, help="YAML/JSON config file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None, help="task seed (overrides config)")
    g.add_argument("--num-train", type=int, default=None, help="train utterances (overrides config)")
    g.add_argument("--num-test", type=int, default=None, help="test utterances (overrides config)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--config", default=None, help="YAML/JSON config file")
    t.add_argument("--data", required=True, help="gen-data output directory")
    t.add_argument("--out", required=True, help="output directory for checkpoint.json and train_log.jsonl")
    t.add_argument("--epochs", type=int, default=None, help="epochs (config default 30)")
    t.add_argument("--lambda-kl", type=float, default=None, help="KL weight (config default 0.5)")
    t.add_argument("--use-kl", type=_bool, default=None, help="include the KL term (default true)")
    t.add_argument("--use-mtl", type=_bool, default=None, help="include the intermediate CTC term (default true)")
    t.add_argument("--factorized", type=_bool, default=None, help="factorized blank/non-blank heads (default false)")
    t.add_argument("--lr", type=float, default=None, help="learning rate (config default 1e-3)")
    t.add_argument("--seed", type=int, default=None, help="training seed (config default 0)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a dataset with skipping", formatter_class=fmt)
    d.add_argument("--config", default=None, help="YAML/JSON config file")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True, help="dataset file or gen-data directory (test split)")
    d.add_argument("--tau", type=float, default=None, help="blank threshold for layer and frame skipping (default: model tau_skip)")
    d.add_argument("--beam", type=int, default=None, help="beam width (default 8)")
    d.add_argument("--nbest", type=int, default=None, help="hypotheses kept per utterance (default 1)")
    d.add_argument("--no-skip", action="store_true", help="disable layer and frame skipping")
    d.add_argument("--out", required=True, help="hypotheses file (line-delimited JSON)")
    d.set_defaults(func=cmd_decode)

    b = sub.add_parser("bench", help="tau sweep: skip ratio, depth, timing, TER", formatter_class=fmt)
    b.add_argument("--config", default=None, help="YAML/JSON config file")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True, help="dataset file or gen-data directory (test split)")
    b.add_argument("--tau-list", type=_tau_list, default=_tau_list("1.0,0.99,0.95"), help="comma-separated thresholds")
    b.add_argument("--beam", type=int, default=None, help="beam width (default 8)")
    b.add_argument("--frame-period", type=float, default=0.01, help="seconds per input frame for the RTF analog")
    b.add_argument("--repeats", type=int, default=3, help="timing repetitions (median reported)")
    b.add_argument("--out", required=True, help="CSV report path")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="per-frame posteriors and skip decisions", formatter_class=fmt)
    i.add_argument("--config", default=None, help="YAML/JSON config file")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True, help="dataset file or gen-data directory (test split)")
    i.add_argument("--utt-id", required=True)
    i.add_argument("--tau", type=float, default=None, help="blank threshold (default: model tau_skip)")
    i.add_argument("--out", required=True, help="CSV output path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    from .train import CheckpointError, TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"blankskip: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, CheckpointError, DatasetFormatError, OSError, ValueError, TypeError) as exc:
        print(f"blankskip: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
