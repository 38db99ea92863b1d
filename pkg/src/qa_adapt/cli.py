"""Command-line entry point: ``qa-adapt <command> [flags]``.

Exit status is 0 on success, 1 for user errors (bad flags, unreadable or
malformed inputs) and 2 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adaptation import AdaptConfig, AdaptSetting, load_transforms, save_run, train_adaptation
from .benchmarks import BENCHMARKS
from .data import (
    DatasetError,
    VqaDataset,
    dataset_stats,
    generate_synthetic_pair,
    load_dataset,
    load_saved_dataset,
    load_text_features,
    save_dataset,
    spec_from_dict,
    subsample,
)
from .evaluation import ComparisonReport, emit_report, mc_accuracy, run_comparison, vqa10_accuracy
from .features import load_embedding_table, load_image_features
from .nn import FormatError
from .probe import ProbeConfig, parse_components, probe_table, run_probe
from .scorer import InputMode, ScorerTrainConfig, load_scorer, save_scorer, train_scorer

log = logging.getLogger("qa_adapt")

COMMANDS = ("gen-synth", "train-vqa", "train-probe", "adapt", "eval", "compare", "report")


class UsageError(Exception):
    """Bad command-line input; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in (0, 1], got {text}")
    return value


def _setting(text: str) -> AdaptSetting:
    try:
        return AdaptSetting.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _settings(text: str) -> list[AdaptSetting]:
    return [_setting(t) for t in text.split(",") if t.strip()]


def _mode(text: str) -> InputMode:
    try:
        return InputMode(text.upper())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown mode {text!r}; valid modes: IQC, QC, C") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", required=True, type=Path, help="directory for every output artifact")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="key = value defaults; explicit flags override")
    p.add_argument("--embeddings", type=Path, help="word-vector table for records without precomputed text features")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_scorer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=_positive_int, default=20)
    p.add_argument("--batch-size", type=_positive_int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--hidden", type=_positive_int, default=8192)


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, help="surrogate weight (default: 0.5 for T+D/Q+T+D, else 0.1)")
    p.add_argument("--iterations", type=_positive_int, default=1000)
    p.add_argument("--k", type=_positive_int, default=500, help="discriminator steps per iteration")
    p.add_argument("--l", type=_positive_int, default=5, help="transform steps per iteration")
    p.add_argument("--adapt-batch-size", type=_positive_int, default=100)
    p.add_argument("--adapt-lr", type=float, default=1e-4)
    p.add_argument("--disc-lr", type=float)
    p.add_argument("--disc-hidden", type=_positive_int, default=8192)
    p.add_argument("--transform-hidden", type=_positive_int, default=128)
    p.add_argument("--decoys", choices=("all", "one"), default="all")
    p.add_argument("--no-weighted-sampling", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qa-adapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    p = sub.add_parser("gen-synth", help="generate a synthetic source/target pair")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", type=Path, help="TOML file with generator parameters")
    src.add_argument("--benchmark", choices=sorted(BENCHMARKS), help="built-in desk benchmark")
    p.set_defaults(seed=None)

    p = sub.add_parser("train-vqa", help="train a multiple-choice scorer")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset stem or .jsonl path")
    p.add_argument("--mode", type=_mode, default=InputMode.IQC)
    p.add_argument("--subsample", type=_fraction, default=1.0)
    _add_scorer_flags(p)

    p = sub.add_parser("train-probe", help="dataset-origin probe over component sets")
    _add_common(p)
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--components", default="I;Q;T;D;Q+T;I+Q+T+D", help="';'-separated component sets")
    p.add_argument("--sizes", default="40000,5000,20000")
    p.add_argument("--max-decoys", type=_positive_int, default=3)
    _add_scorer_flags(p)

    p = sub.add_parser("adapt", help="learn target feature transforms")
    _add_common(p)
    p.add_argument("--setting", type=_setting, required=True)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--scorer", type=Path, required=True, help="source IQC scorer checkpoint")
    p.add_argument("--partial-scorer", type=Path, help="QC/C source scorer; trained from --source when omitted")
    p.add_argument("--subsample", type=_fraction, default=1.0)
    _add_adapt_flags(p)

    p = sub.add_parser("eval", help="evaluate a scorer on a dataset split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--scorer", type=Path, required=True)
    p.add_argument("--transforms", type=Path)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--metric", default="mc", choices=("mc", "vqa10"))

    p = sub.add_parser("compare", help="Direct / DA / Within over seeds and settings")
    _add_common(p)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--scorer", type=Path, help="fixed source scorer; trained per seed when omitted")
    p.add_argument("--settings", type=_settings, default=[AdaptSetting.QTD])
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--subsample", type=_fraction, default=1.0)
    p.add_argument("--coral", action="store_true", help="add the CORAL baseline column")
    _add_scorer_flags(p)
    _add_adapt_flags(p)

    p = sub.add_parser("report", help="re-emit a comparison report")
    _add_common(p)
    p.add_argument("--input", type=Path, required=True, help="report JSON written by compare")
    p.add_argument("--format", choices=("csv", "json", "markdown"), action="append")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.exists():
        raise UsageError(f"config file not found: {args.config}")
    subparsers = parser._subparsers._group_actions[0].choices
    sub = subparsers[args.command]
    known = {a.dest: a for a in sub._actions}
    # one config file can serve a whole pipeline: keys that only other
    # commands understand are skipped, keys no command knows are errors
    elsewhere = {a.dest for p in subparsers.values() for a in p._actions}
    defaults = {}
    for lineno, raw in enumerate(args.config.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{args.config}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = {"lambda": "lam"}.get(key, key.replace("-", "_"))
        if dest not in known and dest in elsewhere:
            continue
        if dest not in known:
            raise UsageError(f"{args.config}:{lineno}: unknown key {key!r} for {args.command}")
        action = known[dest]
        try:
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[dest] = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}:{lineno}: {exc}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# helpers


def _open_dataset(path: Path, args) -> VqaDataset:
    """Load a dataset given its stem (``dir/name``) or its ``.jsonl`` path."""
    table = load_embedding_table(args.embeddings) if args.embeddings else None
    stem = path.name[: -len(".jsonl")] if path.name.endswith(".jsonl") else path.name
    jsonl = path.with_name(stem + ".jsonl")
    if not jsonl.exists():
        raise FileNotFoundError(f"dataset not found: {jsonl}")
    images = path.with_name(stem + ".images.qafv")
    text = path.with_name(stem + ".text.qafv")
    if not images.exists():
        raise FileNotFoundError(f"image features not found: {images}")
    if table is None and not text.exists():
        raise UsageError(f"{stem}: no precomputed text features; pass --embeddings")
    if images.exists() and text.exists():
        return load_saved_dataset(path.parent, stem, table)
    return load_dataset(jsonl, load_image_features(images), table,
                        load_text_features(text)[1] if text.exists() else None, name=stem)


def _scorer_cfg(args) -> ScorerTrainConfig:
    return ScorerTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                             hidden_dim=args.hidden)


def _adapt_cfg(args, setting: AdaptSetting) -> AdaptConfig:
    return AdaptConfig(
        setting=setting, lam=args.lam, iterations=args.iterations, k=args.k, l=args.l,
        batch_size=args.adapt_batch_size, lr=args.adapt_lr, disc_lr=args.disc_lr, seed=args.seed,
        weighted_sampling=not args.no_weighted_sampling, decoys=args.decoys,
        transform_hidden=args.transform_hidden, disc_hidden=args.disc_hidden,
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _workers() -> int:
    raw = os.environ.get("QA_ADAPT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"QA_ADAPT_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> None:
    try:
        if args.benchmark:
            spec = BENCHMARKS[args.benchmark](seed=0 if args.seed is None else args.seed)
        else:
            with open(args.spec, "rb") as fh:
                try:
                    raw = tomllib.load(fh)
                except tomllib.TOMLDecodeError as exc:
                    raise UsageError(f"{args.spec}: {exc}") from None
            if args.seed is not None:
                raw["seed"] = args.seed
            spec = spec_from_dict(raw)
        source, target = generate_synthetic_pair(spec)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    for ds in (source, target):
        save_dataset(ds, args.out_dir)
    _write_json(args.out_dir / "stats.json", {"source": dataset_stats(source), "target": dataset_stats(target)})


def cmd_train_vqa(args) -> None:
    ds = _open_dataset(args.data, args)
    if args.subsample < 1.0:
        ds = subsample(ds, args.subsample, args.seed)
    model = train_scorer(ds, args.mode, _scorer_cfg(args))
    save_scorer(args.out_dir / f"scorer_{args.mode.value}.ckpt", model)
    result = mc_accuracy(model, ds, "val", seed=args.seed) if ds["val"] else None
    _write_json(args.out_dir / f"scorer_{args.mode.value}.json",
                {"mode": args.mode.value, "dataset": ds.name, "config": asdict(model.config),
                 "val": result.as_dict() if result else None})


def cmd_train_probe(args) -> None:
    a, b = _open_dataset(args.a, args), _open_dataset(args.b, args)
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
        sets = [parse_components(s) for s in args.components.split(";") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(sizes) != 3:
        raise UsageError("--sizes needs three comma-separated integers (train,val,test)")
    cfg = ProbeConfig(hidden_dim=args.hidden, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      max_decoys=args.max_decoys)
    results = [run_probe(a, b, comps, sizes, args.seed, cfg) for comps in sets]
    (args.out_dir / "probe.csv").write_text(probe_table(results, "csv"))
    (args.out_dir / "probe.txt").write_text(probe_table(results, "text"))


def cmd_adapt(args) -> None:
    source, target = _open_dataset(args.source, args), _open_dataset(args.target, args)
    if args.subsample < 1.0:
        target = subsample(target, args.subsample, args.seed)
    m_sd = load_scorer(args.scorer)
    if m_sd.mode is not InputMode.IQC:
        raise UsageError(f"--scorer must be an IQC scorer, got {m_sd.mode.value}")
    setting = args.setting
    h_sd = None
    if setting.scorer_mode is not None:
        if args.partial_scorer:
            h_sd = load_scorer(args.partial_scorer)
        else:
            cfg = m_sd.config or ScorerTrainConfig(seed=args.seed)
            h_sd = train_scorer(source, setting.scorer_mode, cfg)
            save_scorer(args.out_dir / f"scorer_{setting.scorer_mode.value}.ckpt", h_sd)
    run = train_adaptation(source, target, m_sd, h_sd, _adapt_cfg(args, setting))
    save_run(run, args.out_dir, f"adapt_{setting.tag}")


def cmd_eval(args) -> None:
    ds = _open_dataset(args.data, args)
    model = load_scorer(args.scorer)
    gq = ga = None
    if args.transforms:
        gq, ga, _ = load_transforms(args.transforms)
    metric = mc_accuracy if args.metric == "mc" else vqa10_accuracy
    result = metric(model, ds, args.split, gq, ga, seed=args.seed)
    _write_json(args.out_dir / f"eval_{args.metric}_{args.split}.json", result.as_dict())


def cmd_compare(args) -> None:
    source, target = _open_dataset(args.source, args), _open_dataset(args.target, args)
    m_sd = load_scorer(args.scorer) if args.scorer else None
    settings = args.settings
    if not settings:
        raise UsageError("--settings needs at least one setting")
    lambdas = {s: (args.lam if args.lam is not None else s.default_lambda) for s in settings}
    report = run_comparison(
        source, target, settings, _adapt_cfg(args, settings[0]),
        seeds=list(range(args.seed, args.seed + args.seeds)), scorer_cfg=_scorer_cfg(args),
        fraction=args.subsample, lambdas=lambdas, with_coral=args.coral, workers=_workers(), m_sd=m_sd,
    )
    for fmt, name in (("json", "report.json"), ("csv", "report.csv"), ("markdown", "report.md")):
        emit_report(report, fmt, args.out_dir / name)


def cmd_report(args) -> None:
    try:
        report = ComparisonReport.from_json(args.input.read_text())
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.input}: not a comparison report ({exc})") from None
    if not report.rows:
        raise UsageError(f"{args.input}: report has no rows")
    names = {"csv": "report.csv", "json": "report.json", "markdown": "report.md"}
    for fmt in args.format or ("csv", "json", "markdown"):
        emit_report(report, fmt, args.out_dir / names[fmt])


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "train-vqa": cmd_train_vqa,
    "train-probe": cmd_train_probe,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "report": cmd_report,
}

USER_ERRORS = (UsageError, FileNotFoundError, DatasetError, FormatError)


def run_cli(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except USER_ERRORS as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
