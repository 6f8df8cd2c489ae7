"""Command-line entry point: ``fetch``, ``train``, ``grid``, ``report``, ``gradcheck``.

Exit codes: 0 success, 1 failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import DATASETS, DatasetMissingError, FormatError, resolve_data_dir
from .fetch import fetch
from .gradcheck import TOLERANCE, run_gradcheck
from .report import build_report, render_markdown
from .train import PAPER_MS, PAPER_SEEDS, PAPER_VARIANTS, RunRecord, TrainConfig, grid_configs, load_records, run_grid, train_one

log = logging.getLogger("kwta_ensemble")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

PRESETS = {
    "paper": {
        "epochs": 20,
        "batch_size": 100,
        "hidden_dim": 100,
        "k_frac": 0.75,
        "lr_start": 1e-1,
        "lr_end": 1e-4,
        "momentum": 0.9,
        "weight_decay": 1e-5,
    },
}
# flag attribute -> TrainConfig field
_FLAG_FIELDS = {
    "dataset": "dataset",
    "family": "family",
    "M": "M",
    "d": "d",
    "k_frac": "k_frac",
    "member_output": "member_output",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "hidden": "hidden_dim",
    "seed": "seed",
    "schedule": "schedule",
    "train_limit": "train_limit",
}


class UsageError(Exception):
    pass


def _coerce(field: str, raw: str):
    default = TrainConfig.__dataclass_fields__[field].default
    if field == "train_limit":
        return None if raw.lower() in ("none", "") else int(raw)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"{field} expects a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def resolve_config(args) -> tuple[TrainConfig, dict]:
    """defaults < preset < config file < --set overrides < explicit flags."""
    values: dict = {}
    sources: dict = {}

    def apply(mapping, source):
        for k, v in mapping.items():
            if k not in TrainConfig.field_names():
                raise UsageError(f"unknown config key {k!r} (from {source})")
            values[k] = v
            sources[k] = source

    if getattr(args, "preset", None):
        apply(PRESETS[args.preset], f"preset {args.preset}")
    if getattr(args, "config", None):
        apply(json.loads(Path(args.config).read_text()), str(args.config))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in TrainConfig.field_names():
            raise UsageError(f"unknown config key {key!r} in --set")
        try:
            overrides[key] = _coerce(key, raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    apply(overrides, "--set")
    flags = {field: getattr(args, attr) for attr, field in _FLAG_FIELDS.items() if getattr(args, attr, None) is not None}
    if getattr(args, "split_first", False):
        flags["split_first"] = True
    if getattr(args, "reload_each_epoch", False):
        flags["reload_each_epoch"] = True
    apply(flags, "flag")
    try:
        cfg = TrainConfig.from_dict(values)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, sources


def _print_config(cfg: TrainConfig, sources: dict):
    print("effective config:", file=sys.stderr)
    for k, v in cfg.to_dict().items():
        print(f"  {k} = {v!r}  [{sources.get(k, 'default')}]", file=sys.stderr)


def _summary_line(rec: RunRecord, reused: bool = False) -> str:
    c = rec.config
    acc = "failed" if rec.test_accuracy is None else f"{rec.test_accuracy:.4f}"
    tail = " (existing)" if reused else ""
    return (
        f"{c.dataset}\t{c.family}\tM={c.M}\td={c.d}\tseed={c.seed}\t"
        f"test_acc={acc}\twall={rec.wall_time:.2f}s{tail}"
    )


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", choices=sorted(DATASETS))
    p.add_argument("--family", choices=["independent", "cooperative", "moe", "kwta"])
    p.add_argument("--M", type=int, help="number of sub-networks")
    p.add_argument("--d", type=int, help="competition delay in epochs (kwta only)")
    p.add_argument("--k-frac", dest="k_frac", type=float)
    p.add_argument("--member-output", dest="member_output", choices=["probs", "logits"],
                   help="what each member feeds the kwta combiner")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--hidden", type=int, help="hidden units per sub-network")
    p.add_argument("--schedule", choices=["exponential", "linear"])
    p.add_argument("--train-limit", dest="train_limit", type=int, help="cap on the training pool size")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--split-first", action="store_true", help="split WDBC before oversampling the training part")
    p.add_argument("--reload-each-epoch", action="store_true", help="reload the best checkpoint after every epoch")
    p.add_argument("--data-dir")
    p.add_argument("--out-dir", default="runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kwta-ensemble", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download and verify datasets")
    p.add_argument("datasets", nargs="*", metavar="DATASET", help=f"any of {', '.join(sorted(DATASETS))} (default: all)")
    p.add_argument("--data-dir")

    p = sub.add_parser("train", help="train one configuration")
    _add_train_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--save-model", help="write the best-validation model checkpoint here")

    p = sub.add_parser("grid", help="train a grid of configurations (resumable)")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--seeds", default=None, help="'all' for the ten paper seeds, or a comma list")
    p.add_argument("--Ms", default=None, help="comma list of sub-network counts")
    p.add_argument("--variants", default=None, help="'paper' or comma list of family:d")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="summarise run records")
    p.add_argument("records_dir", nargs="?", default="runs")
    p.add_argument("--grouping", default="paper", help="'paper', 'all' or comma list of family:d")
    p.add_argument("--sample-std", action="store_true", help="use the n-1 divisor for STD")
    p.add_argument("--out", default=None, help="output prefix for .md and .json (default: <records_dir>/report)")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _parse_variants(spec: str | None, preset: str | None, family: str | None, d: int | None):
    if spec == "paper" or (spec is None and preset == "paper" and family is None):
        return list(PAPER_VARIANTS)
    if spec is None:
        return [(family or "kwta", d or 0)]
    out = []
    for item in spec.split(","):
        fam, _, dd = item.strip().partition(":")
        out.append((fam, int(dd or 0)))
    return out


def cmd_fetch(args) -> int:
    data_dir = resolve_data_dir(args.data_dir)
    names = args.datasets or sorted(DATASETS)
    unknown = [n for n in names if n not in DATASETS]
    if unknown:
        raise UsageError(f"unknown dataset(s) {unknown}; choose from {sorted(DATASETS)}")
    results = fetch(names, data_dir)
    for r in results:
        print(f"{r.dataset}\t{r.filename}\t{r.status}\t{r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILURE


def cmd_train(args) -> int:
    cfg, sources = resolve_config(args)
    _print_config(cfg, sources)
    rec = train_one(cfg, data_dir=resolve_data_dir(args.data_dir), checkpoint_path=args.save_model)
    path = rec.save(args.out_dir)
    print(_summary_line(rec))
    log.info("wrote %s", path)
    if rec.status != "ok":
        print(f"run failed: {rec.error}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg, sources = resolve_config(args)
    _print_config(cfg, sources)
    if args.seeds == "all" or (args.seeds is None and args.preset == "paper"):
        seeds = list(PAPER_SEEDS)
    elif args.seeds is None:
        seeds = [cfg.seed]
    else:
        seeds = [int(s) for s in args.seeds.split(",")]
    if args.Ms is not None:
        Ms = [int(m) for m in args.Ms.split(",")]
    elif args.preset == "paper" and args.M is None:
        Ms = list(PAPER_MS)
    else:
        Ms = [cfg.M]
    try:
        variants = _parse_variants(args.variants, args.preset, args.family, args.d)
        configs = grid_configs(cfg, variants, Ms, seeds)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    print(f"grid: {len(configs)} runs", file=sys.stderr)

    def on_record(rec, reused):
        print(_summary_line(rec, reused), flush=True)

    records = run_grid(configs, args.out_dir, data_dir=resolve_data_dir(args.data_dir), jobs=args.jobs, on_record=on_record)
    failed = [r for r in records if r.status != "ok"]
    if failed:
        print(f"{len(failed)} of {len(records)} runs failed", file=sys.stderr)
    return EXIT_FAILURE if records and len(failed) == len(records) else EXIT_OK


def cmd_report(args) -> int:
    records_dir = Path(args.records_dir)
    records = load_records(records_dir) if records_dir.is_dir() else []
    if not records:
        print(f"no records in {records_dir}", file=sys.stderr)
        return EXIT_FAILURE
    report = build_report(records, grouping=args.grouping, sample_std=args.sample_std)
    prefix = Path(args.out) if args.out else records_dir / "report"
    md = render_markdown(report)
    prefix.with_suffix(".json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    prefix.with_suffix(".md").write_text(md)
    print(md, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        where = f" worst at {r.worst_block}{list(r.worst_index)}" if r.worst_block else ""
        print(f"{status}\t{r.label}\tmax_rel_err={r.max_rel_err:.3e}\t({r.n_checked} entries){where}")
    ok = all(r.passed for r in results)
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_FAILURE


COMMANDS = {
    "fetch": cmd_fetch,
    "train": cmd_train,
    "grid": cmd_grid,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetMissingError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
