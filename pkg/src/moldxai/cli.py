"""Command-line entry point.

    moldxai generate  --out data/
    moldxai train     --data data/ --out models/seed0.npz --seed 0
    moldxai explain   --data data/ --model models/seed0.npz --out explain/seed0
    moldxai reduce    --runs explain/seed* --out reduce/
    moldxai benchmark --data data/ --feature-sets reduce/feature_set_*.json --out bench/
    moldxai run       --out work/          (all of the above, end to end)

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .attribution import METHODS
from .benchmark import emit_report, format_tables
from .config import PROFILES, load_config
from .errors import ConfigError, DataError, MoldXAIError
from .lstm import evaluate, load_model, save_model

log = logging.getLogger("moldxai")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_set(items) -> dict:
    """--set section.key=value (value parsed as JSON when possible)."""
    out = {}
    for item in items or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _config(args):
    return load_config(args.config, args.profile, _parse_set(args.set))


def cmd_generate(args) -> int:
    cfg = _config(args)
    ds = pl.generate(cfg)
    pl.write_dataset(cfg, ds, args.out)
    n_val = sum(c.fold == "val" for c in ds.cycles)
    print(f"wrote {len(ds)} cycles ({len(ds) - n_val} train / {n_val} val) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = pl.load_splits(args.data)
    pl.check_fingerprint(cfg, splits.fingerprint, f"dataset {args.data}")
    subset = None
    if args.features:
        subset = pl.read_feature_set(args.features)["features"]
    seed = args.seed if args.seed is not None else cfg.train.seed
    model, history = pl.train_model(cfg, splits, seed, subset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    m = evaluate(model, pl.restrict(splits.val.X, model.feature_subset), splits.val.y,
                 cfg.train.positive_label)
    hist_path = out.with_suffix(".history.json")
    hist_path.write_text(json.dumps({"config_fingerprint": cfg.fingerprint(), "seed": seed,
                                     "feature_subset": model.feature_subset,
                                     "history": history, "final": m.as_dict()}, indent=1))
    print(f"seed {seed}: val accuracy {m.accuracy:.4f}, F1 {m.f1:.4f}; model -> {out}")
    return EXIT_OK


def _methods(text) -> list:
    if text in (None, "all"):
        return list(METHODS)
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; valid names: {', '.join(METHODS)}, all")
    return methods


def cmd_explain(args) -> int:
    cfg = _config(args)
    methods = _methods(args.methods)
    splits = pl.load_splits(args.data)
    pl.check_fingerprint(cfg, splits.fingerprint, f"dataset {args.data}")
    model = load_model(args.model)
    cycles = args.cycles.split(",") if args.cycles else None
    run = pl.explain_run(cfg, model, splits, methods, cycles)
    pl.write_explanation(cfg, run, model, args.out, svg=args.svg)
    for m in methods:
        top = run.top_k(cfg.aggregation.k, model.feature_subset)[m]
        print(f"{m:8s} top-{cfg.aggregation.k}: {[splits.feature_names[f] for f in top]}")
    return EXIT_OK


def cmd_reduce(args) -> int:
    cfg = _config(args)
    summaries = [pl.read_explanation(d) for d in args.runs]
    for d, s in zip(args.runs, summaries):
        pl.check_fingerprint(cfg, s.get("config_fingerprint"), f"attribution run {d}")
    names = summaries[0]["feature_names"] if summaries else None
    if names is None:
        raise DataError("no attribution runs given")
    if any(s["feature_names"] != names for s in summaries):
        raise DataError("attribution runs disagree on feature names")
    red = pl.reduce_runs(cfg, summaries, names)
    paths = pl.write_reduction(cfg, red, args.out)
    from .aggregation import format_vote_table
    print(format_vote_table(red.table, red.ranking, max(cfg.aggregation.sizes)), end="")
    for p in paths:
        print(f"feature set -> {p}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    splits = pl.load_splits(args.data)
    pl.check_fingerprint(cfg, splits.fingerprint, f"dataset {args.data}")
    F = splits.train.schema.n_channels
    sets = {} if args.no_full else {f"{F} Features": list(range(F))}
    for path in args.feature_sets or []:
        fs = pl.read_feature_set(path)
        pl.check_fingerprint(cfg, fs.get("config_fingerprint"), f"feature set {path}")
        sets[fs.get("name", Path(path).stem)] = sorted(fs["features"])
    if not sets:
        raise ConfigError("no feature sets to benchmark")
    report = pl.benchmark(cfg, splits, sets)
    has_data = emit_report(report, args.out)
    print(format_tables(report), end="")
    if not has_data:
        print("no run data", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = pl.run_all(cfg, args.out)
    print(format_tables(out["report"]), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moldxai", description="LSTM quality classification, attribution-driven "
                "feature reduction and inference benchmarking for molding-cycle time series.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON config file (sections: dataset, "
                        "train, attribution, aggregation, benchmark)")
        sp.add_argument("--profile", choices=sorted(PROFILES), help="preset (default desk)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")

    sp = sub.add_parser("generate", help="synthetic dataset with train/val folds")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="model file (.npz)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--features", type=Path, help="feature-set JSON from reduce")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("explain", help="attribution maps for validation cycles")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--methods", default="all", help=f"comma list of {', '.join(METHODS)} or all")
    sp.add_argument("--cycles", help="comma list of validation cycle ids (default per config)")
    sp.add_argument("--svg", action="store_true", help="also render mean heatmaps as SVG")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("reduce", help="vote table, ranking and reduced feature sets")
    common(sp)
    sp.add_argument("--runs", type=Path, nargs="+", required=True, help="explain output dirs")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_reduce)

    sp = sub.add_parser("benchmark", help="retrain per feature set, accuracy/F1/latency report")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--feature-sets", type=Path, nargs="*")
    sp.add_argument("--no-full", action="store_true", help="skip the all-channel model")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("run", help="whole pipeline end to end")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MoldXAIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
