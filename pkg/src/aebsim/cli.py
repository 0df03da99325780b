"""Command line entry point: ``aebsim run|sweep|compare|plot|replay``.

Exit codes: 0 when the batch completes and every requested acceptance check
passes (or, for replay, when the recomputed metrics match the stored ones);
1 when runs failed, a check failed or replay found a mismatch; 2 for unusable
input (bad config, unreadable trace, unwritable output directory).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, config_from_dict, config_to_dict, load_config
from .errors import ConfigurationError, TraceError
from .harness import (ALL, comparison_rows, read_records, read_trace, replay, require_trace, run_experiment,
                      summary_rows, _flatten, _write_csv, check_output_dir)

log = logging.getLogger("aebsim")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


# --------------------------------------------------------------------------
# helpers


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _resolve_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigurationError("a config file is required (-c/--config)")
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["root_seed"] = args.seed
    if args.verbosity is not None:
        over["verbosity"] = args.verbosity
    if args.parallelism is not None:
        over["parallelism"] = args.parallelism
    if args.output is not None:
        over["output_dir"] = args.output
    return dataclasses.replace(cfg, **over) if over else cfg


def _progress(enabled: bool):
    if not enabled:
        return None
    state = {"last": -1}

    def report(done: int, total: int) -> None:
        pct = int(100 * done / total)
        if pct // 10 != state["last"] // 10 or done == total:
            state["last"] = pct
            log.info("%d/%d runs (%d%%)", done, total, pct)
    return report


def _records_path(target) -> Path:
    p = Path(target)
    return p / "records.jsonl" if p.is_dir() else p


def _condition_order(out_dir: Path, records) -> List[str]:
    resolved = out_dir / "config.resolved.yaml"
    if resolved.exists():
        data = yaml.safe_load(resolved.read_text()) or {}
        return [c["label"] for c in data.get("conditions", [])]
    return list(dict.fromkeys(r.condition for r in records))


def _format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    def cell(v: Any) -> str:
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)
    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(x.ljust(w) for x, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _report_batch(res, out_dir) -> int:
    failed = [r for r in res.records if not r.ok]
    print(f"{len(res.records)} runs in {res.elapsed_s:.1f} s, {len(failed)} failed -> {out_dir}")
    for r in failed[:10]:
        print(f"  run {r.index} {r.family}/{r.condition} seed {r.seed}: {r.error}")
    for a in res.acceptance:
        print(a.line())
    return EXIT_OK if res.complete and res.accepted else EXIT_FAIL


# --------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    res = run_experiment(cfg, out, cfg.parallelism, charts=not args.no_charts, progress=_progress(args.verbose > 0))
    return _report_batch(res, out)


def set_path(data: dict, path: str, value: Any) -> dict:
    """Set a dotted path (list elements by index) in a nested config dict."""
    keys = path.split(".")
    node: Any = data
    for i, k in enumerate(keys[:-1]):
        if isinstance(node, list):
            node = node[int(k)]
        else:
            if k not in node or node[k] is None:
                node[k] = {}
            node = node[k]
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return data


def _sweep_values(args) -> List[Any]:
    if args.values:
        return [yaml.safe_load(v) for v in args.values]
    lo, hi, n = args.range
    return [float(x) for x in np.linspace(float(lo), float(hi), int(n))]


def cmd_sweep(args) -> int:
    base = _resolve_config(args)
    values = _sweep_values(args)
    if not values:
        raise ConfigurationError("sweep needs --values or --range")
    root = check_output_dir(base.output_dir)
    configs = []
    for v in values:  # validate every point before simulating any
        data = config_to_dict(base)
        try:
            set_path(data, args.param, v)
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"cannot set {args.param!r}: {exc}") from None
        slug = f"{args.param}={v}".replace("/", "_").replace(" ", "")
        configs.append((v, slug, dataclasses.replace(config_from_dict(data), output_dir=str(root / slug))))
    rows, code = [], EXIT_OK
    for v, slug, cfg in configs:
        print(f"== {args.param} = {v}")
        res = run_experiment(cfg, cfg.output_dir, cfg.parallelism, charts=not args.no_charts,
                             progress=_progress(args.verbose > 0))
        code = max(code, _report_batch(res, cfg.output_dir))
        passed = all(a.passed for a in res.acceptance)
        for r in summary_rows(res.records, [c.label for c in cfg.conditions]):
            if r["family"] == ALL:
                row = {"param": args.param, "value": v, "accepted": passed}
                row.update(_flatten(r))
                rows.append(row)
    _write_csv(rows, root / "sweep.csv")
    print(f"sweep table -> {root / 'sweep.csv'}")
    return code


def cmd_compare(args) -> int:
    path = _records_path(args.records or args.output or ".")
    if not path.exists():
        raise ConfigurationError(f"no records at {path}; run the experiment first")
    if len(args.labels) < 2:
        raise ConfigurationError("compare needs at least two condition labels")
    records = read_records(path)
    known = set(r.condition for r in records)
    missing = [c for c in args.labels if c not in known]
    if missing:
        raise ConfigurationError(f"conditions {missing} not in {path}; available: {sorted(known)}")
    rows = comparison_rows(records, args.labels)
    if args.family:
        rows = [r for r in rows if r["family"] in args.family]
    if args.metric:
        rows = [r for r in rows if r["metric"] in args.metric]
    cols = ["family", "metric", *args.labels, *(f"rel_{c}" for c in args.labels[1:])]
    print(_format_table(rows, cols))
    if args.csv:
        _write_csv(rows, args.csv)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_distributions, plot_rates, plot_trace
    if args.trace:
        dest = Path(args.chart or Path(args.trace).with_suffix(".svg"))
        plot_trace(read_trace(args.trace), dest)
        print(dest)
        return EXIT_OK
    out = Path(args.output or ".")
    path = _records_path(args.records or out)
    if not path.exists():
        raise ConfigurationError(f"no records at {path}; run the experiment first")
    records = read_records(path)
    labels = _condition_order(path.parent, records)
    rows = summary_rows(records, labels)
    check_output_dir(out)
    for p in (plot_rates(rows, labels, out / "rates.svg"), plot_distributions(records, labels, out / "distributions.svg")):
        print(p)
    return EXIT_OK


def _find_records(trace: Path) -> Optional[Path]:
    for parent in trace.resolve().parents:
        cand = parent / "records.jsonl"
        if cand.exists():
            return cand
    return None


def cmd_replay(args) -> int:
    if args.run is not None:
        out = Path(args.output or ".")
        recs = {r.index: r for r in read_records(_records_path(args.records or out))}
        if args.run not in recs:
            raise ConfigurationError(f"no run with index {args.run}")
        record = recs[args.run]
        trace_path = require_trace(record, out)
        result = replay(trace_path, record=record)
    else:
        if not args.trace:
            raise ConfigurationError("replay needs a trace file or --run INDEX")
        trace_path = Path(args.trace)
        rec_path = Path(args.records) if args.records else _find_records(trace_path)
        result = replay(trace_path, rec_path)
    m = result.metrics
    print(f"{trace_path}: collision={m.collision} eb_events={m.eb_event_count} false_eb={m.false_eb_count} "
          f"min_ttc={m.min_ttc_truth:.3f} peak_decel={m.peak_decel:.3f} peak_jerk={m.peak_jerk:.3f}")
    if args.chart:
        from .plots import plot_trace
        plot_trace(read_trace(trace_path), args.chart)
        print(f"chart -> {args.chart}")
    if result.stored is None:
        print("no stored record found; metrics recomputed only")
        return EXIT_OK
    if result.mismatches:
        print(f"MISMATCH in {', '.join(result.mismatches)}")
        return EXIT_FAIL
    print("metrics match the stored record")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="experiment config (YAML)")
    common.add_argument("-o", "--output", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="root seed override")
    common.add_argument("-j", "--parallelism", type=int, help="worker processes")
    common.add_argument("--verbosity", choices=("full", "metrics-only"),
                        help="full writes per-run traces; metrics-only keeps records only")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")

    p = argparse.ArgumentParser(prog="aebsim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"aebsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="execute a config")
    s.add_argument("--no-charts", action="store_true", help="skip SVG charts")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="vary one config parameter")
    s.add_argument("--param", required=True,
                   help="dotted path into the resolved config, e.g. params.aeb.ttc_threshold")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--values", nargs="+", help="explicit values (YAML scalars or lists)")
    g.add_argument("--range", nargs=3, metavar=("START", "STOP", "NUM"), help="evenly spaced values")
    s.add_argument("--no-charts", action="store_true", help="skip SVG charts")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare", parents=[common], help="tabulate conditions from stored records")
    s.add_argument("labels", nargs="+", help="two or more condition labels; the first is the reference")
    s.add_argument("--records", help="records.jsonl or its directory (default: the output dir)")
    s.add_argument("--family", action="append", help="restrict to a family (repeatable, ALL for pooled)")
    s.add_argument("--metric", action="append", help="restrict to a metric (repeatable)")
    s.add_argument("--csv", help="also write the table to this CSV file")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("plot", parents=[common], help="regenerate charts from stored records")
    s.add_argument("--records", help="records.jsonl or its directory (default: the output dir)")
    s.add_argument("--trace", help="render a single trace instead")
    s.add_argument("--chart", help="chart path for --trace")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("replay", parents=[common], help="recompute one run's metrics from its trace")
    s.add_argument("trace", nargs="?", help="trace CSV")
    s.add_argument("--run", type=int, help="plan index of the run in the output dir instead of a path")
    s.add_argument("--records", help="records.jsonl to compare against (default: searched upwards)")
    s.add_argument("--chart", help="also render the trace to this SVG")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (ConfigurationError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
