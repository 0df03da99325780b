"""Experiment orchestration: plan -> execute -> emit, plus trace replay.

Seeds come from ``SeedSequence(root_seed, spawn_key=(family ordinal, run
index))``. The condition never enters the derivation, so every condition sees
the same scenario draw and sensor noise for a given (family, index), and
adding a condition never perturbs the others. Family ordinals are the global
ones from ``scenarios.FAMILIES``, so subsetting families keeps seeds stable.

Runs are sealed tasks; results are merged by plan index, so the output bytes
do not depend on the parallelism degree or on completion order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing as mp
import time
import traceback
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, config_to_dict
from .errors import ConfigurationError, TraceError
from .metrics import (CONTINUOUS_FIELDS, RATE_FIELDS, TRACE_COLUMNS, TRACE_SCHEMA_VERSION, RunMetrics, Trace,
                      aggregate, compute_run_metrics, summarize_group)
from .scenarios import FAMILIES, load_calibration, sample
from .sim import simulate, truth_trajectory

log = logging.getLogger(__name__)

ALL = "ALL"
_INT_COLUMNS = {"eb_active", "track_id", "track_age", "track_missed", "attack_active"}
_STR_COLUMNS = {"source"}


# --------------------------------------------------------------------------
# planning


def derive_seed(root_seed: int, family: str, run_index: int) -> int:
    """64-bit scenario seed for (root_seed, family, run index); condition-free."""
    ss = np.random.SeedSequence(entropy=int(root_seed) & (2**64 - 1),
                                spawn_key=(FAMILIES.index(family), int(run_index)))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


@dataclass(frozen=True)
class RunDescriptor:
    index: int
    family: str
    run_index: int
    seed: int
    condition: str


def plan(cfg: ExperimentConfig) -> List[RunDescriptor]:
    """Families x run indices x conditions, in that nesting order."""
    out = []
    for fam in cfg.families:
        for i in range(cfg.runs_per_family):
            seed = derive_seed(cfg.root_seed, fam, i)
            for cond in cfg.conditions:
                out.append(RunDescriptor(len(out), fam, i, seed, cond.label))
    return out


# --------------------------------------------------------------------------
# records


def _enc(x: Any) -> Any:
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _enc(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_enc(v) for v in x]
    if isinstance(x, np.generic):
        return _enc(x.item())
    return x


def _dec(x: Any) -> Any:
    if x in ("inf", "-inf", "nan"):
        return float(x)
    if isinstance(x, dict):
        return {k: _dec(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_dec(v) for v in x]
    return x


@dataclass
class RunRecord:
    index: int
    family: str
    run_index: int
    seed: int
    condition: str
    metrics: Optional[RunMetrics]
    sampled_params: Dict[str, Any] = field(default_factory=dict)
    attack: Dict[str, Any] = field(default_factory=dict)
    end_reason: str = ""
    calibration_version: str = ""
    version: str = __version__
    error: Optional[str] = None
    trace_file: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.metrics is not None

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "index": self.index, "family": self.family, "run_index": self.run_index, "seed": self.seed,
            "condition": self.condition,
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "sampled_params": self.sampled_params, "attack": self.attack, "end_reason": self.end_reason,
            "calibration_version": self.calibration_version, "version": self.version,
            "error": self.error, "trace_file": self.trace_file,
        }
        return _enc(d)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunRecord":
        d = _dec(dict(d))
        m = d.pop("metrics")
        return cls(metrics=RunMetrics.from_dict(m) if m is not None else None, **d)


def write_records(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path) -> List[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# trace files


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_trace(trace: Trace, path) -> None:
    """``# schema_version`` line, ``# meta`` JSON line, then a CSV table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# schema_version: {trace.meta['schema_version']}\n")
    buf.write("# meta: " + json.dumps(_enc(trace.meta), sort_keys=True) + "\n")
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    cols = [trace.columns[c] for c in TRACE_COLUMNS]
    for row in zip(*cols):
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    path.write_text(buf.getvalue())


def read_trace(path) -> Trace:
    path = Path(path)
    if not path.exists():
        raise TraceError(f"no trace file at {path}")
    lines = path.read_text().splitlines()
    if len(lines) < 3 or not lines[0].startswith("# schema_version:") or not lines[1].startswith("# meta:"):
        raise TraceError(f"{path}: missing trace header")
    meta = _dec(json.loads(lines[1][len("# meta:"):]))
    version = lines[0].split(":", 1)[1].strip()
    meta["schema_version"] = version  # the first line is authoritative
    header = lines[2].split(",")
    if tuple(header) != TRACE_COLUMNS:
        raise TraceError(f"{path}: unexpected columns {header}")
    columns: Dict[str, list] = {c: [] for c in header}
    for ln, line in enumerate(lines[3:], start=4):
        parts = line.split(",")
        if len(parts) != len(header):
            raise TraceError(f"{path}:{ln}: expected {len(header)} fields, got {len(parts)}")
        for c, s in zip(header, parts):
            try:
                columns[c].append(s if c in _STR_COLUMNS else int(s) if c in _INT_COLUMNS else float(s))
            except ValueError:
                raise TraceError(f"{path}:{ln}: bad value {s!r} in column {c}") from None
    return Trace(meta, columns)


def write_truth(rows: Sequence[tuple], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write("t,object_id,kind,s,v,a,lane_offset\n")
    for r in rows:
        buf.write(",".join(_fmt(x) for x in r) + "\n")
    path.write_text(buf.getvalue())


def trace_relpath(d: RunDescriptor) -> str:
    return f"traces/{d.condition}/{d.family}-{d.run_index:04d}.csv"


def truth_relpath(d: RunDescriptor) -> str:
    return f"truth/{d.condition}/{d.family}-{d.run_index:04d}.csv"


# --------------------------------------------------------------------------
# execution

_WORKER: Dict[str, Any] = {}


def _init_worker(cfg: ExperimentConfig, out_dir: Optional[str]):
    _WORKER["cfg"] = cfg
    _WORKER["out"] = out_dir
    _WORKER["cal"] = load_calibration(cfg.calibration)


def _run_one(d: RunDescriptor) -> RunRecord:
    cfg: ExperimentConfig = _WORKER["cfg"]
    out_dir = _WORKER["out"]
    rec = RunRecord(d.index, d.family, d.run_index, d.seed, d.condition, None)
    try:
        spec = sample(d.family, d.seed, cfg.duration, _WORKER["cal"])
        rec.sampled_params = _enc(spec.sampled_params)
        rec.calibration_version = spec.calibration_version
        trace = simulate(spec, cfg.condition(d.condition), cfg.params)
        rec.metrics = compute_run_metrics(trace)
        rec.end_reason = trace.meta["end_reason"]
        rec.attack = {"kind": trace.meta["attack_kind"], "start_t": trace.meta["attack_start_t"],
                      "duration": trace.meta["attack_duration"]}
        if out_dir is not None and cfg.verbosity == "full":
            rel = trace_relpath(d)
            write_trace(trace, Path(out_dir) / rel)
            write_truth(truth_trajectory(spec, cfg.params.frame_dt), Path(out_dir) / truth_relpath(d))
            rec.trace_file = rel
    except Exception as exc:  # a faulty run is recorded, never fatal to the batch
        rec.metrics = None
        rec.error = f"{type(exc).__name__}: {exc}"
        log.debug("run %d failed:\n%s", d.index, traceback.format_exc())
    return rec


def execute(descriptors: Sequence[RunDescriptor], cfg: ExperimentConfig, parallelism: Optional[int] = None,
            out_dir=None, progress=None) -> List[RunRecord]:
    """Simulate every descriptor; the result is ordered by plan index."""
    jobs = cfg.parallelism if parallelism is None else int(parallelism)
    if jobs < 1:
        raise ConfigurationError("parallelism must be >= 1")
    out = str(out_dir) if out_dir is not None else None
    results: List[RunRecord] = []
    if jobs == 1 or len(descriptors) <= 1:
        _init_worker(cfg, out)
        for d in descriptors:
            results.append(_run_one(d))
            if progress:
                progress(len(results), len(descriptors))
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        chunk = max(1, min(64, len(descriptors) // (jobs * 8) or 1))
        with ctx.Pool(jobs, initializer=_init_worker, initargs=(cfg, out)) as pool:
            for rec in pool.imap_unordered(_run_one, descriptors, chunksize=chunk):
                results.append(rec)
                if progress:
                    progress(len(results), len(descriptors))
    results.sort(key=lambda r: r.index)
    return results


# --------------------------------------------------------------------------
# aggregation and output


def group_metrics(records: Iterable[RunRecord]) -> "OrderedDict[Tuple[str, str], List[RunMetrics]]":
    groups: "OrderedDict[Tuple[str, str], List[RunMetrics]]" = OrderedDict()
    for r in records:
        if r.ok:
            groups.setdefault((r.family, r.condition), []).append(r.metrics)
    return groups


def summary_rows(records: Sequence[RunRecord], conditions: Optional[Sequence[str]] = None) -> List[Dict[str, Any]]:
    """Per (family, condition) rows plus one pooled ``ALL`` row per condition."""
    groups = group_metrics(records)
    rows = aggregate(groups)
    labels = list(conditions) if conditions else sorted({c for _, c in groups})
    for lab in labels:
        pooled = [m for (f, c), ms in groups.items() if c == lab for m in ms]
        if pooled:
            row = {"family": ALL, "condition": lab}
            row.update(summarize_group(pooled))
            rows.append(row)
    return rows


def _flatten(row: Mapping[str, Any]) -> Dict[str, Any]:
    flat = {}
    for k, v in row.items():
        if isinstance(v, Mapping):
            for kk, vv in v.items():
                flat[f"{k}_{kk}"] = vv
        else:
            flat[k] = v
    return flat


def _write_csv(rows: Sequence[Mapping[str, Any]], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r.get(k) is None else _fmt(r.get(k)) for k in keys])


COMPARE_METRICS = tuple(f"{k}_rate" for k in RATE_FIELDS) + ("false_eb_episodes",) + \
    tuple(f"{k}_mean" for k in CONTINUOUS_FIELDS)


def comparison_rows(records: Sequence[RunRecord], conditions: Sequence[str]) -> List[Dict[str, Any]]:
    """One row per (family, metric): a column per condition plus the relative
    change of each later condition against the first."""
    if len(conditions) < 1:
        raise ConfigurationError("comparison needs at least one condition")
    flat = {(r["family"], r["condition"]): _flatten(r) for r in summary_rows(records, conditions)}
    families = [f for f in dict.fromkeys(r.family for r in records)] + [ALL]
    ref = conditions[0]
    out = []
    for fam in families:
        for metric in COMPARE_METRICS:
            row: Dict[str, Any] = {"family": fam, "metric": metric}
            for c in conditions:
                row[c] = flat.get((fam, c), {}).get(metric)
            base = row[ref]
            for c in conditions[1:]:
                v = row[c]
                if base is None or v is None or base == 0:
                    row[f"rel_{c}"] = None
                else:
                    row[f"rel_{c}"] = (v - base) / abs(base)
            out.append(row)
    return out


def check_output_dir(out_dir) -> Path:
    """Fail fast on an unwritable output path, before any simulation."""
    p = Path(out_dir)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_text("ok")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {p} is not writable: {exc}") from None
    return p


def emit_outputs(records: Sequence[RunRecord], cfg: ExperimentConfig, out_dir,
                 acceptance: Optional[Sequence[Any]] = None, charts: bool = True) -> Dict[str, Path]:
    if not records:
        raise ConfigurationError("no run records to emit")
    out = check_output_dir(out_dir)
    labels = [c.label for c in cfg.conditions]
    paths = {
        "config": out / "config.resolved.yaml",
        "records": out / "records.jsonl",
        "summary_csv": out / "summary.csv",
        "summary_json": out / "summary.json",
        "comparison": out / "comparison.csv",
    }
    paths["config"].write_text(yaml.safe_dump(_enc(config_to_dict(cfg)), sort_keys=True))
    write_records(records, paths["records"])
    rows = summary_rows(records, labels)
    _write_csv([_flatten(r) for r in rows], paths["summary_csv"])
    failed = [r.index for r in records if not r.ok]
    summary = {"name": cfg.name, "root_seed": cfg.root_seed, "version": __version__,
               "runs": len(records), "failed_runs": failed, "groups": _enc(rows)}
    paths["summary_json"].write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _write_csv(comparison_rows(records, labels), paths["comparison"])
    if acceptance is not None:
        paths["acceptance"] = out / "acceptance.json"
        paths["acceptance"].write_text(json.dumps(_enc([a.to_dict() for a in acceptance]), indent=1,
                                                  sort_keys=True) + "\n")
    if charts:
        from .plots import plot_distributions, plot_rates
        paths["rates_chart"] = plot_rates(rows, labels, out / "rates.svg")
        paths["distribution_chart"] = plot_distributions(records, labels, out / "distributions.svg")
    return paths


def write_sidecar_log(out_dir, lines: Sequence[str]) -> None:
    """Timestamps live here and only here."""
    with open(Path(out_dir) / "run.log", "a") as fh:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        for ln in lines:
            fh.write(f"{stamp} {ln}\n")


@dataclass
class BatchResult:
    records: List[RunRecord]
    paths: Dict[str, Path]
    acceptance: List[Any]
    elapsed_s: float

    @property
    def complete(self) -> bool:
        return all(r.ok for r in self.records)

    @property
    def accepted(self) -> bool:
        return all(a.passed for a in self.acceptance)


def run_experiment(cfg: ExperimentConfig, out_dir=None, parallelism: Optional[int] = None,
                   charts: bool = True, progress=None) -> BatchResult:
    """Plan, execute, evaluate requested acceptance checks, and write everything."""
    from .acceptance import evaluate
    out = check_output_dir(out_dir if out_dir is not None else cfg.output_dir)
    t0 = time.perf_counter()
    descriptors = plan(cfg)
    records = execute(descriptors, cfg, parallelism, out, progress)
    results = evaluate(cfg.acceptance, records) if cfg.acceptance else []
    paths = emit_outputs(records, cfg, out, results if cfg.acceptance else None, charts)
    elapsed = time.perf_counter() - t0
    write_sidecar_log(out, [f"{cfg.name}: {len(records)} runs, {sum(not r.ok for r in records)} failed, "
                            f"{elapsed:.1f} s, parallelism {parallelism or cfg.parallelism}"]
                      + [a.line() for a in results])
    return BatchResult(records, paths, results, elapsed)


# --------------------------------------------------------------------------
# replay


@dataclass
class ReplayResult:
    metrics: RunMetrics
    stored: Optional[RunMetrics]
    mismatches: List[str]

    @property
    def matches(self) -> bool:
        return self.stored is not None and not self.mismatches


def _same(a: Any, b: Any) -> bool:
    if isinstance(a, float) and isinstance(b, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return a == b


def diff_metrics(a: RunMetrics, b: RunMetrics) -> List[str]:
    da, db = a.to_dict(), b.to_dict()
    return [k for k in da if not _same(da[k], db[k])]


def replay(trace_path, records_path=None, record: Optional[RunRecord] = None) -> ReplayResult:
    """Recompute metrics from a stored trace and compare with its stored record.

    The record is looked up in ``records_path`` by trace file name when not
    given directly.
    """
    trace = read_trace(trace_path)
    metrics = compute_run_metrics(trace)
    stored = record
    if stored is None and records_path is not None:
        name = Path(trace_path).as_posix()
        for r in read_records(records_path):
            if r.trace_file and name.endswith(r.trace_file):
                stored = r
                break
        if stored is None:
            raise TraceError(f"no record in {records_path} refers to {trace_path}")
    if stored is not None and stored.metrics is None:
        raise TraceError(f"stored record {stored.index} has no metrics ({stored.error})")
    mism = diff_metrics(metrics, stored.metrics) if stored is not None else []
    return ReplayResult(metrics, stored.metrics if stored is not None else None, mism)


def require_trace(record: RunRecord, out_dir) -> Path:
    if not record.trace_file:
        raise TraceError(f"run {record.index} ({record.family}/{record.condition}) was stored metrics-only; "
                         "re-run with verbosity: full to get a trace to replay")
    return Path(out_dir) / record.trace_file
