import dataclasses
import filecmp
import json

import pytest

from aebsim.config import config_from_dict
from aebsim.errors import ConfigurationError, SchemaVersionError, TraceError
from aebsim.harness import (ALL, RunRecord, check_output_dir, comparison_rows, derive_seed, execute, plan,
                            read_records, read_trace, replay, require_trace, run_experiment, summary_rows)
from aebsim.scenarios import FAMILIES

SMALL = config_from_dict({
    "name": "small",
    "root_seed": 99,
    "runs_per_family": 2,
    "families": ["HighwayFollowing", "CutIn"],
    "duration": 15.0,
    "verbosity": "full",
    "attacks": {"fp": {"kind": "false_positive", "start_t": [4, 8], "duration": [0.1, 0.25],
                       "phantom_gap": [6, 10], "phantom_rel_speed": [15, 20]}},
    "conditions": [{"label": "baseline"}, {"label": "fp", "attack": "fp"},
                   {"label": "fp+sg", "attack": "fp", "safeguards": "all"}],
    "acceptance": ["persistence_ablation"],
})


@pytest.fixture(scope="module")
def batch(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    return run_experiment(SMALL, out, parallelism=1), out


def test_plan_is_deterministic_and_condition_free():
    a, b = plan(SMALL), plan(SMALL)
    assert a == b
    assert len(a) == 2 * 2 * 3
    seeds = {}
    for d in a:
        seeds.setdefault((d.family, d.run_index), set()).add(d.seed)
    assert all(len(s) == 1 for s in seeds.values())
    assert [d.index for d in a] == list(range(len(a)))


def test_seed_derivation_is_stable_under_family_subsets():
    full = dataclasses.replace(SMALL, families=FAMILIES)
    sub = {(d.family, d.run_index): d.seed for d in plan(SMALL)}
    for d in plan(full):
        if (d.family, d.run_index) in sub:
            assert sub[(d.family, d.run_index)] == d.seed
    assert derive_seed(99, "CutIn", 0) != derive_seed(99, "CutIn", 1)
    assert derive_seed(99, "CutIn", 0) != derive_seed(98, "CutIn", 0)


def test_batch_completes_with_all_outputs(batch):
    res, out = batch
    assert res.complete
    for name in ("config.resolved.yaml", "records.jsonl", "summary.csv", "summary.json", "comparison.csv",
                 "acceptance.json", "rates.svg", "distributions.svg", "run.log"):
        assert (out / name).exists(), name
    assert len(res.acceptance) == 1
    assert json.loads((out / "summary.json").read_text())["failed_runs"] == []


def test_records_round_trip(batch):
    res, out = batch
    assert read_records(out / "records.jsonl") == res.records
    r = res.records[0]
    assert RunRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_every_run_has_a_trace_and_replays_identically(batch):
    res, out = batch
    for r in res.records:
        path = require_trace(r, out)
        rep = replay(path, out / "records.jsonl")
        assert rep.matches, (r.index, rep.mismatches)


def test_truth_files_identical_across_conditions(batch):
    _, out = batch
    for fam in ("HighwayFollowing", "CutIn"):
        for i in range(2):
            name = f"{fam}-{i:04d}.csv"
            assert filecmp.cmp(out / "truth/baseline" / name, out / "truth/fp" / name, shallow=False)
            assert filecmp.cmp(out / "truth/baseline" / name, out / "truth/fp+sg" / name, shallow=False)


def _copy_trace(batch, tmp_path, mutate):
    res, out = batch
    r = next(x for x in res.records if x.condition == "fp")
    text = require_trace(r, out).read_text()
    p = tmp_path / "t.csv"
    p.write_text(mutate(text))
    return p, r


def test_corrupted_row_is_flagged(batch, tmp_path):
    def corrupt(text):
        lines = text.splitlines()
        cells = lines[50].split(",")
        cells[3] = "-8.5"  # a_realized: fake hard braking
        lines[50] = ",".join(cells)
        return "\n".join(lines) + "\n"
    p, r = _copy_trace(batch, tmp_path, corrupt)
    rep = replay(p, record=r)
    assert not rep.matches
    assert "peak_decel" in rep.mismatches


def test_truncated_trace_is_a_hard_fault(batch, tmp_path):
    p, r = _copy_trace(batch, tmp_path, lambda t: "\n".join(t.splitlines()[:-5]) + "\n")
    with pytest.raises(TraceError, match="truncated"):
        replay(p, record=r)


def test_schema_mismatch_is_rejected(batch, tmp_path):
    p, r = _copy_trace(batch, tmp_path, lambda t: t.replace("aebsim-trace/1", "aebsim-trace/9", 1))
    with pytest.raises(SchemaVersionError):
        replay(p, record=r)


def test_garbage_trace(tmp_path):
    p = tmp_path / "junk.csv"
    p.write_text("hello\n")
    with pytest.raises(TraceError):
        read_trace(p)
    with pytest.raises(TraceError):
        read_trace(tmp_path / "missing.csv")


def test_metrics_only_record_refuses_replay(batch):
    res, out = batch
    r = dataclasses.replace(res.records[0], trace_file=None)
    with pytest.raises(TraceError, match="metrics-only"):
        require_trace(r, out)


def test_summary_rows_include_pooled_rows(batch):
    res, _ = batch
    rows = summary_rows(res.records, ["baseline", "fp", "fp+sg"])
    pooled = [r for r in rows if r["family"] == ALL]
    assert [r["condition"] for r in pooled] == ["baseline", "fp", "fp+sg"]
    assert all(r["runs"] == 4 for r in pooled)


def test_comparison_schema(batch):
    res, _ = batch
    rows = comparison_rows(res.records, ["baseline", "fp"])
    fams = {r["family"] for r in rows}
    assert fams == {"HighwayFollowing", "CutIn", ALL}
    for r in rows:
        assert set(r) == {"family", "metric", "baseline", "fp", "rel_fp"}
    metrics = [r["metric"] for r in rows if r["family"] == ALL]
    assert len(metrics) == len(set(metrics))


def test_baseline_only_chart(tmp_path):
    cfg = dataclasses.replace(SMALL, conditions=SMALL.conditions[:1], acceptance=(), verbosity="metrics-only",
                              runs_per_family=1)
    res = run_experiment(cfg, tmp_path)
    svg = (tmp_path / "rates.svg").read_text()
    assert res.complete and "<svg" in svg
    assert not (tmp_path / "traces").exists()


def test_parallelism_does_not_change_bytes(tmp_path):
    cfg = dataclasses.replace(SMALL, runs_per_family=1, verbosity="metrics-only", acceptance=())
    a, b = tmp_path / "p1", tmp_path / "p2"
    run_experiment(cfg, a, parallelism=1)
    run_experiment(cfg, b, parallelism=2)
    for name in ("records.jsonl", "summary.csv", "summary.json", "comparison.csv", "rates.svg", "distributions.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_failed_run_is_recorded_not_fatal(monkeypatch, tmp_path):
    import aebsim.harness as h

    real = h.simulate

    def flaky(spec, condition, params):
        if spec.family == "CutIn" and condition.label == "fp":
            raise RuntimeError("boom")
        return real(spec, condition, params)
    monkeypatch.setattr(h, "simulate", flaky)
    cfg = dataclasses.replace(SMALL, runs_per_family=1, verbosity="metrics-only", acceptance=())
    res = run_experiment(cfg, tmp_path)
    bad = [r for r in res.records if not r.ok]
    assert len(bad) == 1 and "boom" in bad[0].error
    assert not res.complete
    assert json.loads((tmp_path / "summary.json").read_text())["failed_runs"] == [bad[0].index]


def test_unwritable_output_dir_fails_fast(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigurationError, match="not writable"):
        check_output_dir(blocker / "sub")


def test_execute_rejects_bad_parallelism():
    with pytest.raises(ConfigurationError):
        execute(plan(SMALL)[:1], SMALL, parallelism=0)
