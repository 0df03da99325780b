import pytest

from aebsim.controllers import SAFEGUARDS_ON
from aebsim.errors import ConfigurationError
from aebsim.metrics import compute_run_metrics
from aebsim.scenarios import load_calibration, sample
from aebsim.sim import AttackPlan, Condition, SimParams, critical_time, simulate, truth_trajectory

QUIET_HIGHWAY = load_calibration({"HighwayFollowing": {"hazard_prob": 0.0}})
PHANTOM = AttackPlan("false_positive", "absolute", start_t=10.0, duration=0.2, phantom_gap=8.0,
                     phantom_rel_speed=20.0)
BLIND = AttackPlan("false_negative", "absolute", start_t=0.0, duration=100.0)


def test_scripted_phantom_gives_one_false_eb():
    spec = sample("HighwayFollowing", 4, 30.0, QUIET_HIGHWAY)
    m = compute_run_metrics(simulate(spec, Condition("fp", PHANTOM)))
    assert m.false_eb_count == 1 and m.eb_event_count == 1
    assert not m.collision


def test_baseline_quiet_highway_never_brakes_hard():
    spec = sample("HighwayFollowing", 4, 30.0, QUIET_HIGHWAY)
    m = compute_run_metrics(simulate(spec))
    assert m.eb_event_count == 0 and not m.collision


def test_blind_ego_hits_parked_car_and_trace_stops():
    spec = sample("ParkedVehicle", 1, 40.0)
    tr = simulate(spec, Condition("blind", BLIND))
    assert tr.meta["collision"] and tr.meta["end_reason"] == "collision"
    assert tr.meta["collision_t"] < 40.0
    assert tr.columns["t"][-1] <= tr.meta["collision_t"]
    m = compute_run_metrics(tr)
    assert m.collision and m.min_gap <= 0.0 and m.impact_speed > 0


def test_same_inputs_same_trace():
    spec = sample("CutIn", 9, 20.0)
    cond = Condition("fp", PHANTOM, SAFEGUARDS_ON)
    a, b = simulate(spec, cond), simulate(spec, cond)
    assert a.meta == b.meta
    assert a.columns == b.columns


def test_conditions_share_prefix_until_the_attack():
    spec = sample("HighwayFollowing", 4, 30.0, QUIET_HIGHWAY)
    base = simulate(spec).columns
    fp = simulate(spec, Condition("fp", PHANTOM)).columns
    k = 100  # attack starts at t = 10.0
    for col in ("s_front", "v", "a_cmd", "perceived_gap", "truth_gap"):
        assert base[col][:k] == fp[col][:k]


def test_truth_trajectory_ignores_condition():
    spec = sample("MultiVehicle", 3, 20.0)
    assert truth_trajectory(spec) == truth_trajectory(spec)
    assert len(truth_trajectory(spec)) == 3 * 201


def test_attack_resolution_is_seeded_and_on_grid():
    plan = AttackPlan("false_negative", "absolute", start_t=(5.0, 9.0), duration=(0.5, 0.8))
    a, b = plan.resolve(11, 0.0, 0.1), plan.resolve(11, 0.0, 0.1)
    assert a == b
    assert 5.0 <= a.start_t <= 9.0 and 0.5 <= a.duration <= 0.8
    assert abs(a.start_t * 10 - round(a.start_t * 10)) < 1e-9
    assert plan.resolve(12, 0.0, 0.1) != a


def test_safeguards_do_not_change_the_injection():
    spec = sample("HighwayFollowing", 21, 30.0)
    plan = AttackPlan("false_positive", "absolute", start_t=(8.0, 20.0), duration=(0.05, 0.25))
    a = simulate(spec, Condition("fp", plan)).meta
    b = simulate(spec, Condition("fp+sg", plan, SAFEGUARDS_ON)).meta
    assert (a["attack_start_t"], a["attack_duration"]) == (b["attack_start_t"], b["attack_duration"])


def test_critical_anchor_uses_twin_crossing():
    cal = load_calibration({"HighwayFollowing": {"hazard_prob": 1.0}})
    for seed in range(40):
        spec = sample("HighwayFollowing", seed, 40.0, cal)
        twin = simulate(spec)
        if any(x < 1.2 for x in twin.columns["truth_ttc"]):
            break
    t_crit = critical_time(twin, -1.0)
    plan = AttackPlan("false_negative", "critical", start_t=(-1.0, 0.0), duration=(0.5, 0.8))
    meta = simulate(spec, Condition("fn", plan)).meta
    assert t_crit - 1.0 - 1e-9 <= meta["attack_start_t"] <= t_crit + 1e-9


def test_bad_attack_plan():
    with pytest.raises(ConfigurationError):
        AttackPlan("false_negative", anchor="sometime")
    with pytest.raises(ConfigurationError):
        AttackPlan("false_negative", duration=(-1.0, 0.5))
    with pytest.raises(ConfigurationError):
        AttackPlan("flicker", pattern="morse")


def test_sim_params_validation():
    with pytest.raises(ConfigurationError):
        SimParams(frame_dt=0.1, dt_phys=0.03)
    with pytest.raises(ConfigurationError):
        SimParams(frame_dt=0.05)  # sensor and tracker still run at 10 Hz
