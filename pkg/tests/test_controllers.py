import math

import pytest
from hypothesis import given, strategies as st

from aebsim.controllers import (ACC, AEB, FALLBACK, AccConfig, AebConfig, ControlCommand, ControlStack,
                                SafeguardConfig, SAFEGUARDS_OFF, SAFEGUARDS_ON, acc_step, aeb_step, arbitrate,
                                guard_fallback, guard_persistence, guard_rate_limit, instability_metric, ttc)
from aebsim.dynamics import EgoState
from aebsim.errors import ConfigurationError
from aebsim.tracker import Track

EGO = EgoState(0.0, 0.0, 25.0)


def lead(g, v_rel, age=5, missed=0, tid=1):
    return Track(tid, g, v_rel, 0.0, age, missed)


@pytest.mark.parametrize("g, v, expected", [(12.0, 10.0, 1.2), (7.0, 10.0, 0.7)])
def test_ttc_values(g, v, expected):
    assert ttc(g, v) == pytest.approx(expected)


@pytest.mark.parametrize("v", [0.0, -3.0])
def test_ttc_not_closing_is_infinite(v):
    assert ttc(20.0, v) == math.inf


def test_aeb_boundary_is_strict():
    assert aeb_step(lead(12.0, 10.0), EGO, AebConfig()) is None


def test_aeb_demand_formula():
    cmd = aeb_step(lead(10.0, 10.0), EGO, AebConfig(d_margin=2.0))
    assert cmd.eb_active and cmd.source == AEB
    assert cmd.a_cmd == pytest.approx(-(10.0 ** 2) / (2 * (10.0 - 2.0)))  # -6.25


def test_aeb_demand_is_clamped():
    cfg = AebConfig()
    assert aeb_step(lead(6.0, 5.5), EGO, cfg).a_cmd == cfg.a_eb_floor  # 30.25/8 < 4
    assert aeb_step(lead(3.0, 30.0), EGO, cfg).a_cmd == cfg.a_hard


def test_aeb_without_primary():
    assert aeb_step(None, EGO, AebConfig()) is None


def test_acc_equilibria():
    cfg = AccConfig()
    v = 25.0
    follow = acc_step(lead(cfg.d0 + cfg.time_gap * v, 0.0), EgoState(0.0, 0.0, v), cfg, v_set=30.0)
    assert follow.a_cmd == pytest.approx(0.0)
    assert acc_step(None, EgoState(0.0, 0.0, 30.0), cfg, v_set=30.0).a_cmd == 0.0


def test_acc_clamps_to_lower_bound():
    cfg = AccConfig()
    raw = cfg.k_gap * (40.0 - (2.0 + 1.8 * 30.0)) - cfg.k_rel * 3.0
    assert raw == pytest.approx(-5.9)
    cmd = acc_step(lead(40.0, 3.0), EgoState(0.0, 0.0, 30.0), cfg, v_set=30.0)
    assert cmd.a_cmd == cfg.a_lo


def test_arbitration():
    out = arbitrate(ControlCommand(-1.0, ACC), ControlCommand(-6.25, AEB, True))
    assert (out.a_cmd, out.source, out.eb_active) == (-6.25, AEB, True)
    out = arbitrate(ControlCommand(0.5, ACC), None)
    assert (out.a_cmd, out.source, out.eb_active) == (0.5, ACC, False)
    out = arbitrate(ControlCommand(-7.0, ACC), ControlCommand(-6.0, AEB, True))
    assert out.a_cmd == -7.0 and out.eb_active


def test_persistence_gate():
    cfg = SafeguardConfig(persistence=True, persistence_frames=3)
    eb = ControlCommand(-6.0, AEB, True)
    assert guard_persistence(None, lead(10.0, 10.0), cfg) is None
    assert guard_persistence(eb, lead(10.0, 10.0, age=2), cfg) is None
    assert guard_persistence(eb, lead(10.0, 10.0, age=3), cfg) is eb


@pytest.mark.parametrize("prev, req, expected", [(-1.0, -8.0, -2.5), (-8.0, -8.0, -8.0), (-8.0, 0.0, -7.5)])
def test_rate_limiter(prev, req, expected):
    assert guard_rate_limit(prev, req, 0.1, SafeguardConfig()) == pytest.approx(expected)


def test_instability_metric():
    assert instability_metric([True] * 6 + [False] * 14, 20) == pytest.approx(0.3)
    assert instability_metric([False] * 20, 20) == 0.0
    assert instability_metric([True] * 20, 20) == 1.0
    assert instability_metric([True] * 30 + [False] * 20, 20) == 0.0  # only the last window counts


def test_fallback_caps_and_never_weakens_braking():
    cfg = SafeguardConfig(fallback=True, fallback_decel=-2.0, instability_threshold=0.3)
    out = guard_fallback(ControlCommand(0.5, ACC), 0.5, EGO, cfg)
    assert out.a_cmd <= -1.0 and out.source == FALLBACK
    same = ControlCommand(0.5, ACC)
    assert guard_fallback(same, 0.1, EGO, cfg) is same
    eb = ControlCommand(-6.0, AEB, True)
    assert guard_fallback(eb, 0.5, EGO, cfg).a_cmd == -6.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AebConfig(ttc_threshold=0.0)
    with pytest.raises(ConfigurationError):
        AebConfig(a_hard=-3.0, a_eb_floor=-4.0)
    with pytest.raises(ConfigurationError):
        AccConfig(time_gap=0.0)
    with pytest.raises(ConfigurationError):
        AccConfig(a_lo=1.0)
    with pytest.raises(ConfigurationError):
        SafeguardConfig(persistence_frames=0)
    with pytest.raises(ConfigurationError):
        SafeguardConfig(instability_threshold=1.0)


def test_aeb_latch_releases_with_hysteresis():
    stack = ControlStack(AebConfig(), AccConfig(), SAFEGUARDS_OFF)
    assert stack.step(lead(10.0, 10.0), EGO).command.eb_active  # ttc 1.0
    assert stack.step(lead(15.0, 10.0), EGO).command.eb_active  # 1.5 < 1.8 keeps the latch
    assert not stack.step(lead(19.0, 10.0), EGO).command.eb_active


frames = st.lists(
    st.one_of(st.none(), st.tuples(st.floats(0.5, 80.0), st.floats(-10.0, 30.0), st.integers(1, 6),
                                   st.integers(0, 1), st.integers(1, 3))),
    min_size=1, max_size=60)


def _run(stack, seq, v=20.0):
    for f in seq:
        p = None if f is None else lead(f[0], f[1], f[2], f[3], f[4])
        yield p, stack.step(p, EgoState(0.0, 0.0, v))


@given(frames, st.booleans(), st.booleans())
def test_persistence_property(seq, rate_limit, fallback):
    g = SafeguardConfig(persistence=True, rate_limit=rate_limit, fallback=fallback)
    stack = ControlStack(AebConfig(), AccConfig(), g)
    for p, out in _run(stack, seq):
        if out.command.eb_active:
            assert p is not None and p.age_frames >= g.persistence_frames


@given(frames, st.booleans(), st.booleans())
def test_rate_limit_property(seq, persistence, fallback):
    g = SafeguardConfig(rate_limit=True, persistence=persistence, fallback=fallback)
    stack = ControlStack(AebConfig(), AccConfig(), g)
    prev = 0.0
    for _, out in _run(stack, seq):
        a = out.command.a_cmd
        assert prev - g.jerk_limit_apply * 0.1 - 1e-12 <= a <= prev + g.jerk_limit_release * 0.1 + 1e-12
        prev = a


@given(frames, st.sampled_from([SAFEGUARDS_OFF, SAFEGUARDS_ON]))
def test_stack_output_invariants(seq, guards):
    stack = ControlStack(AebConfig(), AccConfig(), guards)
    for _, out in _run(stack, seq):
        c = out.command
        assert -9.0 <= c.a_cmd <= 2.5
        assert c.eb_active == (c.source == AEB)
