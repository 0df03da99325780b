import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aebsim.dynamics import EgoState, TrafficObject, WorldState
from aebsim.errors import ConfigurationError
from aebsim.perception import (AttackSpec, Detection, NoiseTape, SensorConfig, apply_attack,
                               curvature_bias_multiplier, effective_bias_factor, lead_object, sense)

QUIET = SensorConfig(range_noise_sigma=0.0, base_drop_prob=0.0, lane_noise_sigma=0.0, length_noise_sigma=0.0)


def world(*objs, v=20.0):
    return WorldState(0.0, EgoState(0.0, 0.0, v), list(objs))


def test_noiseless_pass_through():
    dets = sense(world(TrafficObject(1, 50.0, 20.0)), QUIET, np.random.default_rng(0))
    assert len(dets) == 1
    assert dets[0].perceived_gap == 50.0
    assert dets[0].perceived_lane_offset == 0.0


def test_range_gate():
    assert sense(world(TrafficObject(1, 200.0, 20.0)), QUIET, np.random.default_rng(0)) == []


def test_object_behind_is_not_detected():
    assert sense(world(TrafficObject(1, -20.0, 20.0)), QUIET, np.random.default_rng(0)) == []


def test_detections_are_anonymous():
    det = sense(world(TrafficObject(1, 50.0, 20.0)), QUIET, np.random.default_rng(0))[0]
    assert not hasattr(det, "id") and not hasattr(det, "object_id")


def test_noise_tape_is_keyed_by_object_and_frame():
    a = NoiseTape(11, [1, 2, 3], 50)
    b = NoiseTape(11, [1, 2, 3], 50)
    assert a.draw(2, 17) == b.draw(2, 17)
    assert a.draw(2, 17) != a.draw(2, 18)
    assert NoiseTape(12, [1, 2, 3], 50).draw(2, 17) != a.draw(2, 17)


def test_sensor_config_validation():
    with pytest.raises(ConfigurationError):
        SensorConfig(range_max=0.0)
    with pytest.raises(ConfigurationError):
        SensorConfig(range_noise_sigma=-1.0)
    with pytest.raises(ConfigurationError):
        SensorConfig(base_drop_prob=1.0)


def test_attack_spec_validation():
    with pytest.raises(ConfigurationError):
        AttackSpec("jamming")
    with pytest.raises(ConfigurationError):
        AttackSpec("false_negative", duration=-1.0)
    with pytest.raises(ConfigurationError):
        AttackSpec("distance_bias", factor=0.0)
    with pytest.raises(ConfigurationError):
        AttackSpec("flicker", drop_prob=1.5)


def _dets(*gaps):
    return [Detection(g, 0.0, 4.5, 0.95, 0) for g in gaps]


def test_no_attack_is_identity():
    d = _dets(30.0, 60.0)
    assert apply_attack(d, world(), AttackSpec(), 1.0, 10) == d


def test_false_negative_removes_lead_only():
    w = world(TrafficObject(1, 30.0, 20.0), TrafficObject(2, 60.0, 20.0))
    out = apply_attack(_dets(30.0, 60.0), w, AttackSpec("false_negative", 0.5, 1.0), 1.0, 10)
    assert [d.perceived_gap for d in out] == [60.0]


def test_false_negative_inactive_outside_window():
    w = world(TrafficObject(1, 30.0, 20.0))
    d = _dets(30.0)
    assert apply_attack(d, w, AttackSpec("false_negative", 0.5, 1.0), 1.5, 15) == d
    assert apply_attack(d, w, AttackSpec("false_negative", 0.5, 1.0), 0.4, 4) == d


def test_false_positive_adds_closing_phantom():
    spec = AttackSpec("false_positive", 1.0, 0.5, phantom_gap=10.0, phantom_rel_speed=20.0)
    out = apply_attack([], world(), spec, 1.2, 12)
    assert len(out) == 1
    assert out[0].perceived_gap == pytest.approx(10.0 - 20.0 * 0.2)
    assert out[0].perceived_lane_offset == 0.0


def test_distance_bias_scales_every_detection():
    out = apply_attack(_dets(30.0, 60.0), world(), AttackSpec("distance_bias", factor=1.2), 0.0, 0)
    assert [d.perceived_gap for d in out] == pytest.approx([36.0, 72.0])


def test_alternate_flicker_drops_every_other_frame():
    w = world(TrafficObject(1, 30.0, 20.0))
    spec = AttackSpec("flicker", 1.0, 2.0, pattern="alternate")
    kept = [len(apply_attack(_dets(30.0), w, spec, k / 10, k)) for k in range(10, 20)]
    assert kept == [0, 1] * 5


def test_curvature_multiplier():
    assert curvature_bias_multiplier("HighwayFollowing") == 1.0
    assert curvature_bias_multiplier("CurvedRoad", 1.5) == 1.5
    assert effective_bias_factor(1.2, 1.5) == pytest.approx(1.3)  # 1 + 1.5 * 0.2
    assert effective_bias_factor(1.0, 1.5) == 1.0


def test_lead_object_ignores_adjacent_lane():
    w = world(TrafficObject(1, 20.0, 0.0, lane_offset=3.5), TrafficObject(2, 50.0, 0.0))
    assert lead_object(w).id == 2


gaps = st.lists(st.floats(1.0, 120.0), min_size=0, max_size=6)


@given(gaps, st.sampled_from(["false_negative", "flicker"]), st.integers(0, 100),
       st.sampled_from(["alternate", "random"]))
def test_deleting_attacks_only_delete(gs, kind, frame, pattern):
    objs = [TrafficObject(i + 1, g, 20.0) for i, g in enumerate(gs)]
    w = world(*objs)
    dets = sense(w, SensorConfig(), NoiseTape(5, [o.id for o in objs], 101), frame)
    spec = AttackSpec(kind, 0.0, 100.0, pattern=pattern)
    out = apply_attack(list(dets), w, spec, frame / 10, frame, np.random.default_rng(frame))
    assert len(out) <= len(dets)
    remaining = list(dets)
    for d in out:
        assert d in remaining  # unchanged value, drawn from the input multiset
        remaining.remove(d)


@given(gaps, st.integers(0, 50))
def test_detection_invariants(gs, frame):
    objs = [TrafficObject(i + 1, g, 20.0) for i, g in enumerate(gs)]
    dets = sense(world(*objs), SensorConfig(), NoiseTape(9, [o.id for o in objs], 51), frame)
    for d in dets:
        assert math.isfinite(d.perceived_gap)
        assert 0.0 <= d.confidence <= 1.0
