import pytest
from hypothesis import given, strategies as st

from aebsim.errors import ConfigurationError
from aebsim.perception import Detection
from aebsim.tracker import Track, Tracker, TrackerConfig, associate, primary_object, update_tracks

CFG = TrackerConfig()


def det(g, lane=0.0):
    return Detection(g, lane, 4.5, 0.95, 0)


def trk(tid, g, v=0.0, lane=0.0, age=3):
    return Track(tid, g, v, lane, age)


def test_inside_gate_matches():
    a = associate([trk(1, 30.0)], [det(30.5)], CFG)
    assert a.pairs == [(0, 0)]


def test_outside_gate_seeds_new_track():
    a = associate([trk(1, 30.0)], [det(40.0)], CFG)
    assert a.pairs == [] and a.unmatched_detections == [0] and a.unmatched_tracks == [0]


def test_equidistant_tie_goes_to_lower_id():
    a = associate([trk(5, 31.0), trk(2, 29.0)], [det(30.0)], CFG)
    assert a.pairs == [(1, 0)]  # index 1 holds track id 2


def test_lane_gate_blocks_adjacent_detection():
    a = associate([trk(1, 30.0)], [det(30.0, lane=3.5)], CFG)
    assert a.pairs == []


def alpha_beta_oracle(zs, alpha, beta, dt):
    """Independent transcription of the alpha-beta recursion in (position, rate) form."""
    x, v = zs[0], 0.0
    for z in zs[1:]:
        xp = x + v * dt
        r = z - xp
        x = xp + alpha * r
        v = v + beta / dt * r
    return x, v


def test_closing_lead_velocity_converges():
    tr = Tracker(CFG)
    zs = [60.0 - 5.0 * 0.1 * k for k in range(11)]
    for z in zs:
        tracks = tr.step([det(z)])
    x, v = alpha_beta_oracle(zs, CFG.alpha, CFG.beta, CFG.dt)
    assert tracks[0].gap_est == pytest.approx(x, abs=1e-12)
    assert tracks[0].v_rel_est == pytest.approx(-v, abs=1e-12)  # closing speed is the negated gap rate
    assert tracks[0].v_rel_est == pytest.approx(5.0, abs=0.01)


def test_stationary_gap_velocity_goes_to_zero():
    tr = Tracker(CFG)
    for _ in range(20):
        tracks = tr.step([det(40.0)])
    assert abs(tracks[0].v_rel_est) < 1e-12


def test_streak_restarts_after_coasting():
    tr = Tracker(CFG)
    for _ in range(4):
        tr.step([det(40.0)])
    assert tr.tracks[0].age_frames == 4
    tr.step([])
    assert tr.tracks[0].missed_frames == 1 and tr.tracks[0].age_frames == 4
    tr.step([det(40.0)])
    assert tr.tracks[0].age_frames == 1 and tr.tracks[0].missed_frames == 0


def test_tentative_track_dies_on_first_miss():
    tr = Tracker(CFG)
    tr.step([det(40.0)])
    assert tr.step([]) == []


def test_confirmed_track_is_dropped_after_threshold():
    tr = Tracker(TrackerConfig(drop_after_missed=2))
    for _ in range(3):
        tr.step([det(40.0)])
    assert len(tr.step([])) == 1
    assert len(tr.step([])) == 1
    assert tr.step([]) == []


def test_ids_are_never_reused():
    tr = Tracker(CFG)
    seen = []
    for frame in range(6):
        for t in tr.step([det(40.0)] if frame % 2 == 0 else []):
            seen.append(t.track_id)
    assert sorted(set(seen)) == [1, 2, 3]


def test_update_does_not_mutate_inputs():
    t0 = trk(1, 30.0, 2.0)
    tracks = [t0]
    a = associate(tracks, [det(29.9)], CFG)
    update_tracks(tracks, a, [det(29.9)], CFG, 0.1, 2)
    assert t0.gap_est == 30.0 and t0.age_frames == 3


def test_primary_selection():
    assert primary_object([trk(1, 50.0), trk(2, 30.0), trk(3, 12.0)]).track_id == 3
    assert primary_object([trk(1, 20.0, lane=3.5)]) is None
    assert primary_object([]) is None


def test_config_validation():
    for kw in ({"gate_radius": 0.0}, {"drop_after_missed": 0}, {"alpha": 0.0}, {"beta": 1.5}):
        with pytest.raises(ConfigurationError):
            TrackerConfig(**kw)


@given(st.lists(st.lists(st.floats(2.0, 100.0), max_size=4), min_size=1, max_size=60))
def test_track_invariants(frames):
    tr = Tracker(CFG)
    issued = set()
    live_prev = set()
    for gs in frames:
        tracks = tr.step([det(g) for g in gs])
        ids = [t.track_id for t in tracks]
        assert len(ids) == len(set(ids))
        for t in tracks:
            assert t.age_frames >= 1
            assert t.missed_frames <= CFG.drop_after_missed
            if t.track_id not in live_prev:
                assert t.track_id not in issued  # a dead id never comes back
            issued.add(t.track_id)
        live_prev = set(ids)
