import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_keyframes

from memarena.keyframe import (
    KIN_DIRECTION,
    KIN_SPEED,
    PHYS,
    KinThresholds,
    extract_keyframes,
    extract_kin,
    extract_phys,
)
from memarena.trajectory import frames_from_arrays
from memarena.world import ConfigError


def random_stream(rng, n):
    # gripper flips on roughly one frame in ten
    g = np.cumsum(rng.random(n) < 0.1) % 2
    v = rng.normal(scale=0.3, size=(n, 3))
    v[rng.random(n) < 0.1] = 0.0
    return g, v


def test_phys_flags_gripper_changes():
    g = [0, 0, 1, 1, 0]
    v = np.ones((5, 3))
    assert extract_phys(frames_from_arrays(g, v)) == {3, 5}


def test_speed_and_direction_clauses():
    v = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0.01, 0, 0], [1, 0, 0]], dtype=float)
    ks = extract_keyframes(frames_from_arrays([0] * 5, v), nms_gap=0)
    assert ks.indices == (3, 4)
    assert ks.provenance[3] == {KIN_DIRECTION}
    assert KIN_SPEED in ks.provenance[4]


def test_direction_skipped_below_floor():
    v = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0]], dtype=float)
    kin = extract_kin(frames_from_arrays([0] * 3, v), KinThresholds(epsilon=0.0, v_floor=0.0))
    assert kin == {3}  # 1 -> 2 has a zero predecessor; 2 -> 3 reverses


def test_nms_keeps_slowest_kin_frame_and_all_phys():
    v = np.array([[1, 0, 0]] * 10, dtype=float)
    v[[3, 4, 5]] = [[0.03, 0, 0], [0.01, 0, 0], [0.02, 0, 0]]
    g = [0] * 10
    g[5] = 1
    g[6:] = [1] * 4
    ks = extract_keyframes(frames_from_arrays(g, v), nms_gap=3)
    assert 6 in ks and PHYS in ks.provenance[6]
    assert 5 in ks and 4 not in ks


def test_nms_tie_breaks_to_earliest():
    v = np.array([[1, 0, 0], [0, 0, 0], [0, 0, 0], [1, 0, 0]], dtype=float)
    ks = extract_keyframes(frames_from_arrays([0] * 4, v), nms_gap=3)
    assert ks.indices == (2,)


def test_rejects_short_stream_and_bad_config():
    with pytest.raises(ValueError):
        extract_keyframes(frames_from_arrays([0], np.zeros((1, 3))))
    with pytest.raises(ConfigError):
        KinThresholds(theta=0)
    with pytest.raises(ConfigError):
        KinThresholds(epsilon=float("nan"))
    with pytest.raises(ConfigError):
        extract_keyframes(frames_from_arrays([0, 0], np.zeros((2, 3))), nms_gap=-1)


def test_oracle_equivalence_sample():
    rng = np.random.default_rng(11)
    for _ in range(100):
        g, v = random_stream(rng, int(rng.integers(2, 200)))
        ks = extract_keyframes(frames_from_arrays(g, v), nms_gap=0)
        assert set(ks.indices) == brute_keyframes(list(g), v.tolist())


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    e1=st.floats(0, 1),
    e2=st.floats(0, 1),
    t1=st.floats(1, 179),
    t2=st.floats(1, 179),
)
def test_monotone_in_thresholds(seed, e1, e2, t1, t2):
    g, v = random_stream(np.random.default_rng(seed), 80)
    frames = frames_from_arrays(g, v)
    lo = KinThresholds(min(e1, e2), max(t1, t2), 0.0)
    hi = KinThresholds(max(e1, e2), min(t1, t2), 0.0)
    assert set(extract_keyframes(frames, lo, 0).indices) <= set(extract_keyframes(frames, hi, 0).indices)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), gap=st.integers(1, 8))
def test_nms_properties(seed, gap):
    g, v = random_stream(np.random.default_rng(seed), 120)
    frames = frames_from_arrays(g, v)
    full = extract_keyframes(frames, nms_gap=0)
    ks = extract_keyframes(frames, nms_gap=gap)
    assert set(ks.indices) <= set(full.indices)
    assert extract_phys(frames) <= set(ks.indices)
    kin_only = [t for t in ks.indices if PHYS not in ks.provenance[t]]
    assert all(b - a >= gap for a, b in zip(kin_only, kin_only[1:]))
    assert ks.indices == tuple(sorted(ks.indices))
