import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from kinoformer.geometry import (Action, Pose6, PoseDelta, chain_deltas, compose_pose, compose_pose_array,
                                 relative_pose, relative_pose_array, rotation, wrap_angle)

ang = st.floats(-3.0, 3.0, allow_nan=False)
small = st.floats(-0.6, 0.6, allow_nan=False)
coord = st.floats(-5.0, 5.0, allow_nan=False)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert abs(wrap_angle(3 * math.pi) - math.pi) < 1e-12
    assert wrap_angle(0.25) == 0.25


def test_rotation_is_orthonormal_and_matches_yaw_only_case():
    r = rotation(0.0, 0.0, math.pi / 2)
    assert np.allclose(r @ [1, 0, 0], [0, 1, 0])
    r = rotation(0.3, -0.2, 1.1)
    assert np.allclose(r @ r.T, np.eye(3))
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_nose_up_is_negative_pitch():
    # forward axis tilted up when pitch < 0
    r = rotation(0.0, -0.2, 0.0)
    assert (r @ [1, 0, 0])[2] > 0


def test_relative_pose_body_frame_by_hand():
    p = Pose6(1.0, 1.0, 0.0, 0.0, 0.0, math.pi / 2)
    q = Pose6(1.0, 2.0, 0.5, 0.0, 0.0, math.pi / 2 + 0.1)
    d = relative_pose(p, q)
    assert np.allclose(d.as_array(), [1.0, 0.0, 0.5, 0.0, 0.0, 0.1])


def test_action_clamps():
    assert Action(2.0, -3.0).as_array().tolist() == [1.0, -1.0]


@settings(max_examples=60, deadline=None)
@given(coord, coord, coord, small, small, ang, coord, coord, coord, small, small, ang)
def test_compose_inverts_relative(x, y, z, r, p, w, x2, y2, z2, r2, p2, w2):
    a = np.array([x, y, z, r, p, w])
    b = np.array([x2, y2, z2, r2, p2, w2])
    c = compose_pose_array(a, relative_pose_array(a, b))
    assert np.allclose(c[:3], b[:3], atol=1e-9)
    assert np.allclose(wrap_angle(c[3:] - b[3:]), 0.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(coord, coord, small), min_size=1, max_size=6))
def test_chain_deltas_matches_repeated_compose(steps):
    start = Pose6(0.5, -0.2, 0.1, 0.05, -0.1, 0.3)
    deltas = np.array([[dx, dy, 0.0, 0.0, 0.0, dyaw] for dx, dy, dyaw in steps])
    out = chain_deltas(start.as_array(), deltas)
    cur = start
    for k, d in enumerate(deltas):
        cur = compose_pose(cur, PoseDelta.from_array(d))
        assert np.allclose(out[k], cur.as_array())


def test_vectorised_relative_matches_scalar():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    batch = relative_pose_array(a, b)
    for i in range(5):
        assert np.allclose(batch[i], relative_pose_array(a[i], b[i]))
