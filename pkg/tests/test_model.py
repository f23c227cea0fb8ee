import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqpool.model import (
    Point3, PointCloudFrame, Proposal, SequenceWindow, key_points, normalize_yaw, validate_window
)
from seqpool.utils.errors import (
    DomainError, EmptyWindow, MaskLengthMismatch, NonFiniteValue, UnsortedFrames
)

coords = st.floats(min_value=-100, max_value=100, allow_nan=False)
dims = st.floats(min_value=0.1, max_value=10)
angles = st.floats(min_value=-2 * math.pi, max_value=2 * math.pi, allow_nan=False)


def _frame(t, n=4, mask=None):
    return PointCloudFrame(t, np.arange(n * 4, dtype=float).reshape(n, 4), mask)


def test_validate_window_ok():
    window = SequenceWindow.from_frames([_frame(1), _frame(2), _frame(3)])
    assert window.current_index == 3
    assert validate_window(window) is True


def test_validate_window_unsorted():
    window = SequenceWindow((_frame(2), _frame(1)), 2)
    with pytest.raises(UnsortedFrames) as e:
        validate_window(window)
    assert e.value.details['frame_index'] == 1


def test_validate_window_last_frame_must_be_current():
    window = SequenceWindow((_frame(1), _frame(2)), 3)
    with pytest.raises(UnsortedFrames):
        validate_window(window)


def test_validate_window_gap():
    window = SequenceWindow.from_frames([_frame(1), _frame(3)])
    with pytest.raises(UnsortedFrames) as e:
        validate_window(window)
    assert e.value.details['missing_index'] == 2
    assert e.value.details['frame_index'] == 3

    # 从 2 开始的窗口同样缺少帧 1
    with pytest.raises(UnsortedFrames) as e:
        validate_window(SequenceWindow.from_frames([_frame(2), _frame(3)]))
    assert e.value.details['missing_index'] == 1


def test_validate_window_empty():
    with pytest.raises(EmptyWindow):
        validate_window(SequenceWindow((), 0))


def test_validate_window_nan_point():
    points = np.zeros((5, 4))
    points[3, 0] = np.nan
    window = SequenceWindow.from_frames([_frame(1), PointCloudFrame(2, points)])
    with pytest.raises(NonFiniteValue) as e:
        validate_window(window)
    assert e.value.details == {'frame_index': 2, 'point_index': 3}


def test_validate_window_mask_length():
    window = SequenceWindow.from_frames([_frame(1, n=4, mask=[True, False])])
    with pytest.raises(MaskLengthMismatch):
        validate_window(window)


def test_point3_rejects_non_finite():
    with pytest.raises(NonFiniteValue):
        Point3(0.0, math.inf, 0.0)


def test_frame_points_are_read_only():
    frame = _frame(1)
    with pytest.raises(ValueError):
        frame.points[0, 0] = 1.0


def test_frame_from_points():
    frame = PointCloudFrame.from_points(4, [Point3(1, 2, 3, 0.5), Point3(4, 5, 6)])
    assert frame.num_points == 2
    assert frame.point(0) == Point3(1.0, 2.0, 3.0, 0.5)
    np.testing.assert_array_equal(frame.xy, [[1, 2], [4, 5]])


def test_window_tail_reindexes():
    window = SequenceWindow.from_frames([_frame(t, n=t) for t in range(1, 6)])
    tail = window.tail(2)
    assert [f.frame_index for f in tail.frames] == [1, 2]
    assert tail.current_index == 2
    assert tail.frames[-1].num_points == 5
    with pytest.raises(DomainError):
        window.tail(6)


def test_proposal_validation():
    with pytest.raises(DomainError):
        Proposal(0, 0, 0, 0.0, 1, 1)
    with pytest.raises(DomainError):
        Proposal(0, 0, 0, 1, 1, 1, vx=math.nan)


def test_yaw_normalized():
    assert Proposal(0, 0, 0, 1, 1, 1, yaw=-math.pi).yaw == pytest.approx(math.pi)
    assert Proposal(0, 0, 0, 1, 1, 1, yaw=1.5 * math.pi).yaw == pytest.approx(-0.5 * math.pi)
    assert normalize_yaw(math.pi) == pytest.approx(math.pi)


def test_proposal_shifted():
    p = Proposal(4, 2, 1, 2, 3, 1.5, yaw=0.3, vx=2, vy=-1)
    q = p.shifted(1)
    assert (q.cx, q.cy, q.cz) == (2.0, 3.0, 1.0)
    assert q.dims == p.dims and q.yaw == p.yaw


def test_proposal_dict_round_trip():
    p = Proposal(1, 2, 3, 4, 5, 6, 0.5, 0.1, -0.2, 0.9)
    assert Proposal.from_dict(p.to_dict()) == p


def test_key_points_axis_aligned():
    kp = key_points(Proposal(0, 0, 0, 2, 2, 2))
    assert len(kp) == 9
    assert kp.center == Point3(0.0, 0.0, 0.0)
    corners = {tuple(np.round(row, 9)) for row in kp.array[1:]}
    assert corners == {(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)}
    # 固定角点顺序: ---, --+, -+-, ...
    np.testing.assert_allclose(kp.array[1], [-1, -1, -1])
    np.testing.assert_allclose(kp.array[2], [-1, -1, 1])
    np.testing.assert_allclose(kp.array[8], [1, 1, 1])


def test_key_points_square_rotation_symmetry():
    a = key_points(Proposal(0, 0, 0, 2, 2, 2)).array[1:]
    b = key_points(Proposal(0, 0, 0, 2, 2, 2, yaw=math.pi / 2)).array[1:]
    as_set = lambda arr: {tuple(np.round(row, 9) + 0.0) for row in arr}
    assert as_set(a) == as_set(b)


def test_key_points_rotated_rectangle():
    kp = key_points(Proposal(1, 0, 0, 2, 4, 2, yaw=math.pi / 2))
    plan = {tuple(np.round(row[:2], 9) + 0.0) for row in kp.array[1:]}
    assert plan == {(-1.0, -1.0), (-1.0, 1.0), (3.0, -1.0), (3.0, 1.0)}


@settings(max_examples=100, deadline=None)
@given(cx=coords, cy=coords, cz=coords, w=dims, l=dims, h=dims, yaw=angles, delta=angles)
def test_key_points_rotation_consistent(cx, cy, cz, w, l, h, yaw, delta):
    base = key_points(Proposal(cx, cy, cz, w, l, h, yaw=yaw)).array
    rotated = key_points(Proposal(cx, cy, cz, w, l, h, yaw=yaw + delta)).array
    c, s = math.cos(delta), math.sin(delta)
    rel = base - np.array([cx, cy, cz])
    expected = np.column_stack([
        cx + c * rel[:, 0] - s * rel[:, 1],
        cy + s * rel[:, 0] + c * rel[:, 1],
        base[:, 2],
    ])
    np.testing.assert_allclose(rotated, expected, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(cx=coords, cy=coords, cz=coords, w=dims, l=dims, h=dims, yaw=angles)
def test_key_points_center_first(cx, cy, cz, w, l, h, yaw):
    p = Proposal(cx, cy, cz, w, l, h, yaw=yaw)
    kp = key_points(p)
    assert len(kp.to_points()) == 9
    assert tuple(kp.array[0]) == p.center
