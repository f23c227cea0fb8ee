import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqpool.model import Point3, PointCloudFrame, Proposal, SequenceWindow
from seqpool.services.motion_propagation import (
    PropagationConfig, evaluate_recall, point_in_region, points_in_region, propagate, propagate_all,
    region_diameter
)
from seqpool.utils.errors import DomainError, MissingMask


def test_region_diameter_examples():
    assert region_diameter(2, 2, 1.0, 5) == pytest.approx(math.sqrt(8))
    assert region_diameter(3, 3, 1.1, 0) == pytest.approx(4.6669, abs=1e-4)
    assert region_diameter(3, 3, 1.1, 2) == pytest.approx(5.6470, abs=1e-4)


@pytest.mark.parametrize('args', [(0, 1, 1.0, 0), (1, -1, 1.0, 0), (1, 1, 0.9, 0), (1, 1, 1.0, -1)])
def test_region_diameter_domain(args):
    with pytest.raises(DomainError):
        region_diameter(*args)


def test_propagation_config_validation():
    with pytest.raises(DomainError):
        PropagationConfig(gamma=0.5)
    with pytest.raises(DomainError):
        PropagationConfig(window_length=0)


def test_propagate_constant_velocity():
    regions = propagate(Proposal(0, 0, 0, 2, 2, 2, vx=1), PropagationConfig(1.0, 3))
    assert [r.frame_index for r in regions] == [1, 2, 3]
    assert [(r.center_x, r.center_y) for r in regions] == [(-2.0, 0.0), (-1.0, 0.0), (0.0, 0.0)]
    assert [r.delta_t for r in regions] == [2, 1, 0]


def test_propagate_stationary():
    regions = propagate(Proposal(3, -4, 0, 2, 2, 2), PropagationConfig(1.2, 5))
    assert len(regions) == 5
    assert {(r.center_x, r.center_y) for r in regions} == {(3.0, -4.0)}


def test_propagate_one_step():
    regions = propagate(Proposal(4, 2, 0, 1, 1, 1, vx=2, vy=-1), PropagationConfig(1.0, 2))
    assert (regions[0].center_x, regions[0].center_y) == (2.0, 3.0)


def test_propagate_all_ids():
    proposals = [Proposal(0, 0, 0, 1, 1, 1), Proposal(5, 5, 1, 1, 1, 1)]
    groups = propagate_all(proposals, PropagationConfig(1.1, 4))
    assert [g[0].source_proposal_id for g in groups] == [0, 1]
    assert all(len(g) == 4 for g in groups)
    assert groups[1][0].center_z == 1.0


def _example_region(gamma):
    return propagate(Proposal(0, 0, 0, 3, 3, 1, vx=1), PropagationConfig(gamma, 3))[0]


def test_point_in_region_examples():
    region = _example_region(1.0)
    assert region.diameter == pytest.approx(4.2426, abs=1e-4)
    assert point_in_region(Point3(-2, 0, 5), region)
    assert not point_in_region(Point3(0.2, 0, 0), region)
    assert point_in_region(Point3(0.2, 0, 0), _example_region(1.1))


def test_point_on_boundary_excluded():
    region = propagate(Proposal(0, 0, 0, 3, 4, 1), PropagationConfig(1.0, 1))[0]
    assert not point_in_region(Point3(2.5, 0, 0), region)
    assert point_in_region(Point3(2.4999, 0, 0), region)


def test_points_in_region_matches_scalar(rng):
    region = _example_region(1.05)
    xy = rng.uniform(-6, 4, size=(500, 2))
    batch = points_in_region(xy, region)
    scalar = [point_in_region(Point3(x, y, 0), region) for x, y in xy]
    np.testing.assert_array_equal(batch, scalar)


@settings(max_examples=100, deadline=None)
@given(w=st.floats(0.2, 8), l=st.floats(0.2, 8), yaw=st.floats(-math.pi, math.pi),
       u=st.floats(-0.499, 0.499), s=st.floats(-0.499, 0.499))
def test_current_frame_region_circumscribes_footprint(w, l, yaw, u, s):
    p = Proposal(1.5, -2.0, 0.0, w, l, 1.0, yaw=yaw)
    region = propagate(p, PropagationConfig(1.0, 1))[0]
    x = p.cx + u * w * math.cos(yaw) - s * l * math.sin(yaw)
    y = p.cy + u * w * math.sin(yaw) + s * l * math.cos(yaw)
    assert point_in_region(Point3(x, y, 0.0), region)


@settings(max_examples=100, deadline=None)
@given(g1=st.floats(1.0, 1.3), g2=st.floats(1.0, 1.3), dt=st.integers(0, 15),
       x=st.floats(-20, 20), y=st.floats(-20, 20))
def test_region_monotone_in_gamma(g1, g2, dt, x, y):
    lo, hi = sorted((g1, g2))
    p = Proposal(0, 0, 0, 2, 4, 1, vx=0.7, vy=-0.3)
    small = propagate(p, PropagationConfig(lo, dt + 1))[0]
    large = propagate(p, PropagationConfig(hi, dt + 1))[0]
    if point_in_region(Point3(x, y, 0), small):
        assert point_in_region(Point3(x, y, 0), large)


def test_recall_vacuous():
    frame = PointCloudFrame(1, np.zeros((3, 4)), [False, False, False])
    report = evaluate_recall(SequenceWindow.from_frames([frame]), [])
    assert report.overall == 1.0
    assert report.vacuous
    assert report.to_dict() == {'gamma': None, 'overall': 1.0, 'per_frame': [1.0], 'vacuous': True}


def test_recall_missing_mask():
    frame = PointCloudFrame(1, np.zeros((3, 4)))
    with pytest.raises(MissingMask):
        evaluate_recall(SequenceWindow.from_frames([frame]), [])


def test_recall_stationary_box(rng):
    p = Proposal(2, 3, 0.5, 2, 4, 1, yaw=0.4)
    local = rng.uniform(-0.49, 0.49, size=(200, 2)) * [p.w, p.l]
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    xy = np.column_stack([p.cx + local[:, 0] * c - local[:, 1] * s, p.cy + local[:, 0] * s + local[:, 1] * c])
    clutter = rng.uniform(20, 30, size=(50, 2))
    points = np.hstack([np.vstack([xy, clutter]), np.zeros((250, 2))])
    mask = np.arange(250) < 200
    window = SequenceWindow.from_frames([PointCloudFrame(t, points, mask) for t in (1, 2, 3)])
    regions = propagate_all([p], PropagationConfig(1.0, 3))
    report = evaluate_recall(window, regions, gamma=1.0)
    assert report.overall == 1.0
    assert report.per_frame == [1.0, 1.0, 1.0]
    assert report.foreground_total == 600


def test_recall_point_subsets():
    points = np.array([[0, 0, 0, 0], [10, 0, 0, 0]], dtype=float)
    window = SequenceWindow.from_frames([PointCloudFrame(1, points, [True, True])])
    regions = propagate_all([Proposal(0, 0, 0, 1, 1, 1)], PropagationConfig(1.0, 1))
    assert evaluate_recall(window, regions).overall == 0.5
    assert evaluate_recall(window, regions, point_subsets=[np.array([True, False])]).overall == 1.0
    assert evaluate_recall(window, regions, point_subsets=[np.array([False, True])]).overall == 0.0


def test_recall_perturbed_velocity_gamma_helps(mixed_scene):
    # 单个中速物体的速度估计偏大 50%
    scene = mixed_scene
    p = scene.proposals[5]
    biased = Proposal(p.cx, p.cy, p.cz, p.w, p.l, p.h, p.yaw, p.vx * 1.5, p.vy * 1.5)
    window = scene.window.tail(8)
    low = evaluate_recall(window, propagate_all([biased], PropagationConfig(1.0, 8)))
    high = evaluate_recall(window, propagate_all([biased], PropagationConfig(1.1, 8)))
    assert high.foreground_hit >= low.foreground_hit
    assert high.overall >= low.overall
