import numpy as np
import pytest

from seqpool.model import Proposal, validate_window
from seqpool.services.motion_propagation import PropagationConfig, evaluate_recall, propagate_all
from seqpool.services.scene_sim import (
    SPEED_CLASSES, ObjectSpec, SceneConfig, generate, recall_by_speed_class, recall_experiment,
    sample_box_surface, speed_class
)
from seqpool.utils.errors import ConfigError, DomainError
from tests.conftest import MIXED_SCENE, SMALL_SCENE


@pytest.mark.parametrize('speed, expected', [
    (0.0, 'stationary'), (0.19, 'stationary'), (0.2, 'slow'), (0.99, 'slow'),
    (1.0, 'medium'), (6.0, 'medium'), (6.01, 'fast'), (6.5, 'fast'),
])
def test_speed_class(speed, expected):
    assert speed_class(speed) == expected


def test_scene_config_validation():
    with pytest.raises(DomainError):
        SceneConfig(frames=0)
    with pytest.raises(DomainError):
        SceneConfig(extent=0.0)
    with pytest.raises(ConfigError):
        SceneConfig.from_dict([1, 2])
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({'objects': [{'dims': [1, 1]}]})
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({'objects': [{'dims': [1, 1, 1], 'center': [0, 0, 0],
                                            'velocity': [0.5, 0], 'speed_class': 'fast'}]})


def test_object_heading_follows_velocity():
    assert ObjectSpec((1, 1, 1), (0, 0, 0), velocity=(0.0, 2.0)).heading == pytest.approx(np.pi / 2)
    assert ObjectSpec((1, 1, 1), (0, 0, 0)).heading == 0.0
    assert ObjectSpec((1, 1, 1), (0, 0, 0), velocity=(1.0, 0.0), yaw=0.3).heading == 0.3


def test_generate_is_deterministic():
    a = generate(SceneConfig.from_dict(SMALL_SCENE))
    b = generate(SceneConfig.from_dict(SMALL_SCENE))
    for fa, fb in zip(a.window.frames, b.window.frames):
        np.testing.assert_array_equal(fa.points, fb.points)
        np.testing.assert_array_equal(fa.foreground_mask, fb.foreground_mask)
    assert a.proposals == b.proposals
    assert a.speed_classes == ['medium', 'stationary']


def test_generate_layout(small_scene):
    assert validate_window(small_scene.window)
    assert len(small_scene.window) == 3
    for t, frame in enumerate(small_scene.window.frames, start=1):
        assert frame.num_points == 2 * 200 + 300
        labels = small_scene.labels[t]
        np.testing.assert_array_equal(frame.foreground_mask, labels >= 0)
        assert set(np.unique(labels)) == {-1, 0, 1}
    assert sorted(small_scene.truth_boxes) == [1, 2, 3]


def test_object_points_on_box_surface(small_scene):
    box = small_scene.truth_boxes[2][0]
    frame = small_scene.window.frame(2)
    xyz = frame.xyz[small_scene.labels[2] == 0]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    dx, dy = xyz[:, 0] - box.cx, xyz[:, 1] - box.cy
    local = np.column_stack([dx * c + dy * s, -dx * s + dy * c, xyz[:, 2] - box.cz])
    half = np.array([box.w, box.l, box.h]) / 2
    assert np.all(np.abs(local) <= half + 1e-5)
    on_face = np.isclose(np.abs(local[:, 0]), half[0], atol=1e-5) | \
        np.isclose(np.abs(local[:, 1]), half[1], atol=1e-5) | np.isclose(local[:, 2], half[2], atol=1e-5)
    assert on_face.all()


def test_sample_box_surface_empty():
    assert sample_box_surface(Proposal(0, 0, 0, 1, 1, 1), 0, np.random.default_rng(0)).shape == (0, 3)


def test_stationary_object_all_foreground():
    config = SceneConfig.from_dict({'seed': 1, 'frames': 4, 'clutter_points_per_frame': 0,
                                    'objects': [{'dims': [1, 2, 1], 'center': [3, 3, 0.5]}]})
    scene = generate(config)
    for frame in scene.window.frames:
        assert frame.foreground_mask.all()
    centers = {(b.cx, b.cy) for boxes in scene.truth_boxes.values() for b in boxes}
    assert centers == {(3.0, 3.0)}


def test_fast_object_kinematics():
    config = SceneConfig.from_dict({'seed': 2, 'frames': 8, 'clutter_points_per_frame': 10,
                                    'objects': [{'dims': [2, 4.5, 1.6], 'center': [0, 0, 0.8],
                                                 'velocity': [6.5, 0.0]}]})
    scene = generate(config)
    assert scene.speed_classes == ['fast']
    current = scene.proposals[0]
    for t, boxes in scene.truth_boxes.items():
        assert boxes[0].cx == pytest.approx(current.cx - 6.5 * (8 - t))
        assert boxes[0].cy == pytest.approx(0.0)


def test_zero_noise_keeps_true_velocity(small_scene):
    for proposal, truth in zip(small_scene.proposals, small_scene.truth_boxes[3]):
        assert proposal.velocity == truth.velocity


def test_noise_is_multiplicative_and_bounded(mixed_scene):
    for proposal, truth in zip(mixed_scene.proposals, mixed_scene.truth_boxes[16]):
        if truth.vx == 0 and truth.vy == 0:
            assert proposal.velocity == (0.0, 0.0)
        for est, true in zip(proposal.velocity, truth.velocity):
            assert abs(est - true) <= 0.2 * abs(true) + 1e-12


def test_zero_noise_exact_tracking_recalls_every_point():
    config = dict(MIXED_SCENE, velocity_estimate_noise=0.0, frames=8)
    scene = generate(SceneConfig.from_dict(config))
    regions = propagate_all(scene.proposals, PropagationConfig(1.0, 8))
    report = evaluate_recall(scene.window, regions, gamma=1.0)
    assert report.overall == 1.0


def test_stationary_scene_recall_is_one():
    config = {'seed': 5, 'frames': 6, 'clutter_points_per_frame': 200,
              'objects': [{'dims': [2, 4, 1.5], 'center': [x, -x, 0.75]} for x in (-20.0, 0.0, 20.0)]}
    table = recall_experiment(SceneConfig.from_dict(config), [1.0, 1.1], [2, 6])
    assert all(c.overall == 1.0 for c in table.cells)
    assert table.cell(1.0, 6).vacuous_classes == ['slow', 'medium', 'fast']


def test_recall_gamma_ordering(mixed_scene):
    table = recall_experiment(mixed_scene, [1.0, 1.1], [4, 16])
    for frames in (4, 16):
        assert table.cell(1.1, frames).overall >= table.cell(1.0, frames).overall


def test_recall_gap_grows_with_window(mixed_scene):
    table = recall_experiment(mixed_scene, [1.0, 1.1], [4, 16])
    gap = {n: table.cell(1.1, n).overall - table.cell(1.0, n).overall for n in (4, 16)}
    assert gap[16] > gap[4]
    assert table.cell(1.0, 16).overall < table.cell(1.0, 4).overall


def test_fast_objects_gain_most_from_gamma(mixed_scene):
    table = recall_experiment(mixed_scene, [1.0, 1.1], [16])
    low, high = table.cell(1.0, 16).by_class, table.cell(1.1, 16).by_class
    assert high['stationary'] - low['stationary'] == 0.0
    assert high['fast'] - low['fast'] > high['stationary'] - low['stationary']


def test_recall_table_records(mixed_scene):
    table = recall_experiment(mixed_scene, [1.0, 1.1], [4, 8])
    overall = table.overall_records()
    assert [r['gamma'] for r in overall] == [1.0, 1.1]
    assert list(overall[0]) == ['gamma', 'T=4', 'T=8']
    by_class = table.speed_class_records()
    assert len(by_class) == 4
    assert list(by_class[0]) == ['gamma', 'T', *SPEED_CLASSES]
    with pytest.raises(KeyError):
        table.cell(1.2, 4)
    with pytest.raises(DomainError):
        recall_experiment(mixed_scene, [1.0], [17])


def test_recall_by_speed_class_without_labels(small_scene):
    small_scene.labels = {}
    regions = propagate_all(small_scene.proposals, PropagationConfig(1.0, 3))
    assert recall_by_speed_class(small_scene, regions) == {}
