import numpy as np
import pytest

from seqpool.model import PointCloudFrame, Proposal, SequenceWindow
from seqpool.services.feature_encoding import EncoderWeights
from seqpool.services.pipeline import (
    membership_audit, run_pipeline, sigmoid, verify_pooling
)
from seqpool.services.region_network import NetworkConfig, NetworkWeights
from seqpool.services.voxel_pooling import draw_samples
from seqpool.services.motion_propagation import CylindricalRegion, PropagationConfig, points_in_region, propagate
from seqpool.utils.errors import AlignmentMismatch, UnsortedFrames, WidthMismatch
from tests.conftest import random_proposals, random_window

CONFIG = NetworkConfig(num_points=16, feature_dim=8, num_heads=2)


def _run(scene, **kwargs):
    T = len(scene.window)
    encoder = kwargs.pop('encoder', EncoderWeights.default(CONFIG.feature_dim, seed=0))
    network = kwargs.pop('network', NetworkWeights.default(CONFIG, num_frames=T, seed=0))
    params = dict(gamma=1.1, v=0.4, k=32, seed=0)
    params.update(kwargs)
    return run_pipeline(scene.window, scene.proposals, encoder, network, CONFIG, **params)


def test_sigmoid():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(2.0) == pytest.approx(1 - sigmoid(-2.0))


def test_verify_passes_on_random_scenes():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        window = random_window(rng, num_frames=3, num_points=6000, extent=15)
        report = verify_pooling(window, random_proposals(rng, 8, extent=12), gamma=1.1, K=32,
                                v=0.4, k=8, seed=seed)
        assert report.passed
        data = report.to_dict()
        assert data['regions'] == 24
        assert data['candidate_mismatches'] == 0
        assert data['membership_failures'] == 0
        assert set(data['truncated_voxels']) == {'1', '2', '3'}


@pytest.mark.slow
def test_verify_passes_on_many_random_scenes():
    failures = []
    for seed in range(100):
        rng = np.random.default_rng([seed, 7])
        T = int(rng.integers(1, 5))
        N = int(rng.integers(1_000, 100_001))
        M = int(rng.integers(1, 65))
        extent = float(rng.uniform(10.0, 60.0))
        window = random_window(rng, num_frames=T, num_points=N // T, extent=extent)
        proposals = random_proposals(rng, M, extent=extent * 0.8)
        report = verify_pooling(window, proposals, gamma=float(rng.uniform(1.0, 1.2)), K=int(rng.integers(8, 129)),
                                v=float(rng.uniform(0.2, 0.8)), k=int(rng.integers(1, 33)), seed=seed)
        assert len(report.checks) == M * T
        if not report.passed:
            failures.append((seed, report.to_dict()['candidate_mismatches']))
    assert failures == []


def test_verify_full_equality_without_truncation(small_scene):
    report = verify_pooling(small_scene.window, small_scene.proposals, 1.1, 64, 0.4, 10 ** 6, seed=4)
    assert report.passed
    assert all(c.full_equality_expected and c.elementwise_equal for c in report.checks)


def test_verify_dense_voxel_is_not_a_mismatch():
    xy = np.column_stack([np.linspace(0.01, 0.2, 50), np.full(50, 0.1)])
    window = SequenceWindow.from_frames([PointCloudFrame(1, np.hstack([xy, np.zeros((50, 2))]))])
    report = verify_pooling(window, [Proposal(0.1, 0.1, 0, 1, 1, 1)], 1.0, 128, 0.4, 32, seed=0)
    check = report.checks[0]
    assert (check.naive_candidates, check.optimized_candidates) == (50, 32)
    assert not check.full_equality_expected
    assert check.elementwise_equal is None
    assert report.passed
    assert report.to_dict()['regions_with_subsampling'] == 1
    assert report.truncated_voxels == {1: 1}


def test_verify_rejects_invalid_window():
    frame = PointCloudFrame(2, np.zeros((1, 4)))
    with pytest.raises(UnsortedFrames):
        verify_pooling(SequenceWindow((frame, frame), 2), [], 1.0, 8, 0.4, 32, seed=0)
    gap = SequenceWindow.from_frames([PointCloudFrame(1, np.zeros((1, 4))), PointCloudFrame(3, np.zeros((1, 4)))])
    with pytest.raises(UnsortedFrames) as e:
        verify_pooling(gap, [Proposal(0, 0, 0, 1, 1, 1)], 1.0, 8, 0.4, 32, seed=0)
    assert e.value.details['missing_index'] == 2


def test_membership_audit_detects_violation():
    proposal = Proposal(0, 0, 0, 1, 1, 1, vx=1.0)
    frame = PointCloudFrame(1, np.array([[-1.0, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]]))
    region = CylindricalRegion(1, -1.0, 0.0, np.sqrt(2.0), 0, 1, 0.0)
    good = draw_samples(frame, region, np.array([0]), 4, seed=0)
    bad = draw_samples(frame, region, np.array([0, 1]), 4, seed=0)
    assert membership_audit(good, proposal, 1.0, current_index=2)
    assert not membership_audit(bad, proposal, 1.0, current_index=2)


def test_membership_audit_accepts_points_on_the_rim():
    proposal = Proposal(1234.567, -987.654, 0.0, 1.7, 4.3, 1.5, vx=3.3, vy=-2.9)
    region = propagate(proposal, PropagationConfig(1.1, 3))[0]
    rng = np.random.default_rng(5)
    angles = rng.uniform(0, 2 * np.pi, 4000)
    radius = region.diameter / 2 * (1 - rng.uniform(0, 1e-14, 4000))
    xy = np.column_stack([region.center_x + radius * np.cos(angles), region.center_y + radius * np.sin(angles)])
    frame = PointCloudFrame(1, np.hstack([xy, np.zeros((len(xy), 2))]))
    candidates = np.flatnonzero(points_in_region(frame.points, region))
    assert len(candidates) > 0
    pooled = draw_samples(frame, region, candidates, len(candidates), seed=0)
    assert membership_audit(pooled, proposal, 1.1, current_index=3)


def test_run_pipeline_outputs(small_scene):
    result = _run(small_scene)
    assert result.num_frames == 3
    assert [o.proposal_id for o in result.outputs] == [0, 1]
    for output in result.outputs:
        assert 0.0 < output.confidence < 1.0
        assert len(output.residuals) == 7
        assert len(output.frame_norms) == 3
        assert np.isfinite(output.frame_norms).all()
    assert result.loss is None
    assert set(result.timings_ms) == {'pooling', 'encoding', 'network'}
    data = result.to_dict()
    assert set(data) == {'config', 'T', 'proposals', 'loss'}
    assert data['config']['K'] == 16


def test_run_pipeline_is_permutation_invariant(small_scene):
    base = _run(small_scene)
    shuffled = _run(small_scene, permutation_seed=17)
    for a, b in zip(base.outputs, shuffled.outputs):
        assert a.confidence_logit == pytest.approx(b.confidence_logit, abs=1e-6)
        np.testing.assert_allclose(a.residuals, b.residuals, atol=1e-6)
        np.testing.assert_allclose(a.frame_norms, b.frame_norms, atol=1e-6)


def test_run_pipeline_independent_of_workers(small_scene):
    assert _run(small_scene, workers=1).to_dict() == _run(small_scene, workers=4).to_dict()


def test_run_pipeline_single_frame(small_scene):
    scene = small_scene.tail(1)
    result = _run(scene)
    assert result.num_frames == 1
    assert all(np.isfinite(o.confidence_logit) for o in result.outputs)


def test_run_pipeline_loss(small_scene):
    result = _run(small_scene, truths=small_scene.truth_boxes[3], alpha=1.0)
    loss = result.loss
    assert set(loss) == {'total', 'conf', 'reg', 'alpha', 'intermediate_sum'}
    assert loss['total'] >= 0
    assert loss['intermediate_sum'] >= loss['total']
    assert loss['total'] == pytest.approx(loss['conf'] + loss['reg'])
    with pytest.raises(AlignmentMismatch):
        _run(small_scene, truths=small_scene.truth_boxes[3][:1])


def test_run_pipeline_width_checks(small_scene):
    with pytest.raises(WidthMismatch):
        _run(small_scene, encoder=EncoderWeights.default(4, seed=0))
    with pytest.raises(WidthMismatch):
        _run(small_scene, network=NetworkWeights.default(CONFIG, num_frames=2, seed=0))
    fewer = NetworkConfig(num_points=16, feature_dim=8, num_heads=2, num_blocks=2)
    with pytest.raises(WidthMismatch):
        _run(small_scene, network=NetworkWeights.default(fewer, num_frames=3, seed=0))
