import numpy as np
import pytest

from seqpool import dao
from seqpool.model import PointCloudFrame, Proposal, SequenceWindow
from seqpool.services.scene_sim import SceneConfig, generate


SMALL_SCENE = {
    'seed': 3,
    'frames': 3,
    'extent': 40.0,
    'clutter_points_per_frame': 300,
    'velocity_estimate_noise': 0.0,
    'objects': [
        {'dims': [2.0, 4.5, 1.6], 'center': [5.0, 2.0, 0.8], 'velocity': [1.5, 0.0]},
        {'dims': [0.8, 0.8, 1.8], 'center': [-6.0, -3.0, 0.9], 'velocity': [0.0, 0.0]},
    ],
}

# 静止 / 慢速 / 中速 / 快速物体混合，速度估计带 20% 噪声
MIXED_SCENE = {
    'seed': 11,
    'frames': 16,
    'extent': 120.0,
    'clutter_points_per_frame': 500,
    'velocity_estimate_noise': 0.2,
    'objects': [
        {'dims': [2.0, 4.5, 1.6], 'center': [0.0, 0.0, 0.8], 'velocity': [0.0, 0.0]},
        {'dims': [2.0, 4.5, 1.6], 'center': [10.0, 20.0, 0.8], 'velocity': [0.0, 0.0]},
        {'dims': [0.8, 0.8, 1.8], 'center': [-20.0, 5.0, 0.9], 'velocity': [0.0, 0.0]},
        {'dims': [0.8, 0.8, 1.8], 'center': [15.0, -10.0, 0.9], 'velocity': [0.5, 0.0]},
        {'dims': [0.8, 0.8, 1.8], 'center': [-15.0, -15.0, 0.9], 'velocity': [0.0, 0.6]},
        {'dims': [2.0, 4.5, 1.6], 'center': [-40.0, 30.0, 0.8], 'velocity': [3.0, 0.0]},
        {'dims': [2.0, 4.5, 1.6], 'center': [30.0, 40.0, 0.8], 'velocity': [0.0, -4.0]},
        {'dims': [2.0, 4.5, 1.6], 'center': [-30.0, -40.0, 0.8], 'velocity': [2.5, 2.5]},
        {'dims': [2.0, 4.5, 1.6], 'center': [-60.0, 10.0, 0.8], 'velocity': [8.0, 0.0]},
        {'dims': [2.0, 4.5, 1.6], 'center': [60.0, -25.0, 0.8], 'velocity': [-7.0, 0.0]},
        {'dims': [2.0, 4.5, 1.6], 'center': [45.0, -70.0, 0.8], 'velocity': [0.0, 9.0]},
        {'dims': [2.0, 4.5, 1.6], 'center': [-70.0, -60.0, 0.8], 'velocity': [6.5, 3.0]},
    ],
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_scene():
    return generate(SceneConfig.from_dict(SMALL_SCENE))


@pytest.fixture
def mixed_scene():
    return generate(SceneConfig.from_dict(MIXED_SCENE))


@pytest.fixture
def scene_dir(tmp_path, small_scene):
    path = tmp_path / 'scene'
    dao.save_scene(small_scene, str(path))
    return path


def random_window(rng, num_frames=3, num_points=2000, extent=30.0, mask=True):
    frames = []
    for t in range(1, num_frames + 1):
        xy = rng.uniform(-extent / 2, extent / 2, size=(num_points, 2))
        z = rng.uniform(-1.0, 3.0, size=(num_points, 1))
        intensity = rng.uniform(0.0, 1.0, size=(num_points, 1))
        fg = rng.random(num_points) < 0.3 if mask else None
        frames.append(PointCloudFrame(t, np.hstack([xy, z, intensity]), fg))
    return SequenceWindow.from_frames(frames)


def random_proposals(rng, count, extent=20.0):
    return [Proposal(cx=rng.uniform(-extent / 2, extent / 2), cy=rng.uniform(-extent / 2, extent / 2),
                     cz=rng.uniform(0.0, 1.5), w=rng.uniform(0.5, 3.0), l=rng.uniform(0.5, 6.0),
                     h=rng.uniform(1.0, 2.0), yaw=rng.uniform(-np.pi, np.pi),
                     vx=rng.uniform(-2.0, 2.0), vy=rng.uniform(-2.0, 2.0), score=rng.uniform())
            for _ in range(count)]
