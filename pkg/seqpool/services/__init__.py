"""
服务层
运动传播、体素池化、特征编码、区域网络、场景模拟与流水线组合
"""

from seqpool.services.motion_propagation import PropagationConfig, CylindricalRegion, propagate, evaluate_recall
from seqpool.services.voxel_pooling import VoxelGrid, build_grid, pool_naive, pool_optimized, bench_pooling
from seqpool.services.feature_encoding import EncoderWeights, FeatureMatrix, encode_frame
from seqpool.services.region_network import NetworkConfig, NetworkWeights, run_network, total_loss
from seqpool.services.scene_sim import SceneConfig, generate, recall_experiment
from seqpool.services.pipeline import verify_pooling, run_pipeline

__all__ = [
    'PropagationConfig',
    'CylindricalRegion',
    'propagate',
    'evaluate_recall',
    'VoxelGrid',
    'build_grid',
    'pool_naive',
    'pool_optimized',
    'bench_pooling',
    'EncoderWeights',
    'FeatureMatrix',
    'encode_frame',
    'NetworkConfig',
    'NetworkWeights',
    'run_network',
    'total_loss',
    'SceneConfig',
    'generate',
    'recall_experiment',
    'verify_pooling',
    'run_pipeline'
]
