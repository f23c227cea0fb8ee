import os

# 是否开启debug模式
DEBUG = os.environ.get("SEQPOOL_DEBUG", '').lower() in ('1', 'true', 'yes')

# 日志级别
LOG_LEVEL = os.environ.get("SEQPOOL_LOG_LEVEL", 'DEBUG' if DEBUG else 'INFO')

# 体素采样配置（体素边长 v 与每体素保留点数 k）
VOXEL_SIZE = float(os.environ.get("SEQPOOL_VOXEL_SIZE", '0.4'))
POINTS_PER_VOXEL = int(os.environ.get("SEQPOOL_POINTS_PER_VOXEL", '32'))

# 每个proposal每帧采样点数 K
POINTS_PER_PROPOSAL = int(os.environ.get("SEQPOOL_POINTS_PER_PROPOSAL", '128'))

# 区域网络配置
FEATURE_DIM = int(os.environ.get("SEQPOOL_FEATURE_DIM", '256'))
NUM_HEADS = int(os.environ.get("SEQPOOL_NUM_HEADS", '8'))
NUM_BLOCKS = int(os.environ.get("SEQPOOL_NUM_BLOCKS", '3'))
LOSS_ALPHA = float(os.environ.get("SEQPOOL_LOSS_ALPHA", '1.0'))

# 运动传播配置
GAMMA = float(os.environ.get("SEQPOOL_GAMMA", '1.1'))

# 随机种子与并行度
SEED = int(os.environ.get("SEQPOOL_SEED", '0'))
WORKERS = int(os.environ.get("SEQPOOL_WORKERS", '1'))
