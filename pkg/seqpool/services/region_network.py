"""
区域网络（仅前向）

每个学习块: 逐帧多头自注意力 + FFN（均带残差），再做跨帧的双向特征聚合 BiFA。
三个学习块之后用一个可学习 query 对每帧点特征做交叉注意力解码，
各帧解码结果拼接后送入检测头，输出置信度与 7 维框残差。
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from seqpool.model import Proposal, normalize_yaw
from seqpool.services.feature_encoding import FeatureMatrix, MlpLayer, MlpWeights
from seqpool.utils.errors import (
    AlignmentMismatch, DomainError, EmptySequence, ShapeMismatch, WidthMismatch
)

logger = logging.getLogger('log')

AGGREGATIONS = ('bidirectional', 'forward', 'backward', 'none')
BOUNDARIES = ('self', 'zero')
GLOBAL_POOLINGS = ('query', 'max')
BOX_DIM = 7


@dataclass(frozen=True)
class NetworkConfig:
    """区域网络结构配置，含消融开关"""

    num_points: int = 128
    feature_dim: int = 256
    num_heads: int = 8
    num_blocks: int = 3
    boundary: str = 'self'
    aggregation: str = 'bidirectional'
    global_pooling: str = 'query'
    use_self_attention: bool = True
    use_motion_embedding: bool = True

    def __post_init__(self):
        if self.feature_dim < 1 or self.num_heads < 1 or self.feature_dim % self.num_heads:
            raise DomainError(f'头数 {self.num_heads} 必须整除特征维度 {self.feature_dim}')
        if self.num_points < 1 or self.num_blocks < 1:
            raise DomainError('K 与学习块数必须 >= 1')
        if self.boundary not in BOUNDARIES:
            raise DomainError(f'未知边界规则: {self.boundary}')
        if self.aggregation not in AGGREGATIONS:
            raise DomainError(f'未知聚合方式: {self.aggregation}')
        if self.global_pooling not in GLOBAL_POOLINGS:
            raise DomainError(f'未知全局池化方式: {self.global_pooling}')

    def to_dict(self):
        return {
            'K': self.num_points, 'D': self.feature_dim, 'H': self.num_heads,
            'num_blocks': self.num_blocks, 'boundary': self.boundary,
            'aggregation': self.aggregation, 'global_pooling': self.global_pooling,
            'use_self_attention': self.use_self_attention,
            'use_motion_embedding': self.use_motion_embedding,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'NetworkConfig':
        keys = {'K': 'num_points', 'D': 'feature_dim', 'H': 'num_heads'}
        kwargs = {keys.get(name, name): value for name, value in data.items()}
        return cls(**kwargs)


# ==========================================
# 权重
# ==========================================
@dataclass(frozen=True)
class AttentionWeights:
    """多头注意力参数；第 h 个头使用投影输出的第 h 段 D/H 个通道"""

    query: MlpLayer
    key: MlpLayer
    value: MlpLayer
    output: MlpLayer
    num_heads: int

    def __post_init__(self):
        dim = self.output.out_width
        for layer in (self.query, self.key, self.value, self.output):
            if layer.weight.shape != (dim, dim):
                raise WidthMismatch(f'注意力投影应为 {dim}x{dim}: {layer.weight.shape}')
        if self.num_heads < 1 or dim % self.num_heads:
            raise WidthMismatch(f'头数 {self.num_heads} 不能整除维度 {dim}')

    @property
    def dim(self) -> int:
        return self.output.out_width

    @classmethod
    def random(cls, dim: int, num_heads: int, rng: np.random.Generator) -> 'AttentionWeights':
        return cls(*(MlpLayer.random(dim, dim, rng) for _ in range(4)), num_heads=num_heads)

    def to_dict(self):
        return {'num_heads': self.num_heads, 'query': self.query.to_dict(), 'key': self.key.to_dict(),
                'value': self.value.to_dict(), 'output': self.output.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> 'AttentionWeights':
        return cls(*(MlpLayer.from_dict(data[name]) for name in ('query', 'key', 'value', 'output')),
                   num_heads=int(data['num_heads']))


def random_ffn(dim: int, rng: np.random.Generator) -> MlpWeights:
    """D -> 4D (ReLU) -> D"""
    return MlpWeights.random([dim, 4 * dim, dim], rng)


@dataclass(frozen=True)
class BlockWeights:
    attention: AttentionWeights
    ffn: MlpWeights
    forward_conv: MlpLayer
    backward_conv: MlpLayer

    def __post_init__(self):
        dim = self.attention.dim
        if self.ffn.input_width != dim or self.ffn.output_width != dim:
            raise WidthMismatch(f'FFN 宽度应为 {dim}')
        for conv in (self.forward_conv, self.backward_conv):
            if conv.weight.shape != (dim, 2 * dim):
                raise WidthMismatch(f'BiFA 卷积应为 {dim}x{2 * dim}: {conv.weight.shape}')

    @property
    def dim(self) -> int:
        return self.attention.dim

    @classmethod
    def random(cls, dim: int, num_heads: int, rng: np.random.Generator) -> 'BlockWeights':
        return cls(AttentionWeights.random(dim, num_heads, rng), random_ffn(dim, rng),
                   MlpLayer.random(2 * dim, dim, rng), MlpLayer.random(2 * dim, dim, rng))

    def to_dict(self):
        return {'attention': self.attention.to_dict(), 'ffn': self.ffn.to_dict(),
                'forward_conv': self.forward_conv.to_dict(), 'backward_conv': self.backward_conv.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> 'BlockWeights':
        return cls(AttentionWeights.from_dict(data['attention']), MlpWeights.from_dict(data['ffn']),
                   MlpLayer.from_dict(data['forward_conv']), MlpLayer.from_dict(data['backward_conv']))


@dataclass(frozen=True)
class DecoderWeights:
    query: np.ndarray
    attention: AttentionWeights
    ffn: MlpWeights

    def __post_init__(self):
        query = np.array(self.query, dtype=np.float64, copy=True).ravel()
        if query.shape[0] != self.attention.dim:
            raise WidthMismatch(f'query 维度 {query.shape[0]} != {self.attention.dim}')
        query.setflags(write=False)
        object.__setattr__(self, 'query', query)

    @classmethod
    def random(cls, dim: int, num_heads: int, rng: np.random.Generator) -> 'DecoderWeights':
        return cls(rng.uniform(-0.1, 0.1, size=dim), AttentionWeights.random(dim, num_heads, rng),
                   random_ffn(dim, rng))

    def to_dict(self):
        return {'query': self.query.tolist(), 'attention': self.attention.to_dict(), 'ffn': self.ffn.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> 'DecoderWeights':
        return cls(data['query'], AttentionWeights.from_dict(data['attention']), MlpWeights.from_dict(data['ffn']))


@dataclass(frozen=True)
class HeadWeights:
    """拼接的 T*D 维解码向量 -> 置信度 logit / 7 维框残差，各一个线性层"""

    confidence: MlpLayer
    regression: MlpLayer

    def __post_init__(self):
        if self.confidence.out_width != 1 or self.regression.out_width != BOX_DIM:
            raise WidthMismatch('检测头输出应为 1 与 7')
        if self.confidence.in_width != self.regression.in_width:
            raise WidthMismatch('两个检测头输入宽度不一致')

    @property
    def in_width(self) -> int:
        return self.confidence.in_width

    @classmethod
    def random(cls, in_width: int, rng: np.random.Generator) -> 'HeadWeights':
        return cls(MlpLayer.random(in_width, 1, rng), MlpLayer.random(in_width, BOX_DIM, rng))

    def to_dict(self):
        return {'confidence': self.confidence.to_dict(), 'regression': self.regression.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> 'HeadWeights':
        return cls(MlpLayer.from_dict(data['confidence']), MlpLayer.from_dict(data['regression']))


# ==========================================
# 特征序列
# ==========================================
@dataclass(frozen=True)
class SequenceFeatures:
    """t = 1..T 的每帧 K x D 特征"""

    frames: Tuple[FeatureMatrix, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise EmptySequence('特征序列为空')
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise ShapeMismatch(f'第 {i + 1} 帧特征形状 {f.shape} != {shape}')
        object.__setattr__(self, 'frames', frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].shape

    def stacked(self) -> np.ndarray:
        return np.stack([f.values for f in self.frames])

    @classmethod
    def from_arrays(cls, arrays, provenance: str = 'hidden') -> 'SequenceFeatures':
        return cls(tuple(FeatureMatrix(a, provenance) for a in arrays))


# ==========================================
# 前向算子
# ==========================================
def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def multi_head_attention(q_in: np.ndarray, kv_in: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """
    缩放点积多头注意力

    Args:
        q_in: (Q, D) 查询输入
        kv_in: (K, D) 键/值输入
    Returns:
        (Q, D) 输出投影后的结果
    """
    heads = w.num_heads
    head_dim = w.dim // heads
    q = w.query(q_in).reshape(q_in.shape[0], heads, head_dim).transpose(1, 0, 2)
    k = w.key(kv_in).reshape(kv_in.shape[0], heads, head_dim).transpose(1, 0, 2)
    v = w.value(kv_in).reshape(kv_in.shape[0], heads, head_dim).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(head_dim)
    attended = softmax(scores) @ v
    merged = attended.transpose(1, 0, 2).reshape(q_in.shape[0], w.dim)
    return w.output(merged)


def _check_dim(features: FeatureMatrix, dim: int):
    if features.cols != dim:
        raise ShapeMismatch(f'特征维度 {features.cols} 与权重维度 {dim} 不一致')


def mhsa_ffn(features: FeatureMatrix, w: BlockWeights) -> FeatureMatrix:
    """自注意力 + 残差，再 FFN + 残差"""
    _check_dim(features, w.dim)
    x = features.values
    y = x + multi_head_attention(x, x, w.attention)
    z = y
    for layer in w.ffn.layers:
        z = layer(z)
    return FeatureMatrix(y + z, 'hidden')


def _pool_repeat(values: np.ndarray) -> np.ndarray:
    return np.broadcast_to(values.max(axis=0, keepdims=True), values.shape)


def maxpool_repeat(features: FeatureMatrix) -> FeatureMatrix:
    """按列取最大值并广播回 K 行"""
    if features.rows < 1:
        raise ShapeMismatch('Max-pool&Repeat 需要至少一行')
    return FeatureMatrix(_pool_repeat(features.values), 'hidden')


def _conv(values: np.ndarray, context: np.ndarray, conv: MlpLayer) -> np.ndarray:
    """逐点卷积 2D -> D"""
    return conv(np.concatenate([values, context], axis=1))


def _context(values: np.ndarray, neighbour: Optional[np.ndarray], boundary: str) -> np.ndarray:
    if neighbour is not None:
        return _pool_repeat(neighbour)
    if boundary == 'zero':
        return np.zeros_like(values)
    return _pool_repeat(values)


def forward_path(frames: List[np.ndarray], conv: MlpLayer, boundary: str) -> List[np.ndarray]:
    """h_F^t = Conv(Concat(f^t, ctx(f^{t-1})))；第一帧使用自身上下文"""
    return [_conv(f, _context(f, frames[t - 1] if t > 0 else None, boundary), conv)
            for t, f in enumerate(frames)]


def backward_path(frames: List[np.ndarray], conv: MlpLayer, boundary: str) -> List[np.ndarray]:
    """h_B^t = Conv(Concat(h^t, ctx(h^{t+1})))；最后一帧使用自身上下文"""
    last = len(frames) - 1
    return [_conv(f, _context(f, frames[t + 1] if t < last else None, boundary), conv)
            for t, f in enumerate(frames)]


def bifa(seq: SequenceFeatures, w: BlockWeights, boundary: str = 'self',
         aggregation: str = 'bidirectional') -> SequenceFeatures:
    """
    双向特征聚合

    Args:
        seq: t = 1..T 的特征
        w: 前向/后向两条路径各自共享的逐点卷积
        boundary: 'self' 边界帧拼接自身上下文，'zero' 拼接全零
        aggregation: 'bidirectional' | 'forward' | 'backward' | 'none'
    """
    if boundary not in BOUNDARIES or aggregation not in AGGREGATIONS:
        raise DomainError(f'未知 BiFA 配置: {boundary}/{aggregation}')
    if len(seq) == 0:
        raise EmptySequence('特征序列为空')
    _check_dim(seq.frames[0], w.dim)
    frames = [f.values for f in seq.frames]
    if aggregation == 'none':
        return seq
    if aggregation in ('bidirectional', 'forward'):
        frames = forward_path(frames, w.forward_conv, boundary)
    if aggregation in ('bidirectional', 'backward'):
        frames = backward_path(frames, w.backward_conv, boundary)
    return SequenceFeatures.from_arrays(frames)


def learning_block(seq: SequenceFeatures, w: BlockWeights,
                   config: Optional[NetworkConfig] = None) -> SequenceFeatures:
    """逐帧 MHSA+FFN，然后跨帧 BiFA"""
    config = config or NetworkConfig(num_points=seq.shape[0], feature_dim=seq.shape[1],
                                     num_heads=w.attention.num_heads)
    if config.use_self_attention:
        seq = SequenceFeatures(tuple(mhsa_ffn(f, w) for f in seq.frames))
    return bifa(seq, w, config.boundary, config.aggregation)


def decode(query: np.ndarray, features: FeatureMatrix, w: DecoderWeights) -> np.ndarray:
    """
    单 query 交叉注意力解码

    e_hat = Attention(q, h, h) + q，e = FFN(e_hat) + e_hat，输出 D 维向量
    """
    query = np.asarray(query, dtype=np.float64).ravel()
    _check_dim(features, w.attention.dim)
    if query.shape[0] != w.attention.dim:
        raise ShapeMismatch(f'query 维度 {query.shape[0]} != {w.attention.dim}')
    q = query.reshape(1, -1)
    e_hat = multi_head_attention(q, features.values, w.attention) + q
    e = e_hat
    for layer in w.ffn.layers:
        e = layer(e)
    return (e + e_hat)[0]


def global_feature(features: FeatureMatrix, w: DecoderWeights, pooling: str = 'query') -> np.ndarray:
    if pooling == 'max':
        return features.values.max(axis=0)
    return decode(w.query, features, w)


def apply_heads(encoded: Sequence[np.ndarray], heads: HeadWeights) -> Tuple[float, np.ndarray]:
    """拼接各帧解码向量，输出 (置信度 logit, 7 维残差)"""
    x = np.concatenate([np.asarray(e, dtype=np.float64).ravel() for e in encoded])
    if x.shape[0] != heads.in_width:
        raise WidthMismatch(f'检测头输入宽度 {heads.in_width} != 拼接维度 {x.shape[0]}')
    return float(heads.confidence(x)[0]), heads.regression(x)


# ==========================================
# 网络整体权重
# ==========================================
@dataclass(frozen=True)
class NetworkWeights:
    blocks: Tuple[BlockWeights, ...]
    decoder: DecoderWeights
    heads: HeadWeights

    @classmethod
    def default(cls, config: NetworkConfig, num_frames: int, seed: int = 0) -> 'NetworkWeights':
        rng = np.random.default_rng([seed, 256])
        dim, heads = config.feature_dim, config.num_heads
        blocks = tuple(BlockWeights.random(dim, heads, rng) for _ in range(config.num_blocks))
        return cls(blocks, DecoderWeights.random(dim, heads, rng), HeadWeights.random(num_frames * dim, rng))

    def to_dict(self):
        return {'blocks': [b.to_dict() for b in self.blocks], 'decoder': self.decoder.to_dict(),
                'heads': self.heads.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> 'NetworkWeights':
        return cls(tuple(BlockWeights.from_dict(b) for b in data['blocks']),
                   DecoderWeights.from_dict(data['decoder']), HeadWeights.from_dict(data['heads']))


@dataclass
class BlockPrediction:
    confidence_logit: float
    residuals: np.ndarray
    encoded: List[np.ndarray] = field(repr=False)


def run_network(seq: SequenceFeatures, weights: NetworkWeights, config: NetworkConfig,
                intermediate: bool = False) -> List[BlockPrediction]:
    """
    依次经过全部学习块

    Returns:
        intermediate=True 时每个块一份预测（中间监督），否则只有最后一个块
    """
    predictions = []
    for i, block in enumerate(weights.blocks):
        seq = learning_block(seq, block, config)
        if intermediate or i == len(weights.blocks) - 1:
            encoded = [global_feature(f, weights.decoder, config.global_pooling) for f in seq.frames]
            logit, residuals = apply_heads(encoded, weights.heads)
            predictions.append(BlockPrediction(logit, residuals, encoded))
    return predictions


# ==========================================
# 框残差编码与损失
# ==========================================
def encode_box_residuals(proposal: Proposal, target: Proposal) -> np.ndarray:
    """
    7 维回归目标（自定义编码）:
    (dx / 对角线, dy / 对角线, dz / h, log(w'/w), log(l'/l), log(h'/h), 归一化朝向差)
    """
    diagonal = proposal.plan_diagonal
    return np.array([
        (target.cx - proposal.cx) / diagonal,
        (target.cy - proposal.cy) / diagonal,
        (target.cz - proposal.cz) / proposal.h,
        math.log(target.w / proposal.w),
        math.log(target.l / proposal.l),
        math.log(target.h / proposal.h),
        normalize_yaw(target.yaw - proposal.yaw),
    ])


def decode_box_residuals(proposal: Proposal, residuals: Sequence[float]) -> Proposal:
    """encode_box_residuals 的逆变换，速度与置信度沿用 proposal"""
    r = np.asarray(residuals, dtype=np.float64)
    if r.shape != (BOX_DIM,):
        raise ShapeMismatch(f'框残差应为 7 维: {r.shape}')
    diagonal = proposal.plan_diagonal
    return replace(
        proposal,
        cx=proposal.cx + r[0] * diagonal,
        cy=proposal.cy + r[1] * diagonal,
        cz=proposal.cz + r[2] * proposal.h,
        w=proposal.w * math.exp(r[3]),
        l=proposal.l * math.exp(r[4]),
        h=proposal.h * math.exp(r[5]),
        yaw=proposal.yaw + r[6],
    )


@dataclass(frozen=True, eq=False)
class LossTargets:
    confidence: np.ndarray
    box_residuals: np.ndarray
    positive: np.ndarray

    def __post_init__(self):
        for name in ('confidence', 'box_residuals', 'positive'):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        object.__setattr__(self, 'confidence', self.confidence.astype(np.float64).ravel())
        object.__setattr__(self, 'positive', self.positive.astype(bool).ravel())
        object.__setattr__(self, 'box_residuals',
                           self.box_residuals.astype(np.float64).reshape(-1, BOX_DIM))

    def __len__(self) -> int:
        return len(self.confidence)


def confidence_target(proposal: Proposal, truth: Proposal) -> float:
    """平面中心距离相对真值半对角线的线性衰减，1 表示中心重合"""
    distance = math.hypot(proposal.cx - truth.cx, proposal.cy - truth.cy)
    return max(0.0, 1.0 - distance / (0.5 * truth.plan_diagonal))


def build_targets(proposals: Sequence[Proposal], truths: Sequence[Proposal],
                  positive_threshold: float = 0.5) -> LossTargets:
    if len(proposals) != len(truths):
        raise AlignmentMismatch(f'proposal 数 {len(proposals)} != 真值数 {len(truths)}')
    confidence = np.array([confidence_target(p, g) for p, g in zip(proposals, truths)])
    residuals = np.array([encode_box_residuals(p, g) for p, g in zip(proposals, truths)]).reshape(-1, BOX_DIM)
    return LossTargets(confidence, residuals, confidence > positive_threshold)


def binary_cross_entropy_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """数值稳定的逐元素 BCE"""
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def smooth_l1(diff: np.ndarray, beta: float = 1.0) -> np.ndarray:
    absolute = np.abs(diff)
    return np.where(absolute < beta, 0.5 * absolute ** 2 / beta, absolute - 0.5 * beta)


@dataclass
class LossBreakdown:
    total: float
    confidence: float
    regression: float

    def to_dict(self):
        return {'total': self.total, 'conf': self.confidence, 'reg': self.regression}


def loss_terms(confidence_logits, box_residuals, targets: LossTargets, alpha: float,
               beta: float = 1.0) -> LossBreakdown:
    if not alpha >= 0:
        raise DomainError(f'alpha 必须 >= 0: {alpha}')
    logits = np.asarray(confidence_logits, dtype=np.float64).ravel()
    residuals = np.asarray(box_residuals, dtype=np.float64)
    if residuals.size == 0:
        residuals = residuals.reshape(0, BOX_DIM)
    if residuals.ndim != 2 or residuals.shape[1] != BOX_DIM:
        raise AlignmentMismatch(f'框残差应为 (M, 7): {residuals.shape}')
    if not (len(logits) == residuals.shape[0] == len(targets)):
        raise AlignmentMismatch(f'预测与目标数量不一致: {len(logits)}, {residuals.shape[0]}, {len(targets)}')

    conf = float(binary_cross_entropy_with_logits(logits, targets.confidence).mean()) if len(logits) else 0.0
    if targets.positive.any():
        diff = residuals[targets.positive] - targets.box_residuals[targets.positive]
        reg = float(smooth_l1(diff, beta).mean(axis=1).mean())
    else:
        reg = 0.0
    return LossBreakdown(conf + alpha * reg, conf, reg)


def total_loss(confidence_logits, box_residuals, targets: LossTargets, alpha: float) -> float:
    """L_total = L_conf + alpha * L_reg"""
    return loss_terms(confidence_logits, box_residuals, targets, alpha).total


def intermediate_loss(per_block: Sequence[Tuple[Sequence[float], np.ndarray]], targets: LossTargets,
                      alpha: float) -> float:
    """中间监督: 对每个学习块的 (logits, residuals) 求 total_loss 后相加"""
    return sum(total_loss(logits, residuals, targets, alpha) for logits, residuals in per_block)
