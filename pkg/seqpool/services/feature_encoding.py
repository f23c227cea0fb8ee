"""
Proposal 特征编码

几何嵌入: 采样点相对当前帧框九个关键点的偏移，经球坐标变换后送入 MLP
运动嵌入: 采样点相对当前帧 proposal 框 b0 九个关键点的原始偏移，拼接时间偏移后送入 MLP
两者逐元素相加得到 proposal 特征。
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from seqpool.model import Point3, Proposal, key_points
from seqpool.utils.errors import NonFiniteValue, ShapeMismatch, WidthMismatch

logger = logging.getLogger('log')

ACTIVATIONS = ('relu', 'none')
PROVENANCES = ('geometric', 'motion', 'fused', 'hidden')

GEOMETRIC_INPUT_WIDTH = 27
MOTION_INPUT_WIDTH = 28


# ==========================================
# MLP
# ==========================================
@dataclass(frozen=True, eq=False)
class MlpLayer:
    """全连接层 y = act(x W^T + b)，weight 形状 (out, in)"""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = 'none'

    def __post_init__(self):
        weight = np.array(self.weight, dtype=np.float64, copy=True)
        bias = np.array(self.bias, dtype=np.float64, copy=True).ravel()
        if weight.ndim != 2 or bias.shape[0] != weight.shape[0]:
            raise WidthMismatch(f'层形状不一致: weight {weight.shape}, bias {bias.shape}')
        if self.activation not in ACTIVATIONS:
            raise WidthMismatch(f'未知激活函数: {self.activation}')
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise NonFiniteValue('层参数含非有限值')
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, 'weight', weight)
        object.__setattr__(self, 'bias', bias)

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.T + self.bias
        if self.activation == 'relu':
            y = np.maximum(y, 0.0)
        return y

    @classmethod
    def random(cls, in_width: int, out_width: int, rng: np.random.Generator,
               activation: str = 'none', scale: float = 0.1) -> 'MlpLayer':
        """默认权重: uniform(-scale, scale)"""
        weight = rng.uniform(-scale, scale, size=(out_width, in_width))
        bias = rng.uniform(-scale, scale, size=out_width)
        return cls(weight, bias, activation)

    def to_dict(self):
        return {
            'rows': self.out_width,
            'cols': self.in_width,
            'weight': self.weight.ravel().tolist(),
            'bias': self.bias.tolist(),
            'act': self.activation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MlpLayer':
        rows, cols = int(data['rows']), int(data['cols'])
        weight = np.asarray(data['weight'], dtype=np.float64)
        if weight.size != rows * cols:
            raise WidthMismatch(f'权重元素数 {weight.size} != {rows} x {cols}')
        return cls(weight.reshape(rows, cols), data['bias'], data.get('act', 'none'))


@dataclass(frozen=True)
class MlpWeights:
    layers: Tuple[MlpLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise WidthMismatch('MLP 至少需要一层')
        for previous, current in zip(layers, layers[1:]):
            if previous.out_width != current.in_width:
                raise WidthMismatch(f'相邻层宽度不衔接: {previous.out_width} -> {current.in_width}')
        object.__setattr__(self, 'layers', layers)

    @property
    def input_width(self) -> int:
        return self.layers[0].in_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].out_width

    @classmethod
    def random(cls, widths: Sequence[int], seed: Union[int, np.random.Generator],
               scale: float = 0.1) -> 'MlpWeights':
        """隐藏层使用 ReLU，输出层无激活"""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        layers = []
        for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
            activation = 'relu' if i < len(widths) - 2 else 'none'
            layers.append(MlpLayer.random(w_in, w_out, rng, activation, scale))
        return cls(tuple(layers))

    def to_dict(self):
        return {'layers': [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> 'MlpWeights':
        return cls(tuple(MlpLayer.from_dict(layer) for layer in data['layers']))


def mlp_forward(x: np.ndarray, mlp: MlpWeights) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.input_width:
        raise WidthMismatch(f'输入宽度 {x.shape[-1]} != MLP 输入宽度 {mlp.input_width}')
    for layer in mlp.layers:
        x = layer(x)
    return x


# ==========================================
# 特征矩阵
# ==========================================
@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """K x D 点特征"""

    values: np.ndarray
    provenance: str = 'hidden'

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 2:
            raise ShapeMismatch(f'特征矩阵必须是二维: {values.shape}')
        if not np.isfinite(values).all():
            raise NonFiniteValue(f'{self.provenance} 特征含非有限值')
        if self.provenance not in PROVENANCES:
            raise ShapeMismatch(f'未知特征来源: {self.provenance}')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


# ==========================================
# 编码
# ==========================================
def spherical_transform_array(offsets: np.ndarray) -> np.ndarray:
    """
    (..., 3) 偏移 -> (..., 3) 的 (r, theta, phi)

    theta = arcsin(z / r)，phi 为象限正确的 atan2(y, x) 且取值 (-pi, pi]；
    r = 0 时全为 0，极点处 phi = 0
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    x, y, z = offsets[..., 0], offsets[..., 1], offsets[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    positive = r > 0
    safe_r = np.where(positive, r, 1.0)
    theta = np.where(positive, np.arcsin(np.clip(z / safe_r, -1.0, 1.0)), 0.0)
    on_axis = (x == 0) & (y == 0)
    phi = np.where(on_axis, 0.0, np.arctan2(y, x))
    phi = np.where(phi <= -math.pi, math.pi, phi)
    return np.stack([r, theta, phi], axis=-1)


def spherical_transform(offset: Sequence[float]) -> Tuple[float, float, float]:
    r, theta, phi = spherical_transform_array(np.asarray(offset, dtype=np.float64).reshape(1, 3))[0]
    return (float(r), float(theta), float(phi))


def _as_xyz(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        array = np.asarray(points, dtype=np.float64)
    else:
        array = np.array([p.as_tuple() if isinstance(p, Point3) else tuple(p) for p in points],
                         dtype=np.float64)
    if array.ndim != 2 or array.shape[1] < 3:
        raise ShapeMismatch(f'点数组形状应为 (K, 3) 或 (K, 4): {array.shape}')
    return array[:, :3]


def keypoint_offsets(points, box: Proposal) -> np.ndarray:
    """(K, 9, 3): 每个点减去框的九个关键点"""
    xyz = _as_xyz(points)
    return xyz[:, None, :] - key_points(box).array[None, :, :]


def geometric_inputs(points, box: Proposal) -> np.ndarray:
    offsets = keypoint_offsets(points, box)
    return spherical_transform_array(offsets).reshape(offsets.shape[0], GEOMETRIC_INPUT_WIDTH)


def motion_inputs(points, box0: Proposal, delta_t: float) -> np.ndarray:
    offsets = keypoint_offsets(points, box0).reshape(-1, 27)
    time_channel = np.full((offsets.shape[0], 1), float(delta_t))
    return np.hstack([offsets, time_channel])


def geometric_embedding(points, box: Proposal, mlp: MlpWeights) -> FeatureMatrix:
    """
    几何嵌入

    Args:
        points: K 个采样点（Point3 列表或 (K, 3|4) 数组）
        box: 该帧的 proposal 框
        mlp: 输入宽度 27 的 MLP
    """
    if mlp.input_width != GEOMETRIC_INPUT_WIDTH:
        raise WidthMismatch(f'几何嵌入 MLP 输入宽度应为 27: {mlp.input_width}')
    return FeatureMatrix(mlp_forward(geometric_inputs(points, box), mlp), 'geometric')


def motion_embedding(points, box0: Proposal, delta_t: float, mlp: MlpWeights) -> FeatureMatrix:
    """
    运动嵌入（不做球坐标变换）

    Args:
        points: K 个采样点
        box0: 当前帧 proposal 框
        delta_t: 该帧相对当前帧的时间偏移，原值拼接
        mlp: 输入宽度 28 的 MLP
    """
    if mlp.input_width != MOTION_INPUT_WIDTH:
        raise WidthMismatch(f'运动嵌入 MLP 输入宽度应为 28: {mlp.input_width}')
    return FeatureMatrix(mlp_forward(motion_inputs(points, box0, delta_t), mlp), 'motion')


def fuse_embeddings(g: FeatureMatrix, m: FeatureMatrix) -> FeatureMatrix:
    if g.shape != m.shape:
        raise ShapeMismatch(f'嵌入形状不一致: {g.shape} vs {m.shape}')
    return FeatureMatrix(g.values + m.values, 'fused')


@dataclass(frozen=True)
class EncoderWeights:
    geometric: MlpWeights
    motion: MlpWeights

    @property
    def feature_dim(self) -> int:
        return self.geometric.output_width

    @classmethod
    def default(cls, feature_dim: int, seed: int = 0) -> 'EncoderWeights':
        """27 -> D -> D 与 28 -> D -> D 两层 MLP，种子化 uniform(-0.1, 0.1)"""
        rng = np.random.default_rng([seed, 27])
        geometric = MlpWeights.random([GEOMETRIC_INPUT_WIDTH, feature_dim, feature_dim], rng)
        motion = MlpWeights.random([MOTION_INPUT_WIDTH, feature_dim, feature_dim], rng)
        return cls(geometric, motion)

    def to_dict(self):
        return {'geometric': self.geometric.to_dict(), 'motion': self.motion.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> 'EncoderWeights':
        weights = cls(MlpWeights.from_dict(data['geometric']), MlpWeights.from_dict(data['motion']))
        if weights.geometric.output_width != weights.motion.output_width:
            raise WidthMismatch('几何与运动嵌入输出宽度不一致')
        return weights


def encode_frame(points, box_t: Proposal, box0: Proposal, delta_t: float, weights: EncoderWeights,
                 use_motion_embedding: bool = True) -> FeatureMatrix:
    """单帧 proposal 特征 f = g + m；关闭运动嵌入时 f = g"""
    g = geometric_embedding(points, box_t, weights.geometric)
    if not use_motion_embedding:
        return FeatureMatrix(g.values, 'fused')
    m = motion_embedding(points, box0, delta_t, weights.motion)
    return fuse_embeddings(g, m)
