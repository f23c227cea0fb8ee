import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from seqpool.utils.errors import (
    DomainError, EmptyWindow, MaskLengthMismatch, NonFiniteValue, ShapeMismatch,
    UnsortedFrames
)


def normalize_yaw(yaw: float) -> float:
    """把角度归一化到 (-pi, pi]"""
    wrapped = math.remainder(yaw, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# ==========================================
# 点
# ==========================================
@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.intensity)):
            raise NonFiniteValue(f'点坐标非有限值: {self}')

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.intensity)


# ==========================================
# 单帧点云
# ==========================================
@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    """一次 LiDAR 扫描。points 为 (N, 4) 的 [x, y, z, intensity] 数组，点序稳定"""

    frame_index: int
    points: np.ndarray
    foreground_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, copy=True)
        if points.size == 0:
            points = points.reshape(0, 4)
        if points.ndim != 2 or points.shape[1] != 4:
            raise ShapeMismatch(f'帧 {self.frame_index} 的点数组形状应为 (N, 4)，实际为 {points.shape}')
        object.__setattr__(self, 'points', _readonly(points))
        if self.foreground_mask is not None:
            mask = np.array(self.foreground_mask, dtype=bool, copy=True).ravel()
            object.__setattr__(self, 'foreground_mask', _readonly(mask))

    @classmethod
    def from_points(cls, frame_index: int, points: Iterable[Point3],
                    foreground_mask: Optional[Sequence[bool]] = None) -> 'PointCloudFrame':
        rows = [p.as_tuple() for p in points]
        array = np.array(rows, dtype=np.float64).reshape(len(rows), 4)
        return cls(frame_index, array, foreground_mask)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def has_mask(self) -> bool:
        return self.foreground_mask is not None

    def point(self, index: int) -> Point3:
        return Point3(*(float(v) for v in self.points[index]))

    def reindexed(self, frame_index: int) -> 'PointCloudFrame':
        return PointCloudFrame(frame_index, self.points, self.foreground_mask)

    def to_dict(self):
        return {
            'frame_index': self.frame_index,
            'num_points': self.num_points,
            'has_mask': self.has_mask,
        }


# ==========================================
# 序列窗口
# ==========================================
@dataclass(frozen=True)
class SequenceWindow:
    frames: Tuple[PointCloudFrame, ...]
    current_index: int

    def __post_init__(self):
        object.__setattr__(self, 'frames', tuple(self.frames))

    @classmethod
    def from_frames(cls, frames: Sequence[PointCloudFrame]) -> 'SequenceWindow':
        frames = tuple(frames)
        current = frames[-1].frame_index if frames else 0
        return cls(frames, current)

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, frame_index: int) -> Optional[PointCloudFrame]:
        for f in self.frames:
            if f.frame_index == frame_index:
                return f
        return None

    def tail(self, length: int) -> 'SequenceWindow':
        """取最近 length 帧并重新编号为 1..length"""
        if length < 1 or length > len(self.frames):
            raise DomainError(f'窗口长度 {length} 超出可用帧数 {len(self.frames)}')
        kept = self.frames[-length:]
        return SequenceWindow(tuple(f.reindexed(i + 1) for i, f in enumerate(kept)), length)

    def to_dict(self):
        return {
            'current_index': self.current_index,
            'frames': [f.to_dict() for f in self.frames],
        }


def validate_window(window: SequenceWindow) -> bool:
    """
    校验序列窗口的全部类型不变量

    Returns:
        True（全部满足）

    Raises:
        EmptyWindow / UnsortedFrames / MaskLengthMismatch / NonFiniteValue，
        错误信息指出第一个出错的帧或点
    """
    if not window.frames or window.current_index < 1:
        raise EmptyWindow('序列窗口为空', current_index=window.current_index)

    previous = None
    for f in window.frames:
        if f.frame_index < 1:
            raise UnsortedFrames(f'帧编号必须 >= 1: {f.frame_index}', frame_index=f.frame_index)
        if previous is not None and f.frame_index <= previous:
            raise UnsortedFrames(f'帧 {f.frame_index} 出现在帧 {previous} 之后',
                                 frame_index=f.frame_index)
        previous = f.frame_index
    # 升序之外还必须连续为 1..T
    for position, f in enumerate(window.frames, start=1):
        if f.frame_index != position:
            raise UnsortedFrames(f'缺少帧 {position}（下一帧为 {f.frame_index}）',
                                 frame_index=f.frame_index, missing_index=position)
    if previous != window.current_index:
        raise UnsortedFrames(f'最后一帧编号 {previous} 与当前帧 {window.current_index} 不一致',
                             frame_index=previous)

    for f in window.frames:
        if f.foreground_mask is not None and len(f.foreground_mask) != f.num_points:
            raise MaskLengthMismatch(
                f'帧 {f.frame_index} 掩码长度 {len(f.foreground_mask)} != 点数 {f.num_points}',
                frame_index=f.frame_index)
        bad = ~np.isfinite(f.points).all(axis=1)
        if bad.any():
            index = int(np.argmax(bad))
            raise NonFiniteValue(f'帧 {f.frame_index} 的第 {index} 个点含非有限值',
                                 frame_index=f.frame_index, point_index=index)
    return True


# ==========================================
# Proposal
# ==========================================
@dataclass(frozen=True)
class Proposal:
    """当前帧上的有向 3D 框，附带单位帧时间的平面速度与置信度"""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    score: float = 0.0

    FIELDS = ('cx', 'cy', 'cz', 'w', 'l', 'h', 'yaw', 'vx', 'vy', 'score')

    def __post_init__(self):
        for name in self.FIELDS:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f'proposal 字段 {name} 非有限值', field=name)
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise DomainError(f'proposal 尺寸必须为正: w={self.w}, l={self.l}, h={self.h}')
        object.__setattr__(self, 'yaw', normalize_yaw(self.yaw))

    @property
    def center(self) -> Tuple[float, float, float]:
        return (self.cx, self.cy, self.cz)

    @property
    def dims(self) -> Tuple[float, float, float]:
        return (self.w, self.l, self.h)

    @property
    def velocity(self) -> Tuple[float, float]:
        return (self.vx, self.vy)

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    @property
    def plan_diagonal(self) -> float:
        return math.sqrt(self.w ** 2 + self.l ** 2)

    def shifted(self, delta_t: float) -> 'Proposal':
        """沿估计速度回溯 delta_t 帧后的框（尺寸、朝向不变）"""
        return Proposal(self.cx - self.vx * delta_t, self.cy - self.vy * delta_t, self.cz,
                        self.w, self.l, self.h, self.yaw, self.vx, self.vy, self.score)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> 'Proposal':
        return cls(**{name: data[name] for name in cls.FIELDS if name in data})


# ==========================================
# 关键点
# ==========================================

# (w, l, h) 半尺寸的符号顺序: ---, --+, -+-, -++, +--, +-+, ++-, +++
CORNER_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))


@dataclass(frozen=True, eq=False)
class KeyPoints:
    """九个关键点：第 0 个为框中心，其后为按 CORNER_SIGNS 排列的八个角点"""

    array: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return 9

    def __getitem__(self, index: int) -> Point3:
        return Point3(*(float(v) for v in self.array[index]))

    @property
    def center(self) -> Point3:
        return self[0]

    def to_points(self) -> List[Point3]:
        return [self[i] for i in range(9)]


def key_points(p: Proposal) -> KeyPoints:
    """计算 proposal 的中心点 + 八个角点"""
    half = CORNER_SIGNS * np.array([p.w / 2.0, p.l / 2.0, p.h / 2.0])
    cos_t, sin_t = math.cos(p.yaw), math.sin(p.yaw)
    corners = np.empty((8, 3))
    corners[:, 0] = p.cx + half[:, 0] * cos_t - half[:, 1] * sin_t
    corners[:, 1] = p.cy + half[:, 0] * sin_t + half[:, 1] * cos_t
    corners[:, 2] = p.cz + half[:, 2]
    array = np.vstack([np.array([[p.cx, p.cy, p.cz]]), corners])
    return KeyPoints(_readonly(array))
