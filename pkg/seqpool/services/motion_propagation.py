"""
运动引导的序列池化区域

把当前帧 proposal 按估计速度回溯到之前各帧，得到每帧的圆柱形池化区域，
并评估区域对前景点的召回率。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from seqpool.model import Point3, Proposal, SequenceWindow
from seqpool.utils.errors import DomainError, MissingMask

logger = logging.getLogger('log')


@dataclass(frozen=True)
class PropagationConfig:
    gamma: float = 1.0
    window_length: int = 1

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 1.0:
            raise DomainError(f'gamma 必须为 >= 1 的有限值: {self.gamma}')
        if self.window_length < 1:
            raise DomainError(f'窗口长度必须 >= 1: {self.window_length}')


@dataclass(frozen=True)
class CylindricalRegion:
    """
    某帧上的无限高圆柱区域

    center 已折算 -v * delta_t 的位移；center_z 为源 proposal 的 p_z，用于空区域填充
    """

    frame_index: int
    center_x: float
    center_y: float
    diameter: float
    source_proposal_id: int
    delta_t: int = 0
    center_z: float = 0.0

    @property
    def radius_sq(self) -> float:
        return (self.diameter / 2.0) ** 2

    def to_dict(self):
        return {
            'frame_index': self.frame_index,
            'center': [self.center_x, self.center_y],
            'diameter': self.diameter,
            'source_proposal_id': self.source_proposal_id,
            'delta_t': self.delta_t,
        }


def region_diameter(w: float, l: float, gamma: float, delta_t: int) -> float:
    """d = sqrt(w^2 + l^2) * gamma^(delta_t + 1)"""
    if w <= 0 or l <= 0:
        raise DomainError(f'尺寸必须为正: w={w}, l={l}')
    if not math.isfinite(gamma) or gamma < 1.0:
        raise DomainError(f'gamma 必须 >= 1: {gamma}')
    if delta_t < 0:
        raise DomainError(f'时间偏移必须 >= 0: {delta_t}')
    return math.sqrt(w * w + l * l) * gamma ** (delta_t + 1)


def propagate(p: Proposal, config: PropagationConfig, proposal_id: int = 0) -> List[CylindricalRegion]:
    """
    把当前帧 T 的 proposal 回溯到 t = 1..T

    Returns:
        按 t 升序排列的 T 个区域
    """
    total = config.window_length
    regions = []
    for t in range(1, total + 1):
        delta_t = total - t
        regions.append(CylindricalRegion(
            frame_index=t,
            center_x=p.cx - p.vx * delta_t,
            center_y=p.cy - p.vy * delta_t,
            diameter=region_diameter(p.w, p.l, config.gamma, delta_t),
            source_proposal_id=proposal_id,
            delta_t=delta_t,
            center_z=p.cz,
        ))
    return regions


def propagate_all(proposals: Sequence[Proposal], config: PropagationConfig) -> List[List[CylindricalRegion]]:
    """按 proposal 分组的区域列表，proposal_id 即其在列表中的下标"""
    return [propagate(p, config, proposal_id=i) for i, p in enumerate(proposals)]


def point_in_region(pt: Point3, region: CylindricalRegion) -> bool:
    """平面距离严格小于半径即落入区域，z 不参与"""
    dx = pt.x - region.center_x
    dy = pt.y - region.center_y
    return dx * dx + dy * dy < region.radius_sq


def points_in_region(xy: np.ndarray, region: CylindricalRegion) -> np.ndarray:
    """point_in_region 的批量版本，xy 为 (N, 2) 或更宽的数组"""
    dx = xy[:, 0] - region.center_x
    dy = xy[:, 1] - region.center_y
    return dx * dx + dy * dy < region.radius_sq


@dataclass
class RecallReport:
    overall: float
    per_frame: List[float]
    vacuous: bool
    gamma: Optional[float] = None
    foreground_total: int = 0
    foreground_hit: int = 0
    per_frame_counts: List[Dict[str, int]] = field(default_factory=list)

    def to_dict(self):
        return {
            'gamma': self.gamma,
            'overall': self.overall,
            'per_frame': list(self.per_frame),
            'vacuous': self.vacuous,
        }


def evaluate_recall(window: SequenceWindow, regions: Sequence[Sequence[CylindricalRegion]],
                    gamma: Optional[float] = None,
                    point_subsets: Optional[Sequence[np.ndarray]] = None) -> RecallReport:
    """
    前景点召回率：落入所在帧至少一个区域的前景点占全部前景点的比例

    Args:
        window: 每帧都带前景掩码的序列窗口
        regions: 按 proposal 分组的区域
        gamma: 仅用于报告
        point_subsets: 可选，每帧一个布尔数组，只统计其中的前景点（按速度类别统计时使用）

    Returns:
        RecallReport；分母为 0 时召回率记为 1.0 并标记 vacuous
    """
    for f in window.frames:
        if f.foreground_mask is None:
            raise MissingMask(f'帧 {f.frame_index} 缺少前景掩码', frame_index=f.frame_index)

    by_frame: Dict[int, List[CylindricalRegion]] = {}
    for group in regions:
        for region in group:
            by_frame.setdefault(region.frame_index, []).append(region)

    per_frame = []
    counts = []
    total = 0
    hit = 0
    for position, f in enumerate(window.frames):
        target = f.foreground_mask.copy()
        if point_subsets is not None:
            target &= np.asarray(point_subsets[position], dtype=bool)
        covered = np.zeros(f.num_points, dtype=bool)
        for region in by_frame.get(f.frame_index, []):
            covered |= points_in_region(f.xy, region)
        frame_total = int(target.sum())
        frame_hit = int((target & covered).sum())
        per_frame.append(frame_hit / frame_total if frame_total else 1.0)
        counts.append({'t': f.frame_index, 'foreground': frame_total, 'recalled': frame_hit})
        total += frame_total
        hit += frame_hit

    vacuous = total == 0
    overall = 1.0 if vacuous else hit / total
    logger.debug(f"[MotionPropagation] gamma={gamma} 召回 {hit}/{total}")
    return RecallReport(overall=overall, per_frame=per_frame, vacuous=vacuous, gamma=gamma,
                        foreground_total=total, foreground_hit=hit, per_frame_counts=counts)
