"""
合成点云序列生成器

按给定速度（可带轻微加速度与逐帧抖动）移动若干有向框，在框的四个侧面与顶面上
均匀采样物体点，再在场景范围内均匀撒地面杂点。输出前景掩码、逐点物体标签、
每帧真值框以及带噪声速度估计的当前帧 proposal。

同一配置生成的结果逐比特一致。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from seqpool.model import PointCloudFrame, Proposal, SequenceWindow
from seqpool.services.motion_propagation import (
    PropagationConfig, RecallReport, evaluate_recall, propagate_all
)
from seqpool.utils.errors import ConfigError, DomainError

logger = logging.getLogger('log')

SPEED_CLASSES = ('stationary', 'slow', 'medium', 'fast')
SURFACE_INSET = 1.0 - 1e-3


def speed_class(speed: float) -> str:
    """速度分档: stationary < 0.2, slow 0.2~1, medium 1~6, fast > 6（单位: 米/帧）"""
    if speed < 0.2:
        return 'stationary'
    if speed < 1.0:
        return 'slow'
    if speed <= 6.0:
        return 'medium'
    return 'fast'


@dataclass(frozen=True)
class ObjectSpec:
    dims: Tuple[float, float, float]
    center: Tuple[float, float, float]
    velocity: Tuple[float, float] = (0.0, 0.0)
    yaw: Optional[float] = None
    acceleration: Tuple[float, float] = (0.0, 0.0)
    velocity_jitter: float = 0.0
    points_per_frame: int = 200

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise DomainError(f'物体尺寸必须为三个正数: {self.dims}')
        if self.points_per_frame < 0 or self.velocity_jitter < 0:
            raise DomainError('points_per_frame 与 velocity_jitter 不能为负')

    @property
    def heading(self) -> float:
        """未指定朝向时沿速度方向，静止物体为 0"""
        if self.yaw is not None:
            return self.yaw
        if math.hypot(*self.velocity) > 0:
            return math.atan2(self.velocity[1], self.velocity[0])
        return 0.0

    @property
    def speed_class(self) -> str:
        return speed_class(math.hypot(*self.velocity))

    def to_dict(self):
        return {
            'dims': list(self.dims), 'center': list(self.center), 'velocity': list(self.velocity),
            'yaw': self.yaw, 'acceleration': list(self.acceleration),
            'velocity_jitter': self.velocity_jitter, 'points_per_frame': self.points_per_frame,
            'speed_class': self.speed_class,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ObjectSpec':
        try:
            spec = cls(
                dims=tuple(float(v) for v in data['dims']),
                center=tuple(float(v) for v in data['center']),
                velocity=tuple(float(v) for v in data.get('velocity', (0.0, 0.0))),
                yaw=data.get('yaw'),
                acceleration=tuple(float(v) for v in data.get('acceleration', (0.0, 0.0))),
                velocity_jitter=float(data.get('velocity_jitter', 0.0)),
                points_per_frame=int(data.get('points_per_frame', 200)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f'物体配置无效: {e}')
        declared = data.get('speed_class')
        if declared is not None and declared != spec.speed_class:
            raise ConfigError(f'声明的速度类别 {declared} 与速度 {spec.velocity} 不符')
        return spec


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    frames: int = 8
    extent: float = 100.0
    objects: Tuple[ObjectSpec, ...] = ()
    clutter_points_per_frame: int = 1000
    velocity_estimate_noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'objects', tuple(self.objects))
        if self.frames < 1:
            raise DomainError(f'帧数必须 >= 1: {self.frames}')
        if not self.extent > 0 or not math.isfinite(self.extent):
            raise DomainError(f'场景范围必须为正: {self.extent}')
        if self.velocity_estimate_noise < 0 or self.clutter_points_per_frame < 0:
            raise DomainError('噪声与杂点数不能为负')

    def to_dict(self):
        return {
            'seed': self.seed, 'frames': self.frames, 'extent': self.extent,
            'objects': [o.to_dict() for o in self.objects],
            'clutter_points_per_frame': self.clutter_points_per_frame,
            'velocity_estimate_noise': self.velocity_estimate_noise,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SceneConfig':
        if not isinstance(data, dict):
            raise ConfigError('场景配置必须是 JSON 对象')
        try:
            return cls(
                seed=int(data.get('seed', 0)),
                frames=int(data.get('frames', 8)),
                extent=float(data.get('extent', 100.0)),
                objects=tuple(ObjectSpec.from_dict(o) for o in data.get('objects', [])),
                clutter_points_per_frame=int(data.get('clutter_points_per_frame', 1000)),
                velocity_estimate_noise=float(data.get('velocity_estimate_noise', 0.0)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f'场景配置无效: {e}')


@dataclass
class GeneratedScene:
    window: SequenceWindow
    proposals: List[Proposal]
    truth_boxes: Dict[int, List[Proposal]]
    labels: Dict[int, np.ndarray] = field(repr=False)
    speed_classes: List[str] = field(default_factory=list)

    def tail(self, length: int) -> 'GeneratedScene':
        """最近 length 帧组成的子场景，帧重新编号为 1..length"""
        window = self.window.tail(length)
        old = [f.frame_index for f in self.window.frames[-length:]]
        return GeneratedScene(
            window=window,
            proposals=self.proposals,
            truth_boxes={i + 1: self.truth_boxes[t] for i, t in enumerate(old) if t in self.truth_boxes},
            labels={i + 1: self.labels[t] for i, t in enumerate(old) if t in self.labels},
            speed_classes=self.speed_classes,
        )


# ==========================================
# 生成
# ==========================================
def object_centers(spec: ObjectSpec, frames: int, rng: np.random.Generator) -> np.ndarray:
    """t = 1..frames 的平面中心 (frames, 2)"""
    steps = np.arange(frames, dtype=np.float64)[:, None]
    velocity = np.asarray(spec.velocity, dtype=np.float64)
    acceleration = np.asarray(spec.acceleration, dtype=np.float64)
    centers = np.asarray(spec.center[:2], dtype=np.float64) + velocity * steps + 0.5 * acceleration * steps ** 2
    if spec.velocity_jitter > 0 and frames > 1:
        jitter = rng.normal(0.0, spec.velocity_jitter, size=(frames - 1, 2))
        centers[1:] += np.cumsum(jitter, axis=0)
    return centers


def sample_box_surface(box: Proposal, count: int, rng: np.random.Generator) -> np.ndarray:
    """在四个侧面和顶面上按面积均匀采样，返回 (count, 3)"""
    if count == 0:
        return np.zeros((0, 3))
    w, l, h = box.w, box.l, box.h
    areas = np.array([l * h, l * h, w * h, w * h, w * l])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    # 面内坐标略微内缩，采样点不落在竖直棱线上
    u = rng.uniform(-0.5, 0.5, size=count) * SURFACE_INSET
    s = rng.uniform(-0.5, 0.5, size=count) * SURFACE_INSET
    local = np.empty((count, 3))
    # 侧面 x = ±w/2
    side_x = face < 2
    local[side_x, 0] = np.where(face[side_x] == 0, -0.5, 0.5) * w
    local[side_x, 1] = u[side_x] * l
    local[side_x, 2] = s[side_x] * h
    # 侧面 y = ±l/2
    side_y = (face == 2) | (face == 3)
    local[side_y, 0] = u[side_y] * w
    local[side_y, 1] = np.where(face[side_y] == 2, -0.5, 0.5) * l
    local[side_y, 2] = s[side_y] * h
    # 顶面
    top = face == 4
    local[top, 0] = u[top] * w
    local[top, 1] = s[top] * l
    local[top, 2] = 0.5 * h

    cos_t, sin_t = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.cx + local[:, 0] * cos_t - local[:, 1] * sin_t
    world[:, 1] = box.cy + local[:, 0] * sin_t + local[:, 1] * cos_t
    world[:, 2] = box.cz + local[:, 2]
    return world


def generate(config: SceneConfig) -> GeneratedScene:
    """
    生成合成序列

    Returns:
        GeneratedScene: 窗口、当前帧 proposal（速度带乘性噪声）、每帧真值框、逐点物体标签
    """
    rng = np.random.default_rng([config.seed, 0])
    noise_rng = np.random.default_rng([config.seed, 1])
    total = config.frames

    trajectories = [object_centers(spec, total, rng) for spec in config.objects]
    truth_boxes: Dict[int, List[Proposal]] = {}
    for t in range(1, total + 1):
        boxes = []
        for spec, centers in zip(config.objects, trajectories):
            vx = spec.velocity[0] + spec.acceleration[0] * (t - 1)
            vy = spec.velocity[1] + spec.acceleration[1] * (t - 1)
            boxes.append(Proposal(centers[t - 1, 0], centers[t - 1, 1], spec.center[2], *spec.dims,
                                  yaw=spec.heading, vx=vx, vy=vy, score=1.0))
        truth_boxes[t] = boxes

    frames = []
    labels: Dict[int, np.ndarray] = {}
    half = config.extent / 2.0
    for t in range(1, total + 1):
        chunks, chunk_labels = [], []
        for object_id, (spec, box) in enumerate(zip(config.objects, truth_boxes[t])):
            xyz = sample_box_surface(box, spec.points_per_frame, rng)
            intensity = rng.uniform(0.1, 1.0, size=(len(xyz), 1))
            chunks.append(np.hstack([xyz, intensity]))
            chunk_labels.append(np.full(len(xyz), object_id, dtype=np.int32))
        n = config.clutter_points_per_frame
        clutter = np.hstack([
            rng.uniform(-half, half, size=(n, 2)),
            rng.uniform(-0.1, 0.1, size=(n, 1)),
            rng.uniform(0.0, 0.3, size=(n, 1)),
        ])
        chunks.append(clutter)
        chunk_labels.append(np.full(n, -1, dtype=np.int32))
        # 与帧文件的 f32 精度保持一致
        points = np.vstack(chunks).astype(np.float32).astype(np.float64)
        frame_labels = np.concatenate(chunk_labels)
        frames.append(PointCloudFrame(t, points, frame_labels >= 0))
        labels[t] = frame_labels

    eps = config.velocity_estimate_noise
    proposals = []
    for box in truth_boxes[total]:
        if eps > 0:
            factors = noise_rng.uniform(1.0 - eps, 1.0 + eps, size=2)
            box = Proposal(box.cx, box.cy, box.cz, box.w, box.l, box.h, box.yaw,
                           box.vx * factors[0], box.vy * factors[1], box.score)
        proposals.append(box)

    classes = [spec.speed_class for spec in config.objects]
    logger.info(f"[SceneSim] seed={config.seed} 生成 {total} 帧, {len(config.objects)} 个物体, "
                f"每帧 {frames[-1].num_points} 点")
    return GeneratedScene(SequenceWindow.from_frames(frames), proposals, truth_boxes, labels, classes)


# ==========================================
# 召回实验
# ==========================================
def recall_by_speed_class(scene: GeneratedScene, regions, gamma: Optional[float] = None) -> Dict[str, RecallReport]:
    """按物体速度类别分别统计召回率；场景没有逐点物体标签时返回空字典"""
    reports = {}
    if not scene.speed_classes or any(f.frame_index not in scene.labels for f in scene.window.frames):
        return reports
    for cls in SPEED_CLASSES:
        members = np.array([i for i, c in enumerate(scene.speed_classes) if c == cls], dtype=np.int32)
        subsets = [np.isin(scene.labels[f.frame_index], members) for f in scene.window.frames]
        reports[cls] = evaluate_recall(scene.window, regions, gamma=gamma, point_subsets=subsets)
    return reports


@dataclass
class RecallCell:
    gamma: float
    frames: int
    overall: float
    by_class: Dict[str, float]
    vacuous_classes: List[str] = field(default_factory=list)
    report: Optional[RecallReport] = field(default=None, repr=False)

    def to_dict(self):
        data = {'gamma': self.gamma, 'T': self.frames, 'overall': self.overall}
        if self.report is not None:
            data.update(per_frame=list(self.report.per_frame), vacuous=self.report.vacuous,
                        foreground_total=self.report.foreground_total, foreground_hit=self.report.foreground_hit)
        data.update(by_speed_class=dict(self.by_class), vacuous_classes=list(self.vacuous_classes))
        return data


@dataclass
class RecallTable:
    cells: List[RecallCell]

    def cell(self, gamma: float, frames: int) -> RecallCell:
        for c in self.cells:
            if c.gamma == gamma and c.frames == frames:
                return c
        raise KeyError((gamma, frames))

    def to_dict(self):
        return {'cells': [c.to_dict() for c in self.cells]}

    def overall_records(self) -> List[dict]:
        """行为 gamma、列为帧数的召回率表"""
        gammas = sorted({c.gamma for c in self.cells})
        lengths = sorted({c.frames for c in self.cells})
        return [dict([('gamma', g)] + [(f'T={n}', round(self.cell(g, n).overall, 6)) for n in lengths])
                for g in gammas]

    def speed_class_records(self) -> List[dict]:
        """行为 (gamma, T)、列为速度类别的召回率表"""
        return [dict([('gamma', c.gamma), ('T', c.frames)]
                     + [(cls, round(c.by_class[cls], 6) if cls in c.by_class else '') for cls in SPEED_CLASSES])
                for c in sorted(self.cells, key=lambda c: (c.frames, c.gamma))]


def recall_for(scene: GeneratedScene, gamma: float, length: int) -> RecallCell:
    sub = scene.tail(length)
    regions = propagate_all(sub.proposals, PropagationConfig(gamma=gamma, window_length=length))
    overall = evaluate_recall(sub.window, regions, gamma=gamma)
    by_class = recall_by_speed_class(sub, regions, gamma)
    vacuous = [cls for cls, report in by_class.items() if report.vacuous]
    return RecallCell(gamma, length, overall.overall, {k: v.overall for k, v in by_class.items()}, vacuous,
                      report=overall)


def recall_experiment(config, gammas: Sequence[float], lengths: Sequence[int]) -> RecallTable:
    """
    对每个 (gamma, T) 组合计算整体与分速度类别的前景召回率

    Args:
        config: SceneConfig 或已生成的 GeneratedScene
        gammas: gamma 列表
        lengths: 窗口长度列表，均不能超过场景帧数
    """
    scene = config if isinstance(config, GeneratedScene) else generate(config)
    available = len(scene.window)
    for length in lengths:
        if length < 1 or length > available:
            raise DomainError(f'窗口长度 {length} 超出场景帧数 {available}')
    cells = [recall_for(scene, float(g), int(n)) for n in lengths for g in gammas]
    for c in cells:
        logger.info(f"[SceneSim] gamma={c.gamma} T={c.frames} 召回 {c.overall:.4f}")
    return RecallTable(cells)
