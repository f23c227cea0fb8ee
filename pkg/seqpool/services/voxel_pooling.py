"""
基于体素采样的点云池化

两级流程:
1. 体素内采样: 按 (floor(x/v), floor(y/v)) 划分平面体素（z 轴不划分），每个体素按帧内点序
   保留前 k 个点，非空体素连续存放，坐标到 slot 的映射存入哈希表
2. 体素场采样: 对每个区域查询覆盖其圆的体素场，过滤落入区域的点，再无放回均匀抽取 K 个

pool_naive 为在全部点上逐一计算距离的朴素实现，作为正确性基准。
"""
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from seqpool.model import PointCloudFrame, Proposal, SequenceWindow
from seqpool.services.motion_propagation import (
    CylindricalRegion, PropagationConfig, points_in_region, propagate_all
)
from seqpool.utils.errors import DomainError, MissingGrid
from seqpool.utils.hash_table import EMPTY, VoxelHashTable, pack_coords

logger = logging.getLogger('log')

# 空体素哨兵
EMPTY_SLOT = EMPTY


# ==========================================
# 体素网格
# ==========================================
@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """
    稀疏平面体素网格

    slot s 保留的点下标为 point_indices[offsets[s]:offsets[s + 1]]，按帧内点序排列
    """

    voxel_size: float
    max_points_per_voxel: int
    coords: np.ndarray
    counts: np.ndarray
    offsets: np.ndarray
    point_indices: np.ndarray
    table: VoxelHashTable
    source: PointCloudFrame = field(repr=False)
    num_dropped: int = 0

    @property
    def frame_index(self) -> int:
        return self.source.frame_index

    @property
    def num_source_points(self) -> int:
        return self.source.num_points

    @property
    def num_slots(self) -> int:
        return len(self.counts)

    def slot(self, s: int) -> np.ndarray:
        return self.point_indices[self.offsets[s]:self.offsets[s + 1]]

    def to_dict(self):
        return {
            'frame_index': self.frame_index,
            'voxel_size': self.voxel_size,
            'max_points_per_voxel': self.max_points_per_voxel,
            'num_slots': self.num_slots,
            'num_retained': int(len(self.point_indices)),
            'num_dropped': self.num_dropped,
        }


def voxel_coords(xy: np.ndarray, v: float) -> np.ndarray:
    return np.floor(xy[:, :2] / v).astype(np.int64)


def build_grid(frame: PointCloudFrame, v: float, k: int) -> VoxelGrid:
    """
    构建体素网格，每个体素保留帧内点序的前 k 个点

    Args:
        frame: 源帧
        v: 体素边长（米）
        k: 每体素最多保留点数
    """
    if not v > 0 or not math.isfinite(v):
        raise DomainError(f'体素边长必须为正: {v}')
    if k < 1:
        raise DomainError(f'每体素点数必须 >= 1: {k}')

    n = frame.num_points
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return VoxelGrid(v, k, np.zeros((0, 2), dtype=np.int64), empty, np.zeros(1, dtype=np.int64),
                         empty, VoxelHashTable(np.zeros(0, dtype=np.uint64), empty), frame, 0)

    ij = voxel_coords(frame.xy, v)
    keys = pack_coords(ij[:, 0], ij[:, 1])
    # 稳定排序保证同一体素内仍按帧内点序
    order = np.argsort(keys, kind='stable')
    sorted_keys = keys[order]
    is_start = np.empty(n, dtype=bool)
    is_start[0] = True
    np.not_equal(sorted_keys[1:], sorted_keys[:-1], out=is_start[1:])
    starts = np.flatnonzero(is_start)
    group = np.cumsum(is_start) - 1
    rank = np.arange(n) - starts[group]
    keep = rank < k

    sizes = np.diff(np.append(starts, n))
    counts = np.minimum(sizes, k).astype(np.int64)
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    retained = order[keep].astype(np.int64)
    coords = ij[order[starts]]
    table = VoxelHashTable(sorted_keys[starts], np.arange(len(starts), dtype=np.int64))

    grid = VoxelGrid(v, k, coords, counts, offsets, retained, table, frame, int(n - len(retained)))
    logger.debug(f"[VoxelPooling] 帧 {frame.frame_index}: {n} 点 -> {grid.num_slots} 个非空体素, "
                 f"丢弃 {grid.num_dropped} 点, 最长探测 {table.max_steps}")
    return grid


def build_grids(window: SequenceWindow, v: float, k: int, workers: int = 1) -> Dict[int, VoxelGrid]:
    """逐帧建网格，不同帧之间可以并行"""
    def _build(f):
        return build_grid(f, v, k)
    frames = list(window.frames)
    grids = _map(_build, frames, workers)
    return {f.frame_index: g for f, g in zip(frames, grids)}


def lookup(grid: VoxelGrid, coord: Tuple[int, int]) -> int:
    """体素坐标 -> slot 下标，空体素返回 EMPTY_SLOT"""
    return grid.table.lookup_one(int(pack_coords(coord[0], coord[1])[0]))


def lookup_many(grid: VoxelGrid, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return grid.table.lookup(pack_coords(coords[:, 0], coords[:, 1]))


# ==========================================
# 池化结果
# ==========================================
@dataclass(frozen=True, eq=False)
class PooledFrame:
    """
    一个 (proposal, 帧) 的 K 个采样点

    mask[i] 为 False 表示填充项（循环重复的候选点或区域中心），它们仍参与特征计算
    """

    frame_index: int
    region: CylindricalRegion
    points: np.ndarray
    source_indices: np.ndarray
    mask: np.ndarray
    candidates: np.ndarray = field(repr=False)

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)

    def to_dict(self):
        return {
            't': self.frame_index,
            'points': self.points.tolist(),
            'mask': self.mask.tolist(),
        }


@dataclass(frozen=True)
class PooledProposal:
    proposal_id: int
    frames: Tuple[PooledFrame, ...]

    def frame(self, frame_index: int) -> Optional[PooledFrame]:
        for f in self.frames:
            if f.frame_index == frame_index:
                return f
        return None

    def to_dict(self):
        return {
            'proposal_id': self.proposal_id,
            'frames': [f.to_dict() for f in self.frames],
        }

    def dump_records(self) -> List[dict]:
        """调试输出: 每帧一条 {proposal_id, t, points, mask}"""
        return [{'proposal_id': self.proposal_id, **f.to_dict()} for f in self.frames]


def sampling_rng(seed: int, proposal_id: int, frame_index: int) -> np.random.Generator:
    """按 (seed, proposal_id, t) 派生的计数器型随机数发生器，与执行顺序无关"""
    if seed < 0 or proposal_id < 0 or frame_index < 0:
        raise DomainError(f'随机种子键必须非负: {(seed, proposal_id, frame_index)}')
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, proposal_id, frame_index])))


def draw_samples(frame: PointCloudFrame, region: CylindricalRegion, candidates: np.ndarray,
                 K: int, seed: int) -> PooledFrame:
    """
    从候选点中抽取 K 个

    - 候选数 >= K: 种子化洗牌后取前 K 个（无放回均匀抽样）
    - 0 < 候选数 < K: 全部保留，再循环重复补足 K，重复项 mask 为 False
    - 无候选: 用区域中心 (z 取源 proposal 的 p_z) 填满，mask 全为 False
    """
    c = len(candidates)
    if c >= K:
        chosen = candidates[sampling_rng(seed, region.source_proposal_id, region.frame_index).permutation(c)[:K]]
        mask = np.ones(K, dtype=bool)
    elif c > 0:
        chosen = candidates[np.arange(K) % c]
        mask = np.arange(K) < c
    else:
        pad = np.array([region.center_x, region.center_y, region.center_z, 0.0])
        points = np.tile(pad, (K, 1))
        return PooledFrame(region.frame_index, region, points, np.full(K, -1, dtype=np.int64),
                           np.zeros(K, dtype=bool), candidates)
    return PooledFrame(region.frame_index, region, frame.points[chosen], chosen.astype(np.int64),
                       mask, candidates)


def _field_bounds(regions: Sequence[CylindricalRegion], v: float):
    cx = np.array([r.center_x for r in regions], dtype=np.float64)
    cy = np.array([r.center_y for r in regions], dtype=np.float64)
    # 半径加上舍入余量，保证边界附近的点所在体素被覆盖
    r = np.array([reg.diameter for reg in regions], dtype=np.float64) / 2.0 * (1.0 + 1e-12) + 1e-12
    i0 = np.floor((cx - r) / v).astype(np.int64)
    i1 = np.floor((cx + r) / v).astype(np.int64)
    j0 = np.floor((cy - r) / v).astype(np.int64)
    j1 = np.floor((cy + r) / v).astype(np.int64)
    return i0, i1 - i0 + 1, j0, j1 - j0 + 1


def field_coords_many(regions: Sequence[CylindricalRegion], v: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    一帧上多个区域的体素场坐标，一次性生成

    Returns:
        (coords, owner): coords 为 (F, 2) 体素坐标，owner[f] 为其所属区域在 regions 中的下标
    """
    if len(regions) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    i0, ni, j0, nj = _field_bounds(regions, v)
    sizes = ni * nj
    owner = np.repeat(np.arange(len(regions), dtype=np.int64), sizes)
    local = np.arange(int(sizes.sum()), dtype=np.int64) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    # 与 meshgrid(indexing='ij') 展平顺序一致: i 为外层
    ii = i0[owner] + local // nj[owner]
    jj = j0[owner] + local % nj[owner]
    return np.stack([ii, jj], axis=1), owner


def field_coords(region: CylindricalRegion, v: float) -> np.ndarray:
    """
    覆盖区域圆的矩形体素场坐标

    场从圆左下角所在体素起算到右上角所在体素，每条边的体素数不超过 ceil(d / v) + 1，
    不一定等于它
    """
    return field_coords_many([region], v)[0]


def gather_fields(grid: VoxelGrid, regions: Sequence[CylindricalRegion]) -> Tuple[np.ndarray, np.ndarray]:
    """
    一次哈希查询取出多个区域体素场内保留的点

    Returns:
        (point_indices, owner)，owner 为每个点所属区域的下标；不同区域的场可以重叠，同一点可出现多次
    """
    coords, owner = field_coords_many(regions, grid.voxel_size)
    slots = lookup_many(grid, coords)
    hit = slots != EMPTY_SLOT
    slots, owner = slots[hit], owner[hit]
    lengths = grid.counts[slots]
    starts = grid.offsets[slots]
    total = int(lengths.sum())
    # 把若干 [start, start + length) 区间拼接成一个下标数组
    shift = np.repeat(starts - (np.cumsum(lengths) - lengths), lengths)
    return grid.point_indices[np.arange(total, dtype=np.int64) + shift], np.repeat(owner, lengths)


def gather_field(grid: VoxelGrid, region: CylindricalRegion) -> np.ndarray:
    """查询体素场内所有非空体素保留的点下标"""
    return gather_fields(grid, [region])[0]


def frame_candidates(grid: VoxelGrid, regions: Sequence[CylindricalRegion]) -> List[np.ndarray]:
    """
    同一帧上多个区域的候选点，每个区域一个按帧内点序升序的下标数组

    归属判定与 points_in_region 逐元素相同，只是区域参数按点展开。
    """
    if len(regions) == 0:
        return []
    gathered, owner = gather_fields(grid, regions)
    cx = np.array([r.center_x for r in regions], dtype=np.float64)
    cy = np.array([r.center_y for r in regions], dtype=np.float64)
    radius_sq = np.array([r.radius_sq for r in regions], dtype=np.float64)
    xy = grid.source.points[gathered]
    dx = xy[:, 0] - cx[owner]
    dy = xy[:, 1] - cy[owner]
    inside = dx * dx + dy * dy < radius_sq[owner]
    gathered, owner = gathered[inside], owner[inside]
    order = np.lexsort((gathered, owner))
    gathered, owner = gathered[order], owner[order]
    bounds = np.searchsorted(owner, np.arange(len(regions) + 1))
    return [gathered[bounds[i]:bounds[i + 1]] for i in range(len(regions))]


def optimized_candidates(grid: VoxelGrid, region: CylindricalRegion) -> np.ndarray:
    """体素场候选点，按帧内点序升序"""
    return frame_candidates(grid, [region])[0]


def naive_candidates(frame: PointCloudFrame, region: CylindricalRegion) -> np.ndarray:
    """在全部点上计算距离的候选点，按帧内点序升序"""
    return np.flatnonzero(points_in_region(frame.points, region))


def _map(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _group(regions: Sequence[CylindricalRegion], frames: List[PooledFrame]) -> List[PooledProposal]:
    grouped: Dict[int, List[PooledFrame]] = {}
    for region, pooled in zip(regions, frames):
        grouped.setdefault(region.source_proposal_id, []).append(pooled)
    return [PooledProposal(pid, tuple(sorted(items, key=lambda f: f.frame_index)))
            for pid, items in grouped.items()]


def _flatten(regions) -> List[CylindricalRegion]:
    flat = []
    for item in regions:
        if isinstance(item, CylindricalRegion):
            flat.append(item)
        else:
            flat.extend(item)
    return flat


def pool_optimized(grids: Mapping[int, VoxelGrid], regions: Sequence, K: int, seed: int,
                   workers: int = 1) -> List[PooledProposal]:
    """
    体素场池化

    Args:
        grids: 帧编号 -> 体素网格
        regions: 区域列表，或按 proposal 分组的区域列表
        K: 每个 (proposal, 帧) 的采样点数
        seed: 随机种子
        workers: 线程数，结果与之无关
    """
    if K < 1:
        raise DomainError(f'K 必须 >= 1: {K}')
    regions = _flatten(regions)
    for region in regions:
        if region.frame_index not in grids:
            raise MissingGrid(f'帧 {region.frame_index} 没有体素网格', frame_index=region.frame_index)

    # 同一帧的区域合并为一次体素场查询
    by_frame: Dict[int, List[int]] = {}
    for i, region in enumerate(regions):
        by_frame.setdefault(region.frame_index, []).append(i)

    def _frame_candidates(item):
        frame_index, members = item
        return members, frame_candidates(grids[frame_index], [regions[i] for i in members])

    candidates: List[Optional[np.ndarray]] = [None] * len(regions)
    for members, found in _map(_frame_candidates, sorted(by_frame.items()), workers):
        for i, c in zip(members, found):
            candidates[i] = c

    def _draw(i):
        region = regions[i]
        return draw_samples(grids[region.frame_index].source, region, candidates[i], K, seed)

    return _group(regions, _map(_draw, range(len(regions)), workers))


def pool_naive(window: SequenceWindow, regions: Sequence, K: int, seed: int,
               workers: int = 1) -> List[PooledProposal]:
    """朴素池化：在整帧所有点上判定区域归属，抽样协议与 pool_optimized 相同"""
    if K < 1:
        raise DomainError(f'K 必须 >= 1: {K}')
    regions = _flatten(regions)
    frames = {f.frame_index: f for f in window.frames}
    for region in regions:
        if region.frame_index not in frames:
            raise MissingGrid(f'帧 {region.frame_index} 不在序列窗口中', frame_index=region.frame_index)

    def _pool(region):
        frame = frames[region.frame_index]
        return draw_samples(frame, region, naive_candidates(frame, region), K, seed)

    return _group(regions, _map(_pool, regions, workers))


def pool_window(window: SequenceWindow, regions: Sequence, K: int, seed: int, v: float, k: int,
                workers: int = 1) -> List[PooledProposal]:
    """建网格 + 体素场池化"""
    grids = build_grids(window, v, k, workers)
    return pool_optimized(grids, regions, K, seed, workers)


# ==========================================
# 延迟基准
# ==========================================
@dataclass
class BenchRow:
    N: int
    M: int
    K: int
    naive_ms_median: float
    optimized_ms_median: float

    @property
    def speedup(self) -> float:
        return self.naive_ms_median / self.optimized_ms_median if self.optimized_ms_median > 0 else math.inf


@dataclass
class BenchReport:
    rows: List[BenchRow]
    slope_fit: float

    COLUMNS = ('N', 'M', 'K', 'naive_ms_median', 'optimized_ms_median', 'speedup', 'slope_fit')

    def to_records(self) -> List[dict]:
        return [{
            'N': r.N, 'M': r.M, 'K': r.K,
            'naive_ms_median': round(r.naive_ms_median, 4),
            'optimized_ms_median': round(r.optimized_ms_median, 4),
            'speedup': round(r.speedup, 4),
            'slope_fit': round(self.slope_fit, 4) if math.isfinite(self.slope_fit) else '',
        } for r in self.rows]


def loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    """log(time) 对 log(N) 的最小二乘斜率，少于两个不同规模时返回 nan"""
    if len(set(sizes)) < 2:
        return math.nan
    slope, _ = np.polyfit(np.log(np.asarray(sizes, dtype=float)),
                          np.log(np.maximum(np.asarray(times, dtype=float), 1e-9)), 1)
    return float(slope)


def bench_scene(N: int, M: int, num_frames: int, seed: int,
                extent: float = 150.0) -> Tuple[SequenceWindow, List[List[CylindricalRegion]]]:
    """基准场景: N 个均匀分布点平均分到 num_frames 帧，M 个随机 proposal"""
    rng = np.random.default_rng(seed)
    per_frame = np.full(num_frames, N // num_frames)
    per_frame[: N % num_frames] += 1
    frames = []
    for t, count in enumerate(per_frame, start=1):
        xy = rng.uniform(-extent / 2.0, extent / 2.0, size=(count, 2))
        z = rng.uniform(-0.5, 3.0, size=(count, 1))
        intensity = rng.uniform(0.0, 1.0, size=(count, 1))
        frames.append(PointCloudFrame(t, np.hstack([xy, z, intensity])))
    proposals = []
    for _ in range(M):
        proposals.append(Proposal(
            cx=rng.uniform(-extent / 3.0, extent / 3.0), cy=rng.uniform(-extent / 3.0, extent / 3.0),
            cz=1.0, w=rng.uniform(0.8, 2.5), l=rng.uniform(0.8, 5.0), h=1.7,
            yaw=rng.uniform(-math.pi, math.pi), vx=rng.uniform(-2.0, 2.0), vy=rng.uniform(-2.0, 2.0),
            score=1.0))
    window = SequenceWindow.from_frames(frames)
    regions = propagate_all(proposals, PropagationConfig(gamma=1.1, window_length=num_frames))
    return window, regions


def bench_pooling(sizes: Sequence[int], M: int, repetitions: int, K: int = 128, num_frames: int = 1,
                  v: float = 0.4, k: int = 32, seed: int = 0) -> BenchReport:
    """
    朴素池化 vs 体素池化的延迟中位数

    体素池化的计时包含建网格（体素内采样）与体素场采样两部分。
    """
    if repetitions < 3:
        raise DomainError(f'重复次数必须 >= 3: {repetitions}')
    rows = []
    for N in sizes:
        window, regions = bench_scene(N, M, num_frames, seed)
        naive_times, optimized_times = [], []
        for _ in range(repetitions):
            start = time.perf_counter()
            pool_naive(window, regions, K, seed)
            naive_times.append((time.perf_counter() - start) * 1000.0)

            start = time.perf_counter()
            pool_window(window, regions, K, seed, v, k)
            optimized_times.append((time.perf_counter() - start) * 1000.0)
        row = BenchRow(N, M, K, statistics.median(naive_times), statistics.median(optimized_times))
        logger.info(f"[VoxelPooling] N={N} M={M}: naive {row.naive_ms_median:.2f} ms, "
                    f"optimized {row.optimized_ms_median:.2f} ms, speedup {row.speedup:.2f}x")
        rows.append(row)
    slope = loglog_slope([r.N for r in rows], [r.optimized_ms_median for r in rows])
    return BenchReport(rows, slope)
