"""
流水线组合

verify_pooling: 同一组区域上分别运行朴素池化与体素池化并逐项比对
run_pipeline: 传播 -> 体素池化 -> 特征编码 -> 学习块 -> 解码 -> 检测头
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from seqpool.model import Proposal, SequenceWindow, validate_window
from seqpool.services.feature_encoding import EncoderWeights, encode_frame
from seqpool.services.motion_propagation import PropagationConfig, propagate_all
from seqpool.services.region_network import (
    LossTargets, NetworkConfig, NetworkWeights, SequenceFeatures, build_targets, decode_box_residuals,
    intermediate_loss, loss_terms, run_network
)
from seqpool.services.voxel_pooling import (
    PooledFrame, PooledProposal, build_grids, pool_naive, pool_optimized
)
from seqpool.utils.errors import AlignmentMismatch, WidthMismatch

logger = logging.getLogger('log')


# ==========================================
# 池化一致性校验
# ==========================================
@dataclass
class RegionCheck:
    proposal_id: int
    frame_index: int
    naive_candidates: int
    optimized_candidates: int
    candidates_match: bool
    full_equality_expected: bool
    elementwise_equal: Optional[bool]
    membership_ok: bool

    def to_dict(self):
        return {
            'proposal_id': self.proposal_id, 't': self.frame_index,
            'naive_candidates': self.naive_candidates, 'optimized_candidates': self.optimized_candidates,
            'candidates_match': self.candidates_match,
            'full_equality_expected': self.full_equality_expected,
            'elementwise_equal': self.elementwise_equal, 'membership_ok': self.membership_ok,
        }


@dataclass
class VerifyReport:
    checks: List[RegionCheck]
    truncated_voxels: Dict[int, int] = field(default_factory=dict)
    # 体素池化结果，仅供调试导出
    pooled: List[PooledProposal] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(c.candidates_match and c.membership_ok and c.elementwise_equal is not False
                   for c in self.checks)

    def to_dict(self):
        return {
            'passed': self.passed,
            'regions': len(self.checks),
            'candidate_mismatches': sum(not c.candidates_match for c in self.checks),
            'elementwise_mismatches': sum(c.elementwise_equal is False for c in self.checks),
            'membership_failures': sum(not c.membership_ok for c in self.checks),
            'regions_with_subsampling': sum(not c.full_equality_expected for c in self.checks),
            'truncated_voxels': {str(t): n for t, n in self.truncated_voxels.items()},
            'checks': [c.to_dict() for c in self.checks],
        }


# 复核时 (d / 2)^2 的相对放宽量
AUDIT_RTOL = 1e-12


def membership_audit(pooled: PooledFrame, proposal: Proposal, gamma: float, current_index: int) -> bool:
    """
    独立按原始不等式复核: (x - p_x + v_x * dt)^2 + (y - p_y + v_y * dt)^2 < (d / 2)^2

    式子的求值顺序与区域判定 x - (p_x - v_x * dt) 不同，舍入结果可能差几个 ulp，
    因此右侧乘以 (1 + AUDIT_RTOL)，贴着圆周的点不会被误报。
    """
    dt = current_index - pooled.frame_index
    d = math.sqrt(proposal.w ** 2 + proposal.l ** 2) * gamma ** (dt + 1)
    limit = (d / 2) ** 2 * (1.0 + AUDIT_RTOL)
    for (x, y, _, _), valid in zip(pooled.points.tolist(), pooled.mask.tolist()):
        if not valid:
            continue
        if not (x - proposal.cx + proposal.vx * dt) ** 2 + (y - proposal.cy + proposal.vy * dt) ** 2 < limit:
            return False
    return True


def _same_output(a: PooledFrame, b: PooledFrame) -> bool:
    return (np.array_equal(a.points, b.points) and np.array_equal(a.mask, b.mask)
            and np.array_equal(a.source_indices, b.source_indices))


def verify_pooling(window: SequenceWindow, proposals: Sequence[Proposal], gamma: float, K: int,
                   v: float, k: int, seed: int, workers: int = 1) -> VerifyReport:
    """
    比对两种池化

    - 体素池化候选集 == 朴素候选集中被网格保留的点
    - 候选集完全相同时（无体素内截断），输出逐元素相同
    - 每个有效采样点满足区域不等式
    """
    validate_window(window)
    regions = propagate_all(proposals, PropagationConfig(gamma=gamma, window_length=window.current_index))
    grids = build_grids(window, v, k, workers)
    optimized = {p.proposal_id: p for p in pool_optimized(grids, regions, K, seed, workers)}
    naive = {p.proposal_id: p for p in pool_naive(window, regions, K, seed, workers)}

    retained = {t: np.sort(g.point_indices) for t, g in grids.items()}
    checks = []
    for pid, proposal in enumerate(proposals):
        for fast, slow in zip(optimized[pid].frames, naive[pid].frames):
            t = fast.frame_index
            expected = slow.candidates[np.isin(slow.candidates, retained[t], assume_unique=True)]
            candidates_match = np.array_equal(expected, fast.candidates)
            full = np.array_equal(slow.candidates, fast.candidates)
            checks.append(RegionCheck(
                proposal_id=pid, frame_index=t,
                naive_candidates=slow.num_candidates, optimized_candidates=fast.num_candidates,
                candidates_match=candidates_match, full_equality_expected=full,
                elementwise_equal=_same_output(fast, slow) if full else None,
                membership_ok=membership_audit(fast, proposal, gamma, window.current_index)
                and membership_audit(slow, proposal, gamma, window.current_index),
            ))
    report = VerifyReport(checks, {t: int((g.counts >= k).sum()) for t, g in grids.items()},
                          pooled=list(optimized.values()))
    logger.info(f"[Pipeline] 校验 {len(checks)} 个区域, 通过: {report.passed}")
    return report


# ==========================================
# 前向流水线
# ==========================================
@dataclass
class ProposalOutput:
    proposal_id: int
    confidence: float
    confidence_logit: float
    residuals: List[float]
    refined_box: Proposal
    frame_norms: List[float]

    def to_dict(self):
        return {
            'proposal_id': self.proposal_id,
            'confidence': self.confidence,
            'residuals': self.residuals,
            'refined_box': self.refined_box.to_dict(),
            'frame_norms': self.frame_norms,
        }


@dataclass
class PipelineResult:
    outputs: List[ProposalOutput]
    config: NetworkConfig
    num_frames: int
    timings_ms: Dict[str, float]
    loss: Optional[dict] = None
    pooled: List[PooledProposal] = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            'config': self.config.to_dict(),
            'T': self.num_frames,
            'proposals': [o.to_dict() for o in self.outputs],
            'loss': self.loss,
        }


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def encode_pooled(pooled: PooledProposal, proposal: Proposal, current_index: int,
                  encoder: EncoderWeights, config: NetworkConfig,
                  permutation_seed: Optional[int] = None) -> SequenceFeatures:
    """逐帧编码；给定 permutation_seed 时先打乱每帧采样点顺序（置换不变性检查用）"""
    frames = []
    for f in pooled.frames:
        points = f.points
        if permutation_seed is not None:
            rng = np.random.default_rng([permutation_seed, pooled.proposal_id, f.frame_index])
            points = points[rng.permutation(len(points))]
        dt = current_index - f.frame_index
        frames.append(encode_frame(points, proposal.shifted(dt), proposal, dt, encoder,
                                   config.use_motion_embedding))
    return SequenceFeatures(tuple(frames))


def run_pipeline(window: SequenceWindow, proposals: Sequence[Proposal], encoder: EncoderWeights,
                 network: NetworkWeights, config: NetworkConfig, gamma: float, v: float, k: int,
                 seed: int, truths: Optional[Sequence[Proposal]] = None, alpha: float = 1.0,
                 workers: int = 1, permutation_seed: Optional[int] = None) -> PipelineResult:
    """
    完整前向

    Args:
        truths: 与 proposals 对齐的真值框，提供时计算损失（含中间监督之和）
        permutation_seed: 调试用，打乱池化点顺序
    """
    validate_window(window)
    T = window.current_index
    if encoder.feature_dim != config.feature_dim:
        raise WidthMismatch(f'编码器输出维度 {encoder.feature_dim} != D={config.feature_dim}')
    if network.heads.in_width != T * config.feature_dim:
        raise WidthMismatch(f'检测头输入宽度 {network.heads.in_width} != T*D={T * config.feature_dim}')
    if len(network.blocks) != config.num_blocks:
        raise WidthMismatch(f'权重中的学习块数 {len(network.blocks)} != {config.num_blocks}')

    timings = {}
    start = time.perf_counter()
    regions = propagate_all(proposals, PropagationConfig(gamma=gamma, window_length=T))
    grids = build_grids(window, v, k, workers)
    pooled = pool_optimized(grids, regions, config.num_points, seed, workers)
    timings['pooling'] = (time.perf_counter() - start) * 1000.0

    start = time.perf_counter()
    sequences = [encode_pooled(p, proposals[p.proposal_id], T, encoder, config, permutation_seed)
                 for p in pooled]
    timings['encoding'] = (time.perf_counter() - start) * 1000.0
    logger.info(f"[Pipeline] K={config.num_points} D={config.feature_dim} T={T} "
                f"proposals={len(proposals)}")

    start = time.perf_counter()
    intermediate = truths is not None

    def _forward(seq):
        return run_network(seq, network, config, intermediate=intermediate)

    if workers > 1 and len(sequences) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            predictions = list(executor.map(_forward, sequences))
    else:
        predictions = [_forward(seq) for seq in sequences]
    timings['network'] = (time.perf_counter() - start) * 1000.0

    outputs = []
    for p, preds in zip(pooled, predictions):
        final = preds[-1]
        proposal = proposals[p.proposal_id]
        outputs.append(ProposalOutput(
            proposal_id=p.proposal_id,
            confidence=sigmoid(final.confidence_logit),
            confidence_logit=final.confidence_logit,
            residuals=final.residuals.tolist(),
            refined_box=decode_box_residuals(proposal, final.residuals),
            frame_norms=[float(np.linalg.norm(e)) for e in final.encoded],
        ))

    loss = None
    if truths is not None:
        if len(truths) != len(proposals):
            raise AlignmentMismatch(f'真值数 {len(truths)} != proposal 数 {len(proposals)}')
        targets: LossTargets = build_targets(proposals, truths)
        logits = [o.confidence_logit for o in outputs]
        residuals = np.array([o.residuals for o in outputs]).reshape(-1, 7)
        terms = loss_terms(logits, residuals, targets, alpha)
        per_block = [([preds[b].confidence_logit for preds in predictions],
                      np.array([preds[b].residuals for preds in predictions]).reshape(-1, 7))
                     for b in range(len(predictions[0]))] if predictions else []
        loss = {**terms.to_dict(), 'alpha': alpha,
                'intermediate_sum': intermediate_loss(per_block, targets, alpha) if per_block else 0.0}

    logger.info(f"[Pipeline] 耗时 pooling={timings['pooling']:.1f}ms encoding={timings['encoding']:.1f}ms "
                f"network={timings['network']:.1f}ms")
    return PipelineResult(outputs, config, T, {stage: round(ms, 3) for stage, ms in timings.items()}, loss,
                          pooled=pooled)
