"""
文件访问层

帧二进制格式（小端）:
    "MSFP" | u32 version=1 | u32 frame_index | u64 point_count | u8 has_mask
    | point_count x 4 x f32 (x, y, z, intensity) | [point_count x u8 掩码]

proposal 文件为 JSON 数组，键为 cx, cy, cz, w, l, h, yaw, vx, vy, score。
"""
import glob
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from seqpool.model import PointCloudFrame, Proposal, SequenceWindow
from seqpool.services.feature_encoding import EncoderWeights
from seqpool.services.region_network import NetworkWeights
from seqpool.services.scene_sim import GeneratedScene, SceneConfig
from seqpool.utils.errors import ConfigError, IoError, ShapeMismatch

# 初始化日志
logger = logging.getLogger('log')

FRAME_MAGIC = b'MSFP'
FRAME_VERSION = 1
FRAME_HEADER = struct.Struct('<4sIIQB')
POINT_DTYPE = np.dtype('<f4')

PROPOSALS_FILE = 'proposals.json'
TRUTH_FILE = 'truth.json'
SCENE_CONFIG_FILE = 'scene.json'


def frame_filename(frame_index: int) -> str:
    return f'frame_{frame_index:04d}.bin'


def labels_filename(frame_index: int) -> str:
    return f'labels_{frame_index:04d}.npy'


# ==========================================
# 帧二进制
# ==========================================

def encode_frame(frame: PointCloudFrame) -> bytes:
    has_mask = frame.foreground_mask is not None
    header = FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, frame.frame_index, frame.num_points, int(has_mask))
    body = frame.points.astype(POINT_DTYPE).tobytes()
    mask = frame.foreground_mask.astype(np.uint8).tobytes() if has_mask else b''
    return header + body + mask


def decode_frame(data: bytes, source: str = '<bytes>') -> PointCloudFrame:
    if len(data) < FRAME_HEADER.size:
        raise IoError(f'帧文件过短: {source}', path=source)
    magic, version, frame_index, count, has_mask = FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise IoError(f'帧文件魔数错误: {source}', path=source)
    if version != FRAME_VERSION:
        raise IoError(f'不支持的帧文件版本 {version}: {source}', path=source)
    body_size = count * 4 * POINT_DTYPE.itemsize
    expected = FRAME_HEADER.size + body_size + (count if has_mask else 0)
    if len(data) != expected:
        raise IoError(f'帧文件长度 {len(data)} 与头部声明 {expected} 不一致: {source}', path=source)
    offset = FRAME_HEADER.size
    points = np.frombuffer(data, dtype=POINT_DTYPE, count=count * 4, offset=offset).reshape(count, 4)
    mask = None
    if has_mask:
        raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset + body_size)
        if raw.size and raw.max() > 1:
            raise IoError(f'掩码字节只能为 0 或 1: {source}', path=source)
        mask = raw.astype(bool)
    return PointCloudFrame(int(frame_index), points.astype(np.float64), mask)


def write_frame(path: str, frame: PointCloudFrame):
    _write_bytes(path, encode_frame(frame))


def read_frame(path: str) -> PointCloudFrame:
    try:
        with open(path, 'rb') as fh:
            data = fh.read()
    except OSError as e:
        raise IoError(f'读取帧文件失败: {e}', path=path)
    return decode_frame(data, path)


def _write_bytes(path: str, data: bytes):
    try:
        with open(path, 'wb') as fh:
            fh.write(data)
    except OSError as e:
        raise IoError(f'写文件失败: {e}', path=path)


# ==========================================
# JSON
# ==========================================

def read_json(path: str) -> Any:
    """读取 JSON，语法错误转为带行列号的 ConfigError"""
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            text = fh.read()
    except OSError as e:
        raise IoError(f'读取文件失败: {e}', path=path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'JSON 解析失败 {path}: {e.msg}', line=e.lineno, column=e.colno, path=path)


def write_json(path: str, data: Any):
    try:
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(data, fh, indent=2, sort_keys=False, ensure_ascii=False)
            fh.write('\n')
    except OSError as e:
        raise IoError(f'写文件失败: {e}', path=path)


def read_proposals(path: str) -> List[Proposal]:
    data = read_json(path)
    if not isinstance(data, list):
        raise ConfigError(f'proposal 文件必须是 JSON 数组: {path}')
    try:
        return [Proposal.from_dict(item) for item in data]
    except (KeyError, TypeError) as e:
        raise ConfigError(f'proposal 记录缺少字段: {e}', path=path)


def write_proposals(path: str, proposals: List[Proposal]):
    write_json(path, [p.to_dict() for p in proposals])


def read_scene_config(path: str) -> SceneConfig:
    return SceneConfig.from_dict(read_json(path))


def read_encoder_weights(path: str) -> EncoderWeights:
    data = read_json(path)
    try:
        return EncoderWeights.from_dict(data['encoder'] if 'encoder' in data else data)
    except (KeyError, TypeError) as e:
        raise ConfigError(f'编码器权重文件格式错误: {e}', path=path)


def read_network_weights(path: str) -> Optional[NetworkWeights]:
    """权重文件中的 network 段，没有时返回 None（使用默认种子化权重）"""
    data = read_json(path)
    if 'network' not in data:
        return None
    try:
        return NetworkWeights.from_dict(data['network'])
    except (KeyError, TypeError) as e:
        raise ConfigError(f'网络权重文件格式错误: {e}', path=path)


def write_weights(path: str, encoder: EncoderWeights, network: Optional[NetworkWeights] = None):
    data = {'encoder': encoder.to_dict()}
    if network is not None:
        data['network'] = network.to_dict()
    write_json(path, data)


# ==========================================
# 场景目录
# ==========================================
@dataclass
class LoadedScene:
    window: SequenceWindow
    proposals: List[Proposal]
    truth_boxes: Dict[int, List[Proposal]] = field(default_factory=dict)
    labels: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    speed_classes: List[str] = field(default_factory=list)

    @property
    def has_masks(self) -> bool:
        return all(f.has_mask for f in self.window.frames)

    def to_generated(self) -> GeneratedScene:
        return GeneratedScene(self.window, self.proposals, self.truth_boxes, self.labels, self.speed_classes)


def save_scene(scene: GeneratedScene, out_dir: str) -> List[str]:
    """
    写出场景目录

    Returns:
        写出的文件名列表（相对 out_dir）
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IoError(f'创建目录失败: {e}', path=out_dir)
    written = []
    for frame in scene.window.frames:
        name = frame_filename(frame.frame_index)
        write_frame(os.path.join(out_dir, name), frame)
        written.append(name)
        if frame.frame_index in scene.labels:
            name = labels_filename(frame.frame_index)
            try:
                np.save(os.path.join(out_dir, name), scene.labels[frame.frame_index])
            except OSError as e:
                raise IoError(f'写标签文件失败: {e}', path=name)
            written.append(name)
    write_proposals(os.path.join(out_dir, PROPOSALS_FILE), scene.proposals)
    written.append(PROPOSALS_FILE)
    write_json(os.path.join(out_dir, TRUTH_FILE), {
        'objects': [{'id': i, 'speed_class': c} for i, c in enumerate(scene.speed_classes)],
        'frames': [{'t': t, 'boxes': [b.to_dict() for b in boxes]}
                   for t, boxes in sorted(scene.truth_boxes.items())],
    })
    written.append(TRUTH_FILE)
    logger.info(f"[Dao] 场景写入 {out_dir}: {len(written)} 个文件")
    return written


def load_scene(scene_dir: str) -> LoadedScene:
    if not os.path.isdir(scene_dir):
        raise IoError(f'场景目录不存在: {scene_dir}', path=scene_dir)
    paths = sorted(glob.glob(os.path.join(scene_dir, 'frame_*.bin')))
    if not paths:
        raise IoError(f'场景目录中没有帧文件: {scene_dir}', path=scene_dir)
    frames = [read_frame(p) for p in paths]
    frames.sort(key=lambda f: f.frame_index)
    proposals = read_proposals(os.path.join(scene_dir, PROPOSALS_FILE))

    truth_boxes: Dict[int, List[Proposal]] = {}
    speed_classes: List[str] = []
    truth_path = os.path.join(scene_dir, TRUTH_FILE)
    if os.path.exists(truth_path):
        truth = read_json(truth_path)
        try:
            truth_boxes = {int(item['t']): [Proposal.from_dict(b) for b in item['boxes']]
                           for item in truth.get('frames', [])}
            speed_classes = [o['speed_class'] for o in sorted(truth.get('objects', []), key=lambda o: o['id'])]
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f'真值文件格式错误: {e!r}', path=truth_path)

    labels: Dict[int, np.ndarray] = {}
    for frame in frames:
        path = os.path.join(scene_dir, labels_filename(frame.frame_index))
        if os.path.exists(path):
            try:
                array = np.load(path)
            except (OSError, ValueError) as e:
                raise IoError(f'读取标签文件失败: {e}', path=path)
            if array.ndim != 1 or not np.issubdtype(array.dtype, np.integer):
                raise ConfigError(f'标签文件必须是一维整数数组: shape={array.shape} dtype={array.dtype}', path=path)
            if len(array) != frame.num_points:
                raise ShapeMismatch(f'帧 {frame.frame_index} 标签数 {len(array)} != 点数 {frame.num_points}')
            labels[frame.frame_index] = array

    logger.info(f"[Dao] 载入场景 {scene_dir}: {len(frames)} 帧, {len(proposals)} 个 proposal")
    return LoadedScene(SequenceWindow.from_frames(frames), proposals, truth_boxes, labels, speed_classes)
