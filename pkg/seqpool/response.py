"""
报告输出

成功 / 失败报告沿用 {"code": 0, "data": ...} 与 {"code": -1, "errorMsg": ...} 两种信封，
表格报告写 CSV，每次命令调用写一份 manifest.json。
"""
import csv
import hashlib
import json
import os
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

import click
import numpy as np

from seqpool import __version__
from seqpool.dao import write_json
from seqpool.utils.errors import IoError, SeqPoolError

MANIFEST_FILE = 'manifest.json'


def make_succ_response(data) -> str:
    return json.dumps({'code': 0, 'data': data}, ensure_ascii=False)


def make_err_response(err_msg, code=-1, error_code=None, details=None) -> str:
    result = {'code': code, 'errorMsg': err_msg}
    if error_code:
        result['errorCode'] = error_code
    if details:
        result['details'] = details
    return json.dumps(result, ensure_ascii=False)


def make_error_from(exc: SeqPoolError) -> str:
    return make_err_response(exc.message, error_code=exc.error_code, details=exc.details or None)


# ==========================================
# 文件写出
# ==========================================

def ensure_dir(path: str):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise IoError(f'创建目录失败: {e}', path=path)


def write_csv(path: str, columns: Sequence[str], records: Sequence[Dict[str, Any]]):
    try:
        with open(path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator='\n')
            writer.writeheader()
            for record in records:
                writer.writerow({c: record.get(c, '') for c in columns})
    except OSError as e:
        raise IoError(f'写 CSV 失败: {e}', path=path)


def config_hash(params: Dict[str, Any]) -> str:
    """参数的 sha256（键排序后的紧凑 JSON）"""
    canonical = json.dumps(params, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def versions() -> Dict[str, str]:
    return {
        'seqpool': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'click': click.__version__,
    }


# ==========================================
# 运行清单
# ==========================================
@dataclass
class RunManifest:
    command: str
    params: Dict[str, Any]
    seed: Optional[int] = None
    outputs: List[str] = field(default_factory=list)
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    _start: float = field(default_factory=time.perf_counter, repr=False)
    wall_clock_s: Optional[float] = None
    exit_code: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.params)

    def add_output(self, name: str):
        if name not in self.outputs:
            self.outputs.append(name)

    def finish(self, exit_code: int = 0):
        self.wall_clock_s = round(time.perf_counter() - self._start, 6)
        self.exit_code = exit_code

    def to_dict(self):
        return {
            'command': self.command,
            'config_hash': self.config_hash,
            'params': self.params,
            'seed': self.seed,
            'versions': versions(),
            'started_at': self.started_at,
            'wall_clock_s': self.wall_clock_s,
            'exit_code': self.exit_code,
            'outputs': sorted(self.outputs),
            **self.extra,
        }


def write_manifest(out_dir: str, manifest: RunManifest) -> str:
    if manifest.wall_clock_s is None:
        manifest.finish(manifest.exit_code)
    ensure_dir(out_dir)
    path = os.path.join(out_dir, MANIFEST_FILE)
    write_json(path, manifest.to_dict())
    return path
