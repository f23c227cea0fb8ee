"""
体素坐标哈希表

开放寻址 + 线性探测，表长为 2 的幂且不小于非空体素数的两倍。
64 位键由 (i + 2^31, j + 2^31) 打包而成，经 64 位 finalizer 混合后取模。
插入与查询均按 numpy 批量执行。
"""
import numpy as np

# 查询未命中时返回的哨兵
EMPTY = -1

_OFFSET = np.int64(2 ** 31)
_SHIFT_32 = np.uint64(32)
_SHIFT_33 = np.uint64(33)
_MIX_1 = np.uint64(0xFF51AFD7ED558CCD)
_MIX_2 = np.uint64(0xC4CEB9FE1A85EC53)


def pack_coords(i, j) -> np.ndarray:
    """把体素坐标 (i, j) 打包为 uint64 键"""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    hi = (i + _OFFSET).astype(np.uint64) << _SHIFT_32
    lo = (j + _OFFSET).astype(np.uint64)
    return np.atleast_1d(hi | lo)


def mix64(keys: np.ndarray) -> np.ndarray:
    """64 位 finalizer（murmur3 fmix64），uint64 乘法按模 2^64 回绕"""
    h = np.array(keys, dtype=np.uint64, copy=True)
    h ^= h >> _SHIFT_33
    h *= _MIX_1
    h ^= h >> _SHIFT_33
    h *= _MIX_2
    h ^= h >> _SHIFT_33
    return h


def table_capacity(num_keys: int) -> int:
    """不小于 2 * num_keys 的 2 的幂，至少为 2"""
    capacity = 2
    while capacity < 2 * num_keys:
        capacity <<= 1
    return capacity


class VoxelHashTable:
    """体素键 -> slot 下标 的开放寻址哈希表"""

    def __init__(self, keys: np.ndarray, values: np.ndarray):
        """
        Args:
            keys: 互不相同的 uint64 键
            values: 与 keys 等长的非负 slot 下标
        """
        keys = np.asarray(keys, dtype=np.uint64).ravel()
        values = np.asarray(values, dtype=np.int64).ravel()
        if keys.shape != values.shape:
            raise ValueError('keys 与 values 长度不一致')

        self.capacity = table_capacity(len(keys))
        self._mask = np.uint64(self.capacity - 1)
        self._keys = np.zeros(self.capacity, dtype=np.uint64)
        self._values = np.full(self.capacity, EMPTY, dtype=np.int64)
        self._used = np.zeros(self.capacity, dtype=bool)
        self.max_steps = 0
        self._insert(keys, values)
        self.size = len(keys)

    def __len__(self) -> int:
        return self.size

    def _insert(self, keys: np.ndarray, values: np.ndarray):
        pending = np.arange(len(keys))
        pos = (mix64(keys) & self._mask).astype(np.int64)
        steps = 0
        while len(pending):
            slots = pos[pending]
            free = ~self._used[slots]
            # 同一空位只接受第一个申请者
            _, first = np.unique(slots[free], return_index=True)
            winners = pending[free][first]
            win_slots = slots[free][first]
            self._keys[win_slots] = keys[winners]
            self._values[win_slots] = values[winners]
            self._used[win_slots] = True

            placed = np.zeros(len(keys), dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            pos[pending] = (pos[pending] + 1) & (self.capacity - 1)
            steps += 1
        self.max_steps = steps

    def lookup(self, keys) -> np.ndarray:
        """批量查询，未命中位置返回 EMPTY"""
        keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
        result = np.full(len(keys), EMPTY, dtype=np.int64)
        pos = (mix64(keys) & self._mask).astype(np.int64)
        active = np.arange(len(keys))
        # 表中至少有一半空位，探测必然终止
        while len(active):
            slots = pos[active]
            used = self._used[slots]
            hit = used & (self._keys[slots] == keys[active])
            result[active[hit]] = self._values[slots[hit]]
            active = active[used & ~hit]
            pos[active] = (pos[active] + 1) & (self.capacity - 1)
        return result

    def lookup_one(self, key: int) -> int:
        return int(self.lookup(np.array([key], dtype=np.uint64))[0])
