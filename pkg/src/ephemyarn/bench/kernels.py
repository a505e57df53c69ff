"""Record-level kernels for the sort benchmark.

Each kernel has a numba implementation and a pure-numpy one with identical
results. ``EPHEMYARN_KERNELS=numpy`` forces the numpy path; the default uses
numba when it imports.

Record layout (100 bytes)::

    [0:10)   key, printable ASCII (32..126)
    [10:12)  00 11
    [12:44)  row id, 32 uppercase hex digits
    [44:48)  88 99 AA BB
    [48:96)  filler, letters A-Z
    [96:100) CC DD EE FF
"""

from __future__ import annotations

import os

import numpy as np

RECORD_SIZE = 100
KEY_SIZE = 10
KERNELS_ENV = "EPHEMYARN_KERNELS"

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1

_HEX = np.frombuffer(b"0123456789ABCDEF", dtype=np.uint8)

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def backend():
    choice = os.environ.get(KERNELS_ENV, "").strip().lower()
    if choice == "numpy" or not HAVE_NUMBA:
        return "numpy"
    if choice not in ("", "numba"):
        raise ValueError(f"{KERNELS_ENV} must be 'numba' or 'numpy', got {choice!r}")
    return "numba"


def splitmix64(x):
    """Scalar reference (python ints)."""
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def seed_base(seed):
    return splitmix64(seed & _MASK)


# -- numpy path -------------------------------------------------------------


def _np_splitmix(x):
    z = x + np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _np_generate(base, start, count):
    out = np.empty((count, RECORD_SIZE), dtype=np.uint8)
    if count == 0:
        return out
    rows = np.arange(start, start + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for half in range(2):
            h = _np_splitmix(np.uint64(base) + np.uint64(2) * rows + np.uint64(half))
            for b in range(5):
                out[:, half * 5 + b] = (np.uint64(32) + h % np.uint64(95)).astype(np.uint8)
                h = h // np.uint64(95)
    out[:, 10] = 0x00
    out[:, 11] = 0x11
    for d in range(32):
        shift = 4 * (31 - d)
        if shift >= 64:
            out[:, 12 + d] = ord("0")
        else:
            out[:, 12 + d] = _HEX[((rows >> np.uint64(shift)) & np.uint64(0xF)).astype(np.intp)]
    out[:, 44:48] = (0x88, 0x99, 0xAA, 0xBB)
    for m in range(48):
        out[:, 48 + m] = (np.uint64(65) + (rows + np.uint64(m)) % np.uint64(26)).astype(np.uint8)
    out[:, 96:100] = (0xCC, 0xDD, 0xEE, 0xFF)
    return out


def _np_key_hashes(keys):
    h = np.full(keys.shape[0], _FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for b in range(keys.shape[1]):
            h = (h ^ keys[:, b].astype(np.uint64)) * np.uint64(_FNV_PRIME)
        return _np_splitmix(h)


def _np_checksum(keys):
    if keys.shape[0] == 0:
        return 0
    with np.errstate(over="ignore"):
        return int(np.sum(_np_key_hashes(keys), dtype=np.uint64))


def _as_void(keys):
    return np.ascontiguousarray(keys).view(f"V{keys.shape[1]}").ravel()


def _np_partition(keys, splits):
    if splits.shape[0] == 0:
        return np.zeros(keys.shape[0], dtype=np.int64)
    return np.searchsorted(_as_void(splits), _as_void(keys), side="right").astype(np.int64)


def _np_first_unsorted(keys):
    n = keys.shape[0]
    if n < 2:
        return -1
    a, b = keys[:-1], keys[1:]
    diff = a != b
    has = diff.any(axis=1)
    first = diff.argmax(axis=1)
    idx = np.arange(n - 1)
    desc = has & (a[idx, first] > b[idx, first])
    bad = np.flatnonzero(desc)
    return int(bad[0]) + 1 if bad.size else -1


# -- numba path -------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, inline="always")
    def _nb_mix(x):
        z = x + np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    @numba.njit(cache=True)
    def _nb_generate(base, start, count, hexdigits):
        out = np.empty((count, RECORD_SIZE), dtype=np.uint8)
        b0 = np.uint64(base)
        for i in range(count):
            row = np.uint64(start + i)
            for half in range(2):
                h = _nb_mix(b0 + np.uint64(2) * row + np.uint64(half))
                for b in range(5):
                    out[i, half * 5 + b] = np.uint8(np.uint64(32) + h % np.uint64(95))
                    h = h // np.uint64(95)
            out[i, 10] = 0x00
            out[i, 11] = 0x11
            for d in range(32):
                shift = 4 * (31 - d)
                if shift >= 64:
                    out[i, 12 + d] = 48
                else:
                    out[i, 12 + d] = hexdigits[np.intp((row >> np.uint64(shift)) & np.uint64(0xF))]
            out[i, 44] = 0x88
            out[i, 45] = 0x99
            out[i, 46] = 0xAA
            out[i, 47] = 0xBB
            for m in range(48):
                out[i, 48 + m] = np.uint8(np.uint64(65) + (row + np.uint64(m)) % np.uint64(26))
            out[i, 96] = 0xCC
            out[i, 97] = 0xDD
            out[i, 98] = 0xEE
            out[i, 99] = 0xFF
        return out

    @numba.njit(cache=True)
    def _nb_checksum(keys):
        total = np.uint64(0)
        for i in range(keys.shape[0]):
            h = np.uint64(_FNV_OFFSET)
            for b in range(keys.shape[1]):
                h = (h ^ np.uint64(keys[i, b])) * np.uint64(_FNV_PRIME)
            total += _nb_mix(h)
        return total

    @numba.njit(cache=True, inline="always")
    def _nb_cmp(a, i, b, j):
        for k in range(a.shape[1]):
            if a[i, k] != b[j, k]:
                return -1 if a[i, k] < b[j, k] else 1
        return 0

    @numba.njit(cache=True)
    def _nb_partition(keys, splits):
        out = np.empty(keys.shape[0], dtype=np.int64)
        ns = splits.shape[0]
        for i in range(keys.shape[0]):
            lo, hi = 0, ns
            while lo < hi:  # first split strictly greater than the key
                mid = (lo + hi) // 2
                if _nb_cmp(splits, mid, keys, i) <= 0:
                    lo = mid + 1
                else:
                    hi = mid
            out[i] = lo
        return out

    @numba.njit(cache=True)
    def _nb_first_unsorted(keys):
        for i in range(1, keys.shape[0]):
            if _nb_cmp(keys, i - 1, keys, i) > 0:
                return i
        return -1


# -- public API -------------------------------------------------------------


def _keys(arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d uint8 array")
    return np.ascontiguousarray(arr[:, :KEY_SIZE]) if arr.shape[1] != KEY_SIZE else np.ascontiguousarray(arr)


def generate_records(seed, start, count, use=None):
    """Rows ``start .. start+count-1``; row bytes depend only on (seed, row)."""
    if count < 0 or start < 0:
        raise ValueError("start and count must be non-negative")
    base = seed_base(seed)
    if (use or backend()) == "numba":
        return _nb_generate(np.uint64(base), start, count, _HEX)
    return _np_generate(base, start, count)


def key_checksum(records_or_keys, use=None):
    """Order-independent checksum: sum of per-key hashes modulo 2**64."""
    keys = _keys(records_or_keys)
    if (use or backend()) == "numba":
        return int(_nb_checksum(keys)) if keys.shape[0] else 0
    return _np_checksum(keys)


def key_hashes(records_or_keys):
    return _np_key_hashes(_keys(records_or_keys))


def partition_of(records_or_keys, splits, use=None):
    """Index of the first split point strictly greater than each key."""
    keys = _keys(records_or_keys)
    splits = np.ascontiguousarray(np.asarray(splits, dtype=np.uint8).reshape(-1, KEY_SIZE))
    if (use or backend()) == "numba":
        return _nb_partition(keys, splits)
    return _np_partition(keys, splits)


def first_unsorted(records_or_keys, use=None):
    """Index ``i`` of the first key smaller than key ``i-1``, or -1."""
    keys = _keys(records_or_keys)
    if (use or backend()) == "numba":
        return int(_nb_first_unsorted(keys))
    return _np_first_unsorted(keys)


def sort_order(records_or_keys):
    """Stable permutation that orders records by key bytes."""
    keys = _keys(records_or_keys)
    return np.argsort(_as_void(keys), kind="stable")


def sort_records(records):
    records = np.asarray(records, dtype=np.uint8).reshape(-1, RECORD_SIZE)
    return records[sort_order(records)]
