"""Reading, writing, generating and validating 100-byte record datasets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DegeneratePartition, MalformedRecord, MissingInput, OutputExists
from . import kernels
from .kernels import KEY_SIZE, RECORD_SIZE

GEN_PREFIX = "part-m-"
SORT_PREFIX = "part-r-"
CHUNK_ROWS = 200_000


def shard_name(prefix, index):
    return f"{prefix}{index:05d}"


def read_records(path):
    path = Path(path)
    size = path.stat().st_size
    if size % RECORD_SIZE:
        raise MalformedRecord(path, size - size % RECORD_SIZE)
    if size == 0:
        return np.empty((0, RECORD_SIZE), dtype=np.uint8)
    return np.fromfile(path, dtype=np.uint8).reshape(-1, RECORD_SIZE)


def map_records(path):
    """Read-only memory map of a record file (empty array for empty files)."""
    path = Path(path)
    size = path.stat().st_size
    if size % RECORD_SIZE:
        raise MalformedRecord(path, size - size % RECORD_SIZE)
    if size == 0:
        return np.empty((0, RECORD_SIZE), dtype=np.uint8)
    return np.memmap(path, dtype=np.uint8, mode="r").reshape(-1, RECORD_SIZE)


def data_files(directory, prefix="part-"):
    d = Path(directory)
    if not d.is_dir():
        raise MissingInput(f"{d} does not exist")
    return sorted(p for p in d.iterdir() if p.is_file() and p.name.startswith(prefix))


def shard_bounds(total_rows, num_mappers, index):
    per = math.ceil(total_rows / num_mappers) if total_rows else 0
    start = min(index * per, total_rows)
    return start, min(start + per, total_rows)


def write_shard(path, total_rows, num_mappers, index, seed):
    """Write shard ``index`` of a teragen dataset; returns the row count."""
    start, stop = shard_bounds(total_rows, num_mappers, index)
    with open(path, "wb") as fh:
        for lo in range(start, stop, CHUNK_ROWS):
            fh.write(kernels.generate_records(seed, lo, min(CHUNK_ROWS, stop - lo)).tobytes())
    return stop - start


def teragen(total_rows, num_mappers, seed, output_dir):
    """Single-process generator: the same shards a cluster teragen job writes."""
    if total_rows < 0 or num_mappers < 1:
        raise ValueError("need total_rows >= 0 and num_mappers >= 1")
    out = Path(output_dir)
    if out.exists():
        raise OutputExists(f"{out} already exists")
    out.mkdir(parents=True)
    return [
        write_shard(out / shard_name(GEN_PREFIX, i), total_rows, num_mappers, i, seed)
        for i in range(num_mappers)
    ]


def dataset_checksum(directory, prefix="part-"):
    rows, total = 0, 0
    for f in data_files(directory, prefix):
        recs = map_records(f)
        rows += recs.shape[0]
        total = (total + kernels.key_checksum(recs)) & ((1 << 64) - 1)
    return rows, total


def count_rows(paths):
    return sum(Path(p).stat().st_size // RECORD_SIZE for p in paths)


def sample_split_points(input_dir, num_reducers, sample_size=10_000):
    """Pick ``num_reducers - 1`` split keys from a fixed-stride key sample.

    Rows are sampled at global indices 0, s, 2s, ... with
    ``s = max(1, N // sample_size)`` across the name-ordered input files, so
    the result is a pure function of the input. Split ``k`` is the sample
    quantile at ``k / num_reducers``.
    """
    if num_reducers < 1:
        raise ValueError("num_reducers must be >= 1")
    if num_reducers == 1:
        return []
    files = data_files(input_dir)
    sizes = [Path(f).stat().st_size // RECORD_SIZE for f in files]
    total = sum(sizes)
    if total == 0:
        raise MissingInput(f"no records to sample in {input_dir}")
    stride = max(1, total // max(1, sample_size))
    wanted = np.arange(0, total, stride, dtype=np.int64)[:sample_size]
    keys = []
    offset = 0
    for f, n in zip(files, sizes):
        local = wanted[(wanted >= offset) & (wanted < offset + n)] - offset
        if local.size:
            keys.append(np.array(map_records(f)[local, :KEY_SIZE]))
        offset += n
    sample = np.concatenate(keys)
    sample = sample[kernels.sort_order(sample)]
    n = sample.shape[0]
    splits = [bytes(sample[(k * n) // num_reducers]) for k in range(1, num_reducers)]
    distinct = len({bytes(row) for row in sample})
    if distinct < num_reducers:
        warnings.warn(
            f"only {distinct} distinct sampled keys for {num_reducers} reducers; some partitions will be empty",
            DegeneratePartition,
            stacklevel=2,
        )
    return splits


def write_splits(path, splits):
    Path(path).write_bytes(b"".join(splits))


def read_splits(path):
    raw = Path(path).read_bytes()
    if len(raw) % KEY_SIZE:
        raise MalformedRecord(path, len(raw) - len(raw) % KEY_SIZE, "split file is not a whole number of keys")
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, KEY_SIZE)


@dataclass
class ValidationReport:
    sorted: bool
    rows: int
    key_checksum: int
    partitions: int
    problem: str = ""


def teravalidate(output_dir, prefix=SORT_PREFIX):
    """Check within- and across-partition key order; count rows and checksum keys."""
    files = data_files(output_dir, prefix)
    rows, checksum = 0, 0
    ok, problem = True, ""
    prev_last = None
    for f in files:
        recs = map_records(f)
        n = recs.shape[0]
        rows += n
        checksum = (checksum + kernels.key_checksum(recs)) & ((1 << 64) - 1)
        if n == 0:
            continue
        bad = kernels.first_unsorted(recs)
        if ok and bad >= 0:
            ok, problem = False, f"{f.name}: record {bad} is out of order"
        first = bytes(recs[0, :KEY_SIZE])
        if ok and prev_last is not None and first < prev_last:
            ok, problem = False, f"{f.name}: first key sorts before the last key of the previous partition"
        prev_last = bytes(recs[-1, :KEY_SIZE])
    return ValidationReport(ok, rows, checksum, len(files), problem)
