"""Container-side task programs for the sort benchmark.

Invoked by the application master as
``python -m ephemyarn.bench.tasks {teragen,sort-map,sort-reduce} ...``.
Each task writes its output under ``--out`` plus a ``_COUNTERS.json`` file.
"""

from __future__ import annotations

import argparse
import heapq
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from ..app_master import COUNTERS_FILE, SHUFFLE_READS_FILE
from . import kernels
from .dataset import GEN_PREFIX, SORT_PREFIX, KEY_SIZE, RECORD_SIZE, map_records, read_splits, shard_name, write_shard


def _write_counters(out, **counters):
    (Path(out) / COUNTERS_FILE).write_text(json.dumps(counters))


def teragen_task(rows, mappers, seed, index, out):
    n = write_shard(Path(out) / shard_name(GEN_PREFIX, index), rows, mappers, index, seed)
    _write_counters(out, output_records=n)
    return n


def sort_map_task(inputs, splits_path, reducers, out):
    """Partition input records by split points; each partition file is sorted."""
    splits = read_splits(splits_path) if splits_path else np.empty((0, KEY_SIZE), dtype=np.uint8)
    if splits.shape[0] != reducers - 1:
        raise SystemExit(f"split file holds {splits.shape[0]} keys, expected {reducers - 1}")
    parts = [[] for _ in range(reducers)]
    n_in = 0
    for path in inputs:
        recs = np.asarray(map_records(path))
        n_in += recs.shape[0]
        if recs.shape[0] == 0:
            continue
        pid = kernels.partition_of(recs, splits)
        order = np.argsort(pid, kind="stable")
        bounds = np.searchsorted(pid[order], np.arange(reducers + 1))
        for r in range(reducers):
            chunk = order[bounds[r]:bounds[r + 1]]
            if chunk.size:
                parts[r].append(recs[chunk])
    n_out = 0
    for r in range(reducers):
        data = np.concatenate(parts[r]) if parts[r] else np.empty((0, RECORD_SIZE), dtype=np.uint8)
        data = kernels.sort_records(data)
        n_out += data.shape[0]
        with open(Path(out) / f"part_{r}", "wb") as fh:
            fh.write(data.tobytes())
    _write_counters(out, input_records=n_in, output_records=n_out)
    return n_out


def _iter_run(path, block_rows=4096):
    recs = map_records(path)
    for lo in range(0, recs.shape[0], block_rows):
        block = np.array(recs[lo:lo + block_rows])
        for row in block:
            yield row.tobytes()


def sort_reduce_task(inputs, index, out, budget_mb=256, scratch=None):
    """Sort one partition. Inputs larger than the memory budget go through
    sorted runs on local scratch space and a k-way merge."""
    inputs = [Path(p) for p in inputs]
    total_bytes = sum(p.stat().st_size for p in inputs)
    dest = Path(out) / shard_name(SORT_PREFIX, index)
    budget = max(RECORD_SIZE, budget_mb * 1024 * 1024)
    if total_bytes <= budget:
        arrays = [np.asarray(map_records(p)) for p in inputs]
        data = np.concatenate(arrays) if arrays else np.empty((0, RECORD_SIZE), dtype=np.uint8)
        data = kernels.sort_records(data)
        with open(dest, "wb") as fh:
            fh.write(data.tobytes())
        n = data.shape[0]
    else:
        n = _external_sort(inputs, dest, budget, scratch)
    (Path(out) / SHUFFLE_READS_FILE).write_text(json.dumps([str(p) for p in inputs]))
    _write_counters(out, input_records=n, output_records=n)
    return n


def _external_sort(inputs, dest, budget, scratch):
    chunk_rows = max(1, budget // RECORD_SIZE)
    with tempfile.TemporaryDirectory(dir=scratch, prefix="sortruns-") as tmp:
        runs = []
        for path in inputs:
            recs = map_records(path)
            for lo in range(0, recs.shape[0], chunk_rows):
                run = Path(tmp) / f"run{len(runs):05d}"
                kernels.sort_records(np.array(recs[lo:lo + chunk_rows])).tofile(run)
                runs.append(run)
        n = 0
        with open(dest, "wb") as fh:
            for rec in heapq.merge(*(_iter_run(r) for r in runs), key=lambda b: b[:KEY_SIZE]):
                fh.write(rec)
                n += 1
    return n


def main(argv=None):
    p = argparse.ArgumentParser(prog="ephemyarn-task")
    sub = p.add_subparsers(dest="task", required=True)

    g = sub.add_parser("teragen")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--mappers", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--index", type=int, required=True)
    g.add_argument("--out", required=True)

    m = sub.add_parser("sort-map")
    m.add_argument("--splits", default="")
    m.add_argument("--reducers", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("inputs", nargs="*")

    r = sub.add_parser("sort-reduce")
    r.add_argument("--index", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--budget-mb", type=int, default=256)
    r.add_argument("inputs", nargs="*")

    args = p.parse_args(argv)
    if args.task == "teragen":
        teragen_task(args.rows, args.mappers, args.seed, args.index, args.out)
    elif args.task == "sort-map":
        sort_map_task(args.inputs, args.splits, args.reducers, args.out)
    else:
        sort_reduce_task(args.inputs, args.index, args.out, args.budget_mb, scratch=os.environ.get("LOCAL_DIR"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
