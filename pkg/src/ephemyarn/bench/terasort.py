"""Teragen / Terasort jobs on a provisioned cluster."""

from __future__ import annotations

import secrets
import shlex
from pathlib import Path

from .. import cluster
from ..errors import MissingInput
from .dataset import data_files, sample_split_points, write_splits


def _task(handle, *args):
    """Task command line; ``{PLACEHOLDER}`` arguments stay unquoted so the
    application master can substitute (already quoted) values."""
    argv = [handle.state["python"], "-m", "ephemyarn._daemon", "task", *map(str, args)]
    return " ".join(a if a.startswith("{") and a.endswith("}") else shlex.quote(a) for a in argv)


def teragen_spec(handle, rows, mappers, seed, output_dir):
    command = _task(handle, "teragen", "--rows", rows, "--mappers", mappers, "--seed", seed,
                    "--index", "{TASK_INDEX}", "--out", "{OUTPUT}")
    return cluster.job_for(handle, name="teragen", num_mappers=mappers, num_reducers=0,
                           map_command=command, output_dir=str(output_dir))


def terasort_spec(handle, input_dir, mappers, reducers, output_dir, splits_file):
    cfg = handle.cfg
    map_cmd = _task(handle, "sort-map", "--splits", splits_file, "--reducers", reducers,
                    "--out", "{OUTPUT}", "{INPUT}")
    red_cmd = _task(handle, "sort-reduce", "--index", "{TASK_INDEX}", "--budget-mb", cfg.sort_budget_mb,
                    "--out", "{OUTPUT}", "{INPUT}")
    return cluster.job_for(handle, name="terasort", num_mappers=mappers, num_reducers=reducers,
                           map_command=map_cmd, reduce_command=red_cmd,
                           input_dir=str(input_dir), output_dir=str(output_dir))


def run_teragen(handle, rows, mappers, seed, output_dir, timeout=None):
    return cluster.run(handle, teragen_spec(handle, rows, mappers, seed, output_dir), timeout=timeout)


def run_terasort(handle, input_dir, mappers, reducers, output_dir, sample_size=10_000, timeout=None):
    input_dir = Path(input_dir)
    if not input_dir.is_dir() or not data_files(input_dir):
        raise MissingInput(f"no teragen data in {input_dir}")
    splits = sample_split_points(input_dir, reducers, sample_size)
    splits_file = handle.plan.staging / f"terasort-{secrets.token_hex(4)}.splits"
    write_splits(splits_file, splits)
    spec = terasort_spec(handle, input_dir, mappers, reducers, output_dir, splits_file)
    return cluster.run(handle, spec, timeout=timeout)
