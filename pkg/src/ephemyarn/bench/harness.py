"""Timing and scaling harness: time-vs-cores per phase, as CSV plus a gnuplot script."""

from __future__ import annotations

import csv
import logging
import math
import shutil
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import cluster
from ..config import load_config
from ..errors import EphemyarnError, MissingInput
from . import dataset, terasort

log = logging.getLogger(__name__)

PHASES = ("provision", "teragen", "terasort_map", "terasort_reduce", "teravalidate", "teardown")
MODES = ("overhead", "teragen", "terasort", "full")
CSV_FIELDS = ("run_id", "phase", "nodes", "cores", "mappers", "reducers", "rows", "wall_ms", "ok")
SUMMARY_FIELDS = ("phase", "nodes", "cores", "rows", "n", "min_ms", "median_ms", "max_ms")


@dataclass
class PhaseTiming:
    phase: str
    cores: int
    rows: int
    wall_ms: int
    run_id: str = ""
    nodes: int = 0
    mappers: int = 0
    reducers: int = 0
    ok: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.wall_ms < 0:
            raise ValueError("wall_ms must be >= 0")

    def to_row(self):
        d = asdict(self)
        d["ok"] = "true" if self.ok else "false"
        return {k: d[k] for k in CSV_FIELDS}

    @classmethod
    def from_row(cls, row):
        return cls(
            phase=row["phase"], cores=int(row["cores"]), rows=int(row["rows"]),
            wall_ms=int(row["wall_ms"]), run_id=row["run_id"], nodes=int(row["nodes"]),
            mappers=int(row["mappers"]), reducers=int(row["reducers"]), ok=row["ok"] == "true",
        )


@dataclass(frozen=True)
class PlanEntry:
    nodes: int
    cores: int
    rows: int = 0


@dataclass
class ScalingReport:
    timings: list = field(default_factory=list)
    csv_path: Path | None = None
    summary_path: Path | None = None
    plot_path: Path | None = None
    data_dirs: list = field(default_factory=list)

    @property
    def ok(self):
        return bool(self.timings) and all(t.ok for t in self.timings)


def parse_node_counts(text):
    """``"3..8"`` or ``"3,4,6,8"`` (or a mix) to a list of node counts."""
    counts = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (int(x) for x in part.split("..", 1))
            if hi < lo:
                raise ValueError(f"empty range {part!r}")
            counts.extend(range(lo, hi + 1))
        else:
            counts.append(int(part))
    if not counts or min(counts) < 1:
        raise ValueError(f"bad node list {text!r}")
    return counts


def local_plan(node_counts, rows=0, slots=2):
    return [PlanEntry(n, n * slots, rows) for n in node_counts]


def task_counts(cores, map_ratio=1.0, reduce_ratio=0.5, mappers=None, reducers=None):
    """Tasks proportional to cores: ceil(ratio * cores), at least one each."""
    m = mappers if mappers is not None else max(1, math.ceil(map_ratio * cores))
    r = reducers if reducers is not None else max(1, math.ceil(reduce_ratio * cores))
    return m, r


def _ms(t0):
    return max(0, int((time.perf_counter() - t0) * 1000))


def _local_alloc(entry):
    slots = max(1, entry.cores // entry.nodes)
    return cluster.local_allocation(entry.nodes, slots=slots), True


def _residue(handle):
    """Leftover processes or local directories of a torn-down local cluster."""
    left = [f"pid {p.pid}" for p in cluster.cluster_processes(handle.job_id)]
    if handle.plan.local_job_dir.exists():
        left.append(str(handle.plan.local_job_dir))
    return left


def _run_entry(entry, run_id, mode, cfg, m, r, seed, input_dir, keep_data, timeout, allocate, kept):
    rows = entry.rows
    out = []

    def add(phase, wall_ms, ok):
        out.append(PhaseTiming(phase, entry.cores, rows, wall_ms, run_id, entry.nodes, m, r, ok))
        return ok

    if mode == "terasort":
        if input_dir is None or not dataset.data_files(input_dir):
            raise MissingInput(f"no teragen data at {input_dir}; run teragen first or pass --input")
        rows = dataset.count_rows(dataset.data_files(input_dir))

    alloc, local = allocate(entry)
    t0 = time.perf_counter()
    try:
        handle = cluster.provision(alloc, cfg, local=local)
    except EphemyarnError as exc:
        log.warning("%s: provisioning %d nodes failed: %s", run_id, entry.nodes, exc)
        add("provision", _ms(t0), False)
        return out
    add("provision", _ms(t0), True)

    created = []
    phase, t0 = None, time.perf_counter()
    try:
        out_root = handle.plan.output
        if mode in ("teragen", "full"):
            gen = out_root / "teragen"
            phase, t0 = "teragen", time.perf_counter()
            res = terasort.run_teragen(handle, rows, m, seed, gen, timeout=timeout)
            phase = None
            if not add("teragen", _ms(t0), res.succeeded):
                return out
            created.append(gen)
            input_dir = gen
        if mode in ("terasort", "full"):
            expect_rows, expect_sum = dataset.dataset_checksum(input_dir)
            sorted_dir = out_root / "terasort"
            phase, t0 = "terasort_map", time.perf_counter()
            res = terasort.run_terasort(handle, input_dir, m, r, sorted_dir, timeout=timeout)
            phase = None
            total = _ms(t0)
            # the AM reports its map phase; reduce and commit are the rest
            map_ms = int((res.status.get("phase_timings") or {}).get("map_ms", total))
            add("terasort_map", map_ms, res.succeeded)
            if not add("terasort_reduce", max(0, total - map_ms), res.succeeded):
                return out
            created.append(sorted_dir)
            phase, t0 = "teravalidate", time.perf_counter()
            rep = dataset.teravalidate(sorted_dir)
            phase = None
            ok = rep.sorted and rep.rows == expect_rows and rep.key_checksum == expect_sum
            if not ok:
                log.warning("%s: teravalidate %s (expected rows=%d checksum=%d)", run_id, rep, expect_rows, expect_sum)
            add("teravalidate", _ms(t0), ok)
    except EphemyarnError as exc:
        log.warning("%s: %s", run_id, exc)
        if phase is not None:
            add(phase, _ms(t0), False)
    finally:
        t0 = time.perf_counter()
        try:
            rep = cluster.teardown(handle)
            ok = rep.ok
        except EphemyarnError as exc:
            log.warning("%s: teardown: %s", run_id, exc)
            ok = False
        wall = _ms(t0)
        if ok and local:
            left = _residue(handle)
            if left:
                log.warning("%s: residue after teardown: %s", run_id, left)
                ok = False
        add("teardown", wall, ok)
        for d in created:
            if keep_data:
                kept.append(d)
            else:
                shutil.rmtree(d, ignore_errors=True)
    return out


def scaling_run(
    plan,
    mode="overhead",
    cfg=None,
    report_dir=None,
    mappers=None,
    reducers=None,
    map_ratio=1.0,
    reduce_ratio=0.5,
    seed=0,
    input_dir=None,
    repeat=1,
    keep_data=False,
    timeout=None,
    allocate=None,
):
    """Run every plan entry ``repeat`` times, sequentially, and write the report.

    ``allocate(entry) -> (NodeAllocation, local)`` maps an entry to hosts; the
    default simulates the entry on this machine. A failed provision gives a
    failed row and the run moves on to the next entry.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cfg = cfg or load_config()
    allocate = allocate or _local_alloc
    if mode == "terasort" and (input_dir is None or not dataset.data_files(input_dir)):
        raise MissingInput(f"no teragen data at {input_dir}; run teragen first or pass --input")
    report = ScalingReport()
    n = 0
    for entry in plan:
        for _ in range(repeat):
            n += 1
            run_id = f"run{n:03d}"
            m, r = task_counts(entry.cores, map_ratio, reduce_ratio, mappers, reducers)
            if mode == "overhead":
                m = r = 0
            elif mode == "teragen":
                r = 0
            rows = _run_entry(entry, run_id, mode, cfg, m, r, seed, input_dir, keep_data, timeout, allocate, report.data_dirs)
            report.timings.extend(rows)
            log.info("%s nodes=%d cores=%d: %s", run_id, entry.nodes, entry.cores,
                     ", ".join(f"{t.phase}={t.wall_ms}ms{'' if t.ok else '(failed)'}" for t in rows))
    if report_dir is not None:
        write_report(report, report_dir)
    return report


def summarize(timings):
    """min/median/max of successful rows per (phase, nodes, cores, rows)."""
    groups = {}
    for t in timings:
        if t.ok:
            groups.setdefault((t.phase, t.nodes, t.cores, t.rows), []).append(t.wall_ms)
    order = {p: i for i, p in enumerate(PHASES)}
    out = []
    for (phase, nodes, cores, rows), vals in sorted(groups.items(), key=lambda kv: (order[kv[0][0]], kv[0][2], kv[0][1], kv[0][3])):
        out.append({
            "phase": phase, "nodes": nodes, "cores": cores, "rows": rows, "n": len(vals),
            "min_ms": min(vals), "median_ms": statistics.median(vals), "max_ms": max(vals),
        })
    return out


def plot_script(summary_name, phases, image="plot.png"):
    lines = [
        "# gnuplot script: wall time vs cores, one panel per phase",
        "set datafile separator ','",
        "set terminal pngcairo size 1200,%d" % (360 * max(1, math.ceil(len(phases) / 2))),
        f"set output '{image}'",
        "set xlabel 'cores'",
        "set ylabel 'wall time (ms)'",
        "set key off",
        "set grid",
        f"set multiplot layout {max(1, math.ceil(len(phases) / 2))},{min(2, max(1, len(phases)))}",
    ]
    for ph in phases:
        lines.append(f"set title '{ph}'")
        lines.append(
            f"plot '{summary_name}' skip 1 using 3:(strcol(1) eq '{ph}' ? $7 : 1/0)"
            ":(strcol(1) eq '{ph}' ? $6 : 1/0):(strcol(1) eq '{ph}' ? $8 : 1/0) with yerrorlines pt 7"
        )
    lines.append("unset multiplot")
    return "\n".join(lines) + "\n"


def write_report(report, report_dir):
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    report.csv_path = report_dir / "timings.csv"
    with open(report.csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for t in report.timings:
            w.writerow(t.to_row())
    summary = summarize(report.timings)
    report.summary_path = report_dir / "summary.csv"
    with open(report.summary_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(summary)
    phases = [p for p in PHASES if any(s["phase"] == p for s in summary)]
    report.plot_path = report_dir / "plot.gp"
    report.plot_path.write_text(plot_script(report.summary_path.name, phases))
    return report


def read_timings(path):
    with open(path, newline="") as f:
        return [PhaseTiming.from_row(row) for row in csv.DictReader(f)]
