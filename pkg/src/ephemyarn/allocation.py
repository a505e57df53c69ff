"""Batch-scheduler allocations, daemon role placement and directory planning."""

from __future__ import annotations

import os
import re
import secrets
import time
from dataclasses import dataclass
from pathlib import Path

from .config import Config
from .errors import EmptyAllocation, InsufficientNodes, InvalidRoots, MalformedEntry, MissingEnv

LOCAL_DIR_NAMES = ("am_log", "namenode_log", "rm_log", "namenode_data", "nm_log", "containers")
SHARED_DIR_NAMES = ("staging", "input", "output")


@dataclass(frozen=True)
class NodeAllocation:
    hosts: tuple  # ((hostname, slots), ...) in order of first appearance

    def __post_init__(self):
        if not self.hosts:
            raise EmptyAllocation("allocation has no hosts")
        names = [h for h, _ in self.hosts]
        if len(set(names)) != len(names):
            raise MalformedEntry("duplicate hostnames in allocation")
        for host, slots in self.hosts:
            if slots < 1:
                raise MalformedEntry(f"host {host} has non-positive slot count {slots}")

    @property
    def total_cores(self):
        return sum(s for _, s in self.hosts)

    @property
    def hostnames(self):
        return [h for h, _ in self.hosts]

    def serialize(self):
        return "".join(f"{h} {s}\n" for h, s in self.hosts)

    @classmethod
    def from_counts(cls, pairs):
        """Aggregate (host, slots) pairs, merging repeats in first-seen order."""
        merged = {}
        for host, slots in pairs:
            merged[host] = merged.get(host, 0) + slots
        return cls(tuple(merged.items()))


def parse_hostfile(text):
    """Parse an LSF-style hostfile.

    Each line is ``hostname`` or ``hostname <slots>``. A bare hostname counts
    as one slot, so a file listing a host once per slot aggregates naturally.
    """
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) == 1:
            pairs.append((parts[0], 1))
        elif len(parts) == 2:
            try:
                slots = int(parts[1])
            except ValueError:
                raise MalformedEntry(f"line {lineno}: slot count {parts[1]!r} is not an integer") from None
            if slots < 1:
                raise MalformedEntry(f"line {lineno}: non-positive slot count {slots}")
            pairs.append((parts[0], slots))
        else:
            raise MalformedEntry(f"line {lineno}: expected 'hostname [slots]', got {raw!r}")
    if not pairs:
        raise EmptyAllocation("hostfile contains no hosts")
    return NodeAllocation.from_counts(pairs)


_BRACKET = re.compile(r"\[([^\]]*)\]")


def _expand_ranges(body):
    out = []
    for item in body.split(","):
        item = item.strip()
        if not item:
            raise MalformedEntry(f"empty range item in [{body}]")
        if "-" in item:
            lo, hi = item.split("-", 1)
            if not (lo.isdigit() and hi.isdigit()) or int(lo) > int(hi):
                raise MalformedEntry(f"bad range {item!r}")
            width = len(lo)
            out.extend(str(i).zfill(width) for i in range(int(lo), int(hi) + 1))
        elif item.isdigit():
            out.append(item)
        else:
            raise MalformedEntry(f"bad range item {item!r}")
    return out


def _expand_one(expr):
    m = _BRACKET.search(expr)
    if m is None:
        if "[" in expr or "]" in expr:
            raise MalformedEntry(f"unbalanced brackets in {expr!r}")
        return [expr]
    head, tail = expr[: m.start()], expr[m.end():]
    if "[" in head or "]" in head:
        raise MalformedEntry(f"unbalanced brackets in {expr!r}")
    return [head + v + rest for v in _expand_ranges(m.group(1)) for rest in _expand_one(tail)]


def expand_nodelist(expr):
    """Expand a SLURM compact nodelist such as ``n[01-03,7],login1``."""
    expr = expr.strip()
    if not expr:
        raise MalformedEntry("empty nodelist")
    items, depth, cur = [], 0, ""
    for ch in expr:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise MalformedEntry(f"unbalanced brackets in {expr!r}")
        if ch == "," and depth == 0:
            items.append(cur)
            cur = ""
        else:
            cur += ch
    if depth != 0:
        raise MalformedEntry(f"unbalanced brackets in {expr!r}")
    items.append(cur)
    hosts = []
    for item in items:
        if not item.strip():
            raise MalformedEntry(f"empty host item in {expr!r}")
        hosts.extend(_expand_one(item.strip()))
    return hosts


def _expand_tasks(spec, n_hosts):
    # "16" or SLURM_TASKS_PER_NODE style "16(x3),8"
    counts = []
    for item in spec.split(","):
        m = re.fullmatch(r"\s*(\d+)(?:\(x(\d+)\))?\s*", item)
        if m is None:
            raise MalformedEntry(f"bad tasks-per-node value {spec!r}")
        counts.extend([int(m.group(1))] * int(m.group(2) or 1))
    if len(counts) == 1:
        counts *= n_hosts
    if len(counts) != n_hosts:
        raise MalformedEntry(f"tasks-per-node {spec!r} does not cover {n_hosts} hosts")
    return counts


def read_env_allocation(env, flavor, cfg=None):
    """Build a NodeAllocation from a scheduler's exported environment."""
    cfg = cfg or Config()
    if flavor == "lsf":
        var = cfg.lsf_hosts_var
        if var not in env:
            raise MissingEnv(f"${var} is not set")
        return parse_hostfile("\n".join(env[var].split()))
    if flavor == "slurm":
        for var in (cfg.slurm_nodelist_var, cfg.slurm_tasks_var):
            if var not in env:
                raise MissingEnv(f"${var} is not set")
        hosts = expand_nodelist(env[cfg.slurm_nodelist_var])
        counts = _expand_tasks(env[cfg.slurm_tasks_var], len(hosts))
        if any(c < 1 for c in counts):
            raise MalformedEntry("non-positive tasks-per-node")
        return NodeAllocation.from_counts(zip(hosts, counts))
    raise ValueError(f"unknown allocation flavor {flavor!r}")


@dataclass(frozen=True)
class ClusterLayout:
    rm_host: str
    history_host: str
    worker_hosts: tuple
    rm_port: int = 20050
    history_port: int = 20060
    nm_base_port: int = 20100

    @property
    def ports(self):
        return (self.rm_port, self.history_port, self.nm_base_port)

    def nm_port(self, host):
        return self.nm_base_port + self.worker_hosts.index(host)

    @property
    def all_hosts(self):
        seen = {}
        for h in (self.rm_host, self.history_host, *self.worker_hosts):
            seen.setdefault(h, None)
        return list(seen)

    def to_dict(self):
        return {
            "rm_host": self.rm_host,
            "history_host": self.history_host,
            "worker_hosts": list(self.worker_hosts),
            "rm_port": self.rm_port,
            "history_port": self.history_port,
            "nm_base_port": self.nm_base_port,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["rm_host"], d["history_host"], tuple(d["worker_hosts"]),
            d["rm_port"], d["history_port"], d["nm_base_port"],
        )


def assign_roles(alloc, cfg=None):
    """Place the resource manager on the first host, history on the second,
    node agents on the rest."""
    cfg = cfg or Config()
    hosts = alloc.hostnames
    ports = dict(rm_port=cfg.rm_port, history_port=cfg.history_port, nm_base_port=cfg.nm_base_port)
    if cfg.colocate_daemons:
        history = hosts[1] if len(hosts) > 1 else hosts[0]
        return ClusterLayout(hosts[0], history, tuple(hosts), **ports)
    if len(hosts) < 3:
        raise InsufficientNodes(
            f"need at least 3 hosts (resource manager, history, >=1 worker), got {len(hosts)}"
        )
    return ClusterLayout(hosts[0], hosts[1], tuple(hosts[2:]), **ports)


@dataclass(frozen=True)
class DirectoryPlan:
    job_id: str
    local_root: Path
    shared_root: Path
    local_dirs: dict
    shared_dirs: dict

    @property
    def local_job_dir(self):
        return self.local_root / self.job_id

    @property
    def shared_job_dir(self):
        return self.shared_root / self.job_id

    def __getattr__(self, name):
        # plan.staging, plan.rm_log, ...
        for group in ("local_dirs", "shared_dirs"):
            d = self.__dict__.get(group)
            if d and name in d:
                return d[name]
        raise AttributeError(name)

    def all_paths(self):
        return list(self.local_dirs.values()) + list(self.shared_dirs.values())

    def create(self):
        for p in self.all_paths():
            p.mkdir(parents=True, exist_ok=True)

    def to_dict(self):
        return {"job_id": self.job_id, "local_root": str(self.local_root), "shared_root": str(self.shared_root)}

    @classmethod
    def from_dict(cls, d):
        return _build_plan(Path(d["local_root"]), Path(d["shared_root"]), d["job_id"])


def _norm(p):
    return Path(os.path.normpath(os.path.abspath(os.fspath(p))))


def _build_plan(local_root, shared_root, job_id):
    return DirectoryPlan(
        job_id=job_id,
        local_root=local_root,
        shared_root=shared_root,
        local_dirs={n: local_root / job_id / n for n in LOCAL_DIR_NAMES},
        shared_dirs={n: shared_root / job_id / n for n in SHARED_DIR_NAMES},
    )


def plan_directories(layout, cfg, job_id):
    """Deterministic local/shared directory plan for one cluster instance."""
    if not job_id or "/" in job_id or job_id in (".", ".."):
        raise ValueError(f"invalid job id {job_id!r}")
    local_root, shared_root = _norm(cfg.local_root), _norm(cfg.shared_root)
    if local_root == shared_root:
        raise InvalidRoots(f"local and shared roots are the same directory: {local_root}")
    if local_root.is_relative_to(shared_root) or shared_root.is_relative_to(local_root):
        raise InvalidRoots(f"local root {local_root} and shared root {shared_root} are nested")
    return _build_plan(local_root, shared_root, job_id)


def default_job_id(env=None):
    env = os.environ if env is None else env
    for var in ("LSB_JOBID", "SLURM_JOB_ID"):
        if env.get(var):
            return f"job{env[var]}"
    return time.strftime("%Y%m%d%H%M%S") + "-" + secrets.token_hex(3)
