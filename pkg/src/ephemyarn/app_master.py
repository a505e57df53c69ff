"""MapReduce application master.

Runs inside a container. Asks the resource manager for one container per task
attempt, runs all map tasks, then (after a strict barrier) all reduce tasks,
and commits the job output with an atomic rename.

Shuffle goes through shared storage: map attempt ``k`` of task ``i`` writes
``<app staging>/shuffle/map_<i>.attempt_<k>/part_<r>`` and, once it succeeds,
that directory is renamed to ``shuffle/map_<i>``. Reducer ``r`` is handed
exactly ``shuffle/map_<i>/part_<r>`` for every mapper ``i``.

Command templates may use ``{TASK_INDEX}``, ``{ATTEMPT}``, ``{INPUT}``,
``{STAGING}``, ``{OUTPUT}``, ``{NUM_MAPPERS}`` and ``{NUM_REDUCERS}``.
"""

from __future__ import annotations

import argparse
import ctypes
import ctypes.util
import errno
import json
import logging
import os
import shlex
import shutil
import sys
import time
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

from .config import ResourceProfile, parse_kv
from .errors import ConfigError, EphemyarnError, MissingInput, OutputExists
from .protocol import Client

log = logging.getLogger(__name__)

COUNTERS_FILE = "_COUNTERS.json"
SHUFFLE_READS_FILE = "_SHUFFLE_READS"
SUCCESS_MARKER = "_SUCCESS"


@dataclass
class JobSpec:
    name: str
    num_mappers: int
    num_reducers: int = 0
    map_command: str = "true"
    reduce_command: str = ""
    input_dir: str = ""
    output_dir: str = ""
    staging_dir: str = ""
    map_memory_mb: int = 4096
    map_vcores: int = 1
    reduce_memory_mb: int = 4096
    reduce_vcores: int = 1
    max_attempts: int = 3
    map_java_opts: str = "-Xmx3072m"
    heartbeat_ms: int = 250

    def __post_init__(self):
        if self.num_mappers < 1:
            raise ConfigError("num_mappers must be >= 1")
        if self.num_reducers < 0:
            raise ConfigError("num_reducers must be >= 0")
        if self.num_reducers > 0 and not self.reduce_command:
            raise ConfigError("reduce_command is required when num_reducers > 0")
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")

    @property
    def map_resource(self):
        return ResourceProfile(self.map_memory_mb, self.map_vcores)

    @property
    def reduce_resource(self):
        return ResourceProfile(self.reduce_memory_mb, self.reduce_vcores)

    def dumps(self):
        lines = []
        for f in fields(self):
            value = str(getattr(self, f.name))
            if "\n" in value:
                raise ConfigError(f"{f.name} must be a single line")
            lines.append(f"{f.name}={value}\n")
        return "".join(lines)

    @classmethod
    def loads(cls, text, cfg=None, **overrides):
        """Parse a key=value jobspec; ``cfg`` supplies defaults for unset resource keys."""
        raw = parse_kv(text, source="jobspec")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown jobspec keys: {', '.join(unknown)}")
        kwargs = {}
        for name, value in raw.items():
            if known[name].type in ("int", int):
                try:
                    value = int(value)
                except (TypeError, ValueError):
                    raise ConfigError(f"jobspec {name}: expected an integer, got {value!r}") from None
            kwargs[name] = value
        if "name" not in kwargs or "num_mappers" not in kwargs:
            raise ConfigError("jobspec needs at least name and num_mappers")
        if cfg is not None:
            return cls.for_config(cfg, **kwargs)
        return cls(**kwargs)

    @classmethod
    def for_config(cls, cfg, **kwargs):
        kwargs.setdefault("map_memory_mb", cfg.map_memory_mb)
        kwargs.setdefault("reduce_memory_mb", cfg.effective_reduce_memory_mb)
        kwargs.setdefault("map_java_opts", cfg.map_heap_opt)
        kwargs.setdefault("max_attempts", cfg.max_attempts)
        kwargs.setdefault("heartbeat_ms", cfg.heartbeat_interval_ms)
        return cls(**kwargs)


@dataclass
class JobResult:
    succeeded: bool
    phase_timings: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    diagnostics: str = ""


class JobFailed(EphemyarnError):
    code = "JobFailed"


# -- output commit ----------------------------------------------------------

_RENAME_NOREPLACE = 1
_AT_FDCWD = -100


def _libc_renameat2():
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        fn = libc.renameat2
    except (OSError, AttributeError, TypeError):
        return None
    fn.argtypes = [ctypes.c_int, ctypes.c_char_p, ctypes.c_int, ctypes.c_char_p, ctypes.c_uint]
    return fn


_renameat2 = _libc_renameat2()


def rename_noreplace(src, dst):
    """Rename ``src`` to ``dst``, failing with OutputExists if ``dst`` exists."""
    src, dst = os.fsencode(src), os.fsencode(dst)
    if _renameat2 is not None:
        if _renameat2(_AT_FDCWD, src, _AT_FDCWD, dst, _RENAME_NOREPLACE) == 0:
            return
        err = ctypes.get_errno()
        if err == errno.EEXIST or err == errno.ENOTEMPTY:
            raise OutputExists(f"{os.fsdecode(dst)} already exists")
        if err not in (errno.EINVAL, errno.ENOSYS):
            raise OSError(err, os.strerror(err), os.fsdecode(src))
    if os.path.lexists(dst):
        raise OutputExists(f"{os.fsdecode(dst)} already exists")
    os.rename(src, dst)


def commit_output(staged, final, all_tasks_succeeded=True):
    """Atomically publish a staged output directory.

    The final directory is either absent or complete; a second commit, or a
    concurrent one that lost the race, raises OutputExists.
    """
    if not all_tasks_succeeded:
        raise JobFailed("refusing to commit output: not every task succeeded")
    staged, final = Path(staged), Path(final)
    if final.exists():
        raise OutputExists(f"{final} already exists")
    if not staged.is_dir():
        raise JobFailed(f"staged output {staged} is missing")
    for leftover in staged.iterdir():
        if leftover.name.startswith("_attempt_"):
            shutil.rmtree(leftover)
    (staged / SUCCESS_MARKER).touch()
    rename_noreplace(staged, final)


# -- application master -----------------------------------------------------


def _expand(template, values):
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", str(value))
    return out


def list_input_files(input_dir):
    d = Path(input_dir)
    if not d.is_dir():
        raise MissingInput(f"input directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith(("_", ".")))


class EventLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.events = []
        self._seq = 0

    def emit(self, event, **fields_):
        self._seq += 1
        rec = {"seq": self._seq, "t": time.time(), "event": event, **fields_}
        self.events.append(rec)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        return rec


@dataclass
class _Task:
    phase: str
    index: int
    attempts: int = 0
    state: str = "pending"
    container: str | None = None


class ApplicationMaster:
    def __init__(self, spec, app_id, rm, event_log=None, rm_retry_budget=30.0):
        self.spec = spec
        self.app_id = app_id
        self.rm = rm
        self.interval = spec.heartbeat_ms / 1000
        self.rm_retry_budget = rm_retry_budget
        staging_root = Path(spec.staging_dir) if spec.staging_dir else Path(spec.output_dir).parent
        self.app_staging = staging_root / app_id
        self.shuffle_dir = self.app_staging / "shuffle"
        out = Path(spec.output_dir)
        self.output_dir = out
        self.staged_output = out.parent / f".{out.name}._temporary_{app_id}"
        self.log = event_log or EventLog(self.app_staging / "events.jsonl")
        self.counters = {
            "map_input_files": 0,
            "map_output_records": 0,
            "reduce_input_records": 0,
            "reduce_output_records": 0,
            "launched_map_attempts": 0,
            "launched_reduce_attempts": 0,
            "failed_attempts": 0,
        }
        self.phase_timings = {}
        self.allocated_containers = []
        self._input_files = []

    # -- RM conversation ---------------------------------------------------

    def _allocate(self, asks=(), launches=(), releases=()):
        msg = {
            "type": "AllocateRequest",
            "app_id": self.app_id,
            "asks": [{"memory_mb": p.memory_mb, "vcores": p.vcores, "count": n} for p, n in asks],
            "launches": list(launches),
            "releases": list(releases),
        }
        deadline = time.monotonic() + self.rm_retry_budget
        while True:
            try:
                return self.rm.request(msg)
            except (OSError, ConnectionError) as exc:
                if time.monotonic() > deadline:
                    raise JobFailed(f"resource manager unreachable: {exc}") from exc
                time.sleep(self.interval)

    # -- task plumbing -----------------------------------------------------

    def _attempt_dir(self, task):
        if task.phase == "map" and self.spec.num_reducers > 0:
            return self.shuffle_dir / f"map_{task.index}.attempt_{task.attempts}"
        return self.staged_output / f"_attempt_{task.phase}_{task.index}_{task.attempts}"

    def _task_inputs(self, task):
        if task.phase == "map":
            return self._input_files[task.index :: self.spec.num_mappers]
        return [self.shuffle_dir / f"map_{i}" / f"part_{task.index}" for i in range(self.spec.num_mappers)]

    def _command(self, task, out_dir):
        spec = self.spec
        template = spec.map_command if task.phase == "map" else spec.reduce_command
        values = {
            "TASK_INDEX": task.index,
            "ATTEMPT": task.attempts,
            "INPUT": " ".join(shlex.quote(str(p)) for p in self._task_inputs(task)),
            "STAGING": shlex.quote(str(self.shuffle_dir)),
            "OUTPUT": shlex.quote(str(out_dir)),
            "NUM_MAPPERS": spec.num_mappers,
            "NUM_REDUCERS": spec.num_reducers,
        }
        return _expand(template, values)

    def _env(self, task):
        env = {"TASK_PHASE": task.phase, "TASK_INDEX": str(task.index), "TASK_ATTEMPT": str(task.attempts)}
        if task.phase == "map":
            env["MAP_JAVA_OPTS"] = self.spec.map_java_opts
        return env

    def _read_counters(self, attempt_dir):
        p = attempt_dir / COUNTERS_FILE
        if not p.exists():
            return {}
        try:
            return json.loads(p.read_text())
        except ValueError:
            return {}

    def _commit_task(self, task, attempt_dir):
        counters = self._read_counters(attempt_dir)
        if task.phase == "map" and self.spec.num_reducers > 0:
            attempt_dir.mkdir(parents=True, exist_ok=True)
            for r in range(self.spec.num_reducers):
                (attempt_dir / f"part_{r}").touch(exist_ok=True)
            final = self.shuffle_dir / f"map_{task.index}"
            if final.exists():
                shutil.rmtree(final)
            os.rename(attempt_dir, final)
            self.counters["map_output_records"] += int(counters.get("output_records", 0))
            return
        if task.phase == "reduce":
            reads = attempt_dir / SHUFFLE_READS_FILE
            files = (
                json.loads(reads.read_text()) if reads.exists()
                else [str(p) for p in self._task_inputs(task)]
            )
            self.log.emit("shuffle_read", reducer=task.index, files=files)
            self.counters["reduce_input_records"] += int(counters.get("input_records", 0))
            self.counters["reduce_output_records"] += int(counters.get("output_records", 0))
        else:
            self.counters["map_output_records"] += int(counters.get("output_records", 0))
        if attempt_dir.exists():
            for item in sorted(attempt_dir.iterdir()):
                if item.name.startswith("_"):
                    continue
                dest = self.staged_output / item.name
                if dest.exists():
                    raise JobFailed(f"{task.phase} task {task.index} produced {item.name}, which already exists")
                os.rename(item, dest)
            shutil.rmtree(attempt_dir)

    def _discard_attempt(self, attempt_dir):
        shutil.rmtree(attempt_dir, ignore_errors=True)

    # -- phases ------------------------------------------------------------

    def request_phase_containers(self, phase, count, profile):
        """Run ``count`` tasks of ``phase``, acquiring containers in waves as
        capacity frees up. Returns the ids of every container allocated."""
        if count == 0:
            return []
        tasks = [_Task(phase, i) for i in range(count)]
        pending = deque(tasks)
        running = {}  # container id -> (task, attempt dir)
        received = set()
        outstanding = 0
        launches, releases = [], []
        used = []
        done = 0
        exhausted = []
        while True:
            ask = len(pending) - outstanding
            asks = [(profile, ask)] if ask > 0 else []
            outstanding += max(ask, 0)
            resp = self._allocate(asks, launches, releases)
            launches, releases = [], []
            for c in resp.get("allocated", []):
                cid = c["container_id"]
                received.add(cid)
                used.append(cid)
                outstanding -= 1
                if not pending:
                    releases.append(cid)
                    continue
                task = pending.popleft()
                task.attempts += 1
                task.state = "running"
                task.container = cid
                out_dir = self._attempt_dir(task)
                shutil.rmtree(out_dir, ignore_errors=True)
                out_dir.mkdir(parents=True)
                command = self._command(task, out_dir)
                running[cid] = (task, out_dir)
                self.counters[f"launched_{phase}_attempts"] += 1
                self.log.emit("launch", phase=phase, task=task.index, attempt=task.attempts,
                              container=cid, node=c.get("node"))
                launches.append({"container_id": cid, "command": command, "env": self._env(task)})
            for st in resp.get("completed", []):
                cid = st["container_id"]
                if cid not in received:
                    outstanding -= 1  # granted then lost before we saw it
                    continue
                if cid not in running:
                    continue
                task, out_dir = running.pop(cid)
                if st["state"] == "completed" and st.get("exit_code") == 0:
                    self._commit_task(task, out_dir)
                    task.state = "succeeded"
                    done += 1
                    self.log.emit("task_succeeded", phase=phase, task=task.index, attempt=task.attempts, container=cid)
                    continue
                self._discard_attempt(out_dir)
                self.counters["failed_attempts"] += 1
                self.log.emit("task_failed", phase=phase, task=task.index, attempt=task.attempts,
                              container=cid, state=st["state"], exit_code=st.get("exit_code"),
                              diagnostics=st.get("diagnostics", ""))
                if task.attempts >= self.spec.max_attempts:
                    task.state = "failed"
                    exhausted.append(
                        f"{phase} task {task.index} failed after {task.attempts} attempts: "
                        f"{st.get('diagnostics') or st['state']}"
                    )
                    continue
                task.state = "pending"
                pending.append(task)
            if done + len(exhausted) == count:
                if launches or releases:
                    self._allocate((), launches, releases)
                self.allocated_containers.extend(used)
                if exhausted:
                    raise JobFailed("; ".join(exhausted))
                return used
            if resp.get("app_state") in ("finished", "failed"):
                raise JobFailed(f"application ended by resource manager ({resp.get('app_state')})")
            if not launches and not releases:
                time.sleep(self.interval)

    def run_job(self):
        spec = self.spec
        self.log.emit("job_start", name=spec.name, mappers=spec.num_mappers, reducers=spec.num_reducers)
        try:
            if self.output_dir.exists():
                raise OutputExists(f"output directory {self.output_dir} already exists")
            if spec.input_dir:
                self._input_files = list_input_files(spec.input_dir)
                self.counters["map_input_files"] = len(self._input_files)
            self.app_staging.mkdir(parents=True, exist_ok=True)
            self.shuffle_dir.mkdir(parents=True, exist_ok=True)
            self.staged_output.mkdir(parents=True, exist_ok=True)

            t0 = time.monotonic()
            self.request_phase_containers("map", spec.num_mappers, spec.map_resource)
            self.phase_timings["map_ms"] = int((time.monotonic() - t0) * 1000)
            self.log.emit("phase_done", phase="map")

            if spec.num_reducers > 0:
                t0 = time.monotonic()
                self.request_phase_containers("reduce", spec.num_reducers, spec.reduce_resource)
                self.phase_timings["reduce_ms"] = int((time.monotonic() - t0) * 1000)
                self.log.emit("phase_done", phase="reduce")

            t0 = time.monotonic()
            commit_output(self.staged_output, self.output_dir)
            self.phase_timings["commit_ms"] = int((time.monotonic() - t0) * 1000)
            shutil.rmtree(self.shuffle_dir, ignore_errors=True)
            result = JobResult(True, dict(self.phase_timings), dict(self.counters))
        except EphemyarnError as exc:
            shutil.rmtree(self.staged_output, ignore_errors=True)
            result = JobResult(False, dict(self.phase_timings), dict(self.counters), f"{exc.code}: {exc}")
        self.log.emit("job_end", succeeded=result.succeeded, diagnostics=result.diagnostics)
        self._finish(result)
        return result

    def _finish(self, result):
        msg = {
            "type": "FinishApplication",
            "app_id": self.app_id,
            "succeeded": result.succeeded,
            "diagnostics": result.diagnostics,
            "counters": result.counters,
            "phase_timings": result.phase_timings,
        }
        try:
            self.rm.request(msg)
        except (OSError, ConnectionError, EphemyarnError) as exc:
            log.error("could not report completion: %s", exc)


def main(argv=None):
    p = argparse.ArgumentParser(prog="ephemyarn-am", description="MapReduce application master")
    p.add_argument("--job", required=True, help="jobspec file")
    p.add_argument("--rm", default=os.environ.get("EPHEMYARN_RM"))
    p.add_argument("--app-id", default=os.environ.get("APP_ID"))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s am %(levelname)s %(message)s")
    if not args.rm or not args.app_id:
        p.error("resource manager address and application id are required (EPHEMYARN_RM / APP_ID)")
    spec = JobSpec.loads(Path(args.job).read_text())
    with Client(args.rm) as rm:
        result = ApplicationMaster(spec, args.app_id, rm).run_job()
    log.info("job %s: %s %s", spec.name, "succeeded" if result.succeeded else "failed", result.diagnostics)
    return 0 if result.succeeded else 1


if __name__ == "__main__":
    sys.exit(main())
