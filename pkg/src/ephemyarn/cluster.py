"""Ephemeral cluster lifecycle: provision, run, teardown.

Everything teardown needs is written to a cluster-state file on shared
storage (``<shared_root>/<job_id>/staging/cluster.json``), so any process on
any allocated host can tear the cluster down without in-memory state.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import psutil

from .allocation import ClusterLayout, DirectoryPlan, NodeAllocation, assign_roles, default_job_id, plan_directories
from .app_master import JobSpec
from .config import Config, load_config
from .errors import ClusterUnavailable, EphemyarnError, OutputExists, ProvisionError
from .protocol import reachable, request

log = logging.getLogger(__name__)

STATE_NAME = "cluster.json"
CURRENT_POINTER = "CURRENT"
CLUSTER_ENV = "EPHEMYARN_CLUSTER"
KEEP_IN_STAGING = {"history", STATE_NAME}
DAEMON_LOG_DIRS = ("rm_log", "am_log", "nm_log", "namenode_log")

# Popen objects of daemons started by this process, so they get reaped
_children = {}


def local_allocation(n, slots=2):
    """``n`` simulated hosts on this machine, ``slots`` cores each."""
    return NodeAllocation(tuple((f"local{i}", slots) for i in range(n)))


@dataclass
class ClusterHandle:
    path: Path
    state: dict

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ClusterUnavailable(f"no cluster state file at {path}")
        return cls(path, json.loads(path.read_text()))

    def reload(self):
        self.state = json.loads(self.path.read_text())
        return self

    def save(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.state, indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    @property
    def job_id(self):
        return self.state["job_id"]

    @property
    def status(self):
        return self.state["status"]

    @property
    def layout(self):
        return ClusterLayout.from_dict(self.state["layout"])

    @property
    def plan(self):
        return DirectoryPlan.from_dict(self.state["plan"])

    @property
    def cfg(self):
        return Config.from_mapping(self.state["config"])

    @property
    def rm_addr(self):
        return self.state.get("rm_addr")

    @property
    def history_addr(self):
        return self.state.get("history_addr")

    @property
    def history_file(self):
        return Path(self.state["history_file"])


def state_path(cfg, job_id=None):
    """State file of ``job_id``, or of the most recently provisioned cluster."""
    root = Path(cfg.shared_root)
    if job_id is None:
        pointer = root / CURRENT_POINTER
        if not pointer.exists():
            raise ClusterUnavailable(f"no cluster recorded under {root}")
        job_id = pointer.read_text().strip()
    return root / job_id / "staging" / STATE_NAME


# -- launching ---------------------------------------------------------------


def _daemon_argv(python, role, args):
    return [python, "-m", "ephemyarn._daemon", role, *map(str, args)]


def _remote_command(template, host, command):
    return template.replace("{host}", shlex.quote(host)).replace("{command}", shlex.quote(command))


def _start(handle, host, role, args, log_path):
    st = handle.state
    argv = _daemon_argv(st["python"], role, args)
    entry = {"role": role, "host": host, "log": str(log_path)}
    if st["mode"] == "local":
        env = dict(os.environ, **{CLUSTER_ENV: handle.job_id})
        with open(log_path, "ab") as out:
            proc = subprocess.Popen(
                argv, stdin=subprocess.DEVNULL, stdout=out, stderr=subprocess.STDOUT,
                env=env, cwd="/", start_new_session=True,
            )
        entry["pid"] = proc.pid
    else:
        inner = (
            f"cd / && exec env {CLUSTER_ENV}={shlex.quote(handle.job_id)} {shlex.join(argv)} "
            f">> {shlex.quote(str(log_path))} 2>&1 < /dev/null"
        )
        proc = subprocess.Popen(
            _remote_command(st["remote_exec"], host, inner), shell=True,
            stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
            start_new_session=True,
        )
        entry["launcher_pid"] = proc.pid
    _children.setdefault(handle.job_id, []).append(proc)
    st["daemons"].append(entry)
    return proc


def _log_tail(path, n=20):
    try:
        return "\n".join(Path(path).read_text(errors="replace").splitlines()[-n:])
    except OSError:
        return ""


def _wait_addr(addr_file, proc, deadline, what, log_path):
    while time.monotonic() < deadline:
        if addr_file.exists():
            addr = addr_file.read_text().strip()
            if addr:
                return addr
        if proc.poll() is not None:
            raise ProvisionError(f"{what} exited with code {proc.returncode}:\n{_log_tail(log_path)}")
        time.sleep(0.02)
    raise ProvisionError(f"{what} did not come up in time")


def provision(alloc, cfg, job_id=None, local=False):
    """Start resource manager, history service and node agents for ``alloc``.

    On any failure whatever was started is torn down again and
    ProvisionError is raised.
    """
    t0 = time.perf_counter()
    layout = assign_roles(alloc, cfg)
    job_id = job_id or default_job_id()
    plan = plan_directories(layout, cfg, job_id)
    if plan.shared_job_dir.exists():
        raise ProvisionError(f"cluster {job_id} already exists under {plan.shared_root}")
    plan.create()
    staging = plan.staging
    (staging / "daemons").mkdir()
    handle = ClusterHandle(
        staging / STATE_NAME,
        {
            "version": 1,
            "job_id": job_id,
            "mode": "local" if local else "remote",
            "status": "provisioning",
            "created": time.time(),
            "allocation": [list(h) for h in alloc.hosts],
            "total_cores": alloc.total_cores,
            "layout": layout.to_dict(),
            "plan": plan.to_dict(),
            "config": cfg.to_mapping(),
            "remote_exec": cfg.remote_exec,
            "python": sys.executable,
            "history_file": str(staging / "history" / "history.jsonl"),
            "daemons": [],
        },
    )
    config_file = staging / "cluster.conf"
    config_file.write_text(cfg.dumps())
    handle.save()
    (plan.shared_root / CURRENT_POINTER).write_text(job_id + "\n")

    deadline = time.monotonic() + cfg.ready_timeout_ms / 1000
    try:
        rm_log = plan.rm_log / "resourcemanager.log"
        rm_addr_file = staging / "daemons" / "rm.addr"
        proc = _start(
            handle, layout.rm_host, "rm",
            ["--config", config_file, "--workers", ",".join(layout.worker_hosts),
             "--history", handle.history_file,
             "--advertise", "127.0.0.1" if local else layout.rm_host,
             "--port", 0 if local else layout.rm_port,
             "--addr-file", rm_addr_file, "--log", rm_log],
            rm_log,
        )
        handle.state["rm_addr"] = _wait_addr(rm_addr_file, proc, deadline, "resource manager", rm_log)
        handle.save()

        hist_log = plan.rm_log / "historyserver.log"
        hist_addr_file = staging / "daemons" / "history.addr"
        proc = _start(
            handle, layout.history_host, "history",
            ["--history", handle.history_file,
             "--advertise", "127.0.0.1" if local else layout.history_host,
             "--port", 0 if local else layout.history_port,
             "--addr-file", hist_addr_file, "--log", hist_log],
            hist_log,
        )
        handle.state["history_addr"] = _wait_addr(hist_addr_file, proc, deadline, "history server", hist_log)
        handle.save()

        agents = {}
        for host in layout.worker_hosts:
            agent_log = plan.nm_log / f"{host}.log"
            agents[host] = (
                _start(
                    handle, host, "agent",
                    ["--rm", handle.rm_addr, "--host", host,
                     "--capacity-mb", cfg.node_memory_mb, "--vcores", cfg.node_vcores,
                     "--local-root", plan.local_root, "--job-id", job_id,
                     "--shared-staging", staging,
                     "--heartbeat-ms", cfg.heartbeat_interval_ms,
                     "--rm-timeout-ms", 2 * cfg.node_timeout_ms,
                     "--kill-grace-ms", cfg.kill_grace_ms,
                     "--log", agent_log],
                    agent_log,
                ),
                agent_log,
            )
        handle.save()
        _wait_registered(handle, agents, deadline)
    except BaseException as exc:
        log.error("provisioning failed, rolling back: %s", exc)
        teardown(handle)
        if isinstance(exc, EphemyarnError) and not isinstance(exc, ProvisionError):
            raise ProvisionError(f"{exc.code}: {exc}") from exc
        raise
    handle.state["status"] = "ready"
    handle.state["provision_ms"] = int((time.perf_counter() - t0) * 1000)
    handle.save()
    return handle


def _wait_registered(handle, agents, deadline):
    want = set(agents)
    while True:
        try:
            status = request(handle.rm_addr, {"type": "ClusterStatus"}, timeout=2.0)
            alive = {n["host"] for n in status["nodes"] if n["status"] == "alive"}
            if want <= alive:
                return
        except (OSError, ConnectionError) as exc:
            raise ProvisionError(f"resource manager stopped answering: {exc}") from exc
        if handle.state["mode"] == "local":
            for host, (proc, agent_log) in agents.items():
                if proc.poll() is not None:
                    raise ProvisionError(
                        f"node agent on {host} exited with code {proc.returncode}:\n{_log_tail(agent_log)}"
                    )
        if time.monotonic() > deadline:
            raise ProvisionError(f"agents not registered in time: missing {sorted(want - alive)}")
        time.sleep(0.02)


# -- running jobs --------------------------------------------------------------


@dataclass
class RunResult:
    app_id: str
    succeeded: bool
    status: dict
    logs_dir: Path | None = None

    @property
    def exit_code(self):
        return 0 if self.succeeded else 1


def _require_ready(handle):
    handle.reload()
    if handle.status != "ready":
        raise ClusterUnavailable(f"cluster {handle.job_id} is {handle.status}")
    if not handle.rm_addr or not reachable(handle.rm_addr):
        raise ClusterUnavailable(f"resource manager of {handle.job_id} is not reachable")


def submit(handle, spec):
    """Submit a job without waiting; returns the application id."""
    _require_ready(handle)
    if Path(spec.output_dir).exists():
        raise OutputExists(f"output directory {spec.output_dir} already exists")
    plan = handle.plan
    if not spec.staging_dir:
        spec.staging_dir = str(plan.staging)
    jobs = plan.staging / "jobs"
    jobs.mkdir(exist_ok=True)
    fd, path = tempfile.mkstemp(prefix=f"{spec.name}-", suffix=".jobspec", dir=jobs)
    with os.fdopen(fd, "w") as fh:
        fh.write(spec.dumps())
    am_command = shlex.join(_daemon_argv(handle.state["python"], "am", ["--job", path]))
    reply = request(handle.rm_addr, {"type": "SubmitApplication", "name": spec.name, "am_command": am_command})
    return reply["app_id"]


def wait_for(handle, app_id, timeout=None, poll=None):
    poll = poll or handle.cfg.heartbeat_interval_ms / 1000
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        try:
            st = request(handle.rm_addr, {"type": "ApplicationStatus", "app_id": app_id})
        except (OSError, ConnectionError) as exc:
            raise ClusterUnavailable(f"lost contact with resource manager: {exc}") from exc
        if st["state"] in ("finished", "failed") and st.get("recorded"):
            return st
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError(f"{app_id} still {st['state']} after {timeout}s")
        time.sleep(poll)


def collect_app_logs(handle, app_id):
    plan = handle.plan
    dest = plan.output / "logs" / app_id
    dest.mkdir(parents=True, exist_ok=True)
    src = plan.staging / "logs" / app_id
    if src.exists():
        shutil.copytree(src, dest / "containers", dirs_exist_ok=True)
    events = plan.staging / app_id / "events.jsonl"
    if events.exists():
        shutil.copyfile(events, dest / "events.jsonl")
    return dest


def run(handle, spec, timeout=None):
    """Submit ``spec``, block until it is terminal, and collect its logs."""
    app_id = submit(handle, spec)
    status = wait_for(handle, app_id, timeout=timeout)
    logs = collect_app_logs(handle, app_id)
    return RunResult(app_id, status["state"] == "finished", status, logs)


def job_for(handle, **kwargs):
    return JobSpec.for_config(handle.cfg, **kwargs)


# -- teardown ----------------------------------------------------------------


def _cluster_processes(cluster_id, exclude=()):
    found = []
    for p in psutil.process_iter(["pid"]):
        if p.pid in exclude:
            continue
        try:
            if p.environ().get(CLUSTER_ENV) == cluster_id:
                found.append(p)
        except (psutil.Error, OSError):
            continue
    return found


def cluster_processes(cluster_id):
    """Live processes (daemons and containers) belonging to a cluster."""
    return [p for p in _cluster_processes(cluster_id, exclude={os.getpid()}) if _alive(p)]


def _alive(p):
    try:
        return p.is_running() and p.status() != psutil.STATUS_ZOMBIE
    except psutil.Error:
        return False


def sweep(cluster_id, local_job_dir, collect_to=None, grace=5.0):
    """Kill this host's leftover cluster processes, save daemon logs to shared
    storage and delete the host's local job directory."""
    procs = cluster_processes(cluster_id)
    for p in procs:
        try:
            p.send_signal(signal.SIGTERM)
        except psutil.Error:
            pass
    _, alive = psutil.wait_procs(procs, timeout=grace)
    for p in alive:
        try:
            p.kill()
        except psutil.Error:
            pass
    psutil.wait_procs(alive, timeout=2.0)
    survivors = [f"{p.pid}" for p in cluster_processes(cluster_id)]
    local_job_dir = Path(local_job_dir)
    if collect_to is not None and local_job_dir.exists():
        dest = Path(collect_to) / os.uname().nodename
        for name in DAEMON_LOG_DIRS:
            src = local_job_dir / name
            try:
                if src.exists() and any(src.iterdir()):
                    shutil.copytree(src, dest / name, dirs_exist_ok=True)
            except FileNotFoundError:
                pass  # another sweep sharing this directory got there first
            except (OSError, shutil.Error) as exc:
                log.warning("collecting %s: %s", src, exc)
    unremovable = []

    def _onerror(func, path, exc_info):
        if not isinstance(exc_info[1], FileNotFoundError):
            unremovable.append(f"{path}: {exc_info[1]}")

    if local_job_dir.exists():
        shutil.rmtree(local_job_dir, onerror=_onerror)
    return {"killed": len(procs), "survivors": survivors, "unremovable": unremovable}


def sweep_main(argv=None):
    import argparse

    p = argparse.ArgumentParser(prog="ephemyarn-sweep")
    p.add_argument("--cluster-id", required=True)
    p.add_argument("--local-job-dir", required=True)
    p.add_argument("--collect-to")
    p.add_argument("--grace", type=float, default=5.0)
    args = p.parse_args(argv)
    report = sweep(args.cluster_id, args.local_job_dir, args.collect_to, args.grace)
    print(json.dumps(report))
    return 0 if not report["survivors"] and not report["unremovable"] else 1


@dataclass
class TeardownReport:
    ok: bool
    noop: bool = False
    teardown_ms: int = 0
    survivors: list = field(default_factory=list)
    unreachable: list = field(default_factory=list)
    problems: list = field(default_factory=list)

    @property
    def exit_code(self):
        return 0 if self.ok else 1


def _stop_daemon(addr, timeout):
    if not addr or not reachable(addr):
        return True
    try:
        request(addr, {"type": "Shutdown"}, timeout=2.0)
    except (OSError, ConnectionError, EphemyarnError):
        pass
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if not reachable(addr, timeout=0.5):
            return True
        time.sleep(0.05)
    return False


def _remote_sweep(handle, host, collect_to):
    st = handle.state
    plan = handle.plan
    argv = _daemon_argv(
        st["python"], "sweep",
        ["--cluster-id", handle.job_id, "--local-job-dir", plan.local_job_dir,
         "--collect-to", collect_to, "--grace", handle.cfg.kill_grace_ms / 1000],
    )
    cmd = _remote_command(st["remote_exec"], host, shlex.join(argv))
    try:
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=60)
    except subprocess.TimeoutExpired:
        return host, None
    if proc.returncode not in (0, 1):
        return host, None
    try:
        return host, json.loads(proc.stdout.strip().splitlines()[-1])
    except (ValueError, IndexError):
        # reached the host, but the sweep itself crashed
        tail = (proc.stderr or "").strip().splitlines()[-1:] or ["no output"]
        return host, {"survivors": [], "unremovable": [f"sweep failed: {tail[0]}"]}


def teardown(handle):
    """Stop all daemons, remove local directories, prune shared staging.

    Idempotent: tearing down a torn-down cluster is a successful no-op.
    """
    if not isinstance(handle, ClusterHandle):
        handle = ClusterHandle.load(handle)
    else:
        handle.reload()
    if handle.status == "torn_down":
        return TeardownReport(ok=True, noop=True)
    t0 = time.perf_counter()
    handle.state["status"] = "tearing_down"
    handle.save()
    cfg = handle.cfg
    plan = handle.plan
    report = TeardownReport(ok=True)

    wait = 2 * cfg.node_timeout_ms / 1000 + cfg.kill_grace_ms / 1000 + 5
    if not _stop_daemon(handle.rm_addr, wait):
        report.problems.append("resource manager did not stop on request")
    if not _stop_daemon(handle.history_addr, 5.0):
        report.problems.append("history server did not stop on request")

    collect_to = plan.output / "logs" / "daemons"
    if handle.state["mode"] == "local":
        res = sweep(handle.job_id, plan.local_job_dir, collect_to, grace=cfg.kill_grace_ms / 1000)
        report.survivors += res["survivors"]
        report.problems += res["unremovable"]
    else:
        hosts = handle.layout.all_hosts
        with ThreadPoolExecutor(max_workers=min(32, len(hosts))) as pool:
            for host, res in pool.map(lambda h: _remote_sweep(handle, h, collect_to), hosts):
                if res is None:
                    report.unreachable.append(host)
                    continue
                report.survivors += [f"{host}:{pid}" for pid in res["survivors"]]
                report.problems += [f"{host}:{u}" for u in res["unremovable"]]
    for proc in _children.pop(handle.job_id, []):
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    container_logs = plan.staging / "logs"
    if container_logs.exists():
        for app_dir in container_logs.iterdir():
            dest = plan.output / "logs" / app_dir.name / "containers"
            if not dest.exists():
                shutil.copytree(app_dir, dest)
    for child in plan.staging.iterdir():
        if child.name in KEEP_IN_STAGING:
            continue
        if child.is_dir() and not child.is_symlink():
            shutil.rmtree(child, ignore_errors=True)
        else:
            child.unlink(missing_ok=True)

    report.ok = not (report.survivors or report.unreachable or report.problems)
    report.teardown_ms = int((time.perf_counter() - t0) * 1000)
    handle.state.update(
        status="torn_down",
        teardown_ms=report.teardown_ms,
        teardown_ok=report.ok,
        teardown_survivors=report.survivors,
        teardown_unreachable=report.unreachable,
        teardown_problems=report.problems,
    )
    handle.save()
    return report


def load_handle(cfg=None, state=None, job_id=None):
    if state is not None:
        return ClusterHandle.load(state)
    return ClusterHandle.load(state_path(cfg or load_config(), job_id))
