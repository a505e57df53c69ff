"""Per-worker node agent.

Launches container command lines as child processes (each in its own process
group), polls them for exit and resident memory, and reports state changes to
the resource manager through heartbeats.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import psutil

from .config import ResourceProfile
from .errors import EphemyarnError, ReRegisterRequired
from .negotiator.scheduler import Container, ContainerState
from .protocol import Client

log = logging.getLogger(__name__)

MEMORY_EXCEEDED = "memory limit exceeded"
LAUNCH_FAILED_EXIT = 127


@dataclass
class ContainerRuntime:
    container: Container
    workdir: Path
    stdout_path: Path
    stderr_path: Path
    process: subprocess.Popen | None = None
    peak_rss_mb: int = 0
    kill_reason: str | None = None
    kill_deadline: float | None = None
    reported: set = field(default_factory=set)

    @property
    def process_id(self):
        return self.process.pid if self.process is not None else None

    @property
    def state(self):
        return self.container.state


def _tree_rss_mb(pid):
    try:
        root = psutil.Process(pid)
        procs = [root] + root.children(recursive=True)
    except psutil.Error:
        return 0
    total = 0
    for p in procs:
        try:
            total += p.memory_info().rss
        except psutil.Error:
            pass
    return total // (1024 * 1024)


def _killpg(pid, sig):
    try:
        os.killpg(pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def _launch_problem(command):
    try:
        argv = shlex.split(command)
    except ValueError as exc:
        return f"cannot parse command line: {exc}"
    if not argv:
        return "empty command line"
    exe = argv[0]
    if "/" in exe and not (os.path.isfile(exe) and os.access(exe, os.X_OK)):
        return f"{exe}: not an executable file"
    return None


class NodeAgent:
    def __init__(self, host, container_root, capacity=None, shared_staging=None, rm_addr=None,
                 kill_grace=5.0, extra_env=None):
        self.host = host
        self.container_root = Path(container_root)
        self.capacity = capacity or ResourceProfile(52 * 1024, 16)
        self.shared_staging = Path(shared_staging) if shared_staging else None
        self.rm_addr = rm_addr
        self.kill_grace = kill_grace
        self.extra_env = dict(extra_env or {})
        self.runtimes = {}
        self.outbox = []

    # -- containers ------------------------------------------------------

    def launch_container(self, spec):
        c = spec if isinstance(spec, Container) else Container.from_dict(spec)
        if c.state is ContainerState.ALLOCATED:
            c.transition(ContainerState.LAUNCHING)
        workdir = self.container_root / c.id
        workdir.mkdir(parents=True, exist_ok=True)
        rt = ContainerRuntime(c, workdir, workdir / "stdout", workdir / "stderr")
        self.runtimes[c.id] = rt
        rt.stdout_path.touch()
        rt.stderr_path.touch()
        env = dict(os.environ)
        env.update(self.extra_env)
        env.update(c.env)
        env.update(
            CONTAINER_ID=c.id,
            APP_ID=c.app_id,
            LOCAL_DIR=str(workdir),
            SHARED_STAGING=str(self.shared_staging or ""),
        )
        if self.rm_addr:
            env["EPHEMYARN_RM"] = self.rm_addr
        problem = _launch_problem(c.command)
        if problem is None:
            try:
                with open(rt.stdout_path, "wb") as out, open(rt.stderr_path, "wb") as err:
                    rt.process = subprocess.Popen(
                        ["/bin/sh", "-c", c.command],
                        cwd=workdir, env=env, stdin=subprocess.DEVNULL,
                        stdout=out, stderr=err, start_new_session=True,
                    )
            except OSError as exc:
                problem = f"launch failed: {exc}"
        if problem is not None:
            log.warning("container %s failed to launch: %s", c.id, problem)
            rt.stderr_path.write_text(problem + "\n")
            c.transition(ContainerState.FAILED, exit_code=LAUNCH_FAILED_EXIT, diagnostics=problem)
            self._finish(rt)
            return rt
        c.transition(ContainerState.RUNNING)
        log.info("launched %s (pid %d): %s", c.id, rt.process.pid, c.command)
        return rt

    def kill_container(self, container_id, reason="killed by resource manager"):
        rt = self.runtimes.get(container_id)
        if rt is None or rt.state.terminal or rt.kill_reason is not None:
            return
        rt.kill_reason = reason
        rt.kill_deadline = time.monotonic() + self.kill_grace
        _killpg(rt.process.pid, signal.SIGTERM)

    def _status(self, rt):
        c = rt.container
        return {
            "type": "ContainerStatus",
            "container_id": c.id,
            "state": c.state.value,
            "exit_code": c.exit_code,
            "diagnostics": c.diagnostics,
            "peak_rss_mb": rt.peak_rss_mb,
        }

    def _finish(self, rt):
        if rt.process is not None:
            # sweep anything the container left running in its group
            _killpg(rt.process.pid, signal.SIGKILL)
        self._collect_logs(rt)

    def _collect_logs(self, rt):
        if self.shared_staging is None:
            return
        dest = self.shared_staging / "logs" / rt.container.app_id / rt.container.id
        try:
            dest.mkdir(parents=True, exist_ok=True)
            for src in (rt.stdout_path, rt.stderr_path):
                if src.exists():
                    shutil.copyfile(src, dest / src.name)
        except OSError as exc:
            log.warning("could not copy logs of %s: %s", rt.container.id, exc)

    def _reap(self, rt, now):
        c = rt.container
        code = rt.process.poll()
        if code is None:
            rss = _tree_rss_mb(rt.process.pid)
            rt.peak_rss_mb = max(rt.peak_rss_mb, rss)
            if rt.kill_reason is None and rss > c.resource.memory_mb:
                log.warning("%s uses %d MB > limit %d MB, killing", c.id, rss, c.resource.memory_mb)
                self.kill_container(c.id, f"{MEMORY_EXCEEDED}: {rss} MB > {c.resource.memory_mb} MB")
            elif rt.kill_deadline is not None and now > rt.kill_deadline:
                _killpg(rt.process.pid, signal.SIGKILL)
            return
        if rt.kill_reason is not None:
            c.transition(ContainerState.KILLED, exit_code=code, diagnostics=rt.kill_reason)
        elif code == 0:
            c.transition(ContainerState.COMPLETED, exit_code=0)
        else:
            diag = f"exit code {code}"
            try:
                tail = rt.stderr_path.read_bytes()[-2000:].decode("utf-8", "replace").strip()
            except OSError:
                tail = ""
            if tail:
                diag += f": {tail.splitlines()[-1]}"
            c.transition(ContainerState.FAILED, exit_code=code, diagnostics=diag)
        self._finish(rt)

    def monitor_tick(self):
        """Reap exited children, enforce memory limits, and return the status
        changes not reported before (running once, terminal once)."""
        now = time.monotonic()
        new = []
        for rt in self.runtimes.values():
            if rt.process is not None and not rt.state.terminal:
                self._reap(rt, now)
            if rt.process is not None and "running" not in rt.reported:
                rt.reported.add("running")
                status = self._status(rt)
                status.update(state="running", exit_code=None, diagnostics="")
                new.append(status)
            if rt.state.terminal and "terminal" not in rt.reported:
                rt.reported.add("terminal")
                new.append(self._status(rt))
        self.outbox.extend(new)
        return new

    def running(self):
        return [rt for rt in self.runtimes.values() if not rt.state.terminal]

    def drain_and_stop(self):
        """Kill every running container, flush statuses and remove workdirs."""
        live = self.running()
        for rt in live:
            self.kill_container(rt.container.id, "node agent shutting down")
        deadline = time.monotonic() + self.kill_grace
        while self.running() and time.monotonic() < deadline:
            self.monitor_tick()
            time.sleep(0.02)
        for rt in self.running():
            _killpg(rt.process.pid, signal.SIGKILL)
            rt.process.wait()
        self.monitor_tick()
        unremovable = []
        for rt in self.runtimes.values():
            try:
                if rt.workdir.exists():
                    shutil.rmtree(rt.workdir)
            except OSError as exc:
                unremovable.append(f"{rt.workdir}: {exc}")
        try:
            if self.container_root.exists() and not any(self.container_root.iterdir()):
                self.container_root.rmdir()
        except OSError as exc:
            unremovable.append(f"{self.container_root}: {exc}")
        return {
            "killed": [rt.container.id for rt in live],
            "statuses": list(self.outbox),
            "unremovable": unremovable,
            "exit_code": 1 if unremovable else 0,
        }

    # -- resource manager loop -------------------------------------------

    def _kill_all_now(self, reason):
        for rt in self.running():
            self.kill_container(rt.container.id, reason)

    def run(self, heartbeat_interval=0.25, rm_timeout=10.0, register_timeout=30.0):
        """Register, then heartbeat until told to shut down. Returns exit code."""
        client = Client(self.rm_addr, timeout=max(2.0, heartbeat_interval * 4))
        self._register(client, register_timeout)
        last_ok = time.monotonic()
        while True:
            self.monitor_tick()
            try:
                reply = client.request(
                    {"type": "Heartbeat", "host": self.host, "statuses": list(self.outbox)}
                )
            except ReRegisterRequired:
                log.warning("resource manager forgot us; killing containers and re-registering")
                self._kill_all_now("node re-registration")
                self.outbox.clear()
                self._register(client, register_timeout)
                last_ok = time.monotonic()
                continue
            except (OSError, ConnectionError, EphemyarnError) as exc:
                if time.monotonic() - last_ok > rm_timeout:
                    log.error("resource manager unreachable for %.1fs (%s); stopping", rm_timeout, exc)
                    summary = self.drain_and_stop()
                    return max(1, summary["exit_code"])
                time.sleep(heartbeat_interval)
                continue
            last_ok = time.monotonic()
            self.outbox.clear()
            for d in reply.get("directives", []):
                op = d.get("op")
                if op == "launch":
                    self.launch_container(d["container"])
                elif op == "kill":
                    self.kill_container(d["container_id"])
                elif op == "shutdown":
                    summary = self.drain_and_stop()
                    try:
                        client.request(
                            {"type": "Heartbeat", "host": self.host, "statuses": summary["statuses"], "final": True}
                        )
                    except (OSError, ConnectionError, EphemyarnError) as exc:
                        log.warning("final heartbeat failed: %s", exc)
                    client.close()
                    for item in summary["unremovable"]:
                        log.error("could not remove %s", item)
                    return summary["exit_code"]
            time.sleep(heartbeat_interval)

    def _register(self, client, timeout):
        deadline = time.monotonic() + timeout
        while True:
            try:
                client.request({"type": "RegisterNode", "host": self.host, "capacity": self.capacity.to_dict()})
                log.info("registered with resource manager at %s", self.rm_addr)
                return
            except (OSError, ConnectionError) as exc:
                if time.monotonic() > deadline:
                    raise EphemyarnError(f"cannot reach resource manager at {self.rm_addr}: {exc}") from exc
                time.sleep(0.1)


def _exit_on_signal(signum, frame):
    raise SystemExit(128 + signum)


def main(argv=None):
    p = argparse.ArgumentParser(prog="ephemyarn-agent", description="Node agent daemon")
    p.add_argument("--rm", required=True, help="resource manager host:port")
    p.add_argument("--host", required=True, help="this worker's hostname in the cluster layout")
    p.add_argument("--capacity-mb", type=int, required=True)
    p.add_argument("--vcores", type=int, required=True)
    p.add_argument("--local-root", required=True)
    p.add_argument("--job-id", default="standalone")
    p.add_argument("--shared-staging")
    p.add_argument("--heartbeat-ms", type=int, default=250)
    p.add_argument("--rm-timeout-ms", type=int, default=10000)
    p.add_argument("--kill-grace-ms", type=int, default=5000)
    p.add_argument("--log")
    args = p.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, filename=args.log,
        format=f"%(asctime)s agent[{args.host}] %(levelname)s %(message)s",
    )
    agent = NodeAgent(
        host=args.host,
        container_root=Path(args.local_root) / args.job_id / "containers" / args.host,
        capacity=ResourceProfile(args.capacity_mb, args.vcores),
        shared_staging=args.shared_staging,
        rm_addr=args.rm,
        kill_grace=args.kill_grace_ms / 1000,
    )
    signal.signal(signal.SIGTERM, _exit_on_signal)
    try:
        return agent.run(args.heartbeat_ms / 1000, rm_timeout=args.rm_timeout_ms / 1000)
    except SystemExit:
        agent.drain_and_stop()
        raise
    except Exception:
        log.exception("agent crashed")
        agent.drain_and_stop()
        return 2


if __name__ == "__main__":
    sys.exit(main())
