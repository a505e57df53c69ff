"""Resource manager state machine.

All mutation goes through :class:`ResourceManager` methods. Time is passed in
explicitly so the same code runs under the TCP daemon (wall clock) and in
deterministic replays.
"""

from __future__ import annotations

import logging
import time
from collections import deque

from ..config import ResourceProfile
from ..errors import AlreadyRegistered, NoWorkers, NotFound, ReRegisterRequired, UnknownNode
from .history import ApplicationRecord
from .scheduler import Container, ContainerState, NodeState, PendingRequest, normalize_request, schedule

log = logging.getLogger(__name__)

NODE_LOST_EXIT = -100
KILLED_EXIT = -105


class ResourceManager:
    def __init__(self, cfg, worker_hosts, history=None, cluster_ts=None):
        self.cfg = cfg
        self.worker_hosts = list(worker_hosts)
        self.history = history
        self.cluster_ts = cluster_ts or int(time.time() * 1000)
        self.nodes = {}  # registration order
        self.queue = deque()
        self.containers = {}
        self.apps = {}
        self.events = []
        self.shutting_down = False
        self.final_heartbeats = set()
        self._app_seq = 0
        self._container_seq = {}
        self._directives = {}  # host -> [directive]
        self._undelivered = {}  # app_id -> [container ids allocated, not yet handed to AM]
        self._completed = {}  # app_id -> [status dicts not yet handed to AM]
        self._recorded = set()
        self._am_launch = {}  # app_id -> (command, env)

    # -- nodes -----------------------------------------------------------

    def register_node(self, host, capacity, now):
        if host not in self.worker_hosts:
            raise UnknownNode(f"{host} is not a worker host of this cluster")
        node = self.nodes.get(host)
        if node is not None and node.status == "alive":
            raise AlreadyRegistered(f"{host} is already registered")
        self.nodes[host] = NodeState(host=host, capacity=capacity, last_heartbeat=now)
        self._directives[host] = []
        self.events.append(("register", host, capacity.memory_mb, capacity.vcores))
        log.info("registered node %s with %s", host, capacity)
        self._schedule()

    def heartbeat(self, host, statuses, now, final=False):
        node = self.nodes.get(host)
        if node is None or node.status != "alive":
            raise ReRegisterRequired(f"{host} must register before heartbeating")
        node.last_heartbeat = now
        for st in statuses:
            self._apply_status(host, st)
        if final:
            self.final_heartbeats.add(host)
        self._schedule()
        directives, self._directives[host] = self._directives[host], []
        if self.shutting_down:
            directives.append({"op": "shutdown"})
        return directives

    def expire_nodes(self, now):
        lost = []
        for node in self.nodes.values():
            if node.status == "alive" and (now - node.last_heartbeat) * 1000 > self.cfg.node_timeout_ms:
                lost.append(node.host)
                self._lose_node(node)
        if lost:
            self._schedule()
        return lost

    def _lose_node(self, node):
        log.warning("node %s lost (no heartbeat)", node.host)
        node.status = "lost"
        self.events.append(("lost", node.host))
        for cid in sorted(node.live_containers):
            c = self.containers[cid]
            # an AM failing here can already have killed its siblings
            if not c.state.terminal:
                self._terminate(c, ContainerState.FAILED, NODE_LOST_EXIT, f"node {node.host} lost")
        self._directives[node.host] = []

    def alive_nodes(self):
        return [n for n in self.nodes.values() if n.status == "alive"]

    # -- applications ----------------------------------------------------

    def submit_application(self, name, am_command, now, env=None):
        if not self.alive_nodes():
            raise NoWorkers("no alive workers to host the application master")
        self._app_seq += 1
        app_id = f"application_{self.cluster_ts}_{self._app_seq:04d}"
        self.apps[app_id] = ApplicationRecord(app_id=app_id, name=name, submit_time=now)
        self._container_seq[app_id] = 0
        self._undelivered[app_id] = []
        self._completed[app_id] = []
        self._am_launch[app_id] = (am_command, dict(env or {}))
        profile = normalize_request(ResourceProfile(self.cfg.am_resource_mb, 1), self.cfg)
        self.queue.append(PendingRequest(app_id, profile, 1, is_am=True))
        self._schedule()
        return app_id

    def get_app(self, app_id):
        try:
            return self.apps[app_id]
        except KeyError:
            raise NotFound(f"unknown application {app_id}") from None

    def allocate(self, app_id, asks=(), launches=(), releases=(), now=None):
        """Application master heartbeat: new asks, launch orders for granted
        containers, and releases of unneeded ones."""
        app = self.get_app(app_id)
        if app.terminal:
            return {"allocated": [], "completed": self._drain_completed(app_id), "app_state": app.state}
        for cid in releases:
            c = self.containers.get(cid)
            if c is not None and c.app_id == app_id and not c.state.terminal:
                self._kill(c, "released by application master")
        for profile, count in asks:
            profile = normalize_request(profile, self.cfg)
            if count > 0:
                self.queue.append(PendingRequest(app_id, profile, int(count)))
        for launch in launches:
            c = self.containers.get(launch["container_id"])
            if c is None or c.app_id != app_id or c.state is not ContainerState.ALLOCATED:
                log.warning("ignoring launch of %s", launch.get("container_id"))
                continue
            c.command = launch["command"]
            c.env = dict(launch.get("env") or {})
            self._launch(c)
        self._schedule()
        allocated, self._undelivered[app_id] = self._undelivered[app_id], []
        return {
            "allocated": [self.containers[cid].to_dict() for cid in allocated],
            "completed": self._drain_completed(app_id),
            "app_state": app.state,
        }

    def finish_application(self, app_id, succeeded, diagnostics="", counters=None, phase_timings=None, now=None):
        app = self.get_app(app_id)
        if app.terminal:
            return app
        self._end_app(app, "finished" if succeeded else "failed", diagnostics, now)
        app.counters = dict(counters or {})
        app.phase_timings = dict(phase_timings or {})
        self._maybe_record(app)
        self._schedule()
        return app

    def _end_app(self, app, state, diagnostics, now):
        app.state = state
        app.finish_time = max(now if now is not None else time.time(), app.submit_time)
        if diagnostics:
            app.diagnostics = diagnostics
        self.queue = deque(r for r in self.queue if r.app_id != app.app_id)
        for c in list(self.containers.values()):
            if c.app_id == app.app_id and not c.state.terminal and not c.is_am:
                self._kill(c, "application finished")

    def shutdown(self, now):
        self.shutting_down = True
        for app in self.apps.values():
            if not app.terminal:
                self._end_app(app, "failed", "cluster shutdown", now)
        for c in list(self.containers.values()):
            if not c.state.terminal:
                self._kill(c, "cluster shutdown")

    # -- containers ------------------------------------------------------

    def _mint(self, req, host):
        self._container_seq[req.app_id] += 1
        cid = f"container_{req.app_id.split('_', 1)[1]}_{self._container_seq[req.app_id]:06d}"
        c = Container(id=cid, app_id=req.app_id, node=host, resource=req.profile, is_am=req.is_am)
        self.containers[cid] = c
        node = self.nodes[host]
        node.used = node.used + req.profile
        node.live_containers.add(cid)
        self.events.append(("allocate", cid, host, req.profile.memory_mb, req.profile.vcores))
        return c

    def _schedule(self):
        if self.shutting_down:
            return
        placements = schedule(self.queue, list(self.nodes.values()))
        for req, host in placements:
            c = self._mint(req, host)
            req.remaining -= 1
            if req.is_am:
                app = self.apps[req.app_id]
                app.am_container = c.id
                command, env = self._am_launch[req.app_id]
                c.command, c.env = command, env
                self._launch(c)
            else:
                self._undelivered[req.app_id].append(c.id)
        while self.queue and self.queue[0].remaining == 0:
            self.queue.popleft()

    def _launch(self, c):
        c.transition(ContainerState.LAUNCHING)
        self._directives[c.node].append({"op": "launch", "container": c.to_dict()})

    def _kill(self, c, reason):
        if c.state is ContainerState.ALLOCATED:
            self._terminate(c, ContainerState.KILLED, KILLED_EXIT, reason)
        else:
            self._directives.setdefault(c.node, []).append({"op": "kill", "container_id": c.id})

    def _apply_status(self, host, st):
        c = self.containers.get(st.get("container_id"))
        if c is None or c.node != host or c.state.terminal:
            return
        state = ContainerState(st["state"])
        if state is ContainerState.RUNNING:
            if c.state is ContainerState.LAUNCHING:
                c.transition(ContainerState.RUNNING)
                if c.is_am:
                    app = self.apps[c.app_id]
                    if app.state == "submitted":
                        app.state = "am_running"
        elif state.terminal:
            exit_code = st.get("exit_code")
            self._terminate(c, state, -1 if exit_code is None else exit_code, st.get("diagnostics", ""))

    def _terminate(self, c, state, exit_code, diagnostics):
        c.transition(state, exit_code=exit_code, diagnostics=diagnostics)
        node = self.nodes.get(c.node)
        if node is not None and c.id in node.live_containers:
            node.live_containers.discard(c.id)
            node.used = node.used - c.resource
            self.events.append(("release", c.id, c.node, c.resource.memory_mb, c.resource.vcores))
        app = self.apps[c.app_id]
        app.container_history.append(
            {"container_id": c.id, "node": c.node, "resource": c.resource.to_dict(),
             "state": state.value, "exit_code": c.exit_code, "diagnostics": diagnostics}
        )
        if c.id in self._undelivered.get(c.app_id, ()):
            self._undelivered[c.app_id].remove(c.id)
        if c.is_am:
            if not app.terminal:
                self._end_app(
                    app, "failed",
                    f"application master container {c.id} exited with code {c.exit_code} "
                    f"before finishing: {diagnostics}".rstrip(": "),
                    None,
                )
        else:
            self._completed[c.app_id].append(
                {"container_id": c.id, "node": c.node, "state": c.state.value,
                 "exit_code": c.exit_code, "diagnostics": c.diagnostics}
            )
        self._maybe_record(app)

    def _drain_completed(self, app_id):
        done, self._completed[app_id] = self._completed[app_id], []
        return done

    def _maybe_record(self, app):
        if not app.terminal or app.app_id in self._recorded:
            return
        if any(c.app_id == app.app_id and not c.state.terminal for c in self.containers.values()):
            return
        self._recorded.add(app.app_id)
        if self.history is not None:
            self.history.record(app)

    def is_recorded(self, app_id):
        return app_id in self._recorded

    # -- views -----------------------------------------------------------

    def application_status(self, app_id):
        app = self.get_app(app_id)
        d = app.to_dict()
        d["recorded"] = self.is_recorded(app_id)
        return d

    def cluster_status(self):
        return {
            "nodes": [
                {
                    "host": n.host,
                    "status": n.status,
                    "capacity": n.capacity.to_dict(),
                    "used": n.used.to_dict(),
                    "containers": sorted(n.live_containers),
                }
                for n in self.nodes.values()
            ],
            "containers": {
                cid: {"node": c.node, "state": c.state.value, "app_id": c.app_id, "is_am": c.is_am}
                for cid, c in self.containers.items()
                if not c.state.terminal
            },
            "apps": {a.app_id: a.state for a in self.apps.values()},
            "queue": [
                {"app_id": r.app_id, "resource": r.profile.to_dict(), "remaining": r.remaining}
                for r in self.queue
            ],
            "shutting_down": self.shutting_down,
        }


def check_event_log(events, min_alloc_mb):
    """Replay a manager event log and verify resource safety.

    Raises AssertionError on oversubscription, allocation sizes that are not
    positive multiples of ``min_alloc_mb``, or unbalanced releases.
    """
    cap, used, live = {}, {}, {}
    for ev in events:
        kind = ev[0]
        if kind == "register":
            _, host, mem, vc = ev
            cap[host] = (mem, vc)
            used[host] = (0, 0)
        elif kind == "allocate":
            _, cid, host, mem, vc = ev
            assert mem > 0 and mem % min_alloc_mb == 0, f"{cid}: {mem} MB is not a multiple of {min_alloc_mb}"
            m, v = used[host]
            used[host] = (m + mem, v + vc)
            assert used[host][0] <= cap[host][0], f"{host} memory oversubscribed"
            assert used[host][1] <= cap[host][1], f"{host} vcores oversubscribed"
            live[cid] = (host, mem, vc)
        elif kind == "release":
            _, cid, host, mem, vc = ev
            assert cid in live, f"{cid} released but not live"
            assert live.pop(cid) == (host, mem, vc), f"{cid} released with a different profile"
            m, v = used[host]
            used[host] = (m - mem, v - vc)
        # "lost" is a marker only: the lost node's containers are released
        # by explicit "release" events right after it
    return used
