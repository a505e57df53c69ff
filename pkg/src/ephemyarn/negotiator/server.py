"""Resource manager and history daemons."""

from __future__ import annotations

import argparse
import logging
import os
import threading
import time
from pathlib import Path

from ..config import ResourceProfile, load_config
from ..errors import ProtocolError
from ..protocol import MessageServer
from .history import HistoryStore
from .manager import ResourceManager

log = logging.getLogger(__name__)


def _write_addr_file(path, host, port):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(f"{host}:{port}\n")
    os.replace(tmp, path)


class ResourceManagerServer(MessageServer):
    def __init__(self, manager, bind=("0.0.0.0", 0), clock=time.time):
        super().__init__(bind)
        self.manager = manager
        self.clock = clock
        self.lock = threading.Lock()
        self.stopped = threading.Event()
        self._shutdown_at = None

    def dispatch(self, msg):
        kind = msg["type"]
        m = self.manager
        with self.lock:
            now = self.clock()
            if kind == "RegisterNode":
                m.register_node(msg["host"], ResourceProfile.from_dict(msg["capacity"]), now)
                return {"type": "RegisterAck", "host": msg["host"],
                        "heartbeat_interval_ms": m.cfg.heartbeat_interval_ms}
            if kind == "Heartbeat":
                directives = m.heartbeat(msg["host"], msg.get("statuses") or [], now, final=bool(msg.get("final")))
                return {"type": "HeartbeatReply", "directives": directives}
            if kind == "ContainerStatus":
                # out-of-band report; same effect as a heartbeat carrying it
                directives = m.heartbeat(msg["host"], [msg], now)
                return {"type": "HeartbeatReply", "directives": directives}
            if kind == "SubmitApplication":
                app_id = m.submit_application(msg["name"], msg["am_command"], now, env=msg.get("env"))
                return {"type": "ApplicationStatus", **m.application_status(app_id)}
            if kind == "ApplicationStatus":
                return {"type": "ApplicationStatus", **m.application_status(msg["app_id"])}
            if kind == "AllocateRequest":
                asks = [
                    (ResourceProfile(int(a["memory_mb"]), int(a.get("vcores", 1))), int(a["count"]))
                    for a in msg.get("asks") or []
                ]
                resp = m.allocate(msg["app_id"], asks, msg.get("launches") or [], msg.get("releases") or [], now)
                return {"type": "AllocateResponse", **resp}
            if kind == "FinishApplication":
                m.finish_application(
                    msg["app_id"], bool(msg["succeeded"]), msg.get("diagnostics", ""),
                    msg.get("counters"), msg.get("phase_timings"), now,
                )
                return {"type": "ApplicationStatus", **m.application_status(msg["app_id"])}
            if kind == "ClusterStatus":
                return {"type": "ClusterStatus", **m.cluster_status()}
            if kind == "QueryHistory":
                if m.history is None:
                    raise ProtocolError("no history store configured")
                return {"type": "HistoryRecord", "record": m.history.query(msg["app_id"]).to_dict()}
            if kind == "Shutdown":
                if not m.shutting_down:
                    log.info("shutdown requested")
                    m.shutdown(now)
                    self._shutdown_at = now
                return {"type": "Ack"}
        raise ProtocolError(f"unsupported message type {kind!r}")

    def tick(self):
        """Expire silent nodes; stop once every agent has drained."""
        with self.lock:
            now = self.clock()
            self.manager.expire_nodes(now)
            if self._shutdown_at is None:
                return False
            alive = {n.host for n in self.manager.alive_nodes()}
            drained = alive <= self.manager.final_heartbeats
            grace = 2 * self.manager.cfg.node_timeout_ms / 1000
            return drained or now - self._shutdown_at > grace

    def run(self):
        self.serve_in_thread()
        interval = self.manager.cfg.heartbeat_interval_ms / 1000
        try:
            while not self.tick():
                time.sleep(interval)
            # let the last replies flush
            time.sleep(interval)
        finally:
            self.shutdown()
            self.server_close()
            self.stopped.set()


class HistoryServer(MessageServer):
    def __init__(self, store, bind=("0.0.0.0", 0)):
        super().__init__(bind)
        self.store = store
        self.stop_requested = threading.Event()

    def dispatch(self, msg):
        kind = msg["type"]
        if kind == "QueryHistory":
            return {"type": "HistoryRecord", "record": self.store.query(msg["app_id"]).to_dict()}
        if kind == "Shutdown":
            self.stop_requested.set()
            return {"type": "Ack"}
        raise ProtocolError(f"unsupported message type {kind!r}")

    def run(self):
        self.serve_in_thread()
        self.stop_requested.wait()
        time.sleep(0.05)
        self.shutdown()
        self.server_close()


def _setup_logging(path):
    kwargs = dict(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        kwargs["filename"] = path
    logging.basicConfig(**kwargs)


def rm_main(argv=None):
    p = argparse.ArgumentParser(prog="ephemyarn-rm", description="Resource manager daemon")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", required=True, help="comma-separated worker hostnames")
    p.add_argument("--history", required=True, help="history file on shared storage")
    p.add_argument("--bind", default="0.0.0.0")
    p.add_argument("--advertise", required=True, help="hostname clients use to reach this daemon")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--addr-file", required=True)
    p.add_argument("--log")
    args = p.parse_args(argv)
    _setup_logging(args.log)
    cfg = load_config(args.config)
    manager = ResourceManager(cfg, args.workers.split(","), HistoryStore(args.history))
    server = ResourceManagerServer(manager, bind=(args.bind, args.port))
    _write_addr_file(args.addr_file, args.advertise, server.port)
    log.info("resource manager listening on %s:%d", args.advertise, server.port)
    server.run()
    log.info("resource manager stopped")
    return 0


def history_main(argv=None):
    p = argparse.ArgumentParser(prog="ephemyarn-history", description="Job history daemon")
    p.add_argument("--history", required=True)
    p.add_argument("--bind", default="0.0.0.0")
    p.add_argument("--advertise", required=True)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--addr-file", required=True)
    p.add_argument("--log")
    args = p.parse_args(argv)
    _setup_logging(args.log)
    server = HistoryServer(HistoryStore(args.history), bind=(args.bind, args.port))
    _write_addr_file(args.addr_file, args.advertise, server.port)
    log.info("history server listening on %s:%d", args.advertise, server.port)
    server.run()
    return 0
