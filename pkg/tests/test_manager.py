import time

import pytest

from ephemyarn.config import Config, ResourceProfile
from ephemyarn.errors import AlreadyRegistered, NoWorkers, NotFound, ReRegisterRequired, UnknownNode, Unsatisfiable
from ephemyarn.negotiator import HistoryStore, ResourceManager, check_event_log, query_history
from ephemyarn.negotiator.history import ApplicationRecord
from ephemyarn.negotiator.manager import NODE_LOST_EXIT
from ephemyarn.negotiator.server import HistoryServer, ResourceManagerServer
from ephemyarn.protocol import Client, request

GB = 1024
CAP = ResourceProfile(52 * GB, 16)


def rm_with(hosts=("n3", "n4"), history=None, **cfg):
    rm = ResourceManager(Config(**cfg), list(hosts), history=history, cluster_ts=1)
    return rm


def test_register():
    rm = rm_with()
    rm.register_node("n3", CAP, 0.0)
    n = rm.nodes["n3"]
    assert n.status == "alive" and n.used == ResourceProfile(0, 0)
    with pytest.raises(UnknownNode):
        rm.register_node("n1", CAP, 0.0)
    with pytest.raises(AlreadyRegistered):
        rm.register_node("n3", CAP, 0.0)


def test_submit_queues_am_request():
    rm = rm_with()
    with pytest.raises(NoWorkers):
        rm.submit_application("terasort", "true", 0.0)
    rm.register_node("n3", CAP, 0.0)
    a = rm.submit_application("terasort", "true", 0.0)
    b = rm.submit_application("teragen", "true", 0.0)
    assert a != b
    assert rm.get_app(a).state == "submitted" and rm.get_app(b).name == "teragen"
    am = rm.containers[rm.get_app(a).am_container]
    assert am.resource == ResourceProfile(8192, 1) and am.is_am
    # the AM launch is delivered exactly once
    d1 = rm.heartbeat("n3", [], 0.1)
    assert [d["op"] for d in d1] == ["launch", "launch"]
    assert d1[0]["container"]["container_id"] == am.id
    assert rm.heartbeat("n3", [], 0.2) == []


def _running_app(rm, now=0.0):
    app = rm.submit_application("job", "am", now)
    am = rm.get_app(app).am_container
    rm.heartbeat("n3", [{"container_id": am, "state": "running"}], now)
    return app, am


def test_allocate_launch_complete_releases():
    rm = rm_with()
    rm.register_node("n3", CAP, 0.0)
    app, am = _running_app(rm)
    assert rm.get_app(app).state == "am_running"
    resp = rm.allocate(app, asks=[(ResourceProfile(3000, 0), 2)], now=0.1)
    got = resp["allocated"]
    assert [c["resource"] for c in got] == [{"memory_mb": 4096, "vcores": 1}] * 2
    assert rm.nodes["n3"].used == ResourceProfile(8192 + 8192, 3)
    cid = got[0]["container_id"]
    rm.allocate(app, launches=[{"container_id": cid, "command": "echo hi", "env": {"A": "1"}}], now=0.2)
    (d,) = rm.heartbeat("n3", [], 0.3)
    assert d["op"] == "launch" and d["container"]["command"] == "echo hi" and d["container"]["env"] == {"A": "1"}
    rm.heartbeat("n3", [{"container_id": cid, "state": "running"}], 0.4)
    rm.heartbeat("n3", [{"container_id": cid, "state": "completed", "exit_code": 0}], 0.5)
    assert rm.nodes["n3"].used == ResourceProfile(8192 + 4096, 2)
    done = rm.allocate(app, now=0.6)["completed"]
    assert [(c["container_id"], c["state"], c["exit_code"]) for c in done] == [(cid, "completed", 0)]
    assert rm.allocate(app, now=0.7)["completed"] == []  # reported once
    # releasing the unlaunched one frees it immediately
    rm.allocate(app, releases=[got[1]["container_id"]], now=0.8)
    assert rm.nodes["n3"].used == ResourceProfile(8192, 1)
    with pytest.raises(Unsatisfiable):
        rm.allocate(app, asks=[(ResourceProfile(60 * GB, 1), 1)])
    check_event_log(rm.events, 2048)


def test_node_loss_and_reregistration():
    rm = rm_with(node_timeout_ms=1000, heartbeat_interval_ms=100)
    rm.register_node("n3", CAP, 0.0)
    rm.register_node("n4", CAP, 0.0)
    app, am = _running_app(rm)
    cid = rm.allocate(app, asks=[(ResourceProfile(4096, 1), 1)], now=0.0)["allocated"][0]["container_id"]
    assert rm.containers[cid].node == "n3"
    rm.heartbeat("n4", [], 0.9)
    assert rm.expire_nodes(0.95) == []
    assert rm.expire_nodes(1.2) == ["n3"]
    assert rm.nodes["n3"].status == "lost"
    assert rm.containers[cid].state.value == "killed"  # AM loss ends the app, killing its allocations
    assert rm.containers[am].state.value == "failed" and rm.containers[am].exit_code == NODE_LOST_EXIT
    assert rm.get_app(app).state == "failed"
    with pytest.raises(ReRegisterRequired):
        rm.heartbeat("n3", [], 1.3)
    rm.register_node("n3", CAP, 1.4)
    assert rm.nodes["n3"].status == "alive" and rm.nodes["n3"].used == ResourceProfile(0, 0)
    check_event_log(rm.events, 2048)


def test_worker_loss_fails_only_its_containers():
    rm = rm_with(hosts=("n3", "n4"), node_timeout_ms=1000, heartbeat_interval_ms=100,
                 node_memory_mb=16 * GB)
    rm.register_node("n3", ResourceProfile(16 * GB, 16), 0.0)
    rm.register_node("n4", ResourceProfile(16 * GB, 16), 0.0)
    app, am = _running_app(rm)
    got = rm.allocate(app, asks=[(ResourceProfile(4096, 1), 4)], now=0.0)["allocated"]
    on_n4 = [c["container_id"] for c in got if c["node"] == "n4"]
    assert on_n4
    rm.heartbeat("n3", [], 1.0)
    assert rm.expire_nodes(1.1) == ["n4"]
    done = rm.allocate(app, now=1.1)["completed"]
    assert sorted(c["container_id"] for c in done) == sorted(on_n4)
    assert all(c["state"] == "failed" and c["exit_code"] == NODE_LOST_EXIT for c in done)
    assert rm.get_app(app).state == "am_running"


def test_head_request_waits_for_capacity():
    rm = rm_with(hosts=("n3",), node_memory_mb=16 * GB)
    rm.register_node("n3", ResourceProfile(16 * GB, 16), 0.0)
    app, am = _running_app(rm)  # AM holds 8 GB
    r1 = rm.allocate(app, asks=[(ResourceProfile(8192, 1), 2)], now=0.0)["allocated"]
    assert len(r1) == 1
    r2 = rm.allocate(app, asks=[(ResourceProfile(2048, 1), 1)], now=0.0)["allocated"]
    assert r2 == []  # small request queued behind the blocked head
    got = rm.allocate(app, releases=[r1[0]["container_id"]], now=0.1)["allocated"]
    assert [c["resource"]["memory_mb"] for c in got] == [8192]
    assert len(rm.queue) == 1 and rm.queue[0].profile.memory_mb == 2048


def test_history_after_finish(tmp_path):
    store = HistoryStore(tmp_path / "h" / "history.jsonl")
    rm = rm_with(history=store)
    rm.register_node("n3", CAP, 0.0)
    app, am = _running_app(rm)
    rm.finish_application(app, False, diagnostics="container exceeded memory", now=1.0)
    # not recorded until the AM container itself has ended
    assert not rm.is_recorded(app)
    rm.heartbeat("n3", [{"container_id": am, "state": "completed", "exit_code": 0}], 1.1)
    assert rm.is_recorded(app)
    rec = query_history(store.path, app)
    assert rec.state == "failed"
    assert rec.diagnostics == "container exceeded memory"
    assert rec.finish_time >= rec.submit_time
    assert [h["container_id"] for h in rec.container_history] == [am]
    with pytest.raises(NotFound):
        store.query("nope")
    with pytest.raises(ValueError):
        store.record(ApplicationRecord("x", "y"))


def test_am_crash_fails_app():
    rm = rm_with()
    rm.register_node("n3", CAP, 0.0)
    app, am = _running_app(rm)
    rm.heartbeat("n3", [{"container_id": am, "state": "failed", "exit_code": 3, "diagnostics": "boom"}], 0.5)
    st = rm.application_status(app)
    assert st["state"] == "failed" and "boom" in st["diagnostics"] and st["recorded"]


def test_shutdown_directive():
    rm = rm_with()
    rm.register_node("n3", CAP, 0.0)
    app, am = _running_app(rm)
    rm.shutdown(1.0)
    ds = rm.heartbeat("n3", [], 1.1)
    assert {"op": "kill", "container_id": am} in ds and ds[-1] == {"op": "shutdown"}
    assert rm.get_app(app).state == "failed"


def test_servers_over_tcp(tmp_path):
    store = HistoryStore(tmp_path / "history.jsonl")
    clock = [0.0]
    rm = ResourceManager(Config(), ["n3"], history=store, cluster_ts=1)
    srv = ResourceManagerServer(rm, ("127.0.0.1", 0), clock=lambda: clock[0])
    srv.serve_in_thread()
    hist = HistoryServer(store, ("127.0.0.1", 0))
    hist.serve_in_thread()
    addr = f"127.0.0.1:{srv.port}"
    try:
        with Client(addr) as c:
            ack = c.request({"type": "RegisterNode", "host": "n3", "capacity": CAP.to_dict()})
            assert ack["type"] == "RegisterAck"
            with pytest.raises(UnknownNode):
                c.request({"type": "RegisterNode", "host": "zz", "capacity": CAP.to_dict()})
            st = c.request({"type": "SubmitApplication", "name": "j", "am_command": "true"})
            app = st["app_id"]
            (d,) = c.request({"type": "Heartbeat", "host": "n3", "statuses": []})["directives"]
            am = d["container"]["container_id"]
            c.request({"type": "ContainerStatus", "host": "n3", "container_id": am, "state": "running"})
            resp = c.request({"type": "AllocateRequest", "app_id": app,
                              "asks": [{"memory_mb": 4096, "vcores": 1, "count": 1}]})
            assert resp["type"] == "AllocateResponse" and len(resp["allocated"]) == 1
            c.request({"type": "FinishApplication", "app_id": app, "succeeded": True,
                       "counters": {"x": 1}, "phase_timings": {"map_ms": 5}})
            c.request({"type": "Heartbeat", "host": "n3", "statuses": [
                {"type": "ContainerStatus", "container_id": am, "state": "completed", "exit_code": 0}]})
            st = c.request({"type": "ApplicationStatus", "app_id": app})
            assert st["state"] == "finished" and st["recorded"]
            assert c.request({"type": "ClusterStatus"})["nodes"][0]["host"] == "n3"
        rec = request(f"127.0.0.1:{hist.port}", {"type": "QueryHistory", "app_id": app})["record"]
        assert rec["counters"] == {"x": 1} and rec["phase_timings"] == {"map_ms": 5}
        with pytest.raises(NotFound):
            request(f"127.0.0.1:{hist.port}", {"type": "QueryHistory", "app_id": "nope"})
        # shutdown: the server stops once the agent's final heartbeat arrives
        request(addr, {"type": "Shutdown"})
        assert not srv.tick()
        ds = request(addr, {"type": "Heartbeat", "host": "n3", "statuses": [], "final": True})["directives"]
        assert {"op": "shutdown"} in ds
        assert srv.tick()
    finally:
        srv.shutdown()
        srv.server_close()
        hist.shutdown()
        hist.server_close()
