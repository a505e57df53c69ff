import json
import os
import socket
import time
from pathlib import Path

import pytest

from ephemyarn import cluster
from ephemyarn.allocation import NodeAllocation
from ephemyarn.bench import dataset, harness, terasort
from ephemyarn.config import Config
from ephemyarn.errors import ClusterUnavailable, OutputExists, ProvisionError
from ephemyarn.negotiator import HistoryStore

pytestmark = pytest.mark.slow


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def loopback_cfg(tmp_path, remote_exec="sh -c {command}", **kw):
    """Remote mode where every 'host' is a loopback address on this machine."""
    kw.setdefault("ready_timeout_ms", 20000)
    return Config(
        local_root=str(tmp_path / "local"), shared_root=str(tmp_path / "shared"),
        heartbeat_interval_ms=100, node_timeout_ms=1500, kill_grace_ms=1000,
        remote_exec=remote_exec, rm_port=free_port(), history_port=free_port(), **kw,
    )


def loopback(n):
    return NodeAllocation(tuple((f"127.0.0.{i + 1}", 2) for i in range(n)))


def unreachable_exec(bad_host):
    return f"if [ {{host}} = {bad_host} ]; then exit 255; fi; sh -c {{command}}"


def assert_clean(handle):
    assert cluster.cluster_processes(handle.job_id) == []
    assert not handle.plan.local_job_dir.exists()


@pytest.fixture
def local3(fast_cfg):
    h = cluster.provision(cluster.local_allocation(3), fast_cfg, local=True)
    yield h
    cluster.teardown(h)


def test_local_lifecycle(local3, tmp_path):
    h = local3
    assert h.status == "ready" and h.state["provision_ms"] > 0
    assert h.layout.rm_host == "local0" and h.layout.history_host == "local1"
    assert h.layout.worker_hosts == ("local2",)
    spec = cluster.job_for(h, name="echo", num_mappers=2, map_command="echo hi > {OUTPUT}/part-m-{TASK_INDEX}",
                           output_dir=str(tmp_path / "out"))
    res = cluster.run(h, spec, timeout=60)
    assert res.succeeded and res.exit_code == 0
    assert (res.logs_dir / "events.jsonl").exists()

    rep = cluster.teardown(h)
    assert rep.ok and rep.exit_code == 0 and rep.teardown_ms >= 0
    assert_clean(h)
    assert sorted(p.name for p in h.plan.staging.iterdir()) == ["cluster.json", "history"]
    assert (tmp_path / "out" / "part-m-0").read_text() == "hi\n"
    assert (h.plan.output / "logs" / "daemons").exists()
    # history survives teardown, readable from a fresh handle
    fresh = cluster.load_handle(h.cfg)
    rec = HistoryStore(fresh.history_file).query(res.app_id)
    assert rec.state == "finished" and rec.container_history

    again = cluster.teardown(cluster.load_handle(state=h.path))
    assert again.ok and again.noop
    with pytest.raises(ClusterUnavailable):
        cluster.run(fresh, spec)


def test_failed_job_and_existing_output(local3, tmp_path):
    h = local3
    spec = cluster.job_for(h, name="bad", num_mappers=1, map_command="exit 7", max_attempts=2,
                           output_dir=str(tmp_path / "out"))
    res = cluster.run(h, spec, timeout=60)
    assert not res.succeeded and res.exit_code == 1
    assert "failed after 2 attempts" in res.status["diagnostics"]
    (tmp_path / "exists").mkdir()
    with pytest.raises(OutputExists):
        cluster.run(h, cluster.job_for(h, name="x", num_mappers=1, map_command="true",
                                       output_dir=str(tmp_path / "exists")))


def test_terasort_on_cluster(local3, tmp_path):
    h = local3
    res = terasort.run_teragen(h, 5000, 3, 1, tmp_path / "gen", timeout=120)
    assert res.succeeded, res.status
    ref = tmp_path / "ref"
    dataset.teragen(5000, 3, 1, ref)
    gen_files = dataset.data_files(tmp_path / "gen", "part-m-")
    assert [f.read_bytes() for f in gen_files] == [f.read_bytes() for f in dataset.data_files(ref)]

    res = terasort.run_terasort(h, tmp_path / "gen", 3, 2, tmp_path / "sorted", timeout=120)
    assert res.succeeded, res.status
    counters = res.status["counters"]
    assert counters["map_output_records"] == counters["reduce_input_records"] == 5000
    rep = dataset.teravalidate(tmp_path / "sorted")
    assert rep.sorted and rep.rows == 5000 and rep.key_checksum == dataset.dataset_checksum(ref)[1]
    raw = b"".join(f.read_bytes() for f in dataset.data_files(ref))
    oracle = b"".join(sorted(raw[i:i + 100] for i in range(0, len(raw), 100)))
    assert b"".join(f.read_bytes() for f in dataset.data_files(tmp_path / "sorted", "part-r-")) == oracle


def test_remote_mode_loopback(tmp_path):
    cfg = loopback_cfg(tmp_path)
    h = cluster.provision(loopback(4), cfg)
    try:
        assert h.state["mode"] == "remote"
        assert h.rm_addr == f"127.0.0.1:{cfg.rm_port}" and h.history_addr == f"127.0.0.2:{cfg.history_port}"
        res = cluster.run(h, cluster.job_for(h, name="t", num_mappers=4, map_command="true",
                                             output_dir=str(tmp_path / "out")), timeout=60)
        assert res.succeeded
    finally:
        rep = cluster.teardown(h)
    assert rep.ok, rep
    assert_clean(h)


def test_teardown_with_unreachable_host(tmp_path):
    cfg = loopback_cfg(tmp_path)
    h = cluster.provision(loopback(4), cfg)
    # the fourth host drops off the network before teardown
    h.state["remote_exec"] = unreachable_exec("127.0.0.4")
    h.save()
    rep = cluster.teardown(cluster.load_handle(state=h.path))
    assert not rep.ok and rep.exit_code == 1
    assert rep.unreachable == ["127.0.0.4"]
    state = json.loads(h.path.read_text())
    assert state["teardown_unreachable"] == ["127.0.0.4"]
    cluster.sweep(h.job_id, h.plan.local_job_dir, grace=1.0)
    assert cluster.cluster_processes(h.job_id) == []


def test_provision_rollback(tmp_path):
    cfg = loopback_cfg(tmp_path, remote_exec=unreachable_exec("127.0.0.4"), ready_timeout_ms=3000)
    with pytest.raises(ProvisionError, match="127.0.0.4"):
        cluster.provision(loopback(4), cfg, job_id="rollback")
    state = json.loads((tmp_path / "shared" / "rollback" / "staging" / "cluster.json").read_text())
    assert state["status"] == "torn_down"
    assert cluster.cluster_processes("rollback") == []


def test_duplicate_cluster_id(fast_cfg):
    h = cluster.provision(cluster.local_allocation(3), fast_cfg, local=True, job_id="dup")
    try:
        with pytest.raises(ProvisionError):
            cluster.provision(cluster.local_allocation(3), fast_cfg, local=True, job_id="dup")
    finally:
        assert cluster.teardown(h).ok


# -- harness -------------------------------------------------------------------


def test_harness_overhead_plan(fast_cfg, tmp_path):
    plan = [harness.PlanEntry(3, 6, 0), harness.PlanEntry(5, 10, 0)]
    rep = harness.scaling_run(plan, "overhead", fast_cfg, tmp_path / "report")
    assert rep.ok
    assert [(t.phase, t.nodes, t.cores) for t in rep.timings] == [
        ("provision", 3, 6), ("teardown", 3, 6), ("provision", 5, 10), ("teardown", 5, 10)]
    assert harness.read_timings(rep.csv_path) == rep.timings
    header = rep.csv_path.read_text().splitlines()[0]
    assert header == "run_id,phase,nodes,cores,mappers,reducers,rows,wall_ms,ok"
    assert "yerrorlines" in rep.plot_path.read_text()


def test_harness_unreachable_host_continues(tmp_path):
    cfg = loopback_cfg(tmp_path, remote_exec=unreachable_exec("127.0.0.5"), ready_timeout_ms=3000)

    def allocate(entry):
        return loopback(entry.nodes), False

    plan = [harness.PlanEntry(5, 10, 0), harness.PlanEntry(3, 6, 0)]
    rep = harness.scaling_run(plan, "overhead", cfg, tmp_path / "report", allocate=allocate)
    assert not rep.ok
    assert [(t.phase, t.nodes, t.ok) for t in rep.timings] == [
        ("provision", 5, False), ("provision", 3, True), ("teardown", 3, True)]


def test_harness_repeat_summary(fast_cfg, tmp_path):
    rep = harness.scaling_run([harness.PlanEntry(3, 6, 0)], "overhead", fast_cfg, tmp_path / "r", repeat=5)
    assert len(rep.timings) == 10 and len({t.run_id for t in rep.timings}) == 5
    lines = rep.summary_path.read_text().splitlines()
    assert lines[0] == "phase,nodes,cores,rows,n,min_ms,median_ms,max_ms"
    prov = [t.wall_ms for t in rep.timings if t.phase == "provision"]
    row = lines[1].split(",")
    assert row[:5] == ["provision", "3", "6", "0", "5"]
    assert (float(row[5]), float(row[6]), float(row[7])) == (min(prov), sorted(prov)[2], max(prov))


def test_harness_full_small(fast_cfg, tmp_path):
    rep = harness.scaling_run([harness.PlanEntry(3, 2, 3000)], "full", fast_cfg, tmp_path / "r", keep_data=True)
    assert rep.ok, rep.timings
    assert [t.phase for t in rep.timings] == list(harness.PHASES)
    t = rep.timings[0]
    assert (t.mappers, t.reducers, t.rows) == (2, 1, 3000)
    assert {x.rows for x in rep.timings} == {3000}
    assert [d.name for d in rep.data_dirs] == ["teragen", "terasort"]


def test_task_counts():
    assert harness.task_counts(8) == (8, 4)
    assert harness.task_counts(7, 1.0, 0.5) == (7, 4)
    assert harness.task_counts(10, 0.25, 0.1) == (3, 1)
    assert harness.task_counts(10, mappers=5, reducers=2) == (5, 2)
    assert harness.parse_node_counts("3..5,8") == [3, 4, 5, 8]
    with pytest.raises(ValueError):
        harness.parse_node_counts("5..3")
