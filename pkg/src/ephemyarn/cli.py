"""``ephemyarn`` command line: provision, run, teardown, history, bench, wrap."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import cluster
from .allocation import NodeAllocation, parse_hostfile, read_env_allocation
from .app_master import JobSpec
from .config import load_config
from .errors import EphemyarnError, MissingInput
from .negotiator.history import HistoryStore

log = logging.getLogger("ephemyarn")


def _common(p):
    p.add_argument("--config", help="key=value config file (default: $EPHEMYARN_CONFIG)")
    p.add_argument("-v", "--verbose", action="store_true")


def _alloc_flags(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--hostfile", help="LSF-style hostfile: 'host [slots]' per line")
    g.add_argument("--from-env", choices=("lsf", "slurm"), help="read the batch scheduler's allocation")
    g.add_argument("--local", metavar="N", help="simulate N hosts on this machine")
    p.add_argument("--local-slots", type=int, default=2, help="cores per simulated host (default 2)")


def _state_flags(p):
    p.add_argument("--state", help="cluster state file (default: most recent cluster)")
    p.add_argument("--job-id", help="cluster id under the shared root")


def build_parser():
    p = argparse.ArgumentParser(prog="ephemyarn", description="Ephemeral YARN-style clusters inside batch allocations")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("provision", help="start a cluster on an allocation")
    _common(s)
    _alloc_flags(s)
    s.add_argument("--job-id", help="cluster id (default: scheduler job id or a timestamp)")

    s = sub.add_parser("run", help="run a job on a provisioned cluster")
    _common(s)
    _state_flags(s)
    s.add_argument("--job", required=True, help="jobspec file")
    s.add_argument("--output", help="output directory (overrides the jobspec)")
    s.add_argument("--timeout", type=float, help="seconds to wait for the job")

    s = sub.add_parser("teardown", help="stop a cluster and clean up")
    _common(s)
    _state_flags(s)

    s = sub.add_parser("history", help="show job history (also after teardown)")
    _common(s)
    _state_flags(s)
    s.add_argument("app_id", nargs="?")

    s = sub.add_parser("wrap", help="provision, run one job, tear down")
    _common(s)
    _alloc_flags(s)
    s.add_argument("--job-id")
    s.add_argument("--job", required=True, help="jobspec file")
    s.add_argument("--output", help="output directory (overrides the jobspec)")
    s.add_argument("--timeout", type=float)

    s = sub.add_parser("bench", help="Teragen/Terasort benchmarks and scaling runs")
    _common(s)
    s.add_argument("mode", choices=("overhead", "teragen", "terasort", "full"))
    _alloc_flags(s)
    s.add_argument("--nodes", help="node counts to use from --hostfile/--from-env, e.g. 3..8 (default: all)")
    s.add_argument("--rows", type=int, help="rows to generate (default 1000000; 0 for overhead)")
    s.add_argument("--repeat", type=int, default=1)
    s.add_argument("--mappers", type=int, help="fixed map task count (default: ceil(map-ratio * cores))")
    s.add_argument("--reducers", type=int, help="fixed reduce task count (default: ceil(reduce-ratio * cores))")
    s.add_argument("--map-ratio", type=float, default=1.0)
    s.add_argument("--reduce-ratio", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--input", help="teragen output to sort (terasort mode)")
    s.add_argument("--output", help="report directory (default: ./bench-<mode>-<time>)")
    s.add_argument("--keep-data", action="store_true", help="keep generated and sorted data (full mode)")
    s.add_argument("--timeout", type=float, help="seconds per job")

    s = sub.add_parser("sweep")
    s.add_argument("rest", nargs=argparse.REMAINDER)
    # hidden: remote half of teardown
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "sweep"]
    return p


def _allocation(args, cfg):
    if args.local is not None:
        try:
            n = int(args.local)
        except ValueError:
            raise SystemExit(f"ephemyarn: --local expects a node count here, got {args.local!r}") from None
        return cluster.local_allocation(n, args.local_slots), True
    if args.hostfile:
        return parse_hostfile(Path(args.hostfile).read_text()), False
    return read_env_allocation(os.environ, args.from_env, cfg), False


def _handle(args, cfg):
    return cluster.load_handle(cfg, state=args.state, job_id=args.job_id)


def _jobspec(path, handle, output):
    out = str(Path(output).resolve()) if output else None
    spec = JobSpec.loads(Path(path).read_text(), handle.cfg, output_dir=out)
    plan = handle.plan
    # relative paths inside a jobspec live under the cluster's shared dirs
    if spec.output_dir and not os.path.isabs(spec.output_dir):
        spec.output_dir = str(plan.output / spec.output_dir)
    if spec.input_dir and not os.path.isabs(spec.input_dir):
        spec.input_dir = str(plan.input / spec.input_dir)
    return spec


def _print_teardown(rep):
    if rep.noop:
        print("cluster already torn down")
        return
    print(f"teardown {'ok' if rep.ok else 'INCOMPLETE'} in {rep.teardown_ms} ms")
    for host in rep.unreachable:
        print(f"  unreachable: {host}")
    for s in rep.survivors:
        print(f"  surviving process: {s}")
    for p in rep.problems:
        print(f"  problem: {p}")


def _run_job(handle, args):
    spec = _jobspec(args.job, handle, args.output)
    res = cluster.run(handle, spec, timeout=args.timeout)
    print(f"{res.app_id} {res.status['state']}")
    if res.status.get("diagnostics"):
        print(f"  diagnostics: {res.status['diagnostics']}")
    print(f"  output: {spec.output_dir}")
    print(f"  logs: {res.logs_dir}")
    return res.exit_code


def cmd_provision(args, cfg):
    alloc, local = _allocation(args, cfg)
    handle = cluster.provision(alloc, cfg, job_id=args.job_id, local=local)
    layout = handle.layout
    print(f"cluster {handle.job_id} ready in {handle.state['provision_ms']} ms")
    print(f"  resource manager: {layout.rm_host} ({handle.rm_addr})")
    print(f"  history server:   {layout.history_host} ({handle.history_addr})")
    print(f"  workers:          {' '.join(layout.worker_hosts)}")
    print(f"  state:            {handle.path}")
    return 0


def cmd_run(args, cfg):
    return _run_job(_handle(args, cfg), args)


def cmd_teardown(args, cfg):
    rep = cluster.teardown(_handle(args, cfg))
    _print_teardown(rep)
    return rep.exit_code


def cmd_history(args, cfg):
    store = HistoryStore(_handle(args, cfg).history_file)
    if args.app_id:
        print(json.dumps(store.query(args.app_id).to_dict(), indent=2, sort_keys=True))
        return 0
    for rec in store.records():
        print(f"{rec.app_id}  {rec.state:<8}  {rec.name}  containers={len(rec.container_history)}"
              + (f"  {rec.diagnostics}" if rec.diagnostics else ""))
    return 0


def cmd_wrap(args, cfg):
    alloc, local = _allocation(args, cfg)
    handle = cluster.provision(alloc, cfg, job_id=args.job_id, local=local)
    print(f"cluster {handle.job_id} ready in {handle.state['provision_ms']} ms")
    code = 1
    try:
        code = _run_job(handle, args)
    finally:
        rep = cluster.teardown(handle)
        _print_teardown(rep)
    return code or rep.exit_code


def cmd_bench(args, cfg):
    from .bench import harness

    rows = args.rows if args.rows is not None else (0 if args.mode == "overhead" else 1_000_000)
    if args.mode == "terasort" and not args.input:
        raise MissingInput("terasort needs teragen data: run 'bench teragen' and pass its data directory as --input")
    if args.local is not None:
        plan = harness.local_plan(harness.parse_node_counts(args.local), rows, args.local_slots)
        allocate = None
    else:
        full, _ = _allocation(args, cfg)
        counts = harness.parse_node_counts(args.nodes) if args.nodes else [len(full.hosts)]
        if max(counts) > len(full.hosts):
            raise SystemExit(f"ephemyarn: allocation has only {len(full.hosts)} hosts")
        plan = [harness.PlanEntry(n, NodeAllocation(full.hosts[:n]).total_cores, rows) for n in counts]

        def allocate(entry):
            return NodeAllocation(full.hosts[: entry.nodes]), False

    report_dir = args.output or f"bench-{args.mode}-{time.strftime('%Y%m%d-%H%M%S')}"
    report = harness.scaling_run(
        plan, args.mode, cfg, report_dir,
        mappers=args.mappers, reducers=args.reducers,
        map_ratio=args.map_ratio, reduce_ratio=args.reduce_ratio,
        seed=args.seed, input_dir=args.input, repeat=args.repeat,
        keep_data=args.keep_data or args.mode == "teragen",
        timeout=args.timeout, allocate=allocate,
    )
    print(f"{'run':<7}{'phase':<17}{'nodes':>6}{'cores':>6}{'maps':>6}{'reds':>6}{'rows':>10}{'wall_ms':>9}  ok")
    for t in report.timings:
        print(f"{t.run_id:<7}{t.phase:<17}{t.nodes:>6}{t.cores:>6}{t.mappers:>6}{t.reducers:>6}"
              f"{t.rows:>10}{t.wall_ms:>9}  {'yes' if t.ok else 'NO'}")
    for d in report.data_dirs:
        print(f"data: {d}")
    print(f"report: {report.csv_path}, {report.summary_path}, {report.plot_path}")
    return 0 if report.ok else 1


COMMANDS = {
    "provision": cmd_provision,
    "run": cmd_run,
    "teardown": cmd_teardown,
    "history": cmd_history,
    "wrap": cmd_wrap,
    "bench": cmd_bench,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "sweep":
        return cluster.sweep_main(args.rest)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except EphemyarnError as exc:
        print(f"ephemyarn: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except (OSError, TimeoutError) as exc:
        print(f"ephemyarn: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
