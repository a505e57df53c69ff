"""Single entry point for everything the wrapper starts on cluster hosts:
``python -m ephemyarn._daemon {rm,history,agent,am,task,sweep} ...``."""

import sys


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        print("usage: python -m ephemyarn._daemon {rm,history,agent,am,task,sweep} ...", file=sys.stderr)
        return 2
    role, rest = argv[0], argv[1:]
    if role == "rm":
        from .negotiator.server import rm_main
        return rm_main(rest)
    if role == "history":
        from .negotiator.server import history_main
        return history_main(rest)
    if role == "agent":
        from .node_agent import main as agent_main
        return agent_main(rest)
    if role == "am":
        from .app_master import main as am_main
        return am_main(rest)
    if role == "task":
        from .bench.tasks import main as task_main
        return task_main(rest)
    if role == "sweep":
        from .cluster import sweep_main
        return sweep_main(rest)
    print(f"unknown role {role!r}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
