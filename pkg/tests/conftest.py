import pytest

from ephemyarn.config import Config


@pytest.fixture
def fast_cfg(tmp_path):
    """Config with short timers and private roots, for real-process tests."""
    return Config(
        local_root=str(tmp_path / "local"),
        shared_root=str(tmp_path / "shared"),
        heartbeat_interval_ms=100,
        node_timeout_ms=1500,
        ready_timeout_ms=20000,
        kill_grace_ms=1000,
    )


ACCEPTANCE = []  # (criterion, passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
