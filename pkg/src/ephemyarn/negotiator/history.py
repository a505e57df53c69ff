"""Job history: application records persisted as newline-delimited JSON.

The file lives on shared storage, so records stay readable after the
application master exits and after the cluster is torn down.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import NotFound

TERMINAL_APP_STATES = ("finished", "failed")


@dataclass
class ApplicationRecord:
    app_id: str
    name: str
    am_container: str = ""
    state: str = "submitted"
    submit_time: float = 0.0
    finish_time: float | None = None
    container_history: list = field(default_factory=list)
    diagnostics: str = ""
    counters: dict = field(default_factory=dict)
    phase_timings: dict = field(default_factory=dict)

    @property
    def terminal(self):
        return self.state in TERMINAL_APP_STATES

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


class HistoryStore:
    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def record(self, app):
        if not app.terminal:
            raise ValueError(f"{app.app_id} is not terminal ({app.state})")
        line = json.dumps(app.to_dict(), sort_keys=True) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def records(self):
        if not self.path.exists():
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(ApplicationRecord.from_dict(json.loads(line)))
        return out

    def query(self, app_id):
        found = None
        for rec in self.records():
            if rec.app_id == app_id:
                found = rec
        if found is None:
            raise NotFound(f"no history for {app_id}")
        return found


def record_history(path, app):
    HistoryStore(path).record(app)


def query_history(path, app_id):
    return HistoryStore(path).query(app_id)
