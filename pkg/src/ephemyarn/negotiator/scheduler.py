"""Resource arithmetic, container/node state and the FIFO first-fit scheduler."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..config import ResourceProfile
from ..errors import Unsatisfiable


def normalize_request(requested, cfg):
    """Round memory up to a positive multiple of the minimum allocation and
    raise vcores to the minimum; reject anything no single node can hold."""
    if requested.memory_mb < 0:
        raise ValueError("negative memory request")
    step = cfg.min_alloc_mb
    units = max(1, -(-requested.memory_mb // step))
    profile = ResourceProfile(units * step, max(requested.vcores, cfg.min_alloc_vcores))
    cap = cfg.node_capacity
    if profile.memory_mb > cap.memory_mb:
        raise Unsatisfiable(
            f"request of {profile.memory_mb} MB exceeds node capacity {cap.memory_mb} MB"
        )
    if profile.vcores > cap.vcores:
        raise Unsatisfiable(f"request of {profile.vcores} vcores exceeds node capacity {cap.vcores}")
    return profile


class ContainerState(str, enum.Enum):
    REQUESTED = "requested"
    ALLOCATED = "allocated"
    LAUNCHING = "launching"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    KILLED = "killed"

    @property
    def terminal(self):
        return self in _TERMINAL


_TERMINAL = {ContainerState.COMPLETED, ContainerState.FAILED, ContainerState.KILLED}
_ORDER = [ContainerState.REQUESTED, ContainerState.ALLOCATED, ContainerState.LAUNCHING, ContainerState.RUNNING]


def valid_transition(old, new):
    # forward along the chain one step at a time, or to a terminal state from
    # any non-terminal state past "requested"
    if old in _TERMINAL:
        return False
    if new in _TERMINAL:
        return old is not ContainerState.REQUESTED
    return _ORDER.index(new) == _ORDER.index(old) + 1


@dataclass
class Container:
    id: str
    app_id: str
    node: str
    resource: ResourceProfile
    command: str = ""
    env: dict = field(default_factory=dict)
    state: ContainerState = ContainerState.ALLOCATED
    exit_code: int | None = None
    diagnostics: str = ""
    is_am: bool = False

    def transition(self, new, exit_code=None, diagnostics=None):
        new = ContainerState(new)
        if not valid_transition(self.state, new):
            raise ValueError(f"{self.id}: illegal transition {self.state.value} -> {new.value}")
        if new.terminal and exit_code is None:
            raise ValueError(f"{self.id}: terminal state {new.value} needs an exit code")
        self.state = new
        if new.terminal:
            self.exit_code = int(exit_code)
        if diagnostics:
            self.diagnostics = diagnostics

    def to_dict(self):
        return {
            "container_id": self.id,
            "app_id": self.app_id,
            "node": self.node,
            "resource": self.resource.to_dict(),
            "command": self.command,
            "env": dict(self.env),
            "state": self.state.value,
            "exit_code": self.exit_code,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=d["container_id"],
            app_id=d.get("app_id", ""),
            node=d.get("node", ""),
            resource=ResourceProfile.from_dict(d["resource"]),
            command=d.get("command", ""),
            env=dict(d.get("env") or {}),
            state=ContainerState(d.get("state", "allocated")),
            exit_code=d.get("exit_code"),
            diagnostics=d.get("diagnostics", ""),
        )


@dataclass
class NodeState:
    host: str
    capacity: ResourceProfile
    used: ResourceProfile = ResourceProfile(0, 0)
    live_containers: set = field(default_factory=set)
    last_heartbeat: float = 0.0
    status: str = "alive"

    @property
    def free(self):
        return self.capacity - self.used


@dataclass
class PendingRequest:
    app_id: str
    profile: ResourceProfile
    remaining: int
    is_am: bool = False


def schedule(pending, nodes):
    """Strict FIFO, first-fit placement.

    ``pending`` is iterated in queue order; ``nodes`` in registration order.
    Each container goes to the first alive node with room in both memory and
    vcores. When the head request cannot place its next container, scheduling
    stops so later requests never overtake it. Inputs are not mutated.

    Returns a list of ``(request, hostname)`` placements.
    """
    free = [[n.host, n.free] for n in nodes if n.status == "alive"]
    placements = []
    for req in pending:
        for _ in range(req.remaining):
            for slot in free:
                if req.profile.fits_within(slot[1]):
                    slot[1] = slot[1] - req.profile
                    placements.append((req, slot[0]))
                    break
            else:
                return placements
    return placements
