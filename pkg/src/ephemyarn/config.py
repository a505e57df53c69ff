"""Cluster configuration.

Config files are flat ``key=value`` text. Keys mirror the Hadoop parameter
names operators already know (``yarn.nodemanager.resource.memory-mb`` and
friends); artifact-specific knobs live under the ``ephemyarn.`` prefix.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONFIG_ENV = "EPHEMYARN_CONFIG"


@dataclass(frozen=True, order=True)
class ResourceProfile:
    memory_mb: int = 0
    vcores: int = 0

    def __post_init__(self):
        if self.memory_mb < 0 or self.vcores < 0:
            raise ValueError(f"negative resource profile {self}")

    def __add__(self, other):
        return ResourceProfile(self.memory_mb + other.memory_mb, self.vcores + other.vcores)

    def __sub__(self, other):
        return ResourceProfile(self.memory_mb - other.memory_mb, self.vcores - other.vcores)

    def fits_within(self, other):
        return self.memory_mb <= other.memory_mb and self.vcores <= other.vcores

    def to_dict(self):
        return {"memory_mb": self.memory_mb, "vcores": self.vcores}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["memory_mb"]), int(d["vcores"]))


NULL_PROFILE = ResourceProfile(0, 0)


def parse_kv(text, source="<string>"):
    """Parse flat ``key=value`` text; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# file key -> (attribute, converter)
_KEYS = {
    "yarn.nodemanager.resource.memory-mb": ("node_memory_mb", int),
    "yarn.nodemanager.resource.cpu-vcores": ("node_vcores", int),
    "yarn.scheduler.minimum-allocation-mb": ("min_alloc_mb", int),
    "yarn.scheduler.minimum-allocation-vcores": ("min_alloc_vcores", int),
    "yarn.app.mapreduce.am.resource.mb": ("am_resource_mb", int),
    "mapreduce.map.memory.mb": ("map_memory_mb", int),
    "mapreduce.map.java.opts": ("map_heap_opt", str),
    "mapreduce.reduce.memory.mb": ("reduce_memory_mb", int),
    "ephemyarn.heartbeat-interval-ms": ("heartbeat_interval_ms", int),
    "ephemyarn.node-timeout-ms": ("node_timeout_ms", int),
    "ephemyarn.ready-timeout-ms": ("ready_timeout_ms", int),
    "ephemyarn.kill-grace-ms": ("kill_grace_ms", int),
    "ephemyarn.local-root": ("local_root", str),
    "ephemyarn.shared-root": ("shared_root", str),
    "ephemyarn.rm-port": ("rm_port", int),
    "ephemyarn.history-port": ("history_port", int),
    "ephemyarn.nm-base-port": ("nm_base_port", int),
    "ephemyarn.colocate-daemons": ("colocate_daemons", _bool),
    "ephemyarn.remote-exec": ("remote_exec", str),
    "ephemyarn.max-attempts": ("max_attempts", int),
    "ephemyarn.sort-budget-mb": ("sort_budget_mb", int),
    "ephemyarn.lsf-hosts-var": ("lsf_hosts_var", str),
    "ephemyarn.slurm-nodelist-var": ("slurm_nodelist_var", str),
    "ephemyarn.slurm-tasks-var": ("slurm_tasks_var", str),
}
_ATTR_TO_KEY = {attr: key for key, (attr, _) in _KEYS.items()}


@dataclass(frozen=True)
class Config:
    node_memory_mb: int = 52 * 1024
    node_vcores: int = 16
    min_alloc_mb: int = 2048
    min_alloc_vcores: int = 1
    am_resource_mb: int = 8192
    map_memory_mb: int = 4096
    map_heap_opt: str = "-Xmx3072m"
    # 0 means "same as map_memory_mb"
    reduce_memory_mb: int = 0
    heartbeat_interval_ms: int = 250
    node_timeout_ms: int = 5000
    ready_timeout_ms: int = 30000
    kill_grace_ms: int = 5000
    local_root: str = "/tmp/ephemyarn-local"
    shared_root: str = "/tmp/ephemyarn-shared"
    rm_port: int = 20050
    history_port: int = 20060
    nm_base_port: int = 20100
    colocate_daemons: bool = False
    remote_exec: str = "ssh -o BatchMode=yes {host} {command}"
    max_attempts: int = 3
    sort_budget_mb: int = 256
    lsf_hosts_var: str = "LSB_HOSTS"
    slurm_nodelist_var: str = "SLURM_JOB_NODELIST"
    slurm_tasks_var: str = "SLURM_NTASKS_PER_NODE"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.validate()

    @property
    def node_capacity(self):
        return ResourceProfile(self.node_memory_mb, self.node_vcores)

    @property
    def effective_reduce_memory_mb(self):
        return self.reduce_memory_mb or self.map_memory_mb

    def validate(self):
        cap = self.node_memory_mb
        if self.min_alloc_mb <= 0 or self.min_alloc_vcores < 0:
            raise ConfigError("minimum allocation must be positive")
        if not self.min_alloc_mb <= self.am_resource_mb <= cap:
            raise ConfigError(
                f"need min_alloc_mb <= am_resource_mb <= node memory "
                f"({self.min_alloc_mb}, {self.am_resource_mb}, {cap})"
            )
        if not self.min_alloc_mb <= self.map_memory_mb <= cap:
            raise ConfigError(
                f"need min_alloc_mb <= map_memory_mb <= node memory "
                f"({self.min_alloc_mb}, {self.map_memory_mb}, {cap})"
            )
        if self.node_timeout_ms <= 3 * self.heartbeat_interval_ms:
            raise ConfigError("node_timeout_ms must exceed 3 x heartbeat_interval_ms")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_mapping(self):
        """Serialize back to file keys (string values)."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            value = getattr(self, f.name)
            out[_ATTR_TO_KEY[f.name]] = str(value).lower() if isinstance(value, bool) else str(value)
        out.update(self.extra)
        return out

    def dumps(self):
        return "".join(f"{k}={v}\n" for k, v in self.to_mapping().items())

    @classmethod
    def from_mapping(cls, mapping):
        kwargs, extra = {}, {}
        for key, value in mapping.items():
            if key in _KEYS:
                attr, conv = _KEYS[key]
                try:
                    kwargs[attr] = conv(value)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {value!r}") from exc
            else:
                extra[key] = value
        return cls(extra=extra, **kwargs)


def load_config(path=None, overrides=None):
    """Load a config file (or ``$EPHEMYARN_CONFIG``); missing keys take defaults.

    ``overrides`` is a mapping of file keys applied on top of the file.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    mapping = {}
    if path is not None:
        p = Path(path)
        mapping = parse_kv(p.read_text(), source=str(p))
    if overrides:
        mapping.update(overrides)
    return Config.from_mapping(mapping)
