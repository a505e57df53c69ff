from ..config import Config, ResourceProfile
from .history import ApplicationRecord, HistoryStore, query_history, record_history
from .manager import ResourceManager, check_event_log
from .scheduler import Container, ContainerState, NodeState, PendingRequest, normalize_request, schedule

__all__ = [
    "ApplicationRecord",
    "Config",
    "Container",
    "ContainerState",
    "HistoryStore",
    "NodeState",
    "PendingRequest",
    "ResourceManager",
    "ResourceProfile",
    "check_event_log",
    "normalize_request",
    "query_history",
    "record_history",
    "schedule",
]
