"""Exception types shared across the cluster components.

Every error carries a stable ``code`` so it can cross the wire protocol and be
re-raised on the client side with the same class.
"""


class EphemyarnError(Exception):
    code = "Error"


class EmptyAllocation(EphemyarnError):
    code = "EmptyAllocation"


class MalformedEntry(EphemyarnError):
    code = "MalformedEntry"


class MissingEnv(EphemyarnError):
    code = "MissingEnv"


class InsufficientNodes(EphemyarnError):
    code = "InsufficientNodes"


class InvalidRoots(EphemyarnError):
    code = "InvalidRoots"


class ConfigError(EphemyarnError):
    code = "ConfigError"


class Unsatisfiable(EphemyarnError):
    code = "Unsatisfiable"


class UnknownNode(EphemyarnError):
    code = "UnknownNode"


class AlreadyRegistered(EphemyarnError):
    code = "AlreadyRegistered"


class ReRegisterRequired(EphemyarnError):
    code = "ReRegisterRequired"


class NoWorkers(EphemyarnError):
    code = "NoWorkers"


class NotFound(EphemyarnError):
    code = "NotFound"


class OutputExists(EphemyarnError):
    code = "OutputExists"


class MissingInput(EphemyarnError):
    code = "MissingInput"


class MalformedRecord(EphemyarnError):
    code = "MalformedRecord"

    def __init__(self, path, offset, message=None):
        self.path = str(path)
        self.offset = offset
        super().__init__(message or f"{self.path}: malformed record at byte offset {offset}")


class ClusterUnavailable(EphemyarnError):
    code = "ClusterUnavailable"


class ProvisionError(EphemyarnError):
    code = "ProvisionError"


class ProtocolError(EphemyarnError):
    code = "ProtocolError"


class DegeneratePartition(UserWarning):
    """Fewer distinct sampled keys than reducers; some partitions will be empty."""


_BY_CODE = {
    cls.code: cls
    for cls in list(EphemyarnError.__subclasses__()) + [EphemyarnError]
    if cls is not MalformedRecord
}


def from_code(code, message):
    """Rebuild an exception received over the wire."""
    cls = _BY_CODE.get(code)
    if cls is None:
        exc = EphemyarnError(message)
        exc.code = code  # keep the remote code visible
        return exc
    return cls(message)
