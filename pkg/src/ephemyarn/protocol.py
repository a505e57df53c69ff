"""Newline-delimited JSON messages over TCP.

Every message is one JSON object on one line with a ``type`` field. A
connection carries any number of request/reply pairs. Failures travel back as
``{"type": "Error", "error": <code>, "message": ...}`` and are re-raised on
the client as the matching exception class. Unknown fields are ignored.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading

from .errors import EphemyarnError, ProtocolError, from_code

log = logging.getLogger(__name__)

MESSAGE_TYPES = frozenset(
    {
        "RegisterNode",
        "RegisterAck",
        "Heartbeat",
        "HeartbeatReply",
        "SubmitApplication",
        "ApplicationStatus",
        "AllocateRequest",
        "AllocateResponse",
        "ContainerStatus",
        "FinishApplication",
        "ClusterStatus",
        "QueryHistory",
        "HistoryRecord",
        "Shutdown",
        "Ack",
        "Error",
    }
)
MAX_LINE = 64 * 1024 * 1024


def encode(msg):
    if "type" not in msg:
        raise ProtocolError("message has no type")
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def decode(line):
    try:
        msg = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from None
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise ProtocolError("message is not an object with a string 'type'")
    return msg


def error_reply(exc):
    code = exc.code if isinstance(exc, EphemyarnError) else "InternalError"
    return {"type": "Error", "error": code, "message": str(exc)}


def parse_addr(addr):
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                line = self.rfile.readline(MAX_LINE)
            except OSError:
                return
            if not line:
                return
            if not line.strip():
                continue
            try:
                reply = self.server.dispatch(decode(line))
            except EphemyarnError as exc:
                reply = error_reply(exc)
            except Exception as exc:  # keep the daemon alive, report the fault
                log.exception("error handling message")
                reply = error_reply(exc)
            try:
                self.wfile.write(encode(reply))
                self.wfile.flush()
            except OSError:
                return


class MessageServer(socketserver.ThreadingTCPServer):
    """Threaded line-oriented server; subclasses implement :meth:`dispatch`."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bind=("0.0.0.0", 0)):
        super().__init__(bind, _Handler)

    @property
    def port(self):
        return self.server_address[1]

    def dispatch(self, msg):
        raise NotImplementedError

    def serve_in_thread(self):
        t = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        t.start()
        return t


class Client:
    """Blocking request/reply client; reconnects once if the connection drops."""

    def __init__(self, addr, timeout=10.0):
        self.host, self.port = parse_addr(addr) if isinstance(addr, str) else addr
        self.timeout = timeout
        self._sock = None
        self._file = None
        self._lock = threading.Lock()

    def _connect(self):
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self._sock = sock
        self._file = sock.makefile("rb")

    def close(self):
        with self._lock:
            self._close()

    def _close(self):
        for obj in (self._file, self._sock):
            if obj is not None:
                try:
                    obj.close()
                except OSError:
                    pass
        self._sock = self._file = None

    def _roundtrip(self, data):
        if self._sock is None:
            self._connect()
        self._sock.sendall(data)
        line = self._file.readline(MAX_LINE)
        if not line:
            raise ConnectionError("connection closed by peer")
        return decode(line)

    def request(self, msg):
        data = encode(msg)
        with self._lock:
            try:
                reply = self._roundtrip(data)
            except (OSError, ConnectionError):
                self._close()
                reply = self._roundtrip(data)
        if reply["type"] == "Error":
            raise from_code(reply.get("error", "Error"), reply.get("message", ""))
        return reply

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def request(addr, msg, timeout=10.0):
    with Client(addr, timeout=timeout) as c:
        return c.request(msg)


def reachable(addr, timeout=1.0):
    try:
        with socket.create_connection(parse_addr(addr), timeout=timeout):
            return True
    except OSError:
        return False
