"""Framed TCP wire protocol shared by nodes, the registry, and clients.

One frame = 4-byte big-endian length, then that many bytes of UTF-8 JSON
(the envelope), then exactly ``envelope["binary_len"]`` raw bytes.  Requests
carry ``{id, op, token, params, binary_len}``; responses carry
``{id, status, error_code, result, warnings, binary_len}`` with status
``ok`` or ``error``.  JSON is canonical (sorted keys, no spaces) so envelope
bytes are deterministic.

The module also hosts two observation points used by the test harness and
the ``stats`` service:

* a process-global *capture tap* list — every frame sent by this process is
  offered to each tap as raw bytes (privacy scans hook in here);
* :class:`TrafficAccountant` — per-op frame/byte counters that servers feed
  from their receive/replay loop (the data-locality ledger).

Transport security is a seam: ``TRANSPORT.wrap(sock)`` is applied to every
accepted and dialed socket, and the default implementation is a null cipher.
"""

from __future__ import annotations

import json
import secrets
import socket
import struct
import threading
from dataclasses import dataclass, field

from gridbox.errors import ProtocolError

MAX_ENVELOPE = 8 * 1024 * 1024
MAX_BINARY = 64 * 1024 * 1024

CLIENT_OPS = ("AUTH", "ADD", "RETRIEVE", "QUERY", "ADD_ALG", "EXEC_ALG", "STATS")
PEER_OPS = ("RQUERY", "PEER_FETCH")
REGISTRY_OPS = ("NODE_REG", "NODE_LIST", "USER_VERIFY", "USER_ADD")


class NullTransport:
    """Default (null-cipher) transport security: sockets pass through."""

    def wrap(self, sock: socket.socket, server_side: bool = False) -> socket.socket:
        return sock


TRANSPORT = NullTransport()

_capture_taps: list = []
_tap_lock = threading.Lock()


def add_capture_tap(fn) -> None:
    """Register ``fn(frame_bytes)`` to observe every frame this process sends."""
    with _tap_lock:
        _capture_taps.append(fn)


def remove_capture_tap(fn) -> None:
    with _tap_lock:
        _capture_taps.remove(fn)


def _offer_to_taps(data: bytes) -> None:
    with _tap_lock:
        taps = list(_capture_taps)
    for fn in taps:
        fn(data)


class TrafficAccountant:
    """Per-op counters: frames seen, envelope bytes, binary payload bytes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._per_op: dict[str, dict[str, int]] = {}

    def record(self, op: str, json_bytes: int, binary_bytes: int) -> None:
        with self._lock:
            row = self._per_op.setdefault(
                op, {"frames": 0, "json_bytes": 0, "binary_bytes": 0})
            row["frames"] += 1
            row["json_bytes"] += json_bytes
            row["binary_bytes"] += binary_bytes

    def snapshot(self) -> dict:
        with self._lock:
            return {op: dict(row) for op, row in sorted(self._per_op.items())}

    def binary_bytes(self, op: str) -> int:
        with self._lock:
            return self._per_op.get(op, {}).get("binary_bytes", 0)


def encode_envelope(envelope: dict) -> bytes:
    return json.dumps(envelope, sort_keys=True, separators=(",", ":")).encode("utf-8")


def send_frame(sock: socket.socket, envelope: dict, binary: bytes = b"") -> None:
    envelope = dict(envelope)
    envelope["binary_len"] = len(binary)
    payload = encode_envelope(envelope)
    if len(payload) > MAX_ENVELOPE:
        raise ProtocolError(f"envelope too large ({len(payload)} bytes)")
    if len(binary) > MAX_BINARY:
        raise ProtocolError(f"binary section too large ({len(binary)} bytes)")
    frame = struct.pack(">I", len(payload)) + payload + binary
    _offer_to_taps(frame)
    sock.sendall(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> tuple[dict, bytes] | None:
    """Read one frame; None on clean EOF at a frame boundary."""
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        if not chunk:
            if header:
                raise ProtocolError("connection closed mid-frame")
            return None
        header += chunk
    (length,) = struct.unpack(">I", header)
    if length > MAX_ENVELOPE:
        raise ProtocolError(f"envelope too large ({length} bytes)")
    try:
        envelope = json.loads(_recv_exact(sock, length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad envelope: {e}") from e
    if not isinstance(envelope, dict):
        raise ProtocolError("envelope is not an object")
    binary_len = envelope.get("binary_len", 0)
    if not isinstance(binary_len, int) or binary_len < 0 or binary_len > MAX_BINARY:
        raise ProtocolError(f"bad binary_len {binary_len!r}")
    binary = _recv_exact(sock, binary_len) if binary_len else b""
    return envelope, binary


# --- request/response helpers ---------------------------------------------------

def request(address: tuple[str, int], op: str, params: dict, *,
            token: str = "", binary: bytes = b"",
            timeout: float = 10.0) -> tuple[dict, bytes]:
    """One request/response exchange on a fresh connection.

    Returns the raw response envelope and its binary section; error-status
    envelopes are returned, not raised — callers map error codes to typed
    exceptions at their own layer.
    """
    req_id = secrets.token_hex(8)
    envelope = {"id": req_id, "op": op, "token": token, "params": params}
    with socket.create_connection(address, timeout=timeout) as raw:
        sock = TRANSPORT.wrap(raw)
        sock.settimeout(timeout)
        send_frame(sock, envelope, binary)
        got = recv_frame(sock)
    if got is None:
        raise ProtocolError("peer closed the connection without answering")
    response, resp_binary = got
    if response.get("id") != req_id:
        raise ProtocolError("response id does not match request id")
    if response.get("status") not in ("ok", "error"):
        raise ProtocolError(f"bad response status {response.get('status')!r}")
    return response, resp_binary


def ok_response(req_id: str, result: dict, warnings: list | None = None) -> dict:
    return {"id": req_id, "status": "ok", "error_code": "",
            "result": result, "warnings": warnings or []}


def error_response(req_id: str, code: str, message: str) -> dict:
    return {"id": req_id, "status": "error", "error_code": code,
            "result": {"message": message}, "warnings": []}


# --- server ----------------------------------------------------------------------

@dataclass
class FramedServer:
    """Thread-per-connection TCP server speaking the framed protocol.

    ``handler(envelope, binary) -> (response_envelope, response_binary)`` is
    called once per request; it must not raise.  The accountant is fed one
    record per request (op, request json+binary) and one per response
    (op, response json+binary) so binary payloads are visible in both
    directions.
    """

    host: str
    port: int
    handler: object
    accountant: TrafficAccountant = field(default_factory=TrafficAccountant)

    def __post_init__(self):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((self.host, self.port))
        self._sock.listen(64)
        self.address = self._sock.getsockname()[:2]
        self._stopping = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._accept_loop,
                                        name=f"server-{self.address[1]}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stopping.set()
        # shutdown() wakes a thread blocked in accept(); close() alone may not
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn = TRANSPORT.wrap(conn, server_side=True)
            threading.Thread(target=self._serve_connection, args=(conn,),
                             daemon=True).start()

    def _serve_connection(self, conn: socket.socket) -> None:
        with conn:
            while not self._stopping.is_set():
                try:
                    got = recv_frame(conn)
                except (ProtocolError, OSError):
                    return
                if got is None:
                    return
                envelope, binary = got
                op = str(envelope.get("op", "?"))
                self.accountant.record(op, len(encode_envelope(envelope)), len(binary))
                response, resp_binary = self.handler(envelope, binary)
                self.accountant.record(op, len(encode_envelope(response)),
                                       len(resp_binary))
                try:
                    send_frame(conn, response, resp_binary)
                except (ProtocolError, OSError):
                    return
