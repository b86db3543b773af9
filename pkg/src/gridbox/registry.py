"""The VO registry: the central node every site registers with.

It answers four framed-protocol ops:

* ``NODE_REG``    — register/refresh a site node; returns the membership
                    list plus the VO key (shared secret for token signing
                    and peer authentication).
* ``NODE_LIST``   — current membership snapshot.
* ``USER_VERIFY`` — check a clinician credential (salted digests,
                    constant-time compare).
* ``USER_ADD``    — create/replace a user entry; gated by the admin token.

State is an append-only log (``registry.log``) replayed at startup, so a
restarted registry remembers the same VO key, membership, and users.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from gridbox.config import RegistryConfig
from gridbox.errors import (
    AuthFailed,
    DuplicateSiteDifferentIdentity,
    GridError,
    ProtocolError,
    RegistryUnreachable,
    StorageError,
    error_from_code,
)
from gridbox.ids import valid_site_code
from gridbox.wire import FramedServer, error_response, ok_response, request

_USER_RE = re.compile(r"^[a-z0-9][a-z0-9_.\-]*$")


def credential_digest(salt: str, credential: str) -> str:
    return hashlib.sha256((salt + ":" + credential).encode("utf-8")).hexdigest()


@dataclass
class NodeDescriptor:
    site: str
    address: str
    identity: str
    registered_at: int

    def to_json(self) -> dict:
        return {"site": self.site, "address": self.address,
                "identity": self.identity, "registered_at": self.registered_at}

    @classmethod
    def from_json(cls, d: dict) -> "NodeDescriptor":
        return cls(d["site"], d["address"], d["identity"], d["registered_at"])


@dataclass
class UserEntry:
    user: str
    salt: str
    digest: str
    home_site: str = ""
    enabled: bool = True

    def to_json(self) -> dict:
        return {"user": self.user, "salt": self.salt, "digest": self.digest,
                "home_site": self.home_site, "enabled": self.enabled}

    @classmethod
    def from_json(cls, d: dict) -> "UserEntry":
        return cls(d["user"], d["salt"], d["digest"], d["home_site"], d["enabled"])


class VoRegistry:
    def __init__(self, config: RegistryConfig):
        self.config = config
        self._lock = threading.RLock()
        self._nodes: dict[str, NodeDescriptor] = {}
        self._users: dict[str, UserEntry] = {}
        self.vo_key: str = ""
        self.admin_token: str = ""
        self._log_path = config.data_dir / "registry.log"
        self._server: FramedServer | None = None
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self._replay()
        if not self.vo_key:
            self.vo_key = secrets.token_hex(32)
            self._append(f"VOKEY {self.vo_key}")
        if not self.admin_token:
            self.admin_token = secrets.token_hex(16)
            self._append(f"ADMIN {self.admin_token}")
        # convenience copy so harnesses can bootstrap users
        (config.data_dir / "admin_token.txt").write_text(self.admin_token + "\n")

    # --- persistence -------------------------------------------------------------

    def _replay(self) -> None:
        if not self._log_path.exists():
            return
        with self._log_path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    verb, payload = line.split(" ", 1)
                    if verb == "VOKEY":
                        self.vo_key = payload
                    elif verb == "ADMIN":
                        self.admin_token = payload
                    elif verb == "NODE":
                        desc = NodeDescriptor.from_json(json.loads(payload))
                        self._nodes[desc.site] = desc
                    elif verb == "USER":
                        entry = UserEntry.from_json(json.loads(payload))
                        self._users[entry.user] = entry
                    else:
                        raise ValueError(f"unknown verb {verb!r}")
                except Exception as e:
                    raise StorageError(
                        f"corrupt registry log at line {lineno}: {e}") from e

    def _append(self, line: str) -> None:
        with self._log_path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()

    # --- service -----------------------------------------------------------------

    def start(self) -> None:
        host, port = self.config.listen
        self._server = FramedServer(host, port, self._handle)
        self._server.start()

    def stop(self) -> None:
        if self._server is not None:
            self._server.stop()

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("registry not started")
        return self._server.address

    def membership(self) -> list[dict]:
        with self._lock:
            return [{"site": d.site, "address": d.address}
                    for d in sorted(self._nodes.values(), key=lambda d: d.site)]

    def register_node(self, site: str, address: str, identity: str) -> list[dict]:
        if not valid_site_code(site):
            raise ProtocolError(f"bad site code {site!r}")
        if not identity:
            raise ProtocolError("missing identity material")
        with self._lock:
            existing = self._nodes.get(site)
            if existing is not None and existing.identity != identity:
                raise DuplicateSiteDifferentIdentity(
                    f"site {site} is already registered with different identity")
            if existing is None:
                desc = NodeDescriptor(site, address, identity, int(time.time()))
            else:
                desc = NodeDescriptor(site, address, identity, existing.registered_at)
            if existing != desc:
                self._nodes[site] = desc
                self._append(f"NODE {json.dumps(desc.to_json(), sort_keys=True)}")
            return self.membership()

    def add_user(self, user: str, credential: str, home_site: str = "",
                 enabled: bool = True) -> None:
        if not _USER_RE.match(user):
            raise ProtocolError(f"bad user id {user!r}")
        salt = secrets.token_hex(8)
        entry = UserEntry(user, salt, credential_digest(salt, credential),
                          home_site, enabled)
        with self._lock:
            self._users[user] = entry
            self._append(f"USER {json.dumps(entry.to_json(), sort_keys=True)}")

    def verify_user(self, user: str, credential: str) -> bool:
        with self._lock:
            entry = self._users.get(user)
        if entry is None:
            # burn the same work as a real comparison
            hmac.compare_digest(credential_digest("x", credential),
                                credential_digest("y", credential))
            return False
        ok = hmac.compare_digest(entry.digest,
                                 credential_digest(entry.salt, credential))
        return ok and entry.enabled

    # --- wire handler ---------------------------------------------------------------

    def _handle(self, envelope: dict, binary: bytes) -> tuple[dict, bytes]:
        req_id = str(envelope.get("id", ""))
        op = envelope.get("op")
        params = envelope.get("params") or {}
        try:
            if op == "NODE_REG":
                members = self.register_node(str(params.get("site", "")),
                                             str(params.get("address", "")),
                                             str(params.get("identity", "")))
                return ok_response(req_id, {"membership": members,
                                            "vo_key": self.vo_key}), b""
            if op == "NODE_LIST":
                return ok_response(req_id, {"membership": self.membership()}), b""
            if op == "USER_VERIFY":
                ok = self.verify_user(str(params.get("user", "")),
                                      str(params.get("credential", "")))
                return ok_response(req_id, {"ok": ok}), b""
            if op == "USER_ADD":
                supplied = str(params.get("admin_token", ""))
                if not hmac.compare_digest(supplied, self.admin_token):
                    raise AuthFailed("bad admin token")
                self.add_user(str(params.get("user", "")),
                              str(params.get("credential", "")),
                              str(params.get("home_site", "")),
                              bool(params.get("enabled", True)))
                return ok_response(req_id, {"ok": True}), b""
            return error_response(req_id, "ProtocolError",
                                  f"unknown registry op {op!r}"), b""
        except GridError as e:
            return error_response(req_id, e.code, e.message), b""
        except Exception as e:  # defensive: a handler must answer, not raise
            return error_response(req_id, "Internal", f"{type(e).__name__}: {e}"), b""


class RegistryClient:
    """Thin wire client for registry ops; all failures to reach the registry
    surface as RegistryUnreachable."""

    def __init__(self, address: tuple[str, int], timeout: float = 5.0):
        self.address = address
        self.timeout = timeout

    def _call(self, op: str, params: dict) -> dict:
        try:
            response, _ = request(self.address, op, params, timeout=self.timeout)
        except (OSError, ProtocolError) as e:
            raise RegistryUnreachable(f"registry at {self.address}: {e}") from e
        if response["status"] == "error":
            raise error_from_code(response["error_code"],
                                  response["result"].get("message", ""))
        return response["result"]

    def register_node(self, site: str, address: str,
                      identity: str) -> tuple[list[dict], str]:
        result = self._call("NODE_REG", {"site": site, "address": address,
                                         "identity": identity})
        return result["membership"], result["vo_key"]

    def list_nodes(self) -> list[dict]:
        return self._call("NODE_LIST", {})["membership"]

    def verify_user(self, user: str, credential: str) -> bool:
        return bool(self._call("USER_VERIFY",
                               {"user": user, "credential": credential})["ok"])

    def add_user(self, admin_token: str, user: str, credential: str,
                 home_site: str = "", enabled: bool = True) -> None:
        self._call("USER_ADD", {"admin_token": admin_token, "user": user,
                                "credential": credential, "home_site": home_site,
                                "enabled": enabled})
