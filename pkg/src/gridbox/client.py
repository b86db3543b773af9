"""Workstation-side client for a grid node.

Wraps the framed protocol in typed calls and raises the same exception
types the node reports as error codes.  When constructed with a
:class:`~gridbox.config.SiteKey`, ``add_bytes`` anonymizes files *before*
they leave the workstation, so identifying fields never cross the wire even
inside ADD requests; nodes re-run the transform as a guard, which is a
no-op on anonymized input.
"""

from __future__ import annotations

from hashlib import sha256
from pathlib import Path

from gridbox.anonymize import anonymize_for_site
from gridbox.config import SiteKey, parse_address
from gridbox.errors import CorruptBlob, PeerUnreachable, ProtocolError, error_from_code
from gridbox.ids import IdMinter
from gridbox.mgi import parse_mgi, write_mgi
from gridbox.resultset import ResultSet
from gridbox.wire import request


class NodeClient:
    def __init__(self, address: str | tuple[str, int], token: str = "",
                 site_key: SiteKey | None = None, timeout: float = 30.0):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.token = token
        self.site_key = site_key
        self.timeout = timeout

    def _call(self, op: str, params: dict, binary: bytes = b"",
              timeout: float | None = None) -> tuple[dict, list, bytes]:
        try:
            response, resp_binary = request(
                self.address, op, params, token=self.token, binary=binary,
                timeout=self.timeout if timeout is None else timeout)
        except (OSError, ProtocolError) as e:
            raise PeerUnreachable(f"node at {self.address}: {e}") from e
        if response["status"] == "error":
            raise error_from_code(response["error_code"],
                                  response["result"].get("message", ""))
        return response["result"], response.get("warnings", []), resp_binary

    # --- services ---------------------------------------------------------------

    def auth(self, user: str, credential: str) -> str:
        result, _, _ = self._call("AUTH", {"user": user, "credential": credential})
        self.token = result["token"]
        return self.token

    def add_bytes(self, data: bytes) -> dict:
        if self.site_key is not None:
            minter = IdMinter(self.site_key.site, self.site_key.secret)
            data = write_mgi(anonymize_for_site(parse_mgi(data), minter))
        result, _, _ = self._call("ADD", {}, binary=data)
        return result

    def add_file(self, path: str | Path) -> dict:
        return self.add_bytes(Path(path).read_bytes())

    def retrieve(self, ident: str, timeout: float | None = None) -> bytes:
        result, _, data = self._call("RETRIEVE", {"id": ident},
                                     timeout=90.0 if timeout is None else timeout)
        if sha256(data).hexdigest() != result["sha256"]:
            raise CorruptBlob("retrieved bytes do not match the reported digest")
        return data

    def query_xml(self, text: str) -> tuple[bytes, list]:
        result, warnings, _ = self._call("QUERY", {"text": text})
        return result["xml"].encode("utf-8"), warnings

    def query(self, text: str) -> tuple[ResultSet, list]:
        xml, warnings = self.query_xml(text)
        return ResultSet.from_xml(xml), warnings

    def add_algorithm(self, name: str, source: str) -> tuple[dict, list]:
        result, warnings, _ = self._call("ADD_ALG", {"name": name, "source": source})
        return result, warnings

    def exec_algorithm(self, name: str, selector: str,
                       version: int | None = None) -> tuple[dict, list]:
        params = {"name": name, "selector": selector}
        if version is not None:
            params["version"] = version
        result, warnings, _ = self._call("EXEC_ALG", params)
        return result, warnings

    def stats(self) -> dict:
        result, _, _ = self._call("STATS", {})
        return result
