"""The per-site grid node.

One :class:`GridNode` per site: it owns the site catalog, the blob store,
the pseudonym table, and a framed-protocol server exposing the six services
(authenticate, add, retrieve, query, add-algorithm, execute-algorithm) plus
the peer-facing ops RQUERY and PEER_FETCH and a STATS introspection op.

Federated queries follow the scatter-gather pipeline: parse, decompose
against the current VO membership, run the local part and all single-hop
remote parts concurrently, merge the XML result sets, and report unreachable
sites as warnings instead of failing the whole query.

Session tokens are self-certifying: ``user:issued:ttl:nonce:sig`` signed
with the VO key the registry hands out at node registration, so a token
minted by any node is honored VO-wide and every node can check expiry and
integrity without a session table.  Peer-to-peer requests are authenticated
by an HMAC over (site, op, request id) under the same key.
"""

from __future__ import annotations

import hmac
import secrets
import socket
import sys
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date
from hashlib import sha256

from gridbox import algorithms as alg
from gridbox.anonymize import PseudonymTable, anonymize_for_site, birth_year_of
from gridbox.blobstore import BlobStore
from gridbox.catalog import SiteCatalog
from gridbox.config import NodeConfig, parse_address
from gridbox.errors import (
    AlgorithmConflict,
    AuthFailed,
    ForeignSite,
    GridError,
    HopViolation,
    MalformedFile,
    MgiFormatError,
    NotFound,
    PeerUnreachable,
    ProtocolError,
    QuerySyntaxError,
    RegistryUnreachable,
    UnknownAlgorithm,
    UnknownPeer,
    error_from_code,
)
from gridbox.ids import GlobalId, IdMinter, looks_like_global_id, valid_site_code
from gridbox.mgi import MgiFile, parse_mgi, write_mgi
from gridbox.query import (
    FormalQuery,
    decompose,
    local_only_plan,
    lower_to_local_plan,
    parse_query,
    print_query,
)
from gridbox.records import (
    SEXES,
    AlgorithmRecord,
    DerivedRecord,
    ImageRecord,
    PatientRecord,
    SeriesRecord,
    StudyRecord,
)
from gridbox.registry import RegistryClient
from gridbox.resultset import ResultSet, merge
from gridbox.wire import (
    TRANSPORT,
    FramedServer,
    error_response,
    ok_response,
    recv_frame,
    send_frame,
)

_SHA_HEX = frozenset("0123456789abcdef")


# --- tokens and peer signatures ----------------------------------------------------

def sign_token(vo_key: bytes, user: str, issued: int, ttl: int, nonce: str) -> str:
    msg = f"token:{user}:{issued}:{ttl}:{nonce}".encode("utf-8")
    return hmac.new(vo_key, msg, sha256).hexdigest()


def mint_token(vo_key: bytes, user: str, ttl: int, now: int | None = None) -> str:
    issued = int(time.time()) if now is None else now
    nonce = secrets.token_hex(32)
    return f"{user}:{issued}:{ttl}:{nonce}:{sign_token(vo_key, user, issued, ttl, nonce)}"


def verify_token(vo_key: bytes, token: str, now: float | None = None) -> str:
    """Return the user id carried by a valid token; AuthFailed otherwise."""
    if not token:
        raise AuthFailed("missing session token")
    parts = token.split(":")
    if len(parts) != 5:
        raise AuthFailed("malformed session token")
    user, issued_s, ttl_s, nonce, sig = parts
    try:
        issued, ttl = int(issued_s), int(ttl_s)
    except ValueError:
        raise AuthFailed("malformed session token") from None
    if not hmac.compare_digest(sig, sign_token(vo_key, user, issued, ttl, nonce)):
        raise AuthFailed("forged or foreign session token")
    if (time.time() if now is None else now) > issued + ttl:
        raise AuthFailed("expired session token")
    return user


def peer_signature(vo_key: bytes, peer_site: str, op: str, req_id: str) -> str:
    msg = f"peer:{peer_site}:{op}:{req_id}".encode("utf-8")
    return hmac.new(vo_key, msg, sha256).hexdigest()


# --- the node ------------------------------------------------------------------------

@dataclass
class _Membership:
    members: dict  # site -> address string
    fetched_at: float


class GridNode:
    def __init__(self, config: NodeConfig):
        self.config = config
        self.site = config.site
        self.minter = IdMinter(config.site, config.secret)
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.catalog = SiteCatalog(config.site, config.data_dir)
        self.blobs = BlobStore(config.data_dir, self.minter)
        self.pseudonyms = PseudonymTable(config.data_dir / "pseudonyms.log")
        self.registry = RegistryClient(config.registry)
        self.vo_key: bytes = b""
        self._membership: _Membership | None = None
        self._pending_gossip: dict[str, dict[str, AlgorithmRecord]] = {}
        self._server: FramedServer | None = None
        self._poller = None
        self._stopping = None
        self._identity = self._load_identity()
        self._register_builtin()

    # --- lifecycle -------------------------------------------------------------

    def _load_identity(self) -> str:
        path = self.config.data_dir / "identity.txt"
        if path.exists():
            return path.read_text().strip()
        identity = secrets.token_hex(16)
        path.write_text(identity + "\n")
        return identity

    def _register_builtin(self) -> None:
        program = alg.builtin_density()
        if self.catalog.algorithm(program.name, program.version) is None:
            rec = AlgorithmRecord(
                id=self.minter.mint_keyed("algorithm",
                                          f"{program.name}:{program.version}"),
                name=program.name, version=program.version,
                source=program.source_text, origin_site=self.site)
            self.catalog.upsert(rec)

    def start(self, register_attempts: int = 50) -> None:
        host, port = self.config.listen
        self._server = FramedServer(host, port, self._handle)
        self._server.start()
        advertise_host = "127.0.0.1" if host in ("", "0.0.0.0") else host
        self.advertised = f"{advertise_host}:{self._server.address[1]}"
        last: Exception | None = None
        for _ in range(register_attempts):
            try:
                members, vo_key = self.registry.register_node(
                    self.site, self.advertised, self._identity)
                self.vo_key = bytes.fromhex(vo_key)
                self._membership = _Membership(
                    {m["site"]: m["address"] for m in members}, time.time())
                break
            except RegistryUnreachable as e:
                last = e
                time.sleep(0.1)
        else:
            self._server.stop()
            raise RegistryUnreachable(
                f"could not register with {self.config.registry}: {last}")
        self._stopping = threading.Event()
        self._poller = threading.Thread(target=self._poll_loop,
                                        name=f"poll-{self.site}", daemon=True)
        self._poller.start()

    def stop(self) -> None:
        if self._stopping is not None:
            self._stopping.set()
        if self._server is not None:
            self._server.stop()
        if self._poller is not None:
            self._poller.join(timeout=5)

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("node not started")
        return self._server.address

    @property
    def accountant(self):
        return self._server.accountant

    def _poll_loop(self) -> None:
        interval = max(self.config.refresh_interval_s, 0.5)
        while not self._stopping.wait(interval):
            try:
                self._refresh_membership()
                self._retry_gossip()
            except GridError:
                pass  # registry briefly down; keep serving from cache

    # --- membership ----------------------------------------------------------------

    def _refresh_membership(self) -> None:
        members = self.registry.list_nodes()
        self._membership = _Membership(
            {m["site"]: m["address"] for m in members}, time.time())

    def membership(self, max_age: float | None = None) -> dict:
        """Site → address map, refreshed when the cache is older than the
        configured interval; a stale cache beats an unreachable registry."""
        max_age = self.config.refresh_interval_s if max_age is None else max_age
        cached = self._membership
        if cached is None or time.time() - cached.fetched_at > max_age:
            try:
                self._refresh_membership()
            except RegistryUnreachable:
                if cached is None:
                    raise
        return dict(self._membership.members)

    def _peer_address(self, site: str) -> tuple[str, int]:
        members = self.membership()
        if site not in members:
            members = self.membership(max_age=0)
        if site not in members:
            raise UnknownPeer(f"no registered node for site {site}")
        return parse_address(members[site])

    # --- op plumbing ------------------------------------------------------------------

    def _handle(self, envelope: dict, binary: bytes) -> tuple[dict, bytes]:
        req_id = str(envelope.get("id", ""))
        op = envelope.get("op")
        token = str(envelope.get("token") or "")
        params = envelope.get("params") or {}
        handlers = {
            "AUTH": self._op_auth,
            "ADD": self._op_add,
            "RETRIEVE": self._op_retrieve,
            "QUERY": self._op_query,
            "ADD_ALG": self._op_add_alg,
            "EXEC_ALG": self._op_exec_alg,
            "RQUERY": self._op_rquery,
            "PEER_FETCH": self._op_peer_fetch,
            "STATS": self._op_stats,
        }
        fn = handlers.get(op)
        try:
            if fn is None:
                raise ProtocolError(f"unknown op {op!r}")
            result, warnings, resp_binary = fn(req_id, token, params, binary)
            return ok_response(req_id, result, warnings), resp_binary
        except GridError as e:
            return error_response(req_id, e.code, e.message), b""
        except Exception as e:  # defensive: a handler must answer, not raise
            traceback.print_exc(file=sys.stderr)
            return error_response(req_id, "Internal", f"{type(e).__name__}: {e}"), b""

    def _require_user(self, token: str) -> str:
        if not self.vo_key:
            raise AuthFailed("node is not registered with the VO yet")
        return verify_token(self.vo_key, token)

    def _require_peer(self, req_id: str, op: str, params: dict) -> str:
        if not self.vo_key:
            raise AuthFailed("node is not registered with the VO yet")
        site = str(params.get("peer_site", ""))
        sig = str(params.get("peer_sig", ""))
        if not valid_site_code(site) or not sig:
            raise AuthFailed("missing peer credentials")
        if not hmac.compare_digest(sig, peer_signature(self.vo_key, site, op, req_id)):
            raise AuthFailed("bad peer signature")
        if site not in self.membership() and site not in self.membership(max_age=0):
            raise UnknownPeer(f"site {site} is not a registered VO member")
        return site

    def _peer_params(self, op: str, req_id: str, extra: dict) -> dict:
        params = dict(extra)
        params["peer_site"] = self.site
        params["peer_sig"] = peer_signature(self.vo_key, self.site, op, req_id)
        return params

    def _peer_request(self, site: str, op: str, extra: dict,
                      timeout: float) -> tuple[dict, bytes]:
        address = self._peer_address(site)
        req_id = secrets.token_hex(8)
        envelope = {"id": req_id, "op": op, "token": "",
                    "params": self._peer_params(op, req_id, extra)}
        try:
            with socket.create_connection(address, timeout=timeout) as raw:
                sock = TRANSPORT.wrap(raw)
                sock.settimeout(timeout)
                send_frame(sock, envelope)
                got = recv_frame(sock)
        except (OSError, ProtocolError) as e:
            raise PeerUnreachable(f"{site} at {address}: {e}") from e
        if got is None:
            raise PeerUnreachable(f"{site} closed the connection without answering")
        response, resp_binary = got
        if response.get("id") != req_id:
            raise ProtocolError("peer response id mismatch")
        if response["status"] == "error":
            raise error_from_code(response["error_code"],
                                  response["result"].get("message", ""))
        return response["result"], resp_binary

    # --- AUTH ------------------------------------------------------------------------

    def _op_auth(self, req_id, token, params, binary):
        user = str(params.get("user", ""))
        credential = str(params.get("credential", ""))
        if not user or ":" in user:
            raise AuthFailed("unsuccessful user authentication")
        if not self.registry.verify_user(user, credential):
            raise AuthFailed("unsuccessful user authentication")
        ttl = self.config.token_ttl_s
        tok = mint_token(self.vo_key, user, ttl)
        return {"token": tok, "user": user, "ttl": ttl}, [], b""

    # --- ADD -------------------------------------------------------------------------

    def _op_add(self, req_id, token, params, binary):
        self._require_user(token)
        if not binary:
            raise MalformedFile("ADD carries no file bytes")
        try:
            mgi = parse_mgi(binary)
        except MgiFormatError as e:
            raise MalformedFile(f"bad MGI file: {e.message}") from e
        mgi = anonymize_for_site(mgi, self.minter, self.pseudonyms)
        data = write_mgi(mgi)
        ref = self.blobs.ref_for(data)
        patient, study, series, image = self._records_from_header(mgi, ref)
        self.blobs.put(data)
        changed = self.catalog.ingest_tree(patient, [study], [series], [image])
        return {"file": ref.to_json(), "image": str(image.id),
                "changed": changed}, [], b""

    def _records_from_header(self, mgi: MgiFile, ref):
        def need(key: str) -> str:
            value = mgi.get(key)
            if not value:
                raise MalformedFile(f"header lacks {key}")
            return value

        declared_site = mgi.get("site.id")
        if declared_site and declared_site != self.site:
            raise MalformedFile(
                f"file is addressed to site {declared_site}, this is {self.site}")
        pid_text = need("patient.id")
        if not looks_like_global_id(pid_text):
            raise MalformedFile(f"patient.id {pid_text!r} is not anonymized")
        pid = GlobalId.parse(pid_text)
        if pid.kind != "patient":
            raise MalformedFile(f"patient.id {pid_text!r} is not a patient id")
        if pid.site != self.site:
            raise ForeignSite(
                f"patient {pid} was anonymized for {pid.site}, not {self.site}")
        sex = need("patient.sex")
        if sex not in SEXES:
            raise MalformedFile(f"patient.sex {sex!r} is not F/M")
        try:
            birth_year = int(birth_year_of(need("patient.birth_date")))
            study_date = date.fromisoformat(need("study.date"))
            rows, cols = int(need("image.rows")), int(need("image.cols"))
        except (ValueError, MgiFormatError) as e:
            raise MalformedFile(f"bad header field: {e}") from e
        dose_text = mgi.get("image.dose_mgy")
        try:
            dose = float(dose_text) if dose_text else None
        except ValueError as e:
            raise MalformedFile(f"bad image.dose_mgy: {e}") from e
        sid, series_id, image_id = need("study.id"), need("series.id"), need("image.id")
        study_gid = self.minter.mint_keyed("study", f"{pid}|{sid}")
        series_gid = self.minter.mint_keyed("series", f"{pid}|{sid}|{series_id}")
        image_gid = self.minter.mint_keyed(
            "image", f"{pid}|{sid}|{series_id}|{image_id}")
        try:
            patient = PatientRecord(pid, need("patient.name"), sex, birth_year)
            study = StudyRecord(study_gid, pid, study_date)
            series = SeriesRecord(series_gid, study_gid,
                                  mgi.get("series.modality") or "MG")
            image = ImageRecord(image_gid, series_gid, need("image.laterality"),
                                need("image.view"), rows, cols, ref, dose)
        except ValueError as e:
            raise MalformedFile(f"bad header field: {e}") from e
        return patient, study, series, image

    # --- RETRIEVE / PEER_FETCH ----------------------------------------------------------

    def _resolve_local_sha(self, ident: str) -> str:
        """Map a local global id or bare digest to a blob digest."""
        if looks_like_global_id(ident):
            gid = GlobalId.parse(ident)
            if gid.kind == "file":
                ref = self.catalog.file_by_id(ident)
                if ref is None:
                    raise NotFound(f"no file record {ident}")
                return ref.sha256
            record = self.catalog.lookup(gid)
            if record is None or getattr(record, "file", None) is None:
                raise NotFound(f"no stored file for {ident}")
            return record.file.sha256
        if len(ident) == 64 and set(ident) <= _SHA_HEX:
            if not self.blobs.has(ident):
                raise NotFound(f"no blob {ident}")
            return ident
        raise NotFound(f"{ident!r} is neither a global id nor a sha256 digest")

    def _op_retrieve(self, req_id, token, params, binary):
        self._require_user(token)
        ident = str(params.get("id", ""))
        warnings: list[str] = []
        if looks_like_global_id(ident):
            gid = GlobalId.parse(ident)
            if gid.site == self.site:
                data = self.blobs.get(self._resolve_local_sha(ident))
            else:
                result, data = self._peer_request(
                    gid.site, "PEER_FETCH", {"id": ident},
                    timeout=self.config.relay_timeout_s)
                if not data:
                    raise NotFound(f"{gid.site} returned no bytes for {ident}")
        elif len(ident) == 64 and set(ident) <= _SHA_HEX:
            data = self._fetch_sha_anywhere(ident, warnings)
        else:
            raise NotFound(f"{ident!r} is neither a global id nor a sha256 digest")
        return {"sha256": sha256(data).hexdigest(), "size": len(data)}, warnings, data

    def _fetch_sha_anywhere(self, sha: str, warnings: list[str]) -> bytes:
        if self.blobs.has(sha):
            return self.blobs.get(sha)
        for site in sorted(self.membership()):
            if site == self.site:
                continue
            try:
                _, data = self._peer_request(site, "PEER_FETCH", {"id": sha},
                                             timeout=self.config.relay_timeout_s)
                if data:
                    return data
            except NotFound:
                continue
            except (PeerUnreachable, GridError) as e:
                warnings.append(f"{site}: {e.message}")
        raise NotFound(f"no VO member stores blob {sha}")

    def _op_peer_fetch(self, req_id, token, params, binary):
        self._require_peer(req_id, "PEER_FETCH", params)
        ident = str(params.get("id", ""))
        if looks_like_global_id(ident) and GlobalId.parse(ident).site != self.site:
            raise NotFound(f"{ident} is not owned by {self.site}")
        data = self.blobs.get(self._resolve_local_sha(ident))
        return {"sha256": sha256(data).hexdigest(), "size": len(data)}, [], data

    # --- QUERY / RQUERY ------------------------------------------------------------------

    def _local_resultset(self, q: FormalQuery, canonical: str) -> ResultSet:
        plan = lower_to_local_plan(q, self.catalog.vocabulary())
        rows = self.catalog.select(plan)
        return ResultSet(canonical, frozenset({self.site}), tuple(rows))

    def run_query(self, query_text: str) -> tuple[ResultSet, list[str]]:
        """The federated pipeline; returns (merged result, warnings)."""
        q = parse_query(query_text)
        canonical = print_query(q)
        members = sorted(self.membership())
        plan = decompose(q, members, self.site)
        parts = [self._local_resultset(q, canonical)]
        warnings: list[str] = []
        if plan.remotes:
            timeout = self.config.query_timeout_s
            with ThreadPoolExecutor(max_workers=len(plan.remotes)) as pool:
                futures = {pool.submit(self._remote_query, site, canonical, timeout):
                           site for site, _ in plan.remotes}
                for future, site in futures.items():
                    try:
                        parts.append(future.result())
                    except GridError as e:
                        warnings.append(f"{site} unreachable: {e.message}")
        merged = merge(parts)
        # Normalize origin to the sites that actually contributed rows, so the
        # same query renders byte-identical XML no matter where it was asked
        # (id-pruned plans skip sites that a broadcast would list as responders).
        normalized = ResultSet(merged.query_text,
                               frozenset(GlobalId.parse(r.id).site
                                         for r in merged.rows),
                               merged.rows)
        return normalized, sorted(warnings)

    def _remote_query(self, site: str, canonical: str, timeout: float) -> ResultSet:
        result, _ = self._peer_request(site, "RQUERY",
                                       {"text": canonical, "hop": 1}, timeout)
        return ResultSet.from_xml(result["xml"].encode("utf-8"))

    def _op_query(self, req_id, token, params, binary):
        self._require_user(token)
        result, warnings = self.run_query(str(params.get("text", "")))
        return {"xml": result.to_xml().decode("utf-8")}, warnings, b""

    def _op_rquery(self, req_id, token, params, binary):
        self._require_peer(req_id, "RQUERY", params)
        if params.get("hop") != 1:
            raise HopViolation(f"RQUERY must arrive with hop=1, got {params.get('hop')!r}")
        q = parse_query(str(params.get("text", "")))
        canonical = print_query(q)
        local_only_plan(q, self.site)  # asserts the no-fan-out invariant
        result = self._local_resultset(q, canonical)
        return {"xml": result.to_xml().decode("utf-8")}, [], b""

    # --- ADD_ALG ----------------------------------------------------------------------

    def _register_algorithm(self, record: AlgorithmRecord) -> bool:
        existing = self.catalog.algorithm(record.name, record.version)
        if existing is not None:
            if existing.source != record.source:
                raise AlgorithmConflict(
                    f"{record.name} v{record.version} already registered "
                    "with different source")
            return False
        return self.catalog.upsert(record)

    def _op_add_alg(self, req_id, token, params, binary):
        if "peer_sig" in params:
            self._require_peer(req_id, "ADD_ALG", params)
            record = self._algorithm_from_params(params)
            return {"registered": self._register_algorithm(record)}, [], b""
        self._require_user(token)
        name = str(params.get("name", ""))
        source = str(params.get("source", ""))
        if not alg.valid_name(name):
            raise QuerySyntaxError(f"algorithm name {name!r} must be a lowercase "
                                   "identifier")
        alg.parse_algorithm(source)  # syntax gate before anything registers
        with self.catalog._lock:
            latest = self.catalog.algorithm(name)
            version = 1 if latest is None else latest.version + 1
            record = AlgorithmRecord(
                id=self.minter.mint_keyed("algorithm", f"{name}:{version}"),
                name=name, version=version, source=source, origin_site=self.site)
            self.catalog.upsert(record)
        warnings = self._gossip_algorithm(record)
        return {"id": str(record.id), "version": version}, warnings, b""

    def _algorithm_from_params(self, params: dict) -> AlgorithmRecord:
        try:
            record = AlgorithmRecord(
                id=GlobalId.parse(str(params["alg_id"])),
                name=str(params["name"]), version=int(params["version"]),
                source=str(params["source"]),
                origin_site=str(params["origin_site"]))
        except (KeyError, ValueError) as e:
            raise ProtocolError(f"bad algorithm envelope: {e}") from e
        alg.parse_algorithm(record.source)
        return record

    def _gossip_algorithm(self, record: AlgorithmRecord) -> list[str]:
        warnings = []
        for site in sorted(self.membership()):
            if site == self.site:
                continue
            try:
                self._send_algorithm(site, record)
            except GridError as e:
                warnings.append(f"{site} not updated: {e.message}")
                self._pending_gossip.setdefault(site, {})[
                    f"{record.name}:{record.version}"] = record
        return warnings

    def _send_algorithm(self, site: str, record: AlgorithmRecord) -> None:
        self._peer_request(site, "ADD_ALG", {
            "alg_id": str(record.id), "name": record.name,
            "version": record.version, "source": record.source,
            "origin_site": record.origin_site,
        }, timeout=self.config.query_timeout_s)

    def _retry_gossip(self) -> None:
        for site in list(self._pending_gossip):
            pending = self._pending_gossip.get(site, {})
            for key, record in list(pending.items()):
                try:
                    self._send_algorithm(site, record)
                    pending.pop(key, None)
                except GridError:
                    break  # site still down; keep the rest queued
            if not pending:
                self._pending_gossip.pop(site, None)

    # --- EXEC_ALG ----------------------------------------------------------------------

    def _selector_query(self, text: str) -> FormalQuery:
        q = parse_query(text)
        if q.target != "images":
            raise QuerySyntaxError("algorithm selectors must select images")
        return q

    def _execute_local(self, record: AlgorithmRecord, q: FormalQuery) -> int:
        program = alg.parse_algorithm(record.source, record.name,
                                      record.version, record.id)
        plan = lower_to_local_plan(q, self.catalog.vocabulary())
        written = 0
        for row in self.catalog.select(plan):
            image = self.catalog.require(row.id)
            mgi = parse_mgi(self.blobs.get(image.file))
            emits = alg.execute_on_image(program, mgi)
            derived = DerivedRecord(
                id=self.minter.mint_keyed(
                    "derived", f"{image.id}|{record.name}|{record.version}"),
                image=image.id, algorithm=record.id, scalars=emits)
            written += self.catalog.upsert(derived)
        return written

    def _op_exec_alg(self, req_id, token, params, binary):
        if "peer_sig" in params:
            self._require_peer(req_id, "EXEC_ALG", params)
            if params.get("hop") != 1:
                raise HopViolation(
                    f"peer EXEC_ALG must arrive with hop=1, got {params.get('hop')!r}")
            record = self._algorithm_from_params(params)
            self._register_algorithm(record)
            local_record = self.catalog.algorithm(record.name, record.version)
            q = self._selector_query(str(params.get("selector", "")))
            return {"written": self._execute_local(local_record, q)}, [], b""
        self._require_user(token)
        name = str(params.get("name", ""))
        version = params.get("version")
        record = self.catalog.algorithm(name, int(version) if version else None)
        if record is None:
            raise UnknownAlgorithm(f"no algorithm {name!r}"
                                   + (f" v{version}" if version else ""))
        q = self._selector_query(str(params.get("selector", "")))
        canonical = print_query(q)
        members = sorted(self.membership())
        plan = decompose(q, members, self.site)
        per_site = {self.site: self._execute_local(record, q)}
        warnings: list[str] = []
        if plan.remotes:
            timeout = self.config.query_timeout_s
            with ThreadPoolExecutor(max_workers=len(plan.remotes)) as pool:
                futures = {pool.submit(self._remote_exec, site, record, canonical,
                                       timeout): site for site, _ in plan.remotes}
                for future, site in futures.items():
                    try:
                        per_site[site] = future.result()
                    except GridError as e:
                        warnings.append(f"{site} unreachable: {e.message}")
        return {"written": sum(per_site.values()),
                "per_site": per_site}, sorted(warnings), b""

    def _remote_exec(self, site: str, record: AlgorithmRecord, selector: str,
                     timeout: float) -> int:
        result, _ = self._peer_request(site, "EXEC_ALG", {
            "alg_id": str(record.id), "name": record.name,
            "version": record.version, "source": record.source,
            "origin_site": record.origin_site, "selector": selector, "hop": 1,
        }, timeout)
        return int(result["written"])

    # --- STATS -------------------------------------------------------------------------

    def _op_stats(self, req_id, token, params, binary):
        self._require_user(token)
        algorithms = {}
        for rec in self.catalog._records["algorithm"].values():
            algorithms.setdefault(rec.name, []).append(rec.version)
        return {
            "site": self.site,
            "catalog": self.catalog.stats(),
            "traffic": self._server.accountant.snapshot() if self._server else {},
            "membership": sorted(self.membership()),
            "algorithms": {k: sorted(v) for k, v in sorted(algorithms.items())},
        }, [], b""
