"""Ingest-time anonymization of MGI files.

The transform replaces ``patient.name`` with a pseudonym, truncates
``patient.birth_date`` to its year, and swaps ``patient.id`` for a
site-minted global id.  Everything else — other header keys, their order,
and every pixel byte — is left untouched.

Both the pseudonym and the replacement id are keyed hashes of the original
patient id under the site secret, so re-ingesting the same source file on
the same site is a pure no-op, while nobody without the secret can link the
pseudonym back.  The original-id mapping goes into a site-local
:class:`PseudonymTable` that is never serialized onto the wire.
"""

from __future__ import annotations

import json
import re
import threading
from pathlib import Path

from gridbox.errors import MalformedFile
from gridbox.ids import GlobalId, IdMinter, looks_like_global_id
from gridbox.mgi import MgiFile

_PSEUDONYM_RE = re.compile(r"^ANON-[0-9a-f]{12}$")
_YEAR_RE = re.compile(r"^\d{4}$")
_DATE_RE = re.compile(r"^(\d{4})-\d{2}-\d{2}$")


def is_anonymized(f: MgiFile) -> bool:
    """True when the identifying header fields are already in the
    post-anonymization shape (so a second pass has nothing to do)."""
    name = f.get("patient.name", "")
    pid = f.get("patient.id", "")
    birth = f.get("patient.birth_date", "")
    return (bool(_PSEUDONYM_RE.match(name))
            and looks_like_global_id(pid) and GlobalId.parse(pid).kind == "patient"
            and bool(_YEAR_RE.match(birth)))


def birth_year_of(birth_date: str) -> str:
    if _YEAR_RE.match(birth_date):
        return birth_date
    m = _DATE_RE.match(birth_date)
    if not m:
        raise MalformedFile(f"unusable patient.birth_date {birth_date!r}")
    return m.group(1)


def anonymize(f: MgiFile, pseudonym: str, new_id: GlobalId,
              table: "PseudonymTable | None" = None) -> MgiFile:
    """Apply the transform; applying it to an already-anonymized file
    returns the input unchanged."""
    if is_anonymized(f):
        return f
    if not pseudonym:
        raise ValueError("pseudonym must be non-empty")
    for key in ("patient.name", "patient.id", "patient.birth_date"):
        if key not in f.header:
            raise MalformedFile(f"cannot anonymize without {key}")
    original_id = f.header["patient.id"]
    header = {}
    for key, value in f.header.items():
        if key == "patient.name":
            value = pseudonym
        elif key == "patient.id":
            value = str(new_id)
        elif key == "patient.birth_date":
            value = birth_year_of(value)
        header[key] = value
    if table is not None:
        table.record(original_id, new_id, pseudonym)
    return MgiFile(header, f.pixels)


def anonymize_for_site(f: MgiFile, minter: IdMinter,
                       table: "PseudonymTable | None" = None) -> MgiFile:
    """Anonymize keyed on the original patient id under the site secret."""
    if is_anonymized(f):
        return f
    original_id = f.get("patient.id")
    if not original_id:
        raise MalformedFile("cannot anonymize without patient.id")
    return anonymize(f, minter.pseudonym(original_id),
                     minter.mint_keyed("patient", original_id), table)


class PseudonymTable:
    """Site-local original-id → (global id, pseudonym) map.

    Kept out of every wire message by construction: nothing in the package
    serializes this table except its own on-disk log.
    """

    def __init__(self, path: str | Path | None = None):
        self._path = Path(path) if path is not None else None
        self._entries: dict[str, tuple[str, str]] = {}
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            with self._path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        d = json.loads(line)
                        self._entries[d["original"]] = (d["id"], d["pseudonym"])

    def record(self, original_id: str, new_id: GlobalId, pseudonym: str) -> None:
        with self._lock:
            entry = (str(new_id), pseudonym)
            if self._entries.get(original_id) == entry:
                return
            self._entries[original_id] = entry
            if self._path is not None:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"original": original_id, "id": entry[0],
                                         "pseudonym": entry[1]}) + "\n")

    def lookup(self, original_id: str) -> tuple[str, str] | None:
        with self._lock:
            return self._entries.get(original_id)

    def __len__(self) -> int:
        return len(self._entries)
