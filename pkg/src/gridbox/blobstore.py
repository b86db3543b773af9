"""Content-addressed blob store with two-level hash fanout.

Bytes live at ``store/<aa>/<bb>/<sha256>`` under the store root, where
``aa``/``bb`` are the first two hex byte pairs of the digest.  Writes go to
a temp file in the final directory and are renamed into place, so concurrent
writers of the same content are harmless and readers never observe a partial
blob.  ``put`` is idempotent: identical bytes yield an identical
:class:`~gridbox.records.FileRef`, including its global id, which is minted
as a keyed hash of the digest.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

from gridbox.errors import CorruptBlob, NotFound, StorageError
from gridbox.ids import IdMinter
from gridbox.records import FileRef


class BlobStore:
    def __init__(self, root: str | Path, minter: IdMinter):
        self.root = Path(root) / "store"
        self.minter = minter
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, sha256: str) -> Path:
        if len(sha256) != 64 or any(c not in "0123456789abcdef" for c in sha256):
            raise StorageError(f"not a sha256 hex digest: {sha256!r}")
        return self.root / sha256[:2] / sha256[2:4] / sha256

    def ref_for(self, data: bytes) -> FileRef:
        sha = hashlib.sha256(data).hexdigest()
        return FileRef(id=self.minter.mint_keyed("file", sha), sha256=sha,
                       size=len(data), owner_site=self.minter.site)

    def put(self, data: bytes) -> FileRef:
        if not data:
            raise StorageError("refusing to store an empty blob")
        ref = self.ref_for(data)
        path = self._path(ref.sha256)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        return ref

    def get(self, ref: FileRef | str) -> bytes:
        sha = ref.sha256 if isinstance(ref, FileRef) else ref
        path = self._path(sha)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"no blob {sha}") from None
        if hashlib.sha256(data).hexdigest() != sha:
            raise CorruptBlob(f"stored bytes no longer hash to {sha}")
        return data

    def has(self, sha256: str) -> bool:
        return self._path(sha256).exists()
