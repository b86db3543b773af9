"""Site-scoped global identifiers.

Every record and file in the grid is named ``site:kind:hex32``.  The site code
is the short ASCII code of the node that minted the id, the kind names one of
the seven record families, and the local part is 128 bits rendered as 32 hex
characters.

Two minting modes exist:

* ``mint_random`` draws the local part from the OS RNG (session tokens,
  one-off registrations).
* ``mint_keyed`` derives it with an HMAC over the site secret and a caller
  key.  Ingest uses this mode so that re-processing the same source record
  yields the same id: uploads stay idempotent, anonymization can run at the
  acquisition workstation, and a restart re-derives identical ids without a
  shared mutable table.
"""

from __future__ import annotations

import hmac
import re
import secrets
from dataclasses import dataclass
from hashlib import sha256

KINDS = ("patient", "study", "series", "image", "file", "derived", "algorithm")

_SITE_RE = re.compile(r"^[A-Z][A-Z0-9]{1,7}$")
_HEX32_RE = re.compile(r"^[0-9a-f]{32}$")


def valid_site_code(site: str) -> bool:
    return bool(_SITE_RE.match(site))


@dataclass(frozen=True, order=True)
class GlobalId:
    site: str
    kind: str
    local: str

    def __post_init__(self):
        if not valid_site_code(self.site):
            raise ValueError(f"bad site code {self.site!r}")
        if self.kind not in KINDS:
            raise ValueError(f"bad id kind {self.kind!r}")
        if not _HEX32_RE.match(self.local):
            raise ValueError(f"bad local part {self.local!r}")

    def render(self) -> str:
        return f"{self.site}:{self.kind}:{self.local}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "GlobalId":
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"not a global id: {text!r}")
        return cls(parts[0], parts[1], parts[2])


def looks_like_global_id(text: str) -> bool:
    try:
        GlobalId.parse(text)
        return True
    except ValueError:
        return False


def id_kind(text: str) -> str | None:
    """Kind of a rendered id, or None if the string is not one."""
    try:
        return GlobalId.parse(text).kind
    except ValueError:
        return None


class IdMinter:
    """Mints ids for one site, randomly or keyed off the site secret."""

    def __init__(self, site: str, secret: bytes):
        if not valid_site_code(site):
            raise ValueError(f"bad site code {site!r}")
        self.site = site
        self._secret = secret

    def mint_random(self, kind: str) -> GlobalId:
        return GlobalId(self.site, kind, secrets.token_hex(16))

    def mint_keyed(self, kind: str, key: str) -> GlobalId:
        digest = hmac.new(self._secret, f"{kind}:{key}".encode(), sha256).hexdigest()
        return GlobalId(self.site, kind, digest[:32])

    def pseudonym(self, original_patient_id: str) -> str:
        """Stable opaque replacement for a patient name: ``ANON-<12 hex>``."""
        digest = hmac.new(self._secret, b"pseudonym:" + original_patient_id.encode(), sha256)
        return "ANON-" + digest.hexdigest()[:12]
