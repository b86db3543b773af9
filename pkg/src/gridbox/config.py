"""Configuration files.

Node and registry processes read line-oriented ``key = value`` files (blank
lines and ``#`` comments allowed).  Any key can be overridden by an
environment variable named ``GRIDBOX_<KEY>`` in upper case, e.g.
``GRIDBOX_DATA_DIR`` overrides ``data_dir``.

The same format serves as the *site key file* a workstation uses for
client-side anonymization; it needs only ``site`` and ``secret``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from gridbox.errors import MalformedFile
from gridbox.ids import valid_site_code


def parse_kv_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedFile(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def _with_env(values: dict[str, str], keys: tuple[str, ...],
              env: dict | None) -> dict[str, str]:
    env = os.environ if env is None else env
    merged = dict(values)
    for key in keys:
        override = env.get(f"GRIDBOX_{key.upper()}")
        if override is not None:
            merged[key] = override
    return merged


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise MalformedFile(f"address {text!r} must be host:port")
    try:
        return (host or "127.0.0.1"), int(port)
    except ValueError as e:
        raise MalformedFile(f"bad port in {text!r}") from e


@dataclass
class NodeConfig:
    site: str
    listen: tuple[str, int]
    registry: tuple[str, int]
    data_dir: Path
    secret: bytes
    token_ttl_s: int = 3600
    query_timeout_s: float = 10.0
    relay_timeout_s: float = 60.0
    refresh_interval_s: float = 5.0

    KEYS = ("site", "listen", "registry", "data_dir", "secret", "token_ttl_s",
            "query_timeout_s", "relay_timeout_s", "refresh_interval_s")

    def __post_init__(self):
        if not valid_site_code(self.site):
            raise MalformedFile(f"bad site code {self.site!r}")
        self.data_dir = Path(self.data_dir)
        if not self.secret:
            raise MalformedFile("site secret must be non-empty")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "NodeConfig":
        try:
            return cls(
                site=values["site"],
                listen=parse_address(values["listen"]),
                registry=parse_address(values["registry"]),
                data_dir=Path(values["data_dir"]),
                secret=bytes.fromhex(values["secret"]),
                token_ttl_s=int(values.get("token_ttl_s", "3600")),
                query_timeout_s=float(values.get("query_timeout_s", "10")),
                relay_timeout_s=float(values.get("relay_timeout_s", "60")),
                refresh_interval_s=float(values.get("refresh_interval_s", "5")),
            )
        except KeyError as e:
            raise MalformedFile(f"node config is missing {e.args[0]!r}") from e
        except ValueError as e:
            raise MalformedFile(f"bad node config value: {e}") from e

    @classmethod
    def from_file(cls, path: str | Path, env: dict | None = None) -> "NodeConfig":
        return cls.from_mapping(_with_env(parse_kv_file(path), cls.KEYS, env))


@dataclass
class RegistryConfig:
    listen: tuple[str, int]
    data_dir: Path

    KEYS = ("listen", "data_dir")

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RegistryConfig":
        try:
            return cls(listen=parse_address(values["listen"]),
                       data_dir=Path(values["data_dir"]))
        except KeyError as e:
            raise MalformedFile(f"registry config is missing {e.args[0]!r}") from e

    @classmethod
    def from_file(cls, path: str | Path, env: dict | None = None) -> "RegistryConfig":
        return cls.from_mapping(_with_env(parse_kv_file(path), cls.KEYS, env))


@dataclass
class SiteKey:
    """What a workstation needs for client-side anonymization."""

    site: str
    secret: bytes = field(repr=False)

    @classmethod
    def from_file(cls, path: str | Path) -> "SiteKey":
        values = parse_kv_file(path)
        try:
            key = cls(values["site"], bytes.fromhex(values["secret"]))
        except KeyError as e:
            raise MalformedFile(f"site key file is missing {e.args[0]!r}") from e
        except ValueError as e:
            raise MalformedFile(f"bad site key value: {e}") from e
        if not valid_site_code(key.site) or not key.secret:
            raise MalformedFile("site key file needs a site code and a hex secret")
        return key
