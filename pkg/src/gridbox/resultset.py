"""XML result sets: serialization, parsing, and order-insensitive merge.

The schema is fixed and bit-exact::

    <resultset query="..." origin="SITE1,SITE2">
      <row id="SITE:image:...">
        <field name="image.laterality">L</field>
        <field name="patient.id">SITE:patient:...</field>
      </row>
      <summary images="1" patients="1"/>
    </resultset>

Attribute order is ``query`` then ``origin``; fields are sorted by name, rows
by id; two-space indentation and LF line ends.  Equal result sets serialize
to identical bytes, so a merged answer assembled at any site compares equal
byte-for-byte.

Merging deduplicates rows on their global id; the same id carrying different
field maps is treated as a federation bug and raises ``SchemaViolation``
rather than silently preferring one site's copy.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

from gridbox.errors import MalformedXml, QueryMismatch, SchemaViolation
from gridbox.ids import id_kind


@dataclass(frozen=True)
class Row:
    """One result row: the row id plus projected canonical field values."""

    id: str
    fields: dict

    def __post_init__(self):
        object.__setattr__(self, "fields", dict(self.fields))

    def __hash__(self):
        return hash((self.id, tuple(sorted(self.fields.items()))))


def _attr(value: str) -> str:
    return escape(value, {'"': "&quot;"})


def _target_of(query_text: str) -> str | None:
    words = query_text.split()
    if len(words) >= 2 and words[0] == "select":
        return words[1]
    return None


def compute_summary(query_text: str, rows: tuple) -> tuple[int, int]:
    """(num_images, num_patients) as re-derived from the rows themselves."""
    if _target_of(query_text) == "images":
        num_images = len(rows)
    else:
        num_images = sum(1 for r in rows if id_kind(r.id) == "image")
    patient_ids = set()
    for r in rows:
        if "patient.id" in r.fields:
            patient_ids.add(r.fields["patient.id"])
        elif id_kind(r.id) == "patient":
            patient_ids.add(r.id)
    return num_images, len(patient_ids)


@dataclass(frozen=True)
class ResultSet:
    query_text: str
    origin_sites: frozenset = field(default_factory=frozenset)
    rows: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "origin_sites", frozenset(self.origin_sites))
        rows = tuple(sorted(self.rows, key=lambda r: r.id))
        seen = set()
        for r in rows:
            if r.id in seen:
                raise SchemaViolation(f"duplicate row id {r.id}")
            seen.add(r.id)
        object.__setattr__(self, "rows", rows)

    @property
    def summary(self) -> tuple[int, int]:
        return compute_summary(self.query_text, self.rows)

    # --- XML ------------------------------------------------------------------

    def to_xml(self) -> bytes:
        origin = ",".join(sorted(self.origin_sites))
        lines = [f'<resultset query="{_attr(self.query_text)}" origin="{_attr(origin)}">']
        for row in self.rows:
            if row.fields:
                lines.append(f'  <row id="{_attr(row.id)}">')
                for name in sorted(row.fields):
                    lines.append(f'    <field name="{_attr(name)}">'
                                 f'{escape(row.fields[name])}</field>')
                lines.append("  </row>")
            else:
                lines.append(f'  <row id="{_attr(row.id)}"/>')
        num_images, num_patients = self.summary
        lines.append(f'  <summary images="{num_images}" patients="{num_patients}"/>')
        lines.append("</resultset>")
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def from_xml(cls, data: bytes) -> "ResultSet":
        try:
            root = ET.fromstring(data)
        except ET.ParseError as e:
            raise MalformedXml(f"unparseable result set: {e}") from e
        if root.tag != "resultset":
            raise SchemaViolation(f"root element is <{root.tag}>, not <resultset>")
        if set(root.attrib) != {"query", "origin"}:
            raise SchemaViolation("resultset must carry exactly query and origin")
        origin = root.attrib["origin"]
        origin_sites = frozenset(origin.split(",")) if origin else frozenset()
        rows = []
        summary_el = None
        for child in root:
            if child.tag == "summary":
                if summary_el is not None:
                    raise SchemaViolation("more than one summary")
                summary_el = child
                continue
            if child.tag != "row":
                raise SchemaViolation(f"unexpected element <{child.tag}>")
            if summary_el is not None:
                raise SchemaViolation("row after summary")
            if set(child.attrib) != {"id"}:
                raise SchemaViolation("row must carry exactly an id")
            fields = {}
            for f in child:
                if f.tag != "field" or set(f.attrib) != {"name"}:
                    raise SchemaViolation("rows contain only named fields")
                name = f.attrib["name"]
                if name in fields:
                    raise SchemaViolation(f"duplicate field {name!r} in row")
                fields[name] = f.text or ""
            rows.append(Row(child.attrib["id"], fields))
        if summary_el is None:
            raise SchemaViolation("missing summary")
        try:
            declared = (int(summary_el.attrib["images"]),
                        int(summary_el.attrib["patients"]))
        except (KeyError, ValueError) as e:
            raise SchemaViolation(f"bad summary: {e}") from e
        result = cls(root.attrib["query"], origin_sites, tuple(rows))
        if result.summary != declared:
            raise SchemaViolation(
                f"summary says images={declared[0]} patients={declared[1]}, "
                f"rows say images={result.summary[0]} patients={result.summary[1]}")
        return result


def merge(parts: list[ResultSet]) -> ResultSet:
    """Union the parts keyed on row id; associative and commutative."""
    if not parts:
        raise ValueError("nothing to merge")
    query_text = parts[0].query_text
    for p in parts[1:]:
        if p.query_text != query_text:
            raise QueryMismatch(
                f"cannot merge answers to {p.query_text!r} into {query_text!r}")
    origin_sites: frozenset = frozenset()
    rows: dict[str, Row] = {}
    for p in parts:
        origin_sites |= p.origin_sites
        for r in p.rows:
            prior = rows.get(r.id)
            if prior is None:
                rows[r.id] = r
            elif prior.fields != r.fields:
                raise SchemaViolation(f"row {r.id} differs between sites")
    return ResultSet(query_text, origin_sites, tuple(rows.values()))
