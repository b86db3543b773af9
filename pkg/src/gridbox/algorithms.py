"""The grid-resident algorithm DSL.

Uploaded "executable code" is narrowed to a tiny deterministic pixel
pipeline, one statement per line::

    threshold <t>                      binarize the working buffer (>=t -> 65535 else 0)
    fraction_above <t> emit <name>     emit count(pixels >= t) / total
    mean emit <name>                   emit the arithmetic pixel mean
    max emit <name>                    emit the maximum pixel value
    count_components <t> emit <name>   emit the number of 4-connected components of {pixels >= t}

Thresholds are integers in [0, 65535]; emit names are lowercase identifiers,
unique within a program; a program must emit at least one value.  Execution
is pure — the stored image bytes are never touched — and deterministic, so
every node computes bit-identical results for the same (program, image).

All emitted values are floats produced by exact integer arithmetic followed
by at most one division, which keeps results reproducible across machines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from gridbox.errors import (
    AlgorithmSyntaxError,
    DuplicateEmit,
    EmptyProgram,
)
from gridbox.ids import GlobalId
from gridbox.mgi import MgiFile

_EMIT_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int8)

VERBS = ("threshold", "fraction_above", "mean", "max", "count_components")


@dataclass(frozen=True)
class Statement:
    verb: str
    t: int | None = None
    emit: str | None = None


@dataclass(frozen=True)
class AlgorithmProgram:
    statements: tuple
    source_text: str
    name: str = ""
    version: int = 0
    id: GlobalId | None = None

    def emits(self) -> tuple:
        return tuple(s.emit for s in self.statements if s.emit is not None)

    def __eq__(self, other):
        return (isinstance(other, AlgorithmProgram)
                and self.statements == other.statements)

    def __hash__(self):
        return hash(self.statements)


def _parse_threshold(word: str, line_no: int) -> int:
    try:
        t = int(word)
    except ValueError:
        raise AlgorithmSyntaxError(
            f"line {line_no}: threshold {word!r} is not an integer") from None
    if not 0 <= t <= 0xFFFF:
        raise AlgorithmSyntaxError(f"line {line_no}: threshold {t} outside [0, 65535]")
    return t


def _parse_emit(words: list[str], line_no: int) -> str:
    if len(words) != 2 or words[0] != "emit":
        raise AlgorithmSyntaxError(f"line {line_no}: expected 'emit <name>'")
    if not _EMIT_RE.match(words[1]):
        raise AlgorithmSyntaxError(
            f"line {line_no}: emit name {words[1]!r} must be a lowercase identifier")
    return words[1]


def parse_algorithm(text: str, name: str = "", version: int = 0,
                    prog_id: GlobalId | None = None) -> AlgorithmProgram:
    statements = []
    emits = set()
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        words = line.split()
        verb = words[0]
        if verb == "threshold":
            if len(words) != 2:
                raise AlgorithmSyntaxError(f"line {line_no}: expected 'threshold <t>'")
            statements.append(Statement("threshold", _parse_threshold(words[1], line_no)))
        elif verb in ("fraction_above", "count_components"):
            if len(words) != 4:
                raise AlgorithmSyntaxError(
                    f"line {line_no}: expected '{verb} <t> emit <name>'")
            t = _parse_threshold(words[1], line_no)
            statements.append(Statement(verb, t, _parse_emit(words[2:], line_no)))
        elif verb in ("mean", "max"):
            if len(words) != 3:
                raise AlgorithmSyntaxError(
                    f"line {line_no}: expected '{verb} emit <name>'")
            statements.append(Statement(verb, None, _parse_emit(words[1:], line_no)))
        else:
            raise AlgorithmSyntaxError(f"line {line_no}: unknown verb {verb!r}")
        emit = statements[-1].emit
        if emit is not None:
            if emit in emits:
                raise DuplicateEmit(f"line {line_no}: {emit!r} emitted twice")
            emits.add(emit)
    if not statements:
        raise EmptyProgram("program has no statements")
    if not emits:
        raise EmptyProgram("program emits nothing")
    return AlgorithmProgram(tuple(statements), text, name, version, prog_id)


def valid_name(name: str) -> bool:
    """Algorithm and emit names share one shape: lowercase identifiers."""
    return bool(_EMIT_RE.match(name))


def count_components(mask: np.ndarray) -> int:
    """Number of 4-connected components of a boolean mask."""
    _, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    return int(n)


def execute_on_image(program: AlgorithmProgram, img: MgiFile) -> dict[str, float]:
    """Run the pipeline over a working copy of the pixels; the image itself
    is never modified."""
    buf = img.pixels.copy()
    total = buf.size
    out: dict[str, float] = {}
    for s in program.statements:
        if s.verb == "threshold":
            buf = np.where(buf >= s.t, np.uint16(0xFFFF), np.uint16(0)).astype(np.uint16)
        elif s.verb == "fraction_above":
            out[s.emit] = int((buf >= s.t).sum()) / total
        elif s.verb == "mean":
            out[s.emit] = int(buf.sum(dtype=np.int64)) / total
        elif s.verb == "max":
            out[s.emit] = float(int(buf.max()))
        elif s.verb == "count_components":
            out[s.emit] = float(count_components(buf >= s.t))
        else:  # pragma: no cover - parser admits no other verb
            raise AlgorithmSyntaxError(f"unknown verb {s.verb!r}")
    return out


DENSITY_SOURCE = "fraction_above 8000 emit density"


def builtin_density() -> AlgorithmProgram:
    """The pre-registered density stand-in: name "smf-density", version 1."""
    return parse_algorithm(DENSITY_SOURCE, name="smf-density", version=1)
