"""On-disk record formats shared by every job.

Every stage file is UTF-8 text with one ``key<TAB>value`` record per line.
Tagged values start with a one-character type tag:

    p  parameter        ``f<TAB>p <para>``
    i  invert index     ``f<TAB>i <num> <docId>:<count>:<label> ...``
    q  gradient         ``f<TAB>q <grad>``
    e  sub-feature list ``f<TAB>e <fs>;<fs>;...``

Untagged values carry sample data keyed by docId:

    distributed parameter  ``docId<TAB><label>:<f>:<count>:<para>``
    sufficient sample      ``docId<TAB><label>:<f>:<count>:<para> ...``

Training and test corpora use ``<label><TAB><f>:<count> <f>:<count> ...``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple

RESERVED_CHARS = "\t :;|\n"
_RESERVED_RE = re.compile(r"[\t :;|\n]")
_DOCID_ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
_DOCID_HALF = 5
_DOCID_LIMIT = 62**_DOCID_HALF
DOCID_LENGTH = 2 * _DOCID_HALF


class RecordError(ValueError):
    """Raised for malformed record lines or records violating their invariants."""


# -- scalar helpers ----------------------------------------------------------


def format_real(x: float) -> str:
    """Shortest text that round-trips to ``x``.

    Integral values print without a fractional part (``0``, ``-1``) so the
    initial parameter line reads ``p 0``; everything else uses ``repr``.
    """
    x = float(x)
    if not math.isfinite(x):
        raise RecordError(f"non-finite real {x!r}")
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def parse_real(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise RecordError(f"not a real number: {text!r}") from None
    if not math.isfinite(x):
        raise RecordError(f"non-finite real {text!r}")
    return x


def _parse_int(text: str, what: str) -> int:
    if not text or not (text.isdigit() or (text[0] == "-" and text[1:].isdigit())):
        raise RecordError(f"{what} is not an integer: {text!r}")
    return int(text)


def _parse_label(text: str) -> int:
    if text == "0":
        return 0
    if text == "1":
        return 1
    raise RecordError(f"label must be 0 or 1, got {text!r}")


def _parse_count(text: str) -> int:
    count = _parse_int(text, "count")
    if count <= 0:
        raise RecordError(f"count must be positive, got {count}")
    return count


def check_field(name: str, text: str, allow: str = "") -> None:
    """Reject empty fields and fields holding separator characters.

    ``allow`` lists reserved characters that are legal in this field, e.g.
    ``|`` inside a sub-feature key.
    """
    if not text:
        raise RecordError(f"field {name!r} is empty")
    for match in _RESERVED_RE.finditer(text):
        ch = match.group()
        if ch not in allow:
            raise RecordError(f"field {name!r} contains reserved character {ch!r}: {text!r}")


def make_doc_id(split_index: int, line_index: int) -> str:
    """Deterministic 10-char base-62 docId for a corpus line.

    The first five digits encode the input split, the last five the line
    within it; both are zero padded so docId byte order equals corpus order.
    """
    if not (0 <= split_index < _DOCID_LIMIT and 0 <= line_index < _DOCID_LIMIT):
        raise RecordError(f"docId position out of range: ({split_index}, {line_index})")
    n = split_index * _DOCID_LIMIT + line_index
    digits = []
    for _ in range(DOCID_LENGTH):
        n, r = divmod(n, 62)
        digits.append(_DOCID_ALPHABET[r])
    return "".join(reversed(digits))


# -- record types ------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    label: int
    tokens: tuple[tuple[str, int], ...]
    doc_id: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise RecordError(f"label must be 0 or 1, got {self.label!r}")
        seen = set()
        for feature, count in self.tokens:
            check_field("feature", feature)
            if count <= 0:
                raise RecordError(f"count must be positive for {feature!r}, got {count}")
            if feature in seen:
                raise RecordError(f"duplicate feature {feature!r} in sample")
            seen.add(feature)


@dataclass(frozen=True)
class ParameterRecord:
    feature: str
    value: float
    tag = "p"


class DocUnit(NamedTuple):
    doc_id: str
    count: int
    label: int

    def text(self) -> str:
        return f"{self.doc_id}:{self.count}:{self.label}"

    @classmethod
    def parse(cls, text: str) -> DocUnit:
        parts = text.split(":")
        if len(parts) != 3:
            raise RecordError(f"doc unit must be docId:count:label, got {text!r}")
        doc_id, count, label = parts
        check_field("docId", doc_id)
        return cls(doc_id, _parse_count(count), _parse_label(label))


@dataclass(frozen=True)
class InvertIndexRecord:
    key: str
    num: int
    units: tuple[DocUnit, ...]
    tag = "i"

    def __post_init__(self):
        if self.num != len(self.units):
            raise RecordError(f"num={self.num} but {len(self.units)} doc units for {self.key!r}")


@dataclass(frozen=True)
class DistributedParamRecord:
    doc_id: str
    label: int
    feature: str
    count: int
    para: float


class Entry(NamedTuple):
    """One feature of a sufficient sample."""

    label: int
    feature: str
    count: int
    para: float

    def text(self) -> str:
        return f"{self.label}:{self.feature}:{self.count}:{format_real(self.para)}"

    @classmethod
    def parse(cls, text: str) -> Entry:
        parts = text.split(":")
        if len(parts) != 4:
            raise RecordError(f"entry must be label:feature:count:para, got {text!r}")
        label, feature, count, para = parts
        check_field("feature", feature, allow="|")
        return cls(_parse_label(label), feature, _parse_count(count), parse_real(para))


@dataclass(frozen=True)
class SufficientSample:
    doc_id: str
    entries: tuple[Entry, ...]

    def __post_init__(self):
        if not self.entries:
            raise RecordError(f"sufficient sample {self.doc_id!r} has no entries")
        labels = {e.label for e in self.entries}
        if len(labels) != 1:
            raise RecordError(f"conflicting labels {sorted(labels)} for docId {self.doc_id!r}")
        features = [e.feature for e in self.entries]
        if len(set(features)) != len(features):
            raise RecordError(f"duplicate feature in sufficient sample {self.doc_id!r}")

    @property
    def label(self) -> int:
        return self.entries[0].label


@dataclass(frozen=True)
class GradientRecord:
    feature: str
    grad: float
    tag = "q"


@dataclass(frozen=True)
class SubFeatureListRecord:
    parent: str
    subs: tuple[str, ...]
    tag = "e"


TAGGED_TYPES = {
    "p": ParameterRecord,
    "i": InvertIndexRecord,
    "q": GradientRecord,
    "e": SubFeatureListRecord,
}
UNTAGGED_TYPES = (DistributedParamRecord, SufficientSample)


# -- serialization -----------------------------------------------------------


def serialize(record) -> str:
    """Render ``record`` as one ``key<TAB>value`` line (no trailing newline)."""
    if isinstance(record, ParameterRecord):
        check_field("feature", record.feature, allow="|")
        return f"{record.feature}\tp {format_real(record.value)}"
    if isinstance(record, GradientRecord):
        check_field("feature", record.feature, allow="|")
        return f"{record.feature}\tq {format_real(record.grad)}"
    if isinstance(record, InvertIndexRecord):
        check_field("key", record.key, allow="|")
        for unit in record.units:
            check_field("docId", unit.doc_id)
        units = " ".join(u.text() for u in record.units)
        body = f"i {record.num} {units}" if units else f"i {record.num}"
        return f"{record.key}\t{body}"
    if isinstance(record, SubFeatureListRecord):
        check_field("parent", record.parent)
        if not record.subs:
            raise RecordError(f"empty sub-feature list for {record.parent!r}")
        for sub in record.subs:
            check_field("sub-feature", sub, allow="|")
        return f"{record.parent}\te {';'.join(record.subs)}"
    if isinstance(record, DistributedParamRecord):
        check_field("docId", record.doc_id)
        entry = Entry(record.label, record.feature, record.count, record.para)
        check_field("feature", record.feature, allow="|")
        return f"{record.doc_id}\t{entry.text()}"
    if isinstance(record, SufficientSample):
        check_field("docId", record.doc_id)
        for e in record.entries:
            check_field("feature", e.feature, allow="|")
        return f"{record.doc_id}\t{' '.join(e.text() for e in record.entries)}"
    if isinstance(record, Sample):
        return serialize_sample(record)
    raise RecordError(f"cannot serialize {type(record).__name__}")


def split_line(line: str) -> tuple[str, str]:
    key, sep, value = line.partition("\t")
    if not sep or not key:
        raise RecordError(f"malformed record line (need key<TAB>value): {line!r}")
    return key, value


def parse_value(key: str, value: str, expected: Iterable[type]):
    """Parse the value half of a record line whose key is already split off."""
    expected = tuple(expected)
    tag, _, rest = value.partition(" ")
    cls = TAGGED_TYPES.get(tag)
    if cls is not None:
        if cls not in expected:
            raise RecordError(f"type tag {tag!r} not accepted here: {key}\t{value}")
        return _PARSERS[tag](key, rest)
    if len(tag) == 1 and tag.isalpha():
        raise RecordError(f"unknown type tag {tag!r}: {key}\t{value}")
    if DistributedParamRecord in expected and " " not in value:
        e = Entry.parse(value)
        check_field("docId", key)
        return DistributedParamRecord(key, e.label, e.feature, e.count, e.para)
    if SufficientSample in expected:
        check_field("docId", key)
        return SufficientSample(key, tuple(Entry.parse(t) for t in value.split(" ")))
    raise RecordError(f"unrecognized record value: {key}\t{value}")


def parse(line: str, expected: Iterable[type]):
    """Inverse of :func:`serialize`, restricted to the ``expected`` types."""
    key, value = split_line(line.rstrip("\n"))
    return parse_value(key, value, expected)


def _parse_param(key, rest):
    check_field("feature", key, allow="|")
    if not rest or " " in rest:
        raise RecordError(f"parameter value must be a single real: {key}\tp {rest}")
    return ParameterRecord(key, parse_real(rest))


def _parse_grad(key, rest):
    check_field("feature", key, allow="|")
    if not rest or " " in rest:
        raise RecordError(f"gradient value must be a single real: {key}\tq {rest}")
    return GradientRecord(key, parse_real(rest))


def _parse_invert(key, rest):
    check_field("key", key, allow="|")
    fields = rest.split(" ")
    num = _parse_int(fields[0], "num")
    units = tuple(DocUnit.parse(u) for u in fields[1:])
    return InvertIndexRecord(key, num, units)


def _parse_sublist(key, rest):
    check_field("parent", key)
    subs = tuple(rest.split(";"))
    for sub in subs:
        check_field("sub-feature", sub, allow="|")
    return SubFeatureListRecord(key, subs)


_PARSERS = {"p": _parse_param, "i": _parse_invert, "q": _parse_grad, "e": _parse_sublist}


# -- corpus lines ------------------------------------------------------------


def parse_sample(line: str) -> Sample:
    """Parse a corpus line ``<label><TAB><f>:<count> ...``; docId is assigned later."""
    line = line.rstrip("\n")
    label, sep, body = line.partition("\t")
    if not sep:
        raise RecordError(f"sample line has no TAB after the label: {line!r}")
    tokens = []
    for token in body.split(" "):
        feature, sep, count = token.rpartition(":")
        if not sep:
            raise RecordError(f"token must be feature:count, got {token!r} in {line!r}")
        tokens.append((feature, _parse_count(count)))
    try:
        return Sample(_parse_label(label), tuple(tokens))
    except RecordError as exc:
        raise RecordError(f"{exc} in {line!r}") from None


def serialize_sample(sample: Sample) -> str:
    body = " ".join(f"{f}:{c}" for f, c in sample.tokens)
    return f"{sample.label}\t{body}"
