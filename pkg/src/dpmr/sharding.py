"""High-frequency feature sharding.

A feature whose invert-index line would hold more than ``max_units_per_shard``
doc units is replaced by ``N = ceil(c / max_units_per_shard)`` sub-features
``i_N|f`` (1 <= i <= N), each carrying part of the unit list. Sharding is
single level: a sub-feature is never sharded again.
"""

from __future__ import annotations

import math
import zlib
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from dpmr.engine import default_partition, read_lines
from dpmr.records import DocUnit, RecordError, check_field, parse_sample

ROUND_ROBIN = "round-robin"
DOCID_LOCALITY = "docid-locality"
STRATEGIES = (ROUND_ROBIN, DOCID_LOCALITY)


class SubFeatureKey(NamedTuple):
    i: int
    n: int
    parent: str

    def __str__(self) -> str:
        return format_subfeature(self.i, self.n, self.parent)


@dataclass(frozen=True)
class ShardPolicy:
    """``max_units_per_shard=None`` disables sharding."""

    max_units_per_shard: Optional[int] = 10_000
    strategy: str = ROUND_ROBIN
    num_reducers: int = 1

    def __post_init__(self):
        if self.max_units_per_shard is not None and self.max_units_per_shard < 1:
            raise ValueError("max_units_per_shard must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown shard strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.num_reducers < 1:
            raise ValueError("num_reducers must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.max_units_per_shard is not None


def format_subfeature(i: int, n: int, parent: str) -> str:
    if not 1 <= i <= n:
        raise RecordError(f"sub-feature index {i} outside 1..{n}")
    check_field("parent", parent)
    return f"{i}_{n}|{parent}"


def parse_subfeature(key: str) -> SubFeatureKey:
    """Split ``i_N|parent``; a key without ``|`` is its own parent with i = N = 1."""
    if not key:
        raise RecordError("empty feature key")
    prefix, sep, parent = key.partition("|")
    if not sep:
        return SubFeatureKey(1, 1, key)
    i, us, n = prefix.partition("_")
    if not (us and i.isdigit() and n.isdigit()) or not parent:
        raise RecordError(f"malformed sub-feature key {key!r}")
    i, n = int(i), int(n)
    if not 1 <= i <= n:
        raise RecordError(f"sub-feature index out of range in {key!r}")
    check_field("parent", parent)
    return SubFeatureKey(i, n, parent)


def parent_of(key: str) -> str:
    return parse_subfeature(key).parent


def shard_count(c: int, policy: ShardPolicy) -> int:
    if c < 1:
        raise ValueError(f"feature count must be >= 1, got {c}")
    if not policy.enabled:
        return 1
    return -(-c // policy.max_units_per_shard)


def _docid_hash(doc_id: str) -> int:
    return zlib.crc32(doc_id.encode("utf-8"))


@lru_cache(maxsize=4096)
def locality_slots(parent: str, n: int, num_reducers: int) -> dict[int, int]:
    """Map reducer index -> first shard index i whose key ``i_N|parent`` lands there.

    Only i = 1..min(N, 4 * num_reducers) are tried.
    """
    slots: dict[int, int] = {}
    for i in range(1, min(n, 4 * num_reducers) + 1):
        slots.setdefault(default_partition(f"{i}_{n}|{parent}", num_reducers), i)
    return slots


def assign_unit(unit: DocUnit, parent: str, n: int, policy: ShardPolicy, position: int | None = None) -> str:
    """Shard key for one doc unit of ``parent`` split ``n`` ways.

    Round-robin deals units out cyclically by ``position`` (their index in the
    sorted unit list) when one is given, otherwise by a hash of the docId.
    Docid-locality picks the shard whose key partitions to the same reducer as
    the docId and falls back to round-robin when no such shard exists.
    """
    if n == 1:
        return parent
    if policy.strategy == DOCID_LOCALITY:
        target = default_partition(unit.doc_id, policy.num_reducers)
        i = locality_slots(parent, n, policy.num_reducers).get(target)
        if i is not None:
            return format_subfeature(i, n, parent)
    if position is not None:
        i = position % n + 1
    else:
        i = _docid_hash(unit.doc_id) % n + 1
    return format_subfeature(i, n, parent)


def shard_units(parent: str, units: Sequence[DocUnit], policy: ShardPolicy, n: int | None = None) -> dict[str, list[DocUnit]]:
    """Partition a feature's unit list into sub-feature lists, keyed by shard key."""
    if n is None:
        n = shard_count(len(units), policy) if units else 1
    out: dict[str, list[DocUnit]] = {}
    for pos, unit in enumerate(units):
        out.setdefault(assign_unit(unit, parent, n, policy, pos), []).append(unit)
    return out


def locality_fraction(pairs: Iterable[tuple[str, str]], num_reducers: int) -> float:
    """Fraction of (shard key, docId) pairs whose two keys partition to the same reducer."""
    total = local = 0
    for key, doc_id in pairs:
        total += 1
        local += default_partition(key, num_reducers) == default_partition(doc_id, num_reducers)
    return local / total if total else 0.0


# -- feature frequencies -----------------------------------------------------


class FeatureFrequencyTable(Mapping[str, int]):
    """Immutable feature -> number of samples containing it."""

    def __init__(self, counts: Mapping[str, int]):
        for f, c in counts.items():
            if c < 1:
                raise ValueError(f"frequency of {f!r} must be positive, got {c}")
        self._counts = dict(counts)

    def __getitem__(self, feature: str) -> int:
        return self._counts[feature]

    def __iter__(self):
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def truncated(self, min_count: int) -> FeatureFrequencyTable:
        """Keep only features with count > ``min_count`` (the ones that can shard)."""
        return FeatureFrequencyTable({f: c for f, c in self._counts.items() if c > min_count})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in sorted(self._counts):
                fh.write(f"{f}\t{self._counts[f]}\n")

    @classmethod
    def load(cls, path) -> FeatureFrequencyTable:
        counts = {}
        for line in read_lines(Path(path)):
            f, sep, c = line.partition("\t")
            if not sep or not c.isdigit():
                raise RecordError(f"malformed frequency line: {line!r}")
            counts[f] = int(c)
        return cls(counts)


def collect_frequencies(paths, policy: ShardPolicy | None = None) -> FeatureFrequencyTable:
    """Count, per feature, the samples containing it (one doc unit each).

    With a ``policy`` the table keeps only features that would be sharded.
    """
    counts: Counter[str] = Counter()
    for line in read_lines_of(paths):
        counts.update(f for f, _ in parse_sample(line).tokens)
    table = FeatureFrequencyTable(counts)
    if policy is not None and policy.enabled:
        table = table.truncated(policy.max_units_per_shard)
    return table


def read_lines_of(paths) -> Iterable[str]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    for p in paths:
        yield from read_lines(Path(p))
