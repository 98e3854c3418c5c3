"""Synthetic corpora with Zipf-distributed features.

A sample picks its class first, then draws a bag of tokens (with
replacement) from a class-conditional Zipf distribution: every feature is
tilted towards one class by ``exp(+-tilt)``. Token counts per feature are
the multiplicities of the draw, so a few features occur in most samples.

The planted weight of feature j is ``log(p1[j] / p0[j])`` and a sample's
planted score is ``z = sum(count * weight)``. With ``separable`` the label
is ``z > 0`` and samples with ``|z| < margin`` are redrawn; otherwise the
label is the drawn class.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dpmr.records import Sample, serialize_sample


@dataclass(frozen=True)
class CorpusSpec:
    n_features: int
    zipf_exponent: float = 1.0
    tokens_per_sample: float = 10.0
    separable: bool = False
    margin: float = 1.0
    tilt: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.tokens_per_sample < 1:
            raise ValueError("tokens_per_sample must be >= 1")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.separable and self.tilt <= 0:
            raise ValueError("a separable corpus needs tilt > 0")


def feature_name(index: int) -> str:
    return f"f{index + 1}"


class CorpusGenerator:
    """Seeded sample stream; train and held-out sets share the planted weights."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        n = spec.n_features
        base = np.arange(1, n + 1, dtype=float) ** -spec.zipf_exponent
        sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        self.rng.shuffle(sign)
        p1 = base * np.exp(spec.tilt * sign)
        p0 = base * np.exp(-spec.tilt * sign)
        p1 /= p1.sum()
        p0 /= p0.sum()
        self.weights = np.log(p1 / p0)
        self._cdf = (np.cumsum(p0), np.cumsum(p1))

    def _draw(self, label: int) -> tuple[list[tuple[str, int]], float]:
        n_tokens = 1 + int(self.rng.poisson(self.spec.tokens_per_sample - 1))
        cdf = self._cdf[label]
        ids = np.searchsorted(cdf, self.rng.random(n_tokens) * cdf[-1], side="right")
        ids = np.minimum(ids, self.spec.n_features - 1)
        counts = sorted(Counter(ids.tolist()).items())
        z = math.fsum(c * self.weights[i] for i, c in counts)
        return [(feature_name(i), c) for i, c in counts], z

    def sample(self) -> Sample:
        while True:
            label = int(self.rng.random() < 0.5)
            tokens, z = self._draw(label)
            if not self.spec.separable:
                return Sample(label, tuple(tokens))
            if abs(z) >= self.spec.margin:
                return Sample(int(z > 0), tuple(tokens))

    def samples(self, n: int) -> list[Sample]:
        return [self.sample() for _ in range(n)]


def generate_corpus(n_samples: int, spec: CorpusSpec, n_test: int = 0) -> tuple[list[str], list[str]]:
    """Corpus lines for ``n_samples`` training and ``n_test`` held-out samples."""
    if n_samples < 0 or n_test < 0:
        raise ValueError("sample counts must be non-negative")
    gen = CorpusGenerator(spec)
    train = [serialize_sample(s) for s in gen.samples(n_samples)]
    test = [serialize_sample(s) for s in gen.samples(n_test)]
    return train, test


def write_corpus(path, lines: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in lines)
