"""Logistic-regression arithmetic used inside the jobs.

Real-valued folds use ``math.fsum``: the result is the correctly rounded sum
of the exact terms, so it does not depend on the order in which a reducer
or a sufficient sample presents them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from dpmr.records import Entry, RecordError, SufficientSample

ParameterVector = dict[str, float]


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.1
    max_iter: int = 5
    tol: float = 1e-4
    binary_features: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")


def sigmoid(z: float) -> float:
    """1 / (1 + exp(-z)) without overflow for large |z|; NaN maps to NaN."""
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def softplus(z: float) -> float:
    """log(1 + exp(z)), stable for large |z|."""
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def _entries(sample) -> list[Entry]:
    if isinstance(sample, SufficientSample):
        return list(sample.entries)
    return list(sample)


def margin(sample: SufficientSample | Iterable[Entry]) -> float:
    """theta^T x for a sufficient sample, using only its stored parameters."""
    entries = _entries(sample)
    if len({e.feature for e in entries}) != len(entries):
        raise RecordError("duplicate feature in sufficient sample")
    return math.fsum(e.count * e.para for e in entries)


def inference(sample: SufficientSample | Iterable[Entry]) -> float:
    """p(y=1 | x; theta) for a sufficient sample."""
    return sigmoid(margin(sample))


def gradient_contribution(count: int, h: float, label: int) -> float:
    """One sample's term of the gradient for one feature: count * (h - y)."""
    return count * (h - label)


def sample_loss(sample: SufficientSample | Iterable[Entry]) -> float:
    """Negative log-likelihood of one sufficient sample."""
    entries = _entries(sample)
    z = margin(entries)
    return softplus(-z) if entries[0].label == 1 else softplus(z)


def optimize(para: float, grad: float, alpha: float) -> float:
    """One gradient-descent step."""
    return para - alpha * grad
