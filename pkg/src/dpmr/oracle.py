"""In-memory full-batch logistic regression, used as ground truth for the pipeline.

Shares nothing with the map-reduce path except :func:`dpmr.lr.sigmoid`.
Sums are exactly rounded (``math.fsum``) so results do not depend on sample
or feature order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from dpmr.engine import read_lines
from dpmr.lr import Hyperparams, ParameterVector, sigmoid
from dpmr.records import Sample, parse_sample


@dataclass
class DenseInstance:
    samples: list[Sample]
    params: ParameterVector = field(default_factory=dict)
    binary_features: bool = False

    def features(self, sample: Sample) -> list[tuple[str, int]]:
        if self.binary_features:
            return sorted((f, 1) for f, _ in sample.tokens)
        return sorted(sample.tokens)

    def score(self, sample: Sample) -> float:
        return math.fsum(x * self.params.get(f, 0.0) for f, x in self.features(sample))


def load_samples(paths) -> list[Sample]:
    """Read corpus files (or directories) in path order, then line order."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    samples = []
    for p in sorted(str(p) for p in paths):
        samples.extend(parse_sample(line) for line in read_lines(Path(p)))
    return samples


def _log1pexp(z: float) -> float:
    if z > 0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


def oracle_objective(instance: DenseInstance) -> float:
    """J(theta) = -sum_i [y log h + (1 - y) log(1 - h)]."""
    terms = []
    for s in instance.samples:
        z = instance.score(s)
        # -log(sigmoid(z)) = log(1 + e^-z);  -log(1 - sigmoid(z)) = log(1 + e^z)
        terms.append(_log1pexp(-z) if s.label == 1 else _log1pexp(z))
    return math.fsum(terms)


def oracle_gradient(instance: DenseInstance) -> dict[str, float]:
    """Gradient of J for every feature occurring in the samples."""
    terms: dict[str, list[float]] = {}
    for s in instance.samples:
        residual = sigmoid(instance.score(s)) - s.label
        for f, x in instance.features(s):
            terms.setdefault(f, []).append(x * residual)
    return {f: math.fsum(terms[f]) for f in sorted(terms)}


def oracle_train(samples: list[Sample], hyper: Hyperparams) -> ParameterVector:
    """``max_iter`` gradient-descent steps from theta = 0 with fixed ``alpha``."""
    instance = DenseInstance(samples, {}, hyper.binary_features)
    instance.params = {f: 0.0 for s in samples for f, _ in s.tokens}
    for _ in range(hyper.max_iter):
        grad = oracle_gradient(instance)
        instance.params = {f: theta - hyper.alpha * grad.get(f, 0.0) for f, theta in instance.params.items()}
    return instance.params


def oracle_predict(samples: list[Sample], params: ParameterVector, binary_features: bool = False) -> list[tuple[float, int]]:
    """(p(y=1), predicted label) per sample, in corpus order."""
    instance = DenseInstance(samples, params, binary_features)
    out = []
    for s in samples:
        p = sigmoid(instance.score(s))
        out.append((p, 1 if p >= 0.5 else 0))
    return out


def accuracy(samples: list[Sample], params: ParameterVector) -> float:
    preds = oracle_predict(samples, params)
    return sum(pred == s.label for (_, pred), s in zip(preds, samples)) / len(samples)
