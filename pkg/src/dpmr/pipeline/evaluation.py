"""Per-class precision / recall / F over prediction files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

from dpmr.engine import read_lines
from dpmr.records import RecordError

CLASSES = (1, 0)


@dataclass(frozen=True)
class Prediction:
    doc_id: str
    label: int
    predicted: int


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f: float
    support: int
    predicted: int
    correct: int


@dataclass(frozen=True)
class Evaluation:
    classes: dict[int, ClassScores]
    precision: float
    recall: float
    f: float
    accuracy: float
    total: int

    def to_text(self) -> str:
        rows = [f"{'class':>5}  {'precision':>9}  {'recall':>9}  {'f':>9}  {'support':>7}"]
        for c in CLASSES:
            s = self.classes[c]
            rows.append(f"{c:>5}  {s.precision:9.4f}  {s.recall:9.4f}  {s.f:9.4f}  {s.support:7d}")
        rows.append(f"{'avg':>5}  {self.precision:9.4f}  {self.recall:9.4f}  {self.f:9.4f}  {self.total:7d}")
        rows.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(rows)

    def to_json(self) -> str:
        data = asdict(self)
        data["classes"] = {str(c): asdict(s) for c, s in self.classes.items()}
        return json.dumps(data, sort_keys=True)


def parse_prediction(line: str) -> Prediction:
    parts = line.split("\t")
    if len(parts) not in (3, 4) or parts[1] not in ("0", "1") or parts[2] not in ("0", "1") or not parts[0]:
        raise RecordError(f"malformed prediction line: {line!r}")
    return Prediction(parts[0], int(parts[1]), int(parts[2]))


def read_predictions(path) -> list[Prediction]:
    return [parse_prediction(line) for line in read_lines(Path(path))]


def f_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate(predictions: Iterable[Prediction] | str | Path) -> Evaluation:
    """Score predictions per class; a class with no predicted members has precision 0."""
    if isinstance(predictions, (str, Path)):
        predictions = read_predictions(predictions)
    predictions = list(predictions)
    if not predictions:
        raise ValueError("no predictions to evaluate")
    classes = {}
    for c in CLASSES:
        support = sum(1 for p in predictions if p.label == c)
        predicted = sum(1 for p in predictions if p.predicted == c)
        correct = sum(1 for p in predictions if p.label == c and p.predicted == c)
        precision = correct / predicted if predicted else 0.0
        recall = correct / support if support else 0.0
        classes[c] = ClassScores(precision, recall, f_score(precision, recall), support, predicted, correct)
    n = len(CLASSES)
    return Evaluation(
        classes=classes,
        precision=sum(s.precision for s in classes.values()) / n,
        recall=sum(s.recall for s in classes.values()) / n,
        f=sum(s.f for s in classes.values()) / n,
        accuracy=sum(s.correct for s in classes.values()) / len(predictions),
        total=len(predictions),
    )
