from dpmr.pipeline.driver import (
    ClassifyReport,
    IterationReport,
    PipelineConfig,
    Trainer,
    classify,
    read_gradients,
    read_parameters,
    train,
)
from dpmr.pipeline.evaluation import Evaluation, evaluate, read_predictions

__all__ = [
    "ClassifyReport",
    "Evaluation",
    "IterationReport",
    "PipelineConfig",
    "Trainer",
    "classify",
    "evaluate",
    "read_gradients",
    "read_parameters",
    "read_predictions",
    "train",
]
