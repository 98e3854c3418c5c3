"""Training and classification drivers.

Training runs initParameters and the invert jobs once, then loops
distribute -> restore -> (objective) -> gradients -> update -> swap. With
sharding enabled the loop first copies parent parameters onto sub-features.
Stage directories live under one output root::

    paraValue/ docInvert/ paraInvert/ paraDistributeShard/ paraDistribute/
    docRestore/ objective/ gradCompute/ paraUpdate/ reports/
"""

from __future__ import annotations

import dataclasses
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dpmr.engine import EngineConfig, JobStats, prepare_output, read_records, replace_dir
from dpmr.lr import Hyperparams, ParameterVector
from dpmr.pipeline import jobs
from dpmr.records import GradientRecord, ParameterRecord, parse_value
from dpmr.sharding import FeatureFrequencyTable, ShardPolicy, collect_frequencies

logger = logging.getLogger(__name__)

STAGES = (
    "paraValue",
    "docInvert",
    "paraInvert",
    "paraDistributeShard",
    "paraDistribute",
    "docRestore",
    "objective",
    "gradCompute",
    "paraUpdate",
)
LOOP_STAGES = ("paraDistributeShard", "paraDistribute", "docRestore", "objective", "gradCompute", "paraUpdate")


@dataclass
class PipelineConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    shard: ShardPolicy = field(default_factory=ShardPolicy)
    engine: EngineConfig = field(default_factory=EngineConfig)
    num_reducers: int = 1
    sharding_enabled: bool = False
    compute_objective: bool = True
    mapper_side_sharding: bool = False

    def __post_init__(self):
        if self.num_reducers < 1:
            raise ValueError("num_reducers must be >= 1")
        if self.shard.num_reducers != self.num_reducers:
            self.shard = dataclasses.replace(self.shard, num_reducers=self.num_reducers)

    @property
    def policy(self) -> ShardPolicy:
        """The shard policy actually in force (disabled unless sharding is on)."""
        if self.sharding_enabled:
            return self.shard
        return dataclasses.replace(self.shard, max_units_per_shard=None)


@dataclass
class IterationReport:
    iteration: int
    objective: Optional[float]
    job_stats: dict[str, JobStats]
    param_count: int

    def to_text(self) -> str:
        """Stable plain-text form; timing lines all start with ``wall_time``."""
        lines = [f"iteration\t{self.iteration}"]
        lines.append(f"objective\t{'' if self.objective is None else repr(self.objective)}")
        lines.append(f"param_count\t{self.param_count}")
        lines.extend(_job_lines(self.job_stats))
        return "\n".join(lines) + "\n"


def _job_lines(job_stats: dict[str, JobStats]) -> list[str]:
    lines = []
    for name, s in job_stats.items():
        lines.append(
            f"job\t{name}\tmap_tasks={s.map_tasks}\treduce_tasks={s.reduce_tasks}\trecords_in={s.records_in}"
            f"\tmap_output_records={s.map_output_records}\tshuffled_records={s.shuffled_records}"
            f"\tbytes_shuffled={s.bytes_shuffled}\tlocal_records={s.local_records}\trecords_out={s.records_out}"
            f"\toutput_local_records={s.output_local_records}"
        )
    for name, s in job_stats.items():
        lines.append(f"wall_time\t{name}\t{s.wall_time:.3f}")
    total = sum(s.wall_time for s in job_stats.values())
    lines.append(f"wall_time\ttotal\t{total:.3f}")
    return lines


def read_parameters(path) -> ParameterVector:
    """Load a parameter directory (or file) of ``f<TAB>p <value>`` lines."""
    params = {}
    for key, value in read_records(Path(path)):
        params[key] = parse_value(key, value, (ParameterRecord,)).value
    return params


def read_gradients(path) -> dict[str, float]:
    grads = {}
    for key, value in read_records(Path(path)):
        grads[key] = parse_value(key, value, (GradientRecord,)).grad
    return grads


class Trainer:
    """Step-by-step training driver; :func:`train` runs it to completion."""

    def __init__(self, train_input, output_root, config: PipelineConfig | None = None, force: bool = False):
        self.train_input = Path(train_input)
        self.root = Path(output_root)
        self.config = config or PipelineConfig()
        prepare_output(self.root, force=force)
        self.root.mkdir(parents=True, exist_ok=True)
        self.reports_dir = self.root / "reports"
        self.reports_dir.mkdir(exist_ok=True)
        self.iteration = 0
        self.reports: list[IterationReport] = []
        self.setup_stats: dict[str, JobStats] = {}
        self._ready = False

    def path(self, stage: str) -> Path:
        return self.root / stage

    @property
    def _kw(self):
        return {"engine": self.config.engine, "num_reducers": self.config.num_reducers}

    def _fresh(self, stage: str) -> Path:
        p = self.path(stage)
        if p.exists():
            shutil.rmtree(p)
        return p

    def setup(self) -> dict[str, JobStats]:
        """Initialize parameters and build the invert indexes (run once)."""
        cfg = self.config
        stats = self.setup_stats
        stats["init_parameters"] = jobs.init_parameters(self.train_input, self._fresh("paraValue"), **self._kw)
        if cfg.sharding_enabled:
            table: FeatureFrequencyTable | None = None
            if cfg.mapper_side_sharding:
                table = collect_frequencies(self.train_input, cfg.policy)
                table.save(self.root / "featureFrequency.txt")
            stats["invert_documents_sharding"] = jobs.invert_documents_sharding(
                self.train_input, self._fresh("docInvert"), cfg.policy, table, binary=cfg.hyper.binary_features, **self._kw
            )
            stats["invert_parameters"] = jobs.invert_parameters(self.path("docInvert"), self._fresh("paraInvert"), **self._kw)
        else:
            stats["invert_documents"] = jobs.invert_documents(
                self.train_input, self._fresh("docInvert"), binary=cfg.hyper.binary_features, **self._kw
            )
        (self.reports_dir / "setup.txt").write_text("\n".join(_job_lines(stats)) + "\n")
        self._ready = True
        return stats

    def step(self) -> IterationReport:
        """Run one full-batch gradient-descent iteration."""
        if not self._ready:
            self.setup()
        cfg = self.config
        kw = self._kw
        stats: dict[str, JobStats] = {}
        for stage in LOOP_STAGES:
            self._fresh(stage)

        if cfg.sharding_enabled:
            stats["distribute_parameters_sharding"] = jobs.distribute_parameters_sharding(
                self.path("paraValue"), self.path("paraInvert"), self.path("paraDistributeShard"), **kw
            )
            para_input = self.path("paraDistributeShard")
        else:
            para_input = self.path("paraValue")
        stats["distribute_parameters"] = jobs.distribute_parameters(
            para_input, self.path("docInvert"), self.path("paraDistribute"), **kw
        )
        stats["restore_documents"] = jobs.restore_documents(self.path("paraDistribute"), self.path("docRestore"), **kw)

        objective = None
        if cfg.compute_objective:
            objective, stats["compute_objective"] = jobs.compute_objective(
                self.path("docRestore"), self.path("objective"), engine=cfg.engine
            )
        grad_stats = jobs.compute_gradients(
            self.path("docRestore"), self.path("gradCompute"), cfg.sharding_enabled, **kw
        )
        stats[grad_stats.name] = grad_stats
        stats["update_parameters"] = jobs.update_parameters(
            self.path("paraValue"), self.path("gradCompute"), self.path("paraUpdate"), cfg.hyper.alpha, **kw
        )
        # The update output becomes the current parameters; the old directory
        # is only removed once the new one is in place.
        replace_dir(self.path("paraUpdate"), self.path("paraValue"))

        self.iteration += 1
        report = IterationReport(
            self.iteration, objective, stats, param_count=stats["update_parameters"].records_out
        )
        (self.reports_dir / f"iter-{self.iteration}.txt").write_text(report.to_text())
        self.reports.append(report)
        logger.info("iteration %d: J=%s", self.iteration, objective)
        return report

    def converged(self) -> bool:
        tol = self.config.hyper.tol
        if len(self.reports) < 2 or tol <= 0:
            return False
        prev, cur = self.reports[-2].objective, self.reports[-1].objective
        if prev is None or cur is None:
            return False
        return abs(cur - prev) < tol * abs(prev)

    def run(self) -> list[IterationReport]:
        if not self._ready:
            self.setup()
        while self.iteration < self.config.hyper.max_iter and not self.converged():
            self.step()
        return self.reports

    def parameters(self) -> ParameterVector:
        return read_parameters(self.path("paraValue"))


def train(train_input, output_root, config: PipelineConfig | None = None, force: bool = False) -> list[IterationReport]:
    """Train to ``max_iter`` iterations (or the objective tolerance); parameters end in ``output_root/paraValue``."""
    return Trainer(train_input, output_root, config, force=force).run()


@dataclass
class ClassifyReport:
    job_stats: dict[str, JobStats]
    num_predictions: int


def classify(
    test_input,
    para_value,
    test_output,
    config: PipelineConfig | None = None,
    *,
    work_root=None,
    with_probability: bool = False,
    force: bool = False,
) -> ClassifyReport:
    """Predict labels for a test corpus with a trained parameter directory.

    Test features the model never saw get a zero parameter. Intermediate
    stages go under ``work_root`` (a temporary directory by default).
    """
    config = config or PipelineConfig()
    para_value, test_output = Path(para_value), Path(test_output)
    if not para_value.is_dir() and not para_value.is_file():
        raise FileNotFoundError(f"model parameters not found: {para_value}")
    prepare_output(test_output, force=force)

    tmp = None
    if work_root is None:
        tmp = tempfile.mkdtemp(prefix="dpmr-classify-", dir=config.engine.work_dir)
        work_root = tmp
    root = Path(work_root)
    root.mkdir(parents=True, exist_ok=True)
    kw = {"engine": config.engine, "num_reducers": config.num_reducers}

    def fresh(name):
        p = root / name
        if p.exists():
            shutil.rmtree(p)
        return p

    stats: dict[str, JobStats] = {}
    try:
        stats["invert_documents_sharding"] = jobs.invert_documents_sharding(
            test_input, fresh("docInvertShardTest"), config.policy, binary=config.hyper.binary_features, **kw
        )
        stats["invert_parameters"] = jobs.invert_parameters(root / "docInvertShardTest", fresh("paraInvertTest"), **kw)
        stats["distribute_parameters_sharding"] = jobs.distribute_parameters_sharding(
            para_value, root / "paraInvertTest", fresh("paraDistributeShardTest"), missing_parent="zero", **kw
        )
        stats["distribute_parameters"] = jobs.distribute_parameters(
            root / "paraDistributeShardTest", root / "docInvertShardTest", fresh("paraDistributeTest"), **kw
        )
        stats["restore_documents"] = jobs.restore_documents(root / "paraDistributeTest", fresh("docRestoreTest"), **kw)
        stats["logistic_test"] = jobs.logistic_test(
            root / "docRestoreTest", test_output, with_probability=with_probability, engine=config.engine
        )
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return ClassifyReport(stats, stats["logistic_test"].records_out)
