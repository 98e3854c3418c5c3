import math
from pathlib import Path

import pytest

from dpmr.datagen import CorpusSpec, generate_corpus, write_corpus
from dpmr.engine import EngineConfig
from dpmr.lr import Hyperparams
from dpmr.pipeline import PipelineConfig
from dpmr.sharding import ShardPolicy


def rel_close(a: float, b: float, rel: float) -> bool:
    """Relative comparison that treats values near zero absolutely."""
    return abs(a - b) <= rel * max(abs(a), abs(b), 1.0)


def max_rel_diff(a: dict, b: dict) -> float:
    assert set(a) == set(b), sorted(set(a) ^ set(b))[:10]
    worst = 0.0
    for k in a:
        worst = max(worst, abs(a[k] - b[k]) / max(abs(a[k]), abs(b[k]), 1e-300) if a[k] != b[k] else 0.0)
    return worst


def write_lines(path: Path, lines) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def make_corpus(tmp_path: Path, n: int, features: int, seed: int = 0, n_test: int = 0, **kw):
    spec = CorpusSpec(n_features=features, seed=seed, **kw)
    train, test = generate_corpus(n, spec, n_test)
    train_path = tmp_path / "train.txt"
    write_corpus(train_path, train)
    test_path = None
    if n_test:
        test_path = tmp_path / "test.txt"
        write_corpus(test_path, test)
    return train_path, test_path


def config(
    alpha=0.1,
    iterations=5,
    workers=1,
    reducers=1,
    shard_max=None,
    strategy="round-robin",
    split_size=64 * 1024 * 1024,
    objective=True,
    tol=0.0,
    **kw,
) -> PipelineConfig:
    return PipelineConfig(
        hyper=Hyperparams(alpha=alpha, max_iter=iterations, tol=tol),
        shard=ShardPolicy(shard_max, strategy, reducers),
        engine=EngineConfig(workers=workers, split_size_bytes=split_size),
        num_reducers=reducers,
        sharding_enabled=shard_max is not None,
        compute_objective=objective,
        **kw,
    )


@pytest.fixture
def small_corpus(tmp_path):
    return make_corpus(tmp_path, 300, 40, seed=11, n_test=100)[0]


LOG2 = math.log(2)
