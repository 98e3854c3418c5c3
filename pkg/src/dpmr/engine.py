"""Local, file-backed map-reduce engine.

A job reads text inputs split into byte ranges, runs one map task per split,
sorts and (optionally) combines each task's output per reducer into spill
files, then runs one reduce task per reducer over the merged spills. Output
goes to ``part-r-NNNNN`` (or ``part-m-NNNNN`` for map-only jobs) plus a
``_STATS`` file.

Output bytes depend only on the job spec, the inputs, the split size and the
reducer count; the number of worker processes never changes them. Keys are
partitioned with CRC-32 (zlib, initial value 0) of the UTF-8 key bytes.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import multiprocessing
import os
import re
import shutil
import tempfile
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Optional

logger = logging.getLogger(__name__)

KV = tuple[str, str]
MapFn = Callable[["LineId", str], Iterable[KV]]
ReduceFn = Callable[[str, list[str]], Iterable[KV]]

STATS_FILE = "_STATS"
DEFAULT_SPLIT_SIZE = 64 * 1024 * 1024
_PART_RE = re.compile(r"^part-r-(\d{5})$")


class JobError(RuntimeError):
    """A map or reduce function failed; the job's output has been removed."""


class OutputExistsError(FileExistsError):
    pass


class LineId(NamedTuple):
    """Position of an input line: split index and line index within the split."""

    split: int
    line: int


def default_partition(key: str, num_reducers: int) -> int:
    """Stable reducer index for ``key``: CRC-32 of its UTF-8 bytes mod ``num_reducers``."""
    return zlib.crc32(key.encode("utf-8")) % num_reducers


@dataclass
class JobSpec:
    name: str
    map_fn: MapFn
    reduce_fn: Optional[ReduceFn] = None
    combine_fn: Optional[ReduceFn] = None
    partition_fn: Callable[[str, int], int] = default_partition
    num_reducers: int = 1
    map_only: bool = False

    def __post_init__(self):
        if self.num_reducers < 1:
            raise ValueError("num_reducers must be >= 1")
        if self.map_only and (self.reduce_fn or self.combine_fn):
            raise ValueError(f"map-only job {self.name!r} cannot have a combiner or reducer")
        if not self.map_only and self.reduce_fn is None:
            raise ValueError(f"job {self.name!r} needs a reduce_fn or map_only=True")


@dataclass
class EngineConfig:
    workers: int = 1
    split_size_bytes: int = DEFAULT_SPLIT_SIZE
    work_dir: Optional[str] = None
    keep_intermediates: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.split_size_bytes < 1:
            raise ValueError("split_size_bytes must be >= 1")


@dataclass
class JobStats:
    name: str = ""
    map_tasks: int = 0
    reduce_tasks: int = 0
    records_in: int = 0
    map_output_records: int = 0
    shuffled_records: int = 0
    bytes_shuffled: int = 0
    local_records: int = 0
    records_out: int = 0
    output_local_records: int = 0
    wall_time: float = 0.0
    per_task_times: list[float] = field(default_factory=list)

    TIMING_FIELDS = ("wall_time", "per_task_times")

    @property
    def local_fraction(self) -> float:
        return self.local_records / self.shuffled_records if self.shuffled_records else 0.0

    @property
    def output_local_fraction(self) -> float:
        """Share of reduce output records whose key partitions back to the reducer that wrote them."""
        return self.output_local_records / self.records_out if self.records_out else 0.0

    def write(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name, value in asdict(self).items():
                fh.write(f"{json.dumps(name)}: {json.dumps(value)}\n")

    @classmethod
    def read(cls, path: Path) -> JobStats:
        values = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                name, _, value = line.partition(": ")
                values[json.loads(name)] = json.loads(value)
        return cls(**values)


@dataclass(frozen=True)
class InputSplit:
    index: int
    path: str
    start: int
    end: int

    def home_reducer(self, num_reducers: int) -> int:
        """Reducer co-located with this split's data.

        A split read from a reducer's ``part-r-NNNNN`` file lives where that
        reducer ran; any other split is placed round-robin by split index.
        """
        m = _PART_RE.match(os.path.basename(self.path))
        if m:
            return int(m.group(1)) % num_reducers
        return self.index % num_reducers

    def read_lines(self) -> list[str]:
        with open(self.path, "rb") as fh:
            fh.seek(self.start)
            data = fh.read(self.end - self.start)
        return [line for line in data.decode("utf-8").split("\n") if line]


def list_input_files(inputs: Iterable[str | os.PathLike]) -> list[str]:
    """Expand directories to their data files (skipping ``_*`` and ``.*``), sorted by path."""
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(
                str(c) for c in p.iterdir() if c.is_file() and not c.name.startswith(("_", "."))
            )
        elif p.is_file():
            files.append(str(p))
        else:
            raise FileNotFoundError(f"input does not exist: {p}")
    return sorted(files)


def split_inputs(inputs, split_size_bytes: int) -> list[InputSplit]:
    """Cut the inputs into byte ranges of roughly ``split_size_bytes`` on line boundaries."""
    splits = []
    for path in list_input_files(inputs):
        try:
            size = os.path.getsize(path)
            fh = open(path, "rb")
        except OSError as exc:
            raise OSError(f"cannot read input {path}: {exc}") from exc
        with fh:
            start = 0
            while start < size:
                fh.seek(min(start + split_size_bytes, size) - 1)
                fh.readline()
                end = min(fh.tell(), size)
                splits.append(InputSplit(len(splits), path, start, end))
                start = end
    return splits


def read_records(path) -> Iterator[KV]:
    """Yield ``(key, value)`` pairs from a part file or an output directory."""
    for name in list_input_files([path]):
        with open(name, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    key, _, value = line.partition("\t")
                    yield key, value


def read_lines(path) -> Iterator[str]:
    for name in list_input_files([path]):
        with open(name, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    yield line


# -- task bodies -------------------------------------------------------------
#
# Tasks run either inline or in forked worker processes. The spec is looked up
# in _ACTIVE_JOBS, which forked workers inherit, so map and reduce functions do
# not have to be picklable.

_ACTIVE_JOBS: dict[str, JobSpec] = {}


@dataclass
class _MapResult:
    task: int
    records_in: int = 0
    records_out: int = 0
    shuffled: list[int] = field(default_factory=list)
    shuffled_bytes: list[int] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class _ReduceResult:
    task: int
    records_out: int = 0
    local_out: int = 0
    seconds: float = 0.0


def _check_kv(kv, where: str) -> KV:
    if not (isinstance(kv, tuple) and len(kv) == 2 and isinstance(kv[0], str) and isinstance(kv[1], str)):
        raise TypeError(f"{where} must emit (str, str) pairs, got {kv!r}")
    if "\n" in kv[0] or "\n" in kv[1] or "\t" in kv[0]:
        raise ValueError(f"{where} emitted a key/value with a separator character: {kv!r}")
    return kv


def _write_run(path: Path, pairs: list[KV]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}\t{v}\n" for k, v in pairs)


def _read_run(path: Path) -> Iterator[KV]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            k, _, v = line.rstrip("\n").partition("\t")
            yield k, v


def _combine(pairs: Iterable[KV], combine_fn: ReduceFn, task: str) -> Iterator[KV]:
    for key, group in itertools.groupby(pairs, key=lambda kv: kv[0]):
        values = [v for _, v in group]
        try:
            out = [_check_kv(kv, "combiner") for kv in combine_fn(key, values)]
        except Exception as exc:
            raise JobError(f"{task} combiner failed on key {key!r}: {exc}") from exc
        if any(k != key for k, _ in out):
            raise JobError(f"{task} combiner changed the key of group {key!r}")
        yield from sorted(out)


def _map_task(token: str, split: InputSplit, job_dir: str, output_dir: str, buffer_bytes: int) -> _MapResult:
    spec = _ACTIVE_JOBS[token]
    t0 = time.perf_counter()
    task = f"{spec.name} map task {split.index}"
    result = _MapResult(split.index)
    lines = split.read_lines()
    result.records_in = len(lines)

    if spec.map_only:
        out_path = Path(output_dir) / f"part-m-{split.index:05d}"
        with open(out_path, "w", encoding="utf-8") as fh:
            for i, line in enumerate(lines):
                try:
                    for k, v in spec.map_fn(LineId(split.index, i), line):
                        _check_kv((k, v), "mapper")
                        fh.write(f"{k}\t{v}\n")
                        result.records_out += 1
                except Exception as exc:
                    raise JobError(f"{task} failed: {exc}; input line: {line!r}") from exc
        result.seconds = time.perf_counter() - t0
        return result

    # Buffer map output per reducer, spilling sorted runs when the buffer grows.
    task_dir = Path(job_dir) / f"map-{split.index:05d}"
    task_dir.mkdir(parents=True)
    nred = spec.num_reducers
    buffers: list[list[KV]] = [[] for _ in range(nred)]
    runs: list[list[Path]] = [[] for _ in range(nred)]
    buffered = 0

    def spill():
        nonlocal buffered
        for r, buf in enumerate(buffers):
            if buf:
                buf.sort()
                path = task_dir / f"run-{r:05d}-{len(runs[r]):05d}"
                _write_run(path, buf)
                runs[r].append(path)
                buffers[r] = []
        buffered = 0

    for i, line in enumerate(lines):
        try:
            for kv in spec.map_fn(LineId(split.index, i), line):
                k, v = _check_kv(kv, "mapper")
                r = spec.partition_fn(k, nred)
                if not 0 <= r < nred:
                    raise ValueError(f"partition_fn returned {r} for key {k!r}")
                buffers[r].append(kv)
                buffered += len(k) + len(v) + 2
                result.records_out += 1
        except JobError:
            raise
        except Exception as exc:
            raise JobError(f"{task} failed: {exc}; input line: {line!r}") from exc
        if buffered > buffer_bytes:
            spill()

    for r in range(nred):
        buffers[r].sort()
        if runs[r]:
            spill_needed = bool(buffers[r])
            if spill_needed:
                path = task_dir / f"run-{r:05d}-{len(runs[r]):05d}"
                _write_run(path, buffers[r])
                runs[r].append(path)
            merged = heapq.merge(*(_read_run(p) for p in runs[r]))
        else:
            merged = iter(buffers[r])
        if spec.combine_fn is not None:
            merged = _combine(merged, spec.combine_fn, task)
        count = nbytes = 0
        with open(task_dir / f"spill-{r:05d}", "w", encoding="utf-8") as fh:
            for k, v in merged:
                line = f"{k}\t{v}\n"
                fh.write(line)
                count += 1
                nbytes += len(line.encode("utf-8"))
        result.shuffled.append(count)
        result.shuffled_bytes.append(nbytes)
        for p in runs[r]:
            p.unlink()
        buffers[r] = []
    result.seconds = time.perf_counter() - t0
    return result


def _reduce_task(token: str, r: int, spill_files: list[str], output_dir: str) -> _ReduceResult:
    spec = _ACTIVE_JOBS[token]
    t0 = time.perf_counter()
    task = f"{spec.name} reduce task {r}"
    result = _ReduceResult(r)
    merged = heapq.merge(*(_read_run(Path(p)) for p in spill_files))
    out: list[KV] = []
    for key, group in itertools.groupby(merged, key=lambda kv: kv[0]):
        values = [v for _, v in group]
        try:
            out.extend(_check_kv(kv, "reducer") for kv in spec.reduce_fn(key, values))
        except Exception as exc:
            raise JobError(f"{task} failed on key {key!r}: {exc}") from exc
    out.sort()
    with open(Path(output_dir) / f"part-r-{r:05d}", "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}\t{v}\n" for k, v in out)
    result.records_out = len(out)
    result.local_out = sum(1 for k, _ in out if spec.partition_fn(k, spec.num_reducers) == r)
    result.seconds = time.perf_counter() - t0
    return result


# -- driver ------------------------------------------------------------------


def _run_tasks(fn, arg_lists: list[tuple], workers: int) -> list:
    if workers == 1 or len(arg_lists) <= 1:
        return [fn(*args) for args in arg_lists]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(arg_lists)), mp_context=ctx) as pool:
        futures = [pool.submit(fn, *args) for args in arg_lists]
        return [f.result() for f in futures]


def prepare_output(output: Path, force: bool = False) -> None:
    """Refuse to clobber a non-empty directory unless ``force``."""
    if output.exists():
        if output.is_dir() and not any(output.iterdir()):
            return
        if not force:
            raise OutputExistsError(f"output path already exists: {output}")
        if output.is_dir():
            shutil.rmtree(output)
        else:
            output.unlink()


def run_job(spec: JobSpec, inputs, output, config: EngineConfig | None = None) -> JobStats:
    """Run one map-reduce job from ``inputs`` into the fresh directory ``output``."""
    config = config or EngineConfig()
    output = Path(output)
    prepare_output(output)
    splits = split_inputs(inputs, config.split_size_bytes)

    if config.work_dir:
        job_dir = Path(config.work_dir) / spec.name
        if job_dir.exists():
            shutil.rmtree(job_dir)
        job_dir.mkdir(parents=True)
    else:
        job_dir = Path(tempfile.mkdtemp(prefix=f"dpmr-{spec.name}-"))
    output.mkdir(parents=True, exist_ok=True)

    token = f"{os.getpid()}:{id(spec)}:{spec.name}:{job_dir}"
    _ACTIVE_JOBS[token] = spec
    t0 = time.perf_counter()
    stats = JobStats(name=spec.name, map_tasks=len(splits))
    try:
        map_args = [(token, s, str(job_dir), str(output), config.split_size_bytes) for s in splits]
        map_results = _run_tasks(_map_task, map_args, config.workers)
        stats.records_in = sum(m.records_in for m in map_results)
        stats.map_output_records = sum(m.records_out for m in map_results)
        stats.per_task_times = [m.seconds for m in map_results]

        if spec.map_only:
            stats.records_out = stats.map_output_records
        else:
            nred = spec.num_reducers
            for split, m in zip(splits, map_results):
                home = split.home_reducer(nred)
                stats.shuffled_records += sum(m.shuffled)
                stats.bytes_shuffled += sum(m.shuffled_bytes)
                stats.local_records += m.shuffled[home]
            reduce_args = [
                (token, r, [str(job_dir / f"map-{s.index:05d}" / f"spill-{r:05d}") for s in splits], str(output))
                for r in range(nred)
            ]
            reduce_results = _run_tasks(_reduce_task, reduce_args, config.workers)
            stats.reduce_tasks = nred
            stats.records_out = sum(r.records_out for r in reduce_results)
            stats.output_local_records = sum(r.local_out for r in reduce_results)
            stats.per_task_times += [r.seconds for r in reduce_results]
    except BaseException:
        shutil.rmtree(output, ignore_errors=True)
        raise
    finally:
        _ACTIVE_JOBS.pop(token, None)
        if not config.keep_intermediates or not config.work_dir:
            shutil.rmtree(job_dir, ignore_errors=True)

    stats.wall_time = time.perf_counter() - t0
    stats.write(output / STATS_FILE)
    logger.info("%s: %d in, %d out, %.2fs", spec.name, stats.records_in, stats.records_out, stats.wall_time)
    return stats


def replace_dir(src, dst) -> None:
    """Move ``src`` over ``dst`` so that a complete ``dst`` always exists.

    The old ``dst`` is renamed aside first and removed only after ``src`` has
    taken its place.
    """
    src, dst = Path(src), Path(dst)
    old = dst.with_name(dst.name + ".old")
    if old.exists():
        shutil.rmtree(old)
    if dst.exists():
        os.rename(dst, old)
    os.rename(src, dst)
    if old.exists():
        shutil.rmtree(old)
