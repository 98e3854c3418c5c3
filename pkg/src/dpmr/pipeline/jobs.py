"""The DPMR map-reduce jobs.

Each public function builds one :class:`~dpmr.engine.JobSpec`, runs it over
stage directories and returns the job's :class:`~dpmr.engine.JobStats`.
Mappers and reducers exchange the text formats of :mod:`dpmr.records`.
"""

from __future__ import annotations

import math
from functools import partial
from pathlib import Path
from typing import Iterator, Optional

from dpmr import lr
from dpmr.engine import KV, EngineConfig, JobSpec, JobStats, LineId, read_records, run_job
from dpmr.records import (
    DocUnit,
    Entry,
    GradientRecord,
    InvertIndexRecord,
    ParameterRecord,
    RecordError,
    SubFeatureListRecord,
    SufficientSample,
    format_real,
    make_doc_id,
    parse_real,
    parse_sample,
    parse_value,
    serialize,
    split_line,
)
from dpmr.sharding import FeatureFrequencyTable, ShardPolicy, assign_unit, parent_of, parse_subfeature, shard_count, shard_units

OBJECTIVE_KEY = "J"
NO_SHARDING = ShardPolicy(max_units_per_shard=None)


def _value(record) -> str:
    return serialize(record).partition("\t")[2]


def _identity_map(line_id: LineId, line: str) -> Iterator[KV]:
    yield split_line(line)


def _run(spec: JobSpec, inputs, output, engine: Optional[EngineConfig]) -> JobStats:
    return run_job(spec, [Path(p) for p in inputs], Path(output), engine or EngineConfig())


# -- initParameters ----------------------------------------------------------


def _init_map(line_id, line):
    for feature, _ in parse_sample(line).tokens:
        yield feature, "1"


def _init_reduce(feature, values):
    # Values are ignored: every feature starts at 0.
    yield feature, _value(ParameterRecord(feature, 0.0))


def init_parameters(train_input, para_value_output, *, engine=None, num_reducers=1) -> JobStats:
    spec = JobSpec(
        "init_parameters",
        _init_map,
        reduce_fn=_init_reduce,
        combine_fn=_init_reduce,
        num_reducers=num_reducers,
    )
    return _run(spec, [train_input], para_value_output, engine)


# -- invertDocuments / invertDocumentsSharding -------------------------------


def _invert_map(line_id, line, binary=False, table=None, policy=NO_SHARDING):
    sample = parse_sample(line)
    doc_id = make_doc_id(line_id.split, line_id.line)
    for feature, count in sample.tokens:
        unit = DocUnit(doc_id, 1 if binary else count, sample.label)
        key = feature
        if table is not None and feature in table:
            key = assign_unit(unit, feature, shard_count(table[feature], policy), policy)
        yield key, f"i 1 {unit.text()}"


def _gather_units(key, values) -> list[DocUnit]:
    units: list[DocUnit] = []
    for value in values:
        units.extend(parse_value(key, value, (InvertIndexRecord,)).units)
    return units


def _invert_combine(key, values):
    units = _gather_units(key, values)
    yield key, _value(InvertIndexRecord(key, len(units), tuple(units)))


def _invert_reduce(key, values, policy=NO_SHARDING):
    units = sorted(_gather_units(key, values))
    if parse_subfeature(key).n > 1 or shard_count(len(units), policy) == 1:
        yield key, _value(InvertIndexRecord(key, len(units), tuple(units)))
        return
    for sub_key, sub_units in sorted(shard_units(key, units, policy).items()):
        yield sub_key, _value(InvertIndexRecord(sub_key, len(sub_units), tuple(sub_units)))


def invert_documents_sharding(
    train_input,
    doc_invert_output,
    policy: ShardPolicy,
    table: FeatureFrequencyTable | None = None,
    *,
    engine=None,
    num_reducers=1,
    binary=False,
    name="invert_documents_sharding",
) -> JobStats:
    """Build the feature -> doc-unit index, splitting long unit lists into sub-features.

    With a frequency ``table`` the mapper already emits sub-feature keys for
    the features it lists; otherwise the reducer shards on the full count.
    """
    if table is not None and policy.enabled:
        table = table.truncated(policy.max_units_per_shard)
    else:
        table = None
    spec = JobSpec(
        name,
        partial(_invert_map, binary=binary, table=table, policy=policy),
        reduce_fn=partial(_invert_reduce, policy=policy),
        combine_fn=_invert_combine,
        num_reducers=num_reducers,
    )
    return _run(spec, [train_input], doc_invert_output, engine)


def invert_documents(train_input, doc_invert_output, *, engine=None, num_reducers=1, binary=False) -> JobStats:
    return invert_documents_sharding(
        train_input,
        doc_invert_output,
        NO_SHARDING,
        engine=engine,
        num_reducers=num_reducers,
        binary=binary,
        name="invert_documents",
    )


# -- invertParameters --------------------------------------------------------


def _invert_params_map(line_id, line):
    key, _ = split_line(line)
    yield parent_of(key), f"e {key}"


def _sublist_reduce(parent, values):
    subs = set()
    for value in values:
        subs.update(parse_value(parent, value, (SubFeatureListRecord,)).subs)
    yield parent, _value(SubFeatureListRecord(parent, tuple(sorted(subs))))


def invert_parameters(doc_invert_output, para_invert_output, *, engine=None, num_reducers=1) -> JobStats:
    spec = JobSpec(
        "invert_parameters",
        _invert_params_map,
        reduce_fn=_sublist_reduce,
        combine_fn=_sublist_reduce,
        num_reducers=num_reducers,
    )
    return _run(spec, [doc_invert_output], para_invert_output, engine)


# -- distributeParametersSharding --------------------------------------------


def _distribute_sharding_reduce(parent, values, missing_parent="error"):
    para = None
    subs: list[str] = []
    for value in values:
        record = parse_value(parent, value, (ParameterRecord, SubFeatureListRecord))
        if isinstance(record, ParameterRecord):
            if para is not None:
                raise RecordError(f"more than one parameter for {parent!r}")
            para = record.value
        else:
            subs.extend(record.subs)
    if not subs:
        return
    if para is None:
        if missing_parent != "zero":
            raise RecordError(f"feature {parent!r} has sub-features but no parameter")
        para = 0.0
    for sub in sorted(set(subs)):
        yield sub, _value(ParameterRecord(sub, para))


def distribute_parameters_sharding(
    para_value_output, para_invert_output, para_distribute_shard_output, *, missing_parent="error", engine=None, num_reducers=1
) -> JobStats:
    """Copy each parent's parameter onto all of its sub-features.

    ``missing_parent="zero"`` gives features absent from the model a zero
    parameter instead of failing (used at classification time).
    """
    spec = JobSpec(
        "distribute_parameters_sharding",
        _identity_map,
        reduce_fn=partial(_distribute_sharding_reduce, missing_parent=missing_parent),
        num_reducers=num_reducers,
    )
    return _run(spec, [para_value_output, para_invert_output], para_distribute_shard_output, engine)


# -- distributeParameters ----------------------------------------------------


def _distribute_reduce(key, values):
    para = None
    units: list[DocUnit] = []
    for value in values:
        record = parse_value(key, value, (ParameterRecord, InvertIndexRecord))
        if isinstance(record, ParameterRecord):
            if para is not None:
                raise RecordError(f"more than one parameter for {key!r}")
            para = record.value
        else:
            units.extend(record.units)
    if not units:
        return
    if para is None:
        raise RecordError(f"feature {key!r} has doc units but no parameter")
    para_text = format_real(para)
    for unit in units:
        yield unit.doc_id, f"{unit.label}:{key}:{unit.count}:{para_text}"


def distribute_parameters(para_input, doc_invert_input, para_distribute_output, *, engine=None, num_reducers=1) -> JobStats:
    """Send each feature's parameter to every sample containing it, re-keyed by docId."""
    spec = JobSpec("distribute_parameters", _identity_map, reduce_fn=_distribute_reduce, num_reducers=num_reducers)
    return _run(spec, [para_input, doc_invert_input], para_distribute_output, engine)


# -- restoreDocuments --------------------------------------------------------


def _restore_reduce(doc_id, values):
    entries = [Entry.parse(text) for value in values for text in value.split(" ")]
    entries.sort(key=lambda e: e.feature)
    yield doc_id, _value(SufficientSample(doc_id, tuple(entries)))


def restore_documents(para_distribute_output, doc_restore_output, *, engine=None, num_reducers=1) -> JobStats:
    """Gather every feature entry of a docId into one sufficient-sample line."""
    spec = JobSpec(
        "restore_documents",
        _identity_map,
        reduce_fn=_restore_reduce,
        combine_fn=_restore_reduce,
        num_reducers=num_reducers,
    )
    return _run(spec, [para_distribute_output], doc_restore_output, engine)


def _parse_sufficient(line) -> SufficientSample:
    key, value = split_line(line)
    return parse_value(key, value, (SufficientSample,))


# -- computeGradients / computeGradientsSharding -----------------------------


def _gradient_map(line_id, line, sharding=False):
    sample = _parse_sufficient(line)
    h = lr.inference(sample)
    for e in sample.entries:
        feature = parent_of(e.feature) if sharding else e.feature
        yield feature, f"q {format_real(lr.gradient_contribution(e.count, h, e.label))}"


def _gradient_reduce(feature, values):
    grads = [parse_value(feature, v, (GradientRecord,)).grad for v in values]
    yield feature, _value(GradientRecord(feature, math.fsum(grads)))


def compute_gradients(doc_restore_output, grad_compute_output, sharding_enabled=False, *, engine=None, num_reducers=1) -> JobStats:
    """Per-feature gradient of the cost over all sufficient samples.

    With ``sharding_enabled`` sub-feature entries are summed under their parent.
    """
    spec = JobSpec(
        "compute_gradients_sharding" if sharding_enabled else "compute_gradients",
        partial(_gradient_map, sharding=sharding_enabled),
        reduce_fn=_gradient_reduce,
        combine_fn=_gradient_reduce,
        num_reducers=num_reducers,
    )
    return _run(spec, [doc_restore_output], grad_compute_output, engine)


# -- objective ---------------------------------------------------------------


def _objective_map(line_id, line):
    yield OBJECTIVE_KEY, format_real(lr.sample_loss(_parse_sufficient(line)))


def _objective_reduce(key, values):
    yield key, format_real(math.fsum(parse_real(v) for v in values))


def read_objective(path) -> float:
    total = 0.0
    for key, value in read_records(Path(path)):
        if key != OBJECTIVE_KEY:
            raise RecordError(f"unexpected key {key!r} in objective output")
        total += parse_real(value)
    return total


def compute_objective(doc_restore_output, objective_output, *, engine=None) -> tuple[float, JobStats]:
    """Total cost J over all sufficient samples (0 for an empty input)."""
    spec = JobSpec(
        "compute_objective",
        _objective_map,
        reduce_fn=_objective_reduce,
        combine_fn=_objective_reduce,
        num_reducers=1,
    )
    stats = _run(spec, [doc_restore_output], objective_output, engine)
    return read_objective(objective_output), stats


# -- updateParameters --------------------------------------------------------


def _update_reduce(feature, values, alpha):
    para = grad = None
    for value in values:
        record = parse_value(feature, value, (ParameterRecord, GradientRecord))
        if isinstance(record, ParameterRecord):
            if para is not None:
                raise RecordError(f"more than one parameter for {feature!r}")
            para = record.value
        else:
            if grad is not None:
                raise RecordError(f"more than one gradient for {feature!r}")
            grad = record.grad
    if para is None:
        raise RecordError(f"gradient for {feature!r} has no parameter")
    yield feature, _value(ParameterRecord(feature, lr.optimize(para, grad or 0.0, alpha)))


def update_parameters(para_value_output, grad_compute_output, para_update_output, alpha, *, engine=None, num_reducers=1) -> JobStats:
    spec = JobSpec(
        "update_parameters",
        _identity_map,
        reduce_fn=partial(_update_reduce, alpha=alpha),
        num_reducers=num_reducers,
    )
    return _run(spec, [para_value_output, grad_compute_output], para_update_output, engine)


# -- logisticTest ------------------------------------------------------------


def predict_label(p: float) -> int:
    """Class 1 iff p >= 0.5 (an exact tie goes to class 1)."""
    return 1 if p >= 0.5 else 0


def _logistic_test_map(line_id, line, with_probability=False):
    sample = _parse_sufficient(line)
    p = lr.inference(sample)
    value = f"{sample.label}\t{predict_label(p)}"
    if with_probability:
        value += f"\t{format_real(p)}"
    yield sample.doc_id, value


def logistic_test(doc_restore_output, test_output, *, with_probability=False, engine=None) -> JobStats:
    """Map-only prediction: ``docId<TAB>example_label<TAB>predict_label`` per sample."""
    spec = JobSpec("logistic_test", partial(_logistic_test_map, with_probability=with_probability), map_only=True)
    return _run(spec, [doc_restore_output], test_output, engine)
