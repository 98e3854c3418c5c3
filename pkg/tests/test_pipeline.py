import re
from collections import Counter

import pytest

from dpmr.engine import EngineConfig, JobError, read_lines
from dpmr.oracle import DenseInstance, load_samples, oracle_gradient, oracle_objective, oracle_predict, oracle_train
from dpmr.lr import Hyperparams
from dpmr.pipeline import Trainer, classify, evaluate, read_gradients, read_parameters, train
from dpmr.pipeline import jobs
from dpmr.pipeline.evaluation import Prediction
from dpmr.records import DistributedParamRecord, InvertIndexRecord, SufficientSample, make_doc_id, parse
from dpmr.sharding import ShardPolicy, parse_subfeature

from conftest import LOG2, config, make_corpus, max_rel_diff, write_lines

D0 = make_doc_id(0, 0)
D1 = make_doc_id(0, 1)
D2 = make_doc_id(0, 2)


def out_lines(path):
    return list(read_lines(path))


def stage(tmp_path, name, lines):
    return write_lines(tmp_path / name / "part-r-00000", lines).parent


# -- initParameters ------------------------------------------------------------


def test_init_parameters(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\ta:1 b:2", "0\tb:1"])
    jobs.init_parameters(src, tmp_path / "pv")
    assert out_lines(tmp_path / "pv") == ["a\tp 0", "b\tp 0"]


def test_init_parameters_empty_corpus(tmp_path):
    src = write_lines(tmp_path / "c.txt", [])
    stats = jobs.init_parameters(src, tmp_path / "pv")
    assert out_lines(tmp_path / "pv") == [] and stats.records_out == 0


def test_init_parameters_dedups(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\tf:1"] * 1000)
    jobs.init_parameters(src, tmp_path / "pv", engine=EngineConfig(split_size_bytes=500), num_reducers=3)
    assert out_lines(tmp_path / "pv") == ["f\tp 0"]


def test_init_parameters_reports_bad_line(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\ta:1", "7\tb:1"])
    with pytest.raises(JobError, match="7\\\\tb:1"):
        jobs.init_parameters(src, tmp_path / "pv")


# -- invertDocuments -----------------------------------------------------------


def test_invert_documents_single_sample(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\ta:2"])
    jobs.invert_documents(src, tmp_path / "di")
    assert out_lines(tmp_path / "di") == [f"a\ti 1 {D0}:2:1"]


def test_invert_documents_aggregates(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\tf:1", "0\tf:2 g:1", "1\tf:3"])
    jobs.invert_documents(src, tmp_path / "di", engine=EngineConfig(split_size_bytes=6))
    rec = parse(out_lines(tmp_path / "di")[0], (InvertIndexRecord,))
    assert rec.num == 3 and len(rec.units) == 3
    assert sorted(u.count for u in rec.units) == [1, 2, 3]


def test_invert_documents_binary_mode(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\ta:5"])
    jobs.invert_documents(src, tmp_path / "di", binary=True)
    assert out_lines(tmp_path / "di") == [f"a\ti 1 {D0}:1:1"]


def test_sharded_invert_splits_heavy_feature(tmp_path):
    src = write_lines(tmp_path / "c.txt", [f"{i % 2}\tf:1 g{i}:1" for i in range(250)])
    jobs.invert_documents_sharding(src, tmp_path / "di", ShardPolicy(100), num_reducers=2)
    recs = [parse(l, (InvertIndexRecord,)) for l in out_lines(tmp_path / "di")]
    f_recs = {r.key: r for r in recs if parse_subfeature(r.key).parent == "f"}
    assert sorted(f_recs) == ["1_3|f", "2_3|f", "3_3|f"]
    assert all(r.num <= 100 for r in f_recs.values())
    all_units = [u for r in f_recs.values() for u in r.units]
    assert len(all_units) == 250 and len(set(all_units)) == 250


def test_sharding_is_noop_below_threshold(tmp_path):
    train_path, _ = make_corpus(tmp_path, 200, 30, seed=2)
    jobs.invert_documents(train_path, tmp_path / "plain", num_reducers=2)
    jobs.invert_documents_sharding(train_path, tmp_path / "shard", ShardPolicy(10_000), num_reducers=2)
    for name in ("part-r-00000", "part-r-00001"):
        assert (tmp_path / "plain" / name).read_bytes() == (tmp_path / "shard" / name).read_bytes()


@pytest.mark.parametrize("mapper_side", [False, True])
def test_sharded_strategies_preserve_unit_sets(tmp_path, mapper_side):
    from dpmr.sharding import collect_frequencies

    train_path, _ = make_corpus(tmp_path, 600, 50, seed=8)
    jobs.invert_documents(train_path, tmp_path / "plain", num_reducers=3)
    plain = {r.key: Counter(r.units) for r in map(lambda l: parse(l, (InvertIndexRecord,)), out_lines(tmp_path / "plain"))}
    for strategy in ("round-robin", "docid-locality"):
        policy = ShardPolicy(40, strategy, 3)
        table = collect_frequencies(train_path) if mapper_side else None
        out = tmp_path / f"{strategy}-{mapper_side}"
        jobs.invert_documents_sharding(train_path, out, policy, table, num_reducers=3)
        merged: dict[str, Counter] = {}
        for line in out_lines(out):
            rec = parse(line, (InvertIndexRecord,))
            merged.setdefault(parse_subfeature(rec.key).parent, Counter()).update(rec.units)
            if strategy == "round-robin" and not mapper_side:
                assert rec.num <= 40
        assert merged == plain


# -- invertParameters ----------------------------------------------------------


def test_invert_parameters(tmp_path):
    di = stage(tmp_path, "di", [f"1_2|f\ti 1 {D0}:1:1", f"2_2|f\ti 1 {D1}:1:0", f"g\ti 1 {D0}:1:1"])
    jobs.invert_parameters(di, tmp_path / "pi")
    assert out_lines(tmp_path / "pi") == ["f\te 1_2|f;2_2|f", "g\te g"]


def test_invert_parameters_dedups(tmp_path):
    di = stage(tmp_path, "di", [f"1_2|f\ti 1 {D0}:1:1", f"1_2|f\ti 1 {D1}:1:1"])
    jobs.invert_parameters(di, tmp_path / "pi")
    assert out_lines(tmp_path / "pi") == ["f\te 1_2|f"]


# -- distributeParametersSharding ----------------------------------------------


def test_distribute_parameters_sharding(tmp_path):
    pv = stage(tmp_path, "pv", ["f\tp 0.5", "g\tp 2", "unused\tp 1"])
    pi = stage(tmp_path, "pi", ["f\te 1_2|f;2_2|f", "g\te g"])
    jobs.distribute_parameters_sharding(pv, pi, tmp_path / "pds")
    assert out_lines(tmp_path / "pds") == ["1_2|f\tp 0.5", "2_2|f\tp 0.5", "g\tp 2"]


def test_distribute_parameters_sharding_missing_parent(tmp_path):
    pv = stage(tmp_path, "pv", ["g\tp 2"])
    pi = stage(tmp_path, "pi", ["f\te 1_2|f;2_2|f"])
    with pytest.raises(JobError, match="'f'"):
        jobs.distribute_parameters_sharding(pv, pi, tmp_path / "pds")
    jobs.distribute_parameters_sharding(pv, pi, tmp_path / "zero", missing_parent="zero")
    assert out_lines(tmp_path / "zero") == ["1_2|f\tp 0", "2_2|f\tp 0"]


# -- distributeParameters ------------------------------------------------------


def test_distribute_parameters(tmp_path):
    pv = stage(tmp_path, "pv", ["a\tp 0"])
    di = stage(tmp_path, "di", ["a\ti 1 d:2:1"])
    jobs.distribute_parameters(pv, di, tmp_path / "pd")
    assert out_lines(tmp_path / "pd") == ["d\t1:a:2:0"]


def test_distribute_parameters_fans_out(tmp_path):
    pv = stage(tmp_path, "pv", ["1_2|f\tp -0.25", "g\tp 1"])
    di = stage(tmp_path, "di", [f"1_2|f\ti 3 {D0}:1:1 {D1}:2:0 {D2}:1:1"])
    jobs.distribute_parameters(pv, di, tmp_path / "pd", num_reducers=2)
    lines = sorted(out_lines(tmp_path / "pd"))
    assert lines == [f"{D0}\t1:1_2|f:1:-0.25", f"{D1}\t0:1_2|f:2:-0.25", f"{D2}\t1:1_2|f:1:-0.25"]
    for line in lines:
        parse(line, (DistributedParamRecord,))


def test_distribute_parameters_requires_parameter(tmp_path):
    pv = stage(tmp_path, "pv", ["b\tp 0"])
    di = stage(tmp_path, "di", ["a\ti 1 d:2:1"])
    with pytest.raises(JobError, match="no parameter"):
        jobs.distribute_parameters(pv, di, tmp_path / "pd")


# -- restoreDocuments ----------------------------------------------------------


def test_restore_documents(tmp_path):
    pd = stage(tmp_path, "pd", ["d\t1:b:1:0", "d\t1:a:2:0", "e\t0:x:1:0.5"])
    jobs.restore_documents(pd, tmp_path / "dr")
    assert out_lines(tmp_path / "dr") == ["d\t1:a:2:0 1:b:1:0", "e\t0:x:1:0.5"]


def test_restore_documents_conflicting_labels(tmp_path):
    pd = stage(tmp_path, "pd", ["d\t1:a:2:0", "d\t0:b:1:0"])
    with pytest.raises(JobError, match="conflicting labels"):
        jobs.restore_documents(pd, tmp_path / "dr")


@pytest.mark.parametrize("shard_max", [None, 30])
def test_restoration_fidelity(tmp_path, shard_max):
    train_path, _ = make_corpus(tmp_path, 400, 40, seed=9)
    t = Trainer(train_path, tmp_path / "run", config(iterations=1, reducers=3, shard_max=shard_max, split_size=3000))
    t.step()
    restored = {}
    for line in out_lines(tmp_path / "run" / "docRestore"):
        s = parse(line, (SufficientSample,))
        restored[s.doc_id] = (s.label, Counter((parse_subfeature(e.feature).parent, e.count) for e in s.entries))
    expected = {}
    from dpmr.engine import split_inputs
    from dpmr.records import parse_sample

    for split in split_inputs([train_path], 3000):
        for i, line in enumerate(split.read_lines()):
            smp = parse_sample(line)
            expected[make_doc_id(split.index, i)] = (smp.label, Counter(smp.tokens))
    assert restored == expected


# -- computeGradients ----------------------------------------------------------


def test_compute_gradients_single_sample(tmp_path):
    dr = stage(tmp_path, "dr", ["d\t1:a:2:0"])
    jobs.compute_gradients(dr, tmp_path / "g")
    assert out_lines(tmp_path / "g") == ["a\tq -1"]


def test_compute_gradients_cancellation(tmp_path):
    dr = stage(tmp_path, "dr", ["d\t0:f:1:0", "e\t1:f:1:0"])
    jobs.compute_gradients(dr, tmp_path / "g")
    assert out_lines(tmp_path / "g") == ["f\tq 0"]


def test_compute_gradients_sharded_sums_under_parent(tmp_path):
    dr = stage(tmp_path, "dr", ["d\t1:1_2|f:1:0", "e\t1:2_2|f:3:0"])
    jobs.compute_gradients(dr, tmp_path / "g", sharding_enabled=True)
    assert out_lines(tmp_path / "g") == ["f\tq -2"]
    assert jobs.compute_gradients(dr, tmp_path / "g2").name == "compute_gradients"


# -- objective -----------------------------------------------------------------


def test_objective_at_zero(tmp_path):
    dr = stage(tmp_path, "dr", [f"d{i}\t{i % 2}:f:{i + 1}:0" for i in range(7)])
    j, _ = jobs.compute_objective(dr, tmp_path / "o")
    assert j == pytest.approx(7 * LOG2, rel=1e-12)
    assert out_lines(tmp_path / "o")[0].startswith("J\t")


def test_objective_empty(tmp_path):
    dr = stage(tmp_path, "dr", [])
    assert jobs.compute_objective(dr, tmp_path / "o")[0] == 0


def test_objective_matches_oracle(tmp_path):
    lines = ["1\ta:2 b:1", "0\ta:1 c:3", "1\tc:1", "0\tb:2 c:1", "1\ta:1 b:1 c:1"]
    src = write_lines(tmp_path / "c.txt", lines)
    theta = {"a": 0.3, "b": -0.7, "c": 0.05}
    pv = stage(tmp_path, "pv", [f"{f}\tp {v}" for f, v in theta.items()])
    jobs.invert_documents(src, tmp_path / "di")
    jobs.distribute_parameters(pv, tmp_path / "di", tmp_path / "pd")
    jobs.restore_documents(tmp_path / "pd", tmp_path / "dr")
    j, _ = jobs.compute_objective(tmp_path / "dr", tmp_path / "o")
    expected = oracle_objective(DenseInstance(load_samples(src), theta))
    assert j == pytest.approx(expected, rel=1e-12)


# -- updateParameters ----------------------------------------------------------


def test_update_parameters(tmp_path):
    pv = stage(tmp_path, "pv", ["f\tp 0.5", "g\tp 0.25"])
    g = stage(tmp_path, "g", ["f\tq 2"])
    jobs.update_parameters(pv, g, tmp_path / "pu", 0.1)
    assert out_lines(tmp_path / "pu") == ["f\tp 0.3", "g\tp 0.25"]


def test_update_parameters_orphan_gradient(tmp_path):
    pv = stage(tmp_path, "pv", ["f\tp 0.5"])
    g = stage(tmp_path, "g", ["h\tq 2"])
    with pytest.raises(JobError, match="'h'"):
        jobs.update_parameters(pv, g, tmp_path / "pu", 0.1)


# -- training driver -----------------------------------------------------------


def test_zero_iterations_gives_zero_model(tmp_path, small_corpus):
    reports = train(small_corpus, tmp_path / "run", config(iterations=0))
    assert reports == []
    params = read_parameters(tmp_path / "run" / "paraValue")
    assert params and set(params.values()) == {0.0}


def test_one_iteration_matches_oracle_step(tmp_path):
    src = write_lines(tmp_path / "c.txt", ["1\ta:2 b:1", "0\tb:3"])
    train(src, tmp_path / "run", config(iterations=1, alpha=0.5))
    got = read_parameters(tmp_path / "run" / "paraValue")
    want = oracle_train(load_samples(src), Hyperparams(alpha=0.5, max_iter=1))
    assert got.keys() == want.keys()
    for f in got:
        assert got[f] == pytest.approx(want[f], rel=1e-12, abs=1e-300)


def test_gradient_fidelity_every_iteration(tmp_path, small_corpus):
    t = Trainer(small_corpus, tmp_path / "run", config(iterations=3, reducers=2, shard_max=20, split_size=4000))
    samples = load_samples(small_corpus)
    t.setup()
    for _ in range(3):
        theta = t.parameters()
        t.step()
        want = oracle_gradient(DenseInstance(samples, theta))
        got = read_gradients(tmp_path / "run" / "gradCompute")
        assert max_rel_diff(got, want) <= 1e-9


def test_sharded_and_unsharded_training_agree(tmp_path, small_corpus):
    train(small_corpus, tmp_path / "a", config(iterations=3, reducers=2))
    train(small_corpus, tmp_path / "b", config(iterations=3, reducers=2, shard_max=15, strategy="docid-locality"))
    train(small_corpus, tmp_path / "c", config(iterations=3, reducers=2, shard_max=15, mapper_side_sharding=True))
    a = read_parameters(tmp_path / "a" / "paraValue")
    assert max_rel_diff(a, read_parameters(tmp_path / "b" / "paraValue")) <= 1e-9
    assert max_rel_diff(a, read_parameters(tmp_path / "c" / "paraValue")) <= 1e-9
    assert (tmp_path / "c" / "featureFrequency.txt").exists()


def test_reports_and_stage_layout(tmp_path, small_corpus):
    reports = train(small_corpus, tmp_path / "run", config(iterations=2, shard_max=50))
    root = tmp_path / "run"
    for name in ("paraValue", "docInvert", "paraInvert", "paraDistributeShard", "paraDistribute", "docRestore", "gradCompute", "reports"):
        assert (root / name).is_dir(), name
    text = (root / "reports" / "iter-2.txt").read_text()
    assert text.startswith("iteration\t2\nobjective\t")
    assert re.search(r"^wall_time\ttotal\t[\d.]+$", text, re.M)
    assert reports[1].objective < reports[0].objective
    assert reports[0].objective == pytest.approx(300 * LOG2, rel=1e-12)
    assert reports[1].param_count == len(read_parameters(root / "paraValue"))


def test_tolerance_stops_early(tmp_path, small_corpus):
    reports = train(small_corpus, tmp_path / "run", config(iterations=50, alpha=1e-6, tol=1e-3))
    assert len(reports) == 2


def test_training_refuses_existing_output(tmp_path, small_corpus):
    from dpmr.engine import OutputExistsError

    train(small_corpus, tmp_path / "run", config(iterations=0))
    with pytest.raises(OutputExistsError):
        train(small_corpus, tmp_path / "run", config(iterations=0))
    train(small_corpus, tmp_path / "run", config(iterations=0), force=True)


def test_failed_iteration_keeps_parameters(tmp_path, small_corpus):
    t = Trainer(small_corpus, tmp_path / "run", config(iterations=2))
    t.step()
    before = (tmp_path / "run" / "paraValue" / "part-r-00000").read_bytes()
    # Corrupt the index so the next distribute job fails.
    (tmp_path / "run" / "docInvert" / "part-r-00000").write_text("zzz\ti 1 bad\n")
    with pytest.raises(JobError):
        t.step()
    assert (tmp_path / "run" / "paraValue" / "part-r-00000").read_bytes() == before


# -- classification ------------------------------------------------------------

PRED_LINE = re.compile(r"^[0-9A-Za-z]{10}\t[01]\t[01]$")


def test_classify_format_and_oracle_agreement(tmp_path):
    train_path, test_path = make_corpus(tmp_path, 500, 60, seed=21, n_test=100, separable=True)
    cfg = config(iterations=3, reducers=2, shard_max=40)
    train(train_path, tmp_path / "run", cfg)
    report = classify(test_path, tmp_path / "run" / "paraValue", tmp_path / "pred", cfg)
    lines = out_lines(tmp_path / "pred")
    assert report.num_predictions == len(lines) == 100
    assert all(PRED_LINE.match(l) for l in lines)
    theta = read_parameters(tmp_path / "run" / "paraValue")
    want = [pred for _, pred in oracle_predict(load_samples(test_path), theta)]
    got = [int(l.split("\t")[2]) for l in sorted(lines)]
    assert got == want


def test_classify_unknown_features_tie_to_one(tmp_path):
    pv = stage(tmp_path, "pv", ["known\tp -3"])
    test = write_lines(tmp_path / "t.txt", ["0\tnew:1 other:2", "0\tknown:1"])
    classify(test, pv, tmp_path / "pred", config(), with_probability=True)
    lines = sorted(out_lines(tmp_path / "pred"))
    assert lines[0] == f"{D0}\t0\t1\t0.5"
    assert lines[1].startswith(f"{D1}\t0\t0\t")


def test_classify_missing_model(tmp_path):
    test = write_lines(tmp_path / "t.txt", ["0\tx:1"])
    with pytest.raises(FileNotFoundError):
        classify(test, tmp_path / "none", tmp_path / "pred", config())


# -- evaluation ----------------------------------------------------------------


def test_evaluate_perfect():
    e = evaluate([Prediction("a", 1, 1), Prediction("b", 0, 0)])
    assert e.precision == e.recall == e.f == 1.0


def test_evaluate_two_thirds():
    preds = [Prediction("a", 1, 1), Prediction("b", 1, 0), Prediction("c", 0, 0)]
    e = evaluate(preds)
    assert e.classes[1].precision == 1.0 and e.classes[1].recall == 0.5
    assert e.classes[1].f == pytest.approx(2 / 3)
    # Class 0: two predicted, one correct, one supported -> P=0.5, R=1, F=2/3.
    assert e.classes[0].f == pytest.approx(2 / 3)
    assert e.f == pytest.approx(2 / 3)


def test_evaluate_zero_predicted_positives():
    e = evaluate([Prediction("a", 1, 0), Prediction("b", 0, 0)])
    assert e.classes[1].precision == 0.0 and e.classes[1].f == 0.0


def test_evaluate_empty(tmp_path):
    with pytest.raises(ValueError):
        evaluate([])
    (tmp_path / "p").mkdir()
    with pytest.raises(ValueError):
        evaluate(tmp_path / "p")
