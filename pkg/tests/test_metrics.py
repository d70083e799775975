import numpy as np
import pytest
from fixtures_data import quartile_fixture
from hypothesis import given, settings
from hypothesis import strategies as st

from flowemb.data import ClassTable, FlowRecord, FlowSet, PacketSequence
from flowemb.metrics import (
    baseline_classify,
    baseline_rank,
    baseline_vectors,
    compute_report,
    frequency_quartiles,
)
from flowemb.retrieval import vote_all


def test_hand_fixture_exact():
    r = compute_report(*quartile_fixture())
    assert r.accuracy == 0.70
    assert r.macro_recall == 0.75
    assert r.quartile_recalls == (1.0, 0.0, 1.0, 1.0)
    assert r.line() == "top1,0.700000,0.750000,1.000000,0.000000,1.000000,1.000000"


def test_perfect_predictions():
    _, truth, table = quartile_fixture()
    r = compute_report(truth, truth, table)
    assert r.accuracy == r.macro_recall == 1.0
    assert r.quartile_recalls == (1.0,) * 4


def test_errors():
    pred, truth, table = quartile_fixture()
    with pytest.raises(ValueError, match="absent"):
        compute_report(pred, np.where(truth == 0, 9, truth), table)
    with pytest.raises(ValueError):
        compute_report(pred[:-1], truth, table)
    with pytest.raises(ValueError):
        compute_report([], [], table)


def test_human_table_lists_classes():
    r = compute_report(*quartile_fixture())
    text = r.table(["a", "b", "c", "d"])
    assert "accuracy= 70.00" in text and "b" in text.splitlines()[2]


def test_quartile_groups_largest_remainder():
    table = ClassTable([f"c{i}" for i in range(10)], [5, 9, 9, 1, 7, 3, 3, 8, 2, 6])
    groups = frequency_quartiles(range(10), table)
    assert [len(g) for g in groups] == [3, 3, 2, 2]
    # ties on count 9 and 3 go to the lower id
    assert groups == ((1, 2, 7), (4, 9, 0), (5, 6), (8, 3))


def test_queryless_classes_excluded():
    table = ClassTable(["a", "b", "c"], [5, 5, 5])
    r = compute_report([0, 1], [0, 0], table)
    assert r.per_class_recall == {0: 0.5}
    assert r.macro_recall == 0.5


def random_case(seed, n_classes=9, n=200):
    rng = np.random.default_rng(seed)
    table = ClassTable([f"c{i}" for i in range(n_classes)], rng.integers(1, 50, n_classes).tolist())
    truth = rng.integers(0, n_classes, n)
    pred = np.where(rng.random(n) < 0.6, truth, rng.integers(0, n_classes, n))
    return pred, truth, table


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_macro_recall_relabel_invariant(seed):
    pred, truth, table = random_case(seed)
    perm = np.random.default_rng(seed + 1).permutation(len(table))
    relabeled = ClassTable([table.names[i] for i in np.argsort(perm)], [table.counts[i] for i in np.argsort(perm)])
    a = compute_report(pred, truth, table)
    b = compute_report(perm[pred], perm[truth], relabeled)
    assert a.macro_recall == pytest.approx(b.macro_recall, abs=1e-12)
    assert a.accuracy == b.accuracy
    if len(set(table.counts)) == len(table):
        # quartile membership breaks count ties by id, so only tie-free tables keep it
        np.testing.assert_allclose(a.quartile_recalls, b.quartile_recalls, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_accuracy_within_recall_range(seed):
    r = compute_report(*random_case(seed))
    rec = list(r.per_class_recall.values())
    assert min(rec) - 1e-12 <= r.accuracy <= max(rec) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_quartile_recomputation(seed):
    pred, truth, table = random_case(seed)
    r = compute_report(pred, truth, table)
    present = sorted(set(truth.tolist()))
    order = sorted(present, key=lambda c: (-table.counts[c], c))
    assert [c for g in r.quartiles for c in g] == order
    for g, val in zip(r.quartiles, r.quartile_recalls):
        manual = np.mean([np.mean(pred[truth == c] == c) for c in g])
        assert val == pytest.approx(manual, abs=1e-12)


# -- baseline


def flow(sizes, dirs, ipts, label, fid):
    n = len(sizes)
    pad = 30 - n
    return FlowRecord(fid, label, PacketSequence(
        tuple(sizes) + (0,) * pad, tuple(dirs) + (0,) * pad, tuple(ipts) + (0.0,) * pad, n))


def test_baseline_vector_layout():
    f = FlowSet.from_records([flow([100, 200], [1, -1], [0.0, 2500.0], 0, 0)])
    v = baseline_vectors(f)[0]
    assert v.shape == (30,)
    assert v[:2].tolist() == [100, 200] and v[10:12].tolist() == [1, -1]
    assert v[20:22].tolist() == [0.0, 0.1]
    folded = baseline_vectors(f, sign_fold=True)[0]
    assert folded.shape == (20,) and folded[:2].tolist() == [100, -200]


def test_baseline_hand_distance():
    train = FlowSet.from_records([
        flow([1], [1], [0.0], 0, 0),
        flow([11], [1], [0.0], 1, 1),
    ])
    test = FlowSet.from_records([flow([5], [1], [0.0], 0, 2)])
    # L1 4 against the first and 6 against the second
    assert baseline_classify(train, test).tolist() == [0]


def test_baseline_identical_sample_and_ties():
    recs = [flow([50, 60], [1, 1], [0.0, 1.0], 3, 0), flow([50, 60], [1, 1], [0.0, 1.0], 5, 1)]
    train = FlowSet.from_records(recs)
    test = FlowSet.from_records([recs[0]])
    assert baseline_classify(train, test).tolist() == [3]


def test_baseline_empty_train():
    test = FlowSet.from_records([flow([5], [1], [0.0], 0, 0)])
    with pytest.raises(ValueError):
        baseline_classify(test.subset(np.array([], dtype=np.int64)), test)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_baseline_equals_l1_rank_and_vote(seed, fold):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(120):
        n = int(rng.integers(1, 31))
        # a small size alphabet forces exact distance ties
        recs.append(flow(rng.choice([40, 80, 1200], n).tolist(), rng.choice([-1, 1], n).tolist(),
                         [0.0] + [float(rng.choice([0.0, 500.0, 2000.0])) for _ in range(n - 1)],
                         int(rng.integers(0, 6)), i))
    flows = FlowSet.from_records(recs)
    train, test = flows.subset(np.arange(80)), flows.subset(np.arange(80, 120))
    nb = baseline_rank(baseline_vectors(train, fold), baseline_vectors(test, fold), k=1)
    np.testing.assert_array_equal(baseline_classify(train, test, fold, block=7), vote_all(nb, train.labels, "top1"))
