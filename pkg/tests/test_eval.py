import csv
import io
import json
import math
import warnings

import numpy as np
import pytest

from canonpose import eval as ev
from canonpose.dataset import DepthMaskPair, ShapeSpec, make_sample
from canonpose.errors import ShapeError, ValidationError
from canonpose.training import train_stage1, train_stage2

from conftest import tiny_config
from oracles import cross_entropy_ref, iou_ref, ranking_ref, retrieval_scores_ref

LABELS4 = {"a": "A", "b": "A", "c": "B", "d": "B"}
LABELS5 = {"a": "A", "b": "A", "c": "B", "d": "B", "e": "B"}
RANK5 = {"a": ["c", "d", "b", "e"], "b": ["a", "c", "d", "e"], "c": ["e", "a", "b", "d"],
         "d": ["a", "b", "c", "e"], "e": ["d", "c", "a", "b"]}


def _scores(labels, rankings):
    s = ev.retrieval_metrics(ev.RetrievalRanking(rankings, labels).validate())
    return s.nn, s.ft, s.st, s.dcg


# --- retrieval metrics ---

def test_perfect_ranking():
    r = {"a": ["b", "c", "d"], "b": ["a", "d", "c"], "c": ["d", "a", "b"], "d": ["c", "b", "a"]}
    assert _scores(LABELS4, r) == (1.0, 1.0, 1.0, 1.0)


def test_relevant_item_second_of_three():
    r = {"a": ["c", "b", "d"], "b": ["d", "a", "c"], "c": ["a", "d", "b"], "d": ["b", "c", "a"]}
    # frozen from the brute-force oracle: one relevant item at position 2 has gain 1/log2(2) = 1
    assert retrieval_scores_ref(LABELS4, r) == (0.0, 0.0, 1.0, 1.0)
    assert _scores(LABELS4, r) == (0.0, 0.0, 1.0, 1.0)


def test_five_item_example():
    # frozen from the brute-force oracle
    expected = (0.6, 0.5, 0.8, 0.7892789260714372)
    assert retrieval_scores_ref(LABELS5, RANK5) == expected
    assert _scores(LABELS5, RANK5) == expected


def test_single_class_scores_one():
    labels = {i: 0 for i in "abcde"}
    rng = np.random.default_rng(0)
    r = {q: list(rng.permutation([i for i in labels if i != q])) for q in labels}
    assert _scores(labels, r) == (1.0, 1.0, 1.0, 1.0)


def _random_instance(rng):
    while True:
        n = int(rng.integers(2, 13))
        ids = [f"i{j:02d}" for j in range(n)]
        labels = {i: int(rng.integers(0, rng.integers(1, 5))) for i in ids}
        if any(sum(v == c for v in labels.values()) > 1 for c in labels.values()):
            break
    rankings = {q: [ids[j] for j in rng.permutation(n) if ids[j] != q] for q in ids}
    return labels, rankings


def test_metrics_equal_brute_force_on_random_instances():
    rng = np.random.default_rng(42)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(200):
            labels, rankings = _random_instance(rng)
            got = _scores(labels, rankings)
            ref = retrieval_scores_ref(labels, rankings)
            assert got == ref


def test_second_tier_covers_first_tier():
    rng = np.random.default_rng(1)
    for _ in range(200):
        labels, rankings = _random_instance(rng)
        for q, order in rankings.items():
            s = ev.query_scores(order, labels, q)
            if s is not None:
                assert s[2] >= s[1]


def test_dcg_invariant_to_swaps_within_relevance_groups():
    rng = np.random.default_rng(2)
    for _ in range(100):
        labels, rankings = _random_instance(rng)
        q = next(q for q in labels if sum(v == labels[q] for v in labels.values()) > 1)
        order = rankings[q]
        rel = [labels[i] == labels[q] for i in order]
        shuffled = list(order)
        for flag in (True, False):
            pos = [p for p, r in enumerate(rel) if r == flag]
            for p, item in zip(pos, rng.permutation([order[p] for p in pos])):
                shuffled[p] = item
        assert ev.query_scores(shuffled, labels, q)[3] == ev.query_scores(order, labels, q)[3]


def test_singletons_are_excluded_with_warning():
    labels = {"a": 0, "b": 0, "c": 1}
    r = {"a": ["b", "c"], "b": ["c", "a"], "c": ["a", "b"]}
    with pytest.warns(RuntimeWarning):
        s = ev.retrieval_metrics(ev.RetrievalRanking(r, labels))
    assert s.n_queries == 2 and s.nn == 0.5
    with pytest.raises(ValidationError), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ev.retrieval_metrics(ev.RetrievalRanking({"a": ["b"], "b": ["a"]}, {"a": 0, "b": 1}))


def test_ranking_validation():
    with pytest.raises(ValidationError):
        ev.RetrievalRanking({"a": ["a", "b"]}, {"a": 0, "b": 0}).validate()
    with pytest.raises(ValidationError):
        ev.RetrievalRanking({"a": ["c"]}, {"a": 0, "b": 0}).validate()
    with pytest.raises(ValidationError):
        ev.RetrievalRanking({"z": ["a"]}, {"a": 0}).validate()


# --- ranking ---

def test_collinear_ranking():
    descs = {"a": [0.0], "b": [1.0], "c": [3.0]}
    expected = {"a": ["b", "c"], "b": ["a", "c"], "c": ["b", "a"]}
    assert ranking_ref(descs) == expected
    assert ev.rank_all(descs).rankings == expected


def test_identical_descriptors_rank_by_id():
    descs = {k: [1.0, 2.0] for k in ("d", "b", "a", "c")}
    r = ev.rank_all(descs).rankings
    assert r["c"] == ["a", "b", "d"] and r["a"] == ["b", "c", "d"]


def test_ranking_matches_reference():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        # coarse values make exact ties common
        descs = {f"x{j}": list(rng.integers(0, 3, size=3).astype(float)) for j in range(n)}
        assert ev.rank_all(descs).rankings == ranking_ref(descs)


def test_rank_all_errors():
    with pytest.raises(ShapeError):
        ev.rank_all({"a": [0.0, 1.0], "b": [0.0]})
    with pytest.raises(ValidationError):
        ev.rank_all({"a": [0.0]})


# --- descriptor ---

def test_descriptor_properties():
    rng = np.random.default_rng(4)
    depth, mask = rng.random((64, 64)), (rng.random((64, 64)) > 0.3).astype(np.float32)
    d = ev.descriptor(np.stack([depth, mask]))
    assert d.shape == (32 * 32,)
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(d, ev.descriptor(np.stack([depth, mask])))
    pair = DepthMaskPair(depth.astype(np.float32), mask)
    assert np.array_equal(ev.descriptor(pair), ev.descriptor(pair.stacked()))
    with pytest.warns(RuntimeWarning):
        z = ev.descriptor(np.stack([depth, np.zeros_like(mask)]))
    assert not z.any()
    with pytest.raises(ShapeError):
        ev.descriptor(np.zeros((3, 8, 8)))


def test_descriptor_separates_subjects_after_perfect_canonicalization():
    spec = ShapeSpec(family="biped", n_subjects=3, n_poses=4, seed=0)
    samples = [make_sample(s, spec, (64, 64), 8) for s in range(12)]
    descs = {(s.subject_id, s.pose_id): ev.descriptor(s.canonical.stacked()) for s in samples}
    same = max(np.linalg.norm(descs[(s, "p00")] - descs[(s, p)]) for s, p in descs)
    subjects = sorted({s for s, _ in descs})
    diff = min(np.linalg.norm(descs[(a, "p00")] - descs[(b, "p00")])
               for a in subjects for b in subjects if a < b)
    assert same < diff


# --- reconstruction metrics ---

def test_iou_examples():
    g = np.zeros((4, 4, 4))
    g[0, 0, :3] = 1
    p = np.zeros((4, 4, 4))
    p[0, 0, 2] = 0.9
    p[1, 1, 1] = 0.5
    assert ev.iou(p, g) == 0.25 == iou_ref(p, g)
    assert ev.iou(g, g) == 1.0
    assert ev.iou(np.zeros((4, 4, 4)), np.zeros((4, 4, 4))) == 1.0
    other = np.zeros((4, 4, 4))
    other[3, 3, 3] = 1
    assert ev.iou(other, g) == 0.0
    with pytest.raises(ShapeError):
        ev.iou(np.zeros((4, 4, 4)), np.zeros((8, 8, 8)))
    with pytest.raises(ValidationError):
        ev.iou(p, p)


def test_iou_matches_enumeration_and_is_symmetric():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = (rng.random((6, 6, 6)) < 0.3).astype(float)
        b = (rng.random((6, 6, 6)) < 0.3).astype(float)
        assert ev.iou(a, b) == ev.iou(b, a)
        assert abs(ev.iou(a, b) - iou_ref(a, b)) < 1e-9
        p = rng.random((6, 6, 6))
        assert abs(ev.iou(p, b, 0.7) - iou_ref(p, b, 0.7)) < 1e-9
    assert np.array_equal(ev.batched_iou(np.stack([a, b]), np.stack([a, b])), [1.0, 1.0])


def test_cross_entropy_examples():
    gt = (np.random.default_rng(6).random((4, 4, 4)) < 0.5).astype(float)
    assert abs(ev.mean_cross_entropy(np.full((4, 4, 4), 0.5), gt) - math.log(2)) < 1e-9
    assert ev.mean_cross_entropy(gt, gt) <= -math.log(1 - 1e-7) + 1e-15
    # frozen from the reference implementation
    got = ev.mean_cross_entropy(np.array([0.9, 0.2, 0.7]), np.array([1.0, 0.0, 1.0]))
    assert abs(cross_entropy_ref([0.9, 0.2, 0.7], [1, 0, 1]) - 0.22839300363692283) < 1e-15
    assert abs(got - 0.22839300363692283) < 1e-9


def test_cross_entropy_matches_reference():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = rng.random((4, 4, 4))
        g = (rng.random((4, 4, 4)) < 0.2).astype(float)
        assert abs(ev.mean_cross_entropy(p, g) - cross_entropy_ref(p, g)) < 1e-9


def test_cross_entropy_minimized_at_mean():
    rng = np.random.default_rng(8)
    for _ in range(10):
        g = (rng.random((8, 8, 8)) < rng.uniform(0.05, 0.9)).astype(float)
        m = g.mean()
        grid = np.linspace(0.01, 0.99, 99)
        values = [ev.mean_cross_entropy(np.full(g.shape, c), g) for c in grid]
        best = grid[int(np.argmin(values))]
        assert abs(best - m) <= 0.01
        at_mean = ev.mean_cross_entropy(np.full(g.shape, m), g)
        assert at_mean <= min(values) + 1e-12


# --- permutation baseline ---

def test_permutation_baseline():
    labels = {f"i{j}": j % 3 for j in range(12)}
    descs = {k: [float(v), 0.0] for k, v in labels.items()}  # perfect clustering
    ranking = ev.rank_all(descs, labels)
    null = ev.permutation_baseline(ranking, 300, seed=1)
    assert null.shape == (300,) and 0 <= null.min() and null.max() <= 1
    assert np.array_equal(null, ev.permutation_baseline(ranking, 300, seed=1))
    assert null.mean() < 0.6
    assert ev.retrieval_metrics(ranking).nn == 1.0
    assert ev.permutation_p_value(1.0, null) < 0.05
    assert ev.permutation_p_value(0.0, null) == 1.0


# --- report ---

def test_report_aggregate_and_formats():
    folds = [{"fold": "s0p0", "nn": 0.5, "ft": 0.25, "st": 0.5, "dcg": 0.6, "iou": 0.4, "mean_ce": 0.1},
             {"fold": "s0p1", "nn": 1.0, "ft": 0.75, "st": 1.0, "dcg": 0.8, "iou": 0.6, "mean_ce": 0.3}]
    rep = ev.MetricsReport.aggregate(folds, {"note": 1})
    assert rep.nn == 0.75 and rep.iou == 0.5 and rep.mean_ce == pytest.approx(0.2)
    assert rep.columns() == ["nn", "ft", "st", "dcg", "iou", "mean_ce"]
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["fold", "NN", "FT", "ST", "DCG", "IOU", "CE"]
    assert [r[0] for r in rows[1:]] == ["s0p0", "s0p1", "mean"]
    text = rep.to_text("title").splitlines()
    assert text[0] == "title" and text[1].split() == ["fold", "NN", "FT", "ST", "DCG", "IOU", "CE"]
    assert text[-1].split()[0] == "mean" and text[-1].split()[1] == "0.750"
    back = json.loads(rep.to_json())
    assert back["nn"] == 0.75 and back["extras"] == {"note": 1} and len(back["per_fold"]) == 2


def test_report_partial_columns_and_ranges():
    rep = ev.MetricsReport.aggregate([{"fold": 0, "iou": 0.5, "mean_ce": 0.2}])
    assert rep.columns() == ["iou", "mean_ce"]
    assert list(csv.reader(io.StringIO(rep.to_csv())))[0] == ["fold", "IOU", "CE"]
    with pytest.raises(ValidationError):
        ev.MetricsReport(nn=1.5).validate()
    with pytest.raises(ValidationError):
        ev.MetricsReport(mean_ce=-0.1).validate()
    with pytest.raises(ValidationError):
        ev.MetricsReport.aggregate([])


# --- fold evaluation ---

@pytest.fixture(scope="module")
def trained(tiny, tmp_path_factory):
    data, split = tiny
    out = tmp_path_factory.mktemp("ev")
    train_stage1(data, split, tiny_config(stage1_epochs=3, schedule_boundaries=(1, 2)), out_dir=out)
    train_stage2(data, split, out / "stage1.ckpt", tiny_config(stage2_epochs=2), out_dir=out)
    return out


def test_evaluate_fold_ranges(tiny, trained):
    data, split = tiny
    res = ev.evaluate_fold(trained / "stage1.ckpt", trained / "stage2.ckpt", split, data, n_shuffles=50)
    assert res["fold"] == "s0p0" and res["n_test"] == len(split.test_samples)
    for k in ("nn", "ft", "st", "dcg", "iou", "nn_baseline_mean", "nn_baseline_q95"):
        assert 0 <= res[k] <= 1
    assert res["mean_ce"] >= 0 and 0 < res["nn_p_value"] <= 1
    ev.MetricsReport.aggregate([res]).validate()


def test_oracle_canonicalizer_uses_ground_truth(tiny):
    data, split = tiny
    res = ev.evaluate_fold("oracle", None, split, data, mode="retrieval", n_shuffles=20)
    idx = data.index_of(split.test_samples)
    labels = dict(zip(data.ids, data.subject_ids))
    scores, _ = ev.retrieval_report(data.canonical[idx], split.test_samples, labels)
    assert (res["nn"], res["ft"], res["st"], res["dcg"]) == (scores.nn, scores.ft, scores.st, scores.dcg)


def test_evaluate_fold_errors(tiny, trained):
    data, split = tiny
    with pytest.raises(ValidationError):
        ev.evaluate_fold("oracle", None, split, data, mode="pose")
    with pytest.raises(ValidationError):
        ev.evaluate_fold("oracle", None, split, data, mode="recon")
    empty = type(split)(split.train_samples, [], split.held_out_subjects, split.held_out_poses)
    with pytest.raises(ValidationError):
        ev.evaluate_fold("oracle", None, empty, data, mode="retrieval")


def test_fold_name():
    assert ev.fold_name((1, 2)) == "s1p2"
    assert ev.fold_name("x") == "x"
