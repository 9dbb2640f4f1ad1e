import numpy as np
import pytest

from cirmap.composer import ComposerSpec, PromptComposer
from cirmap.errors import ParameterError, ShapeError
from cirmap.retrieval import (
    Gallery,
    Query,
    RankedResult,
    average_precision_at_k,
    baseline_compose,
    compose_query,
    evaluate_task,
    map_at_k,
    rank,
    recall_at_k,
    slerp,
)
from cirmap.training import TrainConfig, init_mappers
from oracles import brute_force_map, brute_force_rank, brute_force_recall, unit_rows


def make_query(rng, d=8, targets=("t0",), qid="q"):
    ref, cond = unit_rows(rng, 2, d)
    return Query(
        query_id=qid,
        reference_id="ref",
        reference_emb=ref.astype(np.float32),
        condition_id="cond",
        condition_emb=cond.astype(np.float32),
        target_ids=frozenset(targets),
    )


def ranked(ids):
    return RankedResult([(i, 1.0 - 0.01 * r) for r, i in enumerate(ids)])


@pytest.fixture(scope="module")
def setup16():
    cfg = TrainConfig(dim=16, hidden=32, seed=3, composer_seed=3, batch_size=4, steps=1)
    return init_mappers(cfg), PromptComposer(ComposerSpec(dim=16, seed=3))


class TestComposeQuery:
    def test_gamma_range_checked(self, setup16):
        mappers, composer = setup16
        query = make_query(np.random.default_rng(0), d=16)
        for bad in (-0.1, 1.1):
            with pytest.raises(ParameterError):
                compose_query(query, mappers, composer, bad)

    def test_output_unit_norm(self, setup16):
        mappers, composer = setup16
        query = make_query(np.random.default_rng(1), d=16)
        for gamma in (0.0, 0.5, 1.0):
            vec = compose_query(query, mappers, composer, gamma)
            assert abs(np.linalg.norm(vec.astype(np.float64)) - 1.0) < 1e-6

    def test_gamma_one_ignores_supplement_mapper(self, setup16):
        mappers, composer = setup16
        query = make_query(np.random.default_rng(2), d=16)
        base = compose_query(query, mappers, composer, 1.0)
        reinit = TrainConfig(
            dim=16, hidden=32, seed=999, composer_seed=3, batch_size=4, steps=1
        )
        other = init_mappers(reinit)
        swapped = type(mappers)(pseudo=mappers.pseudo, supplement=other.supplement)
        again = compose_query(query, swapped, composer, 1.0)
        assert np.array_equal(base, again)

    def test_gamma_zero_ignores_pseudo_mapper(self, setup16):
        mappers, composer = setup16
        query = make_query(np.random.default_rng(3), d=16)
        base = compose_query(query, mappers, composer, 0.0)
        reinit = TrainConfig(
            dim=16, hidden=32, seed=777, composer_seed=3, batch_size=4, steps=1
        )
        other = init_mappers(reinit)
        swapped = type(mappers)(pseudo=other.pseudo, supplement=mappers.supplement)
        again = compose_query(query, swapped, composer, 0.0)
        assert np.array_equal(base, again)


class TestBaselines:
    def test_image_only(self):
        q = make_query(np.random.default_rng(4))
        assert np.array_equal(baseline_compose(q, "image_only"), q.reference_emb)

    def test_text_only(self):
        q = make_query(np.random.default_rng(5))
        assert np.array_equal(baseline_compose(q, "text_only"), q.condition_emb)

    def test_average_normalized(self):
        q = make_query(np.random.default_rng(6))
        out = baseline_compose(q, "average")
        expected = q.reference_emb.astype(np.float64) + q.condition_emb.astype(np.float64)
        expected /= np.linalg.norm(expected)
        assert np.allclose(out, expected, atol=1e-6)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            baseline_compose(make_query(np.random.default_rng(7)), "mystery")


class TestSlerp:
    def test_boundaries(self):
        rng = np.random.default_rng(8)
        a, b = unit_rows(rng, 2, 6)
        assert np.allclose(slerp(a, b, 0.0), a, atol=1e-6)
        assert np.allclose(slerp(a, b, 1.0), b, atol=1e-6)

    def test_orthogonal_midpoint(self):
        a = np.array([1.0, 0.0, 0.0, 0.0])
        b = np.array([0.0, 1.0, 0.0, 0.0])
        mid = slerp(a, b, 0.5)
        assert np.allclose(mid, (a + b) / np.sqrt(2.0), atol=1e-6)

    def test_near_parallel_falls_back_to_average(self):
        a = np.array([1.0, 0.0])
        out = slerp(a, a.copy(), 0.3)
        assert np.allclose(out, a, atol=1e-6)


class TestRank:
    def _gallery(self):
        vecs = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.8, 0.6, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [-1.0, 0.0, 0.0],
            ],
            dtype=np.float32,
        )
        return Gallery([f"g{i}" for i in range(5)], vecs)

    def test_self_retrieval_first(self):
        g = self._gallery()
        res = rank(g, np.array([0.8, 0.6, 0.0], dtype=np.float32), 3)
        assert res.items[0][0] == "g1"
        assert res.items[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_gallery(self):
        g = self._gallery()
        res = rank(g, np.array([1.0, 0.0, 0.0], dtype=np.float32), 99)
        assert len(res.items) == 5

    def test_hand_gallery_matches_brute_force(self):
        g = self._gallery()
        q = np.array([0.6, 0.0, 0.8], dtype=np.float32)
        ours = rank(g, q, 5).items
        ref = brute_force_rank(g.ids, g.vectors, q, 5)
        assert [i for i, _ in ours] == [i for i, _ in ref]

    def test_tie_break_ascending_id(self):
        vecs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        g = Gallery(["b", "a", "c"], vecs)
        res = rank(g, np.array([1.0, 0.0], dtype=np.float32), 3)
        assert res.ids() == ["a", "b", "c"]

    def test_oracle_equivalence_seeded_suite(self):
        # 1000 random galleries, full ordering equality with the loop oracle
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 65))
            d = int(rng.integers(2, 9))
            g = Gallery([f"i{j:03d}" for j in range(n)], unit_rows(rng, n, d))
            q = unit_rows(rng, 1, d)[0]
            k = int(rng.integers(1, n + 1))
            ours = rank(g, q, k)
            ref = brute_force_rank(g.ids, g.vectors, q, k)
            assert ours.ids() == [i for i, _ in ref], seed

    def test_scores_non_increasing(self):
        rng = np.random.default_rng(9)
        g = Gallery([f"i{j}" for j in range(20)], unit_rows(rng, 20, 6))
        res = rank(g, unit_rows(rng, 1, 6)[0], 20)
        scores = [s for _, s in res.items]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


class TestMetrics:
    def test_recall_all_first(self):
        rng = np.random.default_rng(10)
        queries = [make_query(rng, targets=(f"t{i}",), qid=f"q{i}") for i in range(3)]
        results = [ranked([f"t{i}", "x", "y"]) for i in range(3)]
        assert recall_at_k(results, queries, 1) == 1.0

    def test_recall_none(self):
        rng = np.random.default_rng(11)
        queries = [make_query(rng, targets=("t",), qid="q0")]
        assert recall_at_k([ranked(["a", "b"])], queries, 2) == 0.0

    def test_recall_hand_case(self):
        # targets at ranks 1, 3, 7 -> R@5 = 2/3
        rng = np.random.default_rng(12)
        queries = [make_query(rng, targets=("t",), qid=f"q{i}") for i in range(3)]
        fillers = [f"f{i}" for i in range(10)]
        results = [
            ranked(["t"] + fillers[:9]),
            ranked(fillers[:2] + ["t"] + fillers[2:9]),
            ranked(fillers[:6] + ["t"] + fillers[6:9]),
        ]
        assert recall_at_k(results, queries, 5) == pytest.approx(2.0 / 3.0)

    def test_map_single_target_rank_one(self):
        rng = np.random.default_rng(13)
        q = make_query(rng, targets=("t",))
        assert average_precision_at_k(ranked(["t", "a", "b"]), q, 3) == 1.0

    def test_map_single_target_rank_two(self):
        rng = np.random.default_rng(14)
        q = make_query(rng, targets=("t",))
        assert average_precision_at_k(ranked(["a", "t", "b"]), q, 5) == pytest.approx(0.5)

    def test_map_two_targets_hand_case(self):
        # targets at ranks 1 and 3, k=5 -> AP = (1 + 2/3) / 2 = 5/6
        rng = np.random.default_rng(15)
        q = make_query(rng, targets=("t1", "t2"))
        res = ranked(["t1", "x", "t2", "y", "z"])
        assert average_precision_at_k(res, q, 5) == pytest.approx(5.0 / 6.0)

    def test_metric_oracle_equivalence(self):
        # 1000 seeded galleries; exact within 1e-9 of the loop oracles
        for seed in range(1000):
            rng = np.random.default_rng(10_000 + seed)
            n = int(rng.integers(4, 33))
            d = int(rng.integers(2, 7))
            ids = [f"i{j:03d}" for j in range(n)]
            g = Gallery(ids, unit_rows(rng, n, d))
            queries, results, ranked_ids, target_sets = [], [], [], []
            for qi in range(int(rng.integers(1, 5))):
                n_targets = int(rng.integers(1, 4))
                targets = set(rng.choice(ids, size=n_targets, replace=False).tolist())
                q = make_query(rng, d=d, targets=tuple(targets), qid=f"q{qi}")
                res = rank(g, q.reference_emb, n)
                queries.append(q)
                results.append(res)
                ranked_ids.append(res.ids())
                target_sets.append(targets)
            for k in (1, 3, n):
                ours_r = recall_at_k(results, queries, k)
                ours_m = map_at_k(results, queries, k)
                assert abs(ours_r - brute_force_recall(ranked_ids, target_sets, k)) < 1e-9
                assert abs(ours_m - brute_force_map(ranked_ids, target_sets, k)) < 1e-9

    def test_recall_monotone_in_k(self):
        rng = np.random.default_rng(16)
        queries = [make_query(rng, targets=("t",), qid=f"q{i}") for i in range(4)]
        results = [
            ranked(["a", "t", "b", "c"]),
            ranked(["t", "a", "b", "c"]),
            ranked(["a", "b", "c", "t"]),
            ranked(["a", "b", "c", "d"]),
        ]
        values = [recall_at_k(results, queries, k) for k in (1, 2, 3, 4)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_map_stable_beyond_gallery_size(self):
        rng = np.random.default_rng(17)
        queries = [make_query(rng, targets=("t",), qid="q0")]
        results = [ranked(["a", "t", "b"])]
        assert map_at_k(results, queries, 3) == map_at_k(results, queries, 10)

    def test_metric_range(self):
        rng = np.random.default_rng(18)
        queries = [make_query(rng, targets=("t",), qid=f"q{i}") for i in range(5)]
        results = [ranked(["a", "t", "b"]) for _ in range(5)]
        for k in (1, 2, 3):
            assert 0.0 <= recall_at_k(results, queries, k) <= 1.0
            assert 0.0 <= map_at_k(results, queries, k) <= 1.0

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(19)
        queries = [make_query(rng, targets=("t",))]
        with pytest.raises(ShapeError):
            recall_at_k([], queries, 1)


class TestEvaluateTask:
    def test_composed_requires_models(self):
        rng = np.random.default_rng(20)
        from cirmap.retrieval import EvalTask

        g = Gallery(["a", "b"], unit_rows(rng, 2, 8).astype(np.float32))
        task = EvalTask(gallery=g, queries=[make_query(rng, targets=("a",))])
        with pytest.raises(ParameterError):
            evaluate_task(task, None, None, mode="composed")

    def test_baseline_report_shape(self):
        rng = np.random.default_rng(21)
        from cirmap.retrieval import EvalTask

        g = Gallery(["a", "b", "t0"], unit_rows(rng, 3, 8).astype(np.float32))
        task = EvalTask(
            gallery=g,
            queries=[make_query(rng, targets=("t0",))],
            k_values=[1, 2],
            gamma=0.6,
        )
        report = evaluate_task(task, None, None, mode="image_only", per_query=True)
        assert report["mode"] == "image_only"
        assert set(report["metrics"]) == {"recall@1", "recall@2", "map@1", "map@2"}
        assert len(report["per_query"]) == 1


def test_query_requires_targets():
    rng = np.random.default_rng(22)
    with pytest.raises(ShapeError):
        make_query(rng, targets=())


def test_gallery_unique_ids():
    rng = np.random.default_rng(23)
    with pytest.raises(ShapeError):
        Gallery(["a", "a"], unit_rows(rng, 2, 4).astype(np.float32))
