import itertools
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leakseg.hierarchy import (
    ConfusionGraph,
    ConfusionMatrix,
    Hierarchy,
    accumulate_confusion,
    conductance,
    confusion_from_labels,
    conductance_curve,
    hierarchy_from_json,
    hierarchy_to_json,
    load_confusion_csv,
    load_hierarchy,
    mine_hierarchy,
    save_confusion_csv,
    save_hierarchy,
    select_cluster_count,
    spectral_cluster,
    strict_local_minima,
    to_graph,
)
from leakseg.segmodel import PredictionBatch


def planted_graph(sizes, ratio=4.0, seed=0, noise=0.5):
    """Symmetric block graph whose weakest intra edge is ``ratio`` x the strongest inter edge."""
    rng = np.random.default_rng(seed)
    fam = np.repeat(np.arange(len(sizes)), sizes)
    m = len(fam)
    same = fam[:, None] == fam[None, :]
    intra = rng.uniform(1.0 - noise / 2, 1.0, (m, m))
    inter = rng.uniform(0.0, (1.0 - noise / 2) / ratio, (m, m))
    W = np.where(same, intra, inter)
    W = np.triu(W, 1)
    W = W + W.T
    return ConfusionGraph(W), tuple(fam.tolist())


def rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    pairs = list(itertools.combinations(range(len(a)), 2))
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in pairs)
    return agree / len(pairs)


def brute_bipartition(W):
    """Exhaustive min-conductance 2-split written straight from the definition."""
    m = len(W)
    deg = W.sum(axis=1)
    best, best_set = np.inf, None
    for r in range(1, m):
        for S in itertools.combinations(range(m), r):
            if 0 not in S:
                continue
            inside = np.zeros(m, bool)
            inside[list(S)] = True
            cut = sum(W[i, j] for i in range(m) for j in range(m) if inside[i] and not inside[j])
            den = min(deg[inside].sum(), deg[~inside].sum())
            phi = cut / den if den > 0 else 1.0
            if phi < best - 1e-12:
                best, best_set = phi, inside
    return best, best_set


class TestConfusion:
    def test_perfect_predictor_is_diagonal(self):
        y = np.array([0, 1, 2, 2, 1])
        cm = confusion_from_labels(y, y, 3)
        assert np.array_equal(cm.counts, np.diag([1, 2, 2]))

    def test_single_mistake(self):
        cm = confusion_from_labels(np.array([2]), np.array([5]), 6)
        expect = np.zeros((6, 6), int)
        expect[2, 5] = 1
        assert np.array_equal(cm.counts, expect)

    def test_conservation(self, rng):
        y = rng.integers(0, 5, 300)
        p = rng.integers(0, 5, 300)
        assert confusion_from_labels(y, p, 5).counts.sum() == 300

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            confusion_from_labels(np.array([3]), np.array([0]), 3)

    def test_accumulate_batches(self, rng):
        import leakseg.autodiff as ad

        probs = rng.dirichlet(np.ones(4), 20)
        labels = rng.integers(0, 4, 20)
        b1 = PredictionBatch(ad.Tensor(probs[:12]), labels[:12])
        b2 = PredictionBatch(ad.Tensor(probs[12:]), labels[12:])
        total = accumulate_confusion([b1, b2], 4)
        assert total == confusion_from_labels(labels, probs.argmax(1), 4)


class TestGraph:
    def test_symmetric_input(self):
        g = to_graph(ConfusionMatrix([[9, 1], [1, 9]]))
        assert g.weights[0, 1] == pytest.approx(0.1)

    def test_hand_normalization(self):
        g = to_graph(ConfusionMatrix([[8, 2], [0, 10]]))
        assert g.weights[0, 1] == pytest.approx(0.1)
        assert g.weights[1, 0] == pytest.approx(0.1)

    def test_unseen_class_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            g = to_graph(ConfusionMatrix([[5, 1, 0], [0, 0, 0], [1, 0, 3]]))
        assert "no validation points" in caplog.text
        # the unseen row contributes nothing; class 0's mistakes into it still count
        assert g.weights[1, 0] == pytest.approx((1 / 6 + 0) / 2)
        assert g.weights[1, 2] == 0.0

    @given(arrays(np.int64, st.tuples(st.integers(1, 7)).map(lambda t: (t[0], t[0])), elements=st.integers(0, 50)))
    @settings(max_examples=200, deadline=None)
    def test_symmetric_zero_diagonal(self, counts):
        W = to_graph(ConfusionMatrix(counts)).weights
        assert np.array_equal(W, W.T)
        assert np.all(np.diag(W) == 0)
        assert np.all((W >= 0) & (W <= 1))


class TestConductance:
    def test_disconnected_exact_split(self):
        g, fam = planted_graph((2, 2), ratio=np.inf)
        assert conductance(g, Hierarchy(fam)) == 0.0

    def test_complete_graph_half_split(self):
        W = np.ones((4, 4)) - np.eye(4)
        assert conductance(ConfusionGraph(W * 0.3), Hierarchy((0, 0, 1, 1))) == pytest.approx(2 / 3)

    def test_single_cluster_is_one(self):
        W = np.ones((3, 3)) - np.eye(3)
        assert conductance(ConfusionGraph(W), Hierarchy((0, 0, 0))) == 1.0

    def test_zero_volume_side_is_one(self):
        W = np.zeros((3, 3))
        W[0, 1] = W[1, 0] = 1.0
        assert conductance(ConfusionGraph(W), Hierarchy((0, 0, 1))) == 1.0


class TestSpectralCluster:
    def test_two_blocks(self):
        g, fam = planted_graph((3, 2), ratio=10.0, seed=1)
        assert spectral_cluster(g, 2).mapping == fam

    def test_k_equals_m_is_identity(self):
        g, _ = planted_graph((3, 3))
        assert spectral_cluster(g, 6) == Hierarchy.identity(6)

    def test_k_one(self):
        g, _ = planted_graph((3, 3))
        assert spectral_cluster(g, 1).mapping == (0,) * 6

    def test_k_out_of_range(self):
        g, _ = planted_graph((2, 2))
        with pytest.raises(ValueError):
            spectral_cluster(g, 5)

    def test_canonical_labels(self):
        g, _ = planted_graph((2, 2, 2), ratio=10, seed=3)
        perm = np.array([4, 0, 2, 5, 1, 3])
        gp = ConfusionGraph(g.weights[np.ix_(perm, perm)])
        h = spectral_cluster(gp, 3)
        assert h.mapping[0] == 0
        firsts = [h.mapping.index(C) for C in range(h.M)]
        assert firsts == sorted(firsts)

    def test_deterministic(self):
        g, _ = planted_graph((3, 3, 2), seed=5)
        assert spectral_cluster(g, 3, seed=7) == spectral_cluster(g, 3, seed=7)

    def test_isolated_node_is_singleton(self):
        g, _ = planted_graph((3, 3), ratio=10)
        W = np.zeros((7, 7))
        W[:6, :6] = g.weights
        h = spectral_cluster(ConfusionGraph(W), 3)
        assert h.mapping == (0, 0, 0, 1, 1, 1, 2)

    @pytest.mark.parametrize("seed", range(20))
    def test_bipartition_matches_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(4, 9))
        a = int(rng.integers(2, m - 1))
        g, fam = planted_graph((a, m - a), ratio=4.0, seed=seed)
        _, oracle = brute_bipartition(g.weights)
        got = np.array(spectral_cluster(g, 2).mapping) == 0
        assert np.array_equal(got, oracle) or np.array_equal(got, ~oracle)


class TestSelectCount:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("sizes", [(3, 3, 2), (4, 2, 2), (3, 3, 3)])
    def test_planted_three_families(self, sizes, seed):
        g, fam = planted_graph(sizes, ratio=4.0, seed=seed)
        assert select_cluster_count(g, seed=seed) == 3
        assert rand_index(spectral_cluster(g, 3, seed=seed).mapping, fam) == 1.0

    def test_two_disconnected_blocks(self):
        g, _ = planted_graph((3, 3), ratio=np.inf, seed=2)
        assert select_cluster_count(g) == 2

    def test_flat_curve_defaults_to_two(self, caplog):
        W = np.ones((5, 5)) - np.eye(5)
        with caplog.at_level(logging.WARNING):
            assert select_cluster_count(ConfusionGraph(W)) == 2
        assert "flat" in caplog.text

    def test_m_three(self):
        g, _ = planted_graph((2, 1))
        assert select_cluster_count(g) == 2

    def test_too_small(self):
        with pytest.raises(ValueError):
            select_cluster_count(ConfusionGraph(np.zeros((2, 2))))

    def test_count_rule_is_clamped(self):
        g, _ = planted_graph((3, 3, 2), seed=0)
        assert 2 <= select_cluster_count(g, rule="count") <= 7

    def test_curve_keys(self):
        g, _ = planted_graph((2, 2, 2))
        assert list(conductance_curve(g)) == [2, 3, 4, 5]

    @pytest.mark.parametrize(
        "vals, expect",
        [([3, 1, 2], [1]), ([1, 2, 3], [0]), ([2, 1, 2, 1], [1, 3]), ([1, 1, 1], []), ([5], [])],
    )
    def test_strict_local_minima(self, vals, expect):
        assert strict_local_minima(vals) == expect


class TestMine:
    def test_perfect_model_identity(self, caplog):
        with caplog.at_level(logging.WARNING):
            h, _ = mine_hierarchy(ConfusionMatrix(np.diag([5, 5, 5, 5])))
        assert h == Hierarchy.identity(4)
        assert "identity" in caplog.text

    def test_recovers_families_from_counts(self):
        rng = np.random.default_rng(0)
        fam = np.array([0, 0, 0, 1, 1, 1, 2, 2])
        base = np.where(fam[:, None] == fam[None], 40, 3)
        counts = rng.poisson(base) + np.diag(np.full(8, 400))
        h, _ = mine_hierarchy(ConfusionMatrix(counts))
        assert h.mapping == tuple(fam.tolist())


class TestHierarchyType:
    def test_non_surjective(self):
        with pytest.raises(ValueError, match="surjective"):
            Hierarchy((0, 2, 2))

    def test_duplicate_names(self):
        with pytest.raises(ValueError, match="duplicate"):
            Hierarchy((0, 1), ("a", "a"))

    def test_membership(self):
        S = Hierarchy((0, 1, 0)).membership()
        assert S.tolist() == [[1, 0], [0, 1], [1, 0]]

    def test_json_round_trip(self, tmp_path):
        h = Hierarchy((0, 0, 1, 2, 1), tuple("abcde"))
        save_hierarchy(h, tmp_path / "h.json")
        assert load_hierarchy(tmp_path / "h.json") == h
        d = json.loads(hierarchy_to_json(h))
        assert d == {"M": 3, "mapping": [0, 0, 1, 2, 1], "names": list("abcde")}

    @pytest.mark.parametrize(
        "doc",
        [
            {"M": 2, "mapping": [0, 2], "names": ["a", "b"]},
            {"M": 2, "mapping": [0, 1], "names": ["a", "a"]},
            {"M": 3, "mapping": [0, 1], "names": ["a", "b"]},
        ],
    )
    def test_json_rejects(self, doc):
        with pytest.raises(ValueError):
            hierarchy_from_json(json.dumps(doc))

    def test_confusion_csv_round_trip(self, tmp_path):
        cm = ConfusionMatrix([[3, 1], [0, 7]])
        save_confusion_csv(cm, tmp_path / "cm.csv", ["x", "y"])
        back, names = load_confusion_csv(tmp_path / "cm.csv")
        assert back == cm and names == ["x", "y"]
