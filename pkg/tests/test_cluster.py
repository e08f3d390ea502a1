import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from ttt_omics import cluster
from ttt_omics.errors import ContractError

# ---------------------------------------------------------------------------
# independent oracles


def oracle_pair_metrics(truth, pred):
    """Explicit loop over all element pairs; ARI via the comb/expected-index form."""
    n = len(truth)
    a = b = c = d = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_t = truth[i] == truth[j]
            same_p = pred[i] == pred[j]
            if same_t and same_p:
                a += 1
            elif same_t:
                b += 1
            elif same_p:
                c += 1
            else:
                d += 1
    if b == 0 and c == 0:
        return 1.0, 1.0, 1.0, 1.0
    pairs_t, pairs_p = a + b, a + c
    total = Fraction(n * (n - 1), 2)
    expected = Fraction(pairs_t) * Fraction(pairs_p) / total
    max_index = Fraction(pairs_t + pairs_p, 2)
    ari = float((Fraction(a) - expected) / (max_index - expected))
    fmi = a / math.sqrt(pairs_t * pairs_p) if a else 0.0
    return ari, fmi, a / (a + b + c), 2 * a / (2 * a + b + c)


def oracle_mi_entropies(truth, pred):
    """Probability tables built by dict counting, pure python."""
    n = len(truth)
    joint, pu, pv = {}, {}, {}
    for t, p in zip(truth, pred):
        joint[(t, p)] = joint.get((t, p), 0) + 1
        pu[t] = pu.get(t, 0) + 1
        pv[p] = pv.get(p, 0) + 1
    mi = math.fsum((cnt / n) * math.log(cnt * n / (pu[t] * pv[p]))
                   for (t, p), cnt in joint.items())
    hu = -math.fsum((cnt / n) * math.log(cnt / n) for cnt in pu.values())
    hv = -math.fsum((cnt / n) * math.log(cnt / n) for cnt in pv.values())
    return mi, hu, hv


def oracle_nmi(truth, pred):
    mi, hu, hv = oracle_mi_entropies(truth, pred)
    if hu == 0.0 and hv == 0.0:
        return 1.0
    mean_h = 0.5 * (hu + hv)
    return mi / mean_h if mean_h > 0 else 0.0


def oracle_emi_exact(truth, pred):
    """Hypergeometric expected MI with exact rational probabilities."""
    n = len(truth)
    rows = sorted(np.unique(truth, return_counts=True)[1].tolist())
    cols = sorted(np.unique(pred, return_counts=True)[1].tolist())
    terms = []
    for ai in rows:
        for bj in cols:
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                prob = Fraction(math.comb(ai, nij) * math.comb(n - ai, bj - nij),
                                math.comb(n, bj))
                terms.append(float(prob) * (nij / n) * math.log(n * nij / (ai * bj)))
    return math.fsum(terms)


def canonical_labels(labels):
    order = {}
    return tuple(order.setdefault(lab, len(order)) for lab in labels)


def oracle_ami(truth, pred):
    mi, hu, hv = oracle_mi_entropies(truth, pred)
    if canonical_labels(truth) == canonical_labels(pred):
        return 1.0  # identical partitions: perfect agreement by convention
    emi = oracle_emi_exact(truth, pred)
    denom = 0.5 * (hu + hv) - emi
    eps = np.finfo(float).eps
    denom = min(denom, -eps) if denom < 0 else max(denom, eps)
    return (mi - emi) / denom


def oracle_emi_by_permutations(truth, pred):
    """Average MI over every relabeling permutation of the elements of pred."""
    n = len(pred)
    vals = [oracle_mi_entropies(truth, [pred[i] for i in perm])[0]
            for perm in itertools.permutations(range(n))]
    return math.fsum(vals) / len(vals)


def oracle_modularity(graph, assignment, resolution=1.0):
    """Direct double sum over the symmetrized adjacency matrix."""
    n = graph.n
    adj = np.zeros((n, n))
    for i in range(n):
        for j in graph.neighbors[i]:
            adj[i, j] = adj[j, i] = 1.0
    m = adj.sum() / 2.0
    if m == 0:
        return 0.0
    k = adj.sum(axis=1)
    q = 0.0
    for i in range(n):
        for j in range(n):
            if assignment[i] == assignment[j]:
                q += adj[i, j] - resolution * k[i] * k[j] / (2 * m)
    return q / (2 * m)


def all_partitions(n):
    """All set partitions of range(n) as restricted-growth label tuples."""
    def rec(prefix, max_used):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for v in range(max_used + 2):
            yield from rec(prefix + [v], max(max_used, v))
    yield from rec([0], 0)


# ---------------------------------------------------------------------------
# kNN graph


class TestBuildKnn:
    def test_three_collinear_points(self):
        emb = np.array([[0.0], [1.0], [3.0]])
        g = cluster.build_knn(emb, k=1)
        np.testing.assert_array_equal(g.neighbors.ravel(), [1, 0, 1])

    def test_complete_graph_at_k_n_minus_1(self):
        emb = np.random.default_rng(0).uniform(0, 1, (5, 2))
        g = cluster.build_knn(emb, k=4)
        for i in range(5):
            assert set(g.neighbors[i]) == set(range(5)) - {i}

    def test_duplicate_points_tie_by_lower_index(self):
        emb = np.zeros((4, 2))
        g = cluster.build_knn(emb, k=2)
        np.testing.assert_array_equal(g.neighbors[0], [1, 2])
        np.testing.assert_array_equal(g.neighbors[3], [0, 1])

    def test_k_out_of_range(self):
        emb = np.zeros((3, 2))
        with pytest.raises(ContractError):
            cluster.build_knn(emb, k=3)
        with pytest.raises(ContractError):
            cluster.build_knn(emb, k=0)

    def test_no_self_edges_and_weights_positive(self):
        emb = np.random.default_rng(1).uniform(0, 1, (10, 3))
        g = cluster.build_knn(emb, k=3)
        for i in range(10):
            assert i not in g.neighbors[i]
        assert np.all(g.weights > 0)

    def test_edges_view(self):
        emb = np.array([[0.0], [1.0], [3.0]])
        g = cluster.build_knn(emb, k=1)
        assert g.edges()[0] == [(1, 1.0)]


def clique_graph(sizes):
    """Directed kNN-style graph whose cliques are the intended communities."""
    blocks = []
    offset = 0
    k = min(sizes) - 1
    for size in sizes:
        for i in range(size):
            row = [offset + j for j in range(size) if j != i][:k]
            blocks.append(row)
        offset += size
    neighbors = np.array(blocks)
    return cluster.KnnGraph(n=offset, k=k, neighbors=neighbors,
                            weights=np.ones_like(neighbors, dtype=float))


class TestLeiden:
    def test_two_disconnected_cliques(self):
        g = clique_graph([5, 5])
        part = cluster.leiden_cluster(g, seed=0)
        assert part.n_communities == 2
        assert len(set(part.assignment[:5])) == 1
        assert len(set(part.assignment[5:])) == 1

    def test_pair_graph_single_community(self):
        g = cluster.KnnGraph(n=2, k=1, neighbors=np.array([[1], [0]]),
                             weights=np.ones((2, 1)))
        part = cluster.leiden_cluster(g, seed=0)
        assert part.n_communities == 1

    def test_beats_singleton_partition(self):
        rng = np.random.default_rng(3)
        emb = np.vstack([rng.normal(0, 0.3, (12, 2)), rng.normal(5, 0.3, (12, 2))])
        g = cluster.build_knn(emb, k=4)
        part = cluster.leiden_cluster(g, seed=1)
        q_part = oracle_modularity(g, part.assignment)
        q_single = oracle_modularity(g, np.arange(g.n))
        assert q_part >= q_single

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(4)
        emb = rng.uniform(0, 1, (40, 3))
        g = cluster.build_knn(emb, k=5)
        a = cluster.leiden_cluster(g, seed=7)
        b = cluster.leiden_cluster(g, seed=7)
        np.testing.assert_array_equal(a.assignment, b.assignment)

    def test_modularity_trace_non_decreasing(self):
        rng = np.random.default_rng(5)
        emb = np.vstack([rng.normal(c, 0.5, (15, 2)) for c in (0, 4, 9)])
        g = cluster.build_knn(emb, k=5)
        _, trace = cluster.leiden_cluster_with_trace(g, seed=2)
        assert len(trace) >= 2
        assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_internal_modularity_matches_definition_oracle(self):
        rng = np.random.default_rng(6)
        emb = rng.uniform(0, 1, (18, 2))
        g = cluster.build_knn(emb, k=3)
        part = cluster.leiden_cluster(g, seed=0)
        got = cluster.modularity(g, part)
        want = oracle_modularity(g, part.assignment)
        assert got == pytest.approx(want, abs=1e-10)

    def test_invalid_resolution(self):
        g = clique_graph([3, 3])
        with pytest.raises(ContractError):
            cluster.leiden_cluster(g, resolution=0.0)


# ---------------------------------------------------------------------------
# external metrics


class TestPairCounting:
    def test_identical_partitions(self):
        labels = [0, 0, 1, 1, 2]
        ari, fmi, ji, f = cluster.pair_counting_metrics(labels, labels)
        assert (ari, fmi, ji, f) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_derived_ari_minus_half(self):
        ari, _, _, _ = cluster.pair_counting_metrics([0, 0, 1, 1], [0, 1, 0, 1])
        assert ari == pytest.approx(-0.5, abs=1e-15)

    def test_matches_pair_enumeration_oracle_exhaustively(self):
        for n in (3, 4, 5):
            parts = list(all_partitions(n))
            for truth in parts:
                for pred in parts:
                    got = cluster.pair_counting_metrics(truth, pred)
                    want = oracle_pair_metrics(truth, pred)
                    for g, w in zip(got, want):
                        assert abs(g - w) <= 1e-12

    def test_symmetry_and_relabel_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = rng.integers(0, 4, 12)
            p = rng.integers(0, 3, 12)
            assert cluster.pair_counting_metrics(t, p) == cluster.pair_counting_metrics(p, t)
            relabeled = (p + 5) * 3
            got = cluster.pair_counting_metrics(t, relabeled)
            assert got == cluster.pair_counting_metrics(t, p)

    def test_too_few_elements(self):
        with pytest.raises(ContractError):
            cluster.pair_counting_metrics([0], [0])
        with pytest.raises(ContractError):
            cluster.pair_counting_metrics([0, 1], [0, 1, 2])


class TestInformationMetrics:
    def test_identical_partition_nmi_one(self):
        labels = [0, 1, 1, 2, 2, 2]
        nmi, ami = cluster.information_metrics(labels, labels)
        assert nmi == pytest.approx(1.0, abs=1e-12)
        assert ami == pytest.approx(1.0, abs=1e-9)

    def test_single_vs_single_defined_as_one(self):
        nmi, ami = cluster.information_metrics([0, 0, 0], [5, 5, 5])
        assert (nmi, ami) == (1.0, 1.0)

    def test_nmi_matches_probability_table_oracle_exhaustively(self):
        for n in (3, 4, 5):
            parts = list(all_partitions(n))
            for truth in parts:
                for pred in parts:
                    got, _ = cluster.information_metrics(truth, pred)
                    assert abs(got - oracle_nmi(truth, pred)) <= 1e-12

    def test_ami_matches_exact_hypergeometric_oracle(self):
        for n in (4, 5):
            parts = list(all_partitions(n))
            for truth in parts:
                for pred in parts:
                    _, got = cluster.information_metrics(truth, pred)
                    want = oracle_ami(truth, pred)
                    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))

    def test_expected_mi_equals_permutation_enumeration(self):
        # the hypergeometric formula is exactly the permutation-model mean
        rng = np.random.default_rng(1)
        for n in (4, 5):
            for _ in range(6):
                truth = rng.integers(0, 3, n).tolist()
                pred = rng.integers(0, 2, n).tolist()
                rows = np.unique(truth, return_counts=True)[1]
                cols = np.unique(pred, return_counts=True)[1]
                got = cluster.expected_mutual_information(rows, cols, n)
                want = oracle_emi_by_permutations(truth, pred)
                assert abs(got - want) <= 1e-10

    def test_independent_labels_ami_near_zero(self):
        rng = np.random.default_rng(2)
        vals = []
        for _ in range(100):
            t = rng.integers(0, 4, 200)
            p = rng.integers(0, 4, 200)
            vals.append(cluster.information_metrics(t, p)[1])
        assert abs(float(np.mean(vals))) <= 0.1

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        t = rng.integers(0, 4, 15)
        p = rng.integers(0, 3, 15)
        assert cluster.information_metrics(t, p) == cluster.information_metrics(p, t)


class TestGeometryMetrics:
    def test_two_tight_far_clusters(self):
        emb = np.array([[0.0], [0.1], [10.0], [10.1]])
        labels = [0, 0, 1, 1]
        sc, asw, chi, dbi = cluster.geometry_metrics(emb, labels, labels)
        assert sc > 0.9
        assert asw > 0.9
        assert dbi < 0.1
        assert chi > 100

    def test_singleton_cluster_contributes_zero(self):
        emb = np.array([[0.0], [0.2], [5.0]])
        sil = cluster.silhouette_values(emb, np.array([0, 0, 1]))
        assert sil[2] == 0.0

    def test_chi_increases_with_separation(self):
        rng = np.random.default_rng(4)
        spread = rng.normal(0, 0.5, (20, 2))
        labels = np.repeat([0, 1], 10)
        near = spread + labels[:, None] * 1.0
        far = spread + labels[:, None] * 10.0
        _, _, chi_near, _ = cluster.geometry_metrics(near, labels, labels)
        _, _, chi_far, _ = cluster.geometry_metrics(far, labels, labels)
        assert chi_far > chi_near

    def test_single_cluster_reports_none(self):
        emb = np.random.default_rng(5).uniform(0, 1, (6, 2))
        sc, asw, chi, dbi = cluster.geometry_metrics(emb, np.zeros(6, dtype=int),
                                                     np.repeat([0, 1], 3))
        assert sc is None and chi is None and dbi is None
        assert asw is not None

    def test_needs_three_points(self):
        with pytest.raises(ContractError):
            cluster.geometry_metrics(np.zeros((2, 2)), [0, 1], [0, 1])


class TestMetricReport:
    def test_bounds_on_random_partition_pairs(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            n = int(rng.integers(4, 51))
            t = rng.integers(0, int(rng.integers(2, 6)), n)
            p = rng.integers(0, int(rng.integers(2, 6)), n)
            ari, fmi, ji, f = cluster.pair_counting_metrics(t, p)
            nmi, ami = cluster.information_metrics(t, p)
            assert -1.0 - 1e-12 <= ari <= 1.0 + 1e-12
            for v in (nmi, fmi, ji, f):
                assert -1e-12 <= v <= 1.0 + 1e-12
            assert ami <= 1.0 + 1e-12

    def test_compute_and_json_dict(self):
        rng = np.random.default_rng(10)
        emb = np.vstack([rng.normal(0, 0.4, (10, 3)), rng.normal(6, 0.4, (10, 3))])
        truth = np.repeat([0, 1], 10)
        pred = cluster.Partition.from_labels(truth)
        report = cluster.MetricReport.compute(emb, truth, pred)
        blob = report.to_json_dict()
        assert list(blob) == ["ari", "nmi", "fmi", "asw", "ami", "ji",
                              "sc", "chi", "f_measure", "dbi"]
        assert blob["ari"] == 1.0
        assert blob["sc"] == blob["asw"]
        for v in blob.values():
            assert v is None or isinstance(v, float)

    def test_json_none_for_undefined(self):
        emb = np.random.default_rng(11).uniform(0, 1, (5, 2))
        report = cluster.MetricReport.compute(emb, np.repeat([0, 1], [2, 3]),
                                              np.zeros(5, dtype=int))
        blob = report.to_json_dict()
        assert blob["sc"] is None and blob["chi"] is None and blob["dbi"] is None


def test_partition_from_labels_dense_first_occurrence():
    part = cluster.Partition.from_labels(["b", "a", "b", "c"])
    np.testing.assert_array_equal(part.assignment, [0, 1, 0, 2])
    assert part.n_communities == 3
