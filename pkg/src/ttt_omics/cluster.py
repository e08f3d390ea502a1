"""Cell-embedding evaluation: exact kNN graph, Leiden communities, metrics.

The evaluation pipeline mirrors common single-cell practice: build a
k-nearest-neighbor graph on the embeddings (k = 20 by default), detect
communities with the Leiden algorithm (local moving, refinement,
aggregation, iterated until no node moves), then score the result with a
battery of external agreement indices (ARI, NMI, AMI, FMI, JI, pairwise
F-measure) and internal geometry indices (SC, ASW, CHI, DBI).

Conventions that vary between libraries and therefore are fixed here:
NMI and AMI normalize by the arithmetic mean of the two entropies; the
F-measure is the pairwise F1 (equal to 2*JI/(1+JI)); ASW is the
silhouette against the ground-truth labels while SC is the silhouette
against the predicted clusters.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gammaln

from .errors import ContractError
from .runtime import worker_count

_GAIN_TOL = 1e-12


@dataclass
class KnnGraph:
    """Directed kNN graph: row i lists i's k nearest neighbors."""

    n: int
    k: int
    neighbors: np.ndarray  # [n, k] int
    weights: np.ndarray    # [n, k] float, positive

    def edges(self) -> list[list[tuple[int, float]]]:
        """Adjacency-list view."""
        return [[(int(j), float(w)) for j, w in zip(self.neighbors[i], self.weights[i])]
                for i in range(self.n)]


@dataclass
class Partition:
    """Community assignment with dense ids 0..n_communities-1."""

    assignment: np.ndarray
    n_communities: int

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        labels = np.asarray(labels)
        _, dense = np.unique(labels, return_inverse=True)
        # relabel by first occurrence so equal label sets compare stably
        order = {}
        out = np.empty(labels.size, dtype=np.intp)
        for i, lab in enumerate(dense):
            if lab not in order:
                order[lab] = len(order)
            out[i] = order[lab]
        return cls(assignment=out, n_communities=len(order))


def _as_assignment(p) -> np.ndarray:
    if isinstance(p, Partition):
        return p.assignment
    return Partition.from_labels(p).assignment


def build_knn(embeddings: np.ndarray, k: int = 20, metric: str = "euclidean") -> KnnGraph:
    """Exact brute-force kNN; ties broken toward the lower index."""
    if metric != "euclidean":
        raise ContractError(f"unsupported metric {metric!r}")
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ContractError(f"embeddings must be 2-d, got shape {emb.shape}")
    n = emb.shape[0]
    if not 0 < k < n:
        raise ContractError(f"k must satisfy 0 < k < n, got k={k}, n={n}")

    neighbors = np.empty((n, k), dtype=np.intp)
    chunk = max(1, min(n, 2 ** 22 // max(n, 1)))

    def process(start: int) -> None:
        stop = min(start + chunk, n)
        dist = cdist(emb[start:stop], emb)
        for row, i in enumerate(range(start, stop)):
            dist[row, i] = np.inf
            order = np.argsort(dist[row], kind="stable")
            neighbors[i] = order[:k]

    starts = range(0, n, chunk)
    workers = worker_count()
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(process, starts))
    else:
        for s in starts:
            process(s)
    return KnnGraph(n=n, k=k, neighbors=neighbors, weights=np.ones((n, k)))


# ---------------------------------------------------------------------------
# Leiden community detection


@dataclass
class _UGraph:
    """Undirected weighted graph with self-loops (for aggregation levels)."""

    neighbors: list[np.ndarray]
    weights: list[np.ndarray]
    self_loops: np.ndarray
    strength: np.ndarray   # k_i = sum of incident weights + 2 * self loop
    m: float               # total edge weight (self loops counted once)

    @property
    def n(self) -> int:
        return self.self_loops.size


def _symmetrize(graph: KnnGraph) -> _UGraph:
    """Undirected simple-graph view: an edge exists if either direction does."""
    pairs = set()
    for i in range(graph.n):
        for j in graph.neighbors[i]:
            a, b = (int(i), int(j)) if i < j else (int(j), int(i))
            if a != b:
                pairs.add((a, b))
    adj: list[list[int]] = [[] for _ in range(graph.n)]
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)
    neighbors = [np.array(sorted(lst), dtype=np.intp) for lst in adj]
    weights = [np.ones(len(lst)) for lst in neighbors]
    self_loops = np.zeros(graph.n)
    strength = np.array([w.sum() for w in weights])
    return _UGraph(neighbors, weights, self_loops, strength, m=float(len(pairs)))


def _graph_modularity(g: _UGraph, assignment: np.ndarray, resolution: float) -> float:
    if g.m <= 0:
        return 0.0
    two_m = 2.0 * g.m
    n_comm = int(assignment.max()) + 1 if assignment.size else 0
    internal = np.zeros(n_comm)
    totals = np.zeros(n_comm)
    for i in range(g.n):
        c = assignment[i]
        totals[c] += g.strength[i]
        internal[c] += 2.0 * g.self_loops[i]
        same = assignment[g.neighbors[i]] == c
        internal[c] += g.weights[i][same].sum()
    return float(np.sum(internal / two_m - resolution * (totals / two_m) ** 2))


def modularity(graph: KnnGraph, partition: Partition | np.ndarray, resolution: float = 1.0) -> float:
    """Modularity of a partition on the symmetrized view of a kNN graph."""
    return _graph_modularity(_symmetrize(graph), _as_assignment(partition), resolution)


def _local_move(g: _UGraph, assignment: np.ndarray, rng: np.random.Generator,
                resolution: float) -> tuple[np.ndarray, bool]:
    """Queue-based greedy node moves; returns (assignment, any_moved)."""
    assignment = assignment.copy()
    two_m2 = 2.0 * g.m * g.m
    comm_strength = np.zeros(int(assignment.max()) + 1 + g.n)
    for i in range(g.n):
        comm_strength[assignment[i]] += g.strength[i]

    order = rng.permutation(g.n)
    queue = list(order)
    in_queue = np.ones(g.n, dtype=bool)
    head = 0
    moved_any = False
    while head < len(queue):
        v = queue[head]
        head += 1
        in_queue[v] = False
        old = assignment[v]
        comm_strength[old] -= g.strength[v]

        link: dict[int, float] = {}
        for j, w in zip(g.neighbors[v], g.weights[v]):
            c = assignment[j]
            link[c] = link.get(c, 0.0) + w
        link.setdefault(old, 0.0)

        # staying put is the baseline; an alternative must strictly beat it,
        # and equal-gain alternatives settle on the lowest community id
        best_comm = old
        best_gain = link[old] / g.m - resolution * g.strength[v] * comm_strength[old] / two_m2
        for c in sorted(link):
            if c == old:
                continue
            gain = link[c] / g.m - resolution * g.strength[v] * comm_strength[c] / two_m2
            if gain > best_gain + _GAIN_TOL:
                best_comm, best_gain = c, gain
        assignment[v] = best_comm
        comm_strength[best_comm] += g.strength[v]
        if best_comm != old:
            moved_any = True
            for j in g.neighbors[v]:
                if not in_queue[j] and assignment[j] != best_comm:
                    queue.append(int(j))
                    in_queue[j] = True
    return assignment, moved_any


def _refine(g: _UGraph, coarse: np.ndarray, rng: np.random.Generator,
            resolution: float) -> np.ndarray:
    """Merge singleton nodes within their coarse community on strict gain."""
    refined = np.arange(g.n)
    ref_strength = g.strength.copy()
    ref_size = np.ones(g.n, dtype=np.intp)
    two_m2 = 2.0 * g.m * g.m

    for v in rng.permutation(g.n):
        if ref_size[refined[v]] > 1:
            continue
        ref_strength[refined[v]] -= g.strength[v]
        link: dict[int, float] = {}
        for j, w in zip(g.neighbors[v], g.weights[v]):
            if coarse[j] == coarse[v]:
                rc = refined[j]
                link[rc] = link.get(rc, 0.0) + w
        best_comm, best_gain = refined[v], 0.0
        for rc in sorted(link):
            if rc == refined[v]:
                continue
            gain = link[rc] / g.m - resolution * g.strength[v] * ref_strength[rc] / two_m2
            if gain > best_gain + _GAIN_TOL:
                best_comm, best_gain = rc, gain
        ref_size[refined[v]] -= 1
        refined[v] = best_comm
        ref_size[best_comm] += 1
        ref_strength[best_comm] += g.strength[v]
    return refined


def _aggregate(g: _UGraph, refined: np.ndarray) -> tuple[_UGraph, np.ndarray]:
    """Collapse refined communities into single nodes."""
    comms, dense = np.unique(refined, return_inverse=True)
    n_new = comms.size
    self_loops = np.zeros(n_new)
    edge_weights: dict[tuple[int, int], float] = {}
    for i in range(g.n):
        ci = dense[i]
        self_loops[ci] += g.self_loops[i]
        for j, w in zip(g.neighbors[i], g.weights[i]):
            if i < j:
                cj = dense[j]
                if ci == cj:
                    self_loops[ci] += w
                else:
                    key = (min(ci, cj), max(ci, cj))
                    edge_weights[key] = edge_weights.get(key, 0.0) + w
    adj: list[dict[int, float]] = [dict() for _ in range(n_new)]
    for (a, b), w in edge_weights.items():
        adj[a][b] = w
        adj[b][a] = w
    neighbors = [np.array(sorted(d), dtype=np.intp) for d in adj]
    weights = [np.array([adj[i][j] for j in neighbors[i]]) for i in range(n_new)]
    strength = np.array([w.sum() for w in weights]) + 2.0 * self_loops
    m = sum(edge_weights.values()) + self_loops.sum()
    return _UGraph(neighbors, weights, self_loops, strength, float(m)), dense


def leiden_cluster_with_trace(graph: KnnGraph, resolution: float = 1.0,
                              seed: int = 0) -> tuple[Partition, list[float]]:
    """Leiden communities plus the modularity after each level's move phase."""
    if graph.n < 1:
        raise ContractError("graph must be nonempty")
    if resolution <= 0:
        raise ContractError("resolution must be positive")
    g0 = _symmetrize(graph)
    g = g0
    rng = np.random.default_rng(seed)
    orig_to_node = np.arange(graph.n)
    assignment = np.arange(g.n)
    trace = [_graph_modularity(g, assignment, resolution)]

    for _ in range(50):
        assignment, moved = _local_move(g, assignment, rng, resolution)
        flat = assignment[orig_to_node]
        trace.append(_graph_modularity(g0, flat, resolution))
        if not moved or len(np.unique(assignment)) == g.n:
            break
        refined = _refine(g, assignment, rng, resolution)
        g, dense = _aggregate(g, refined)
        orig_to_node = dense[orig_to_node]
        # aggregated nodes start in the coarse community of their members
        new_assignment = np.empty(g.n, dtype=np.intp)
        for node in range(len(dense)):
            new_assignment[dense[node]] = assignment[node]
        _, new_assignment = np.unique(new_assignment, return_inverse=True)
        assignment = new_assignment

    partition = Partition.from_labels(assignment[orig_to_node])
    for a, b in zip(trace, trace[1:]):
        assert b >= a - 1e-9, "modularity decreased across Leiden iterations"
    return partition, trace


def leiden_cluster(graph: KnnGraph, resolution: float = 1.0, seed: int = 0) -> Partition:
    """Modularity-maximizing communities on the symmetrized kNN graph."""
    partition, _ = leiden_cluster_with_trace(graph, resolution, seed)
    return partition


# ---------------------------------------------------------------------------
# external agreement metrics


def _contingency(truth: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tu, ti = np.unique(truth, return_inverse=True)
    pu, pi = np.unique(pred, return_inverse=True)
    table = np.zeros((tu.size, pu.size), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table, table.sum(axis=1), table.sum(axis=0)


def _pair_counts(truth: np.ndarray, pred: np.ndarray) -> tuple[int, int, int, int]:
    """(together in both, truth only, pred only, neither) over all element pairs."""
    table, rows, cols = _contingency(truth, pred)
    same_both = int((table * (table - 1) // 2).sum())
    same_truth = int((rows * (rows - 1) // 2).sum())
    same_pred = int((cols * (cols - 1) // 2).sum())
    n = truth.size
    total = n * (n - 1) // 2
    a = same_both
    b = same_truth - a
    c = same_pred - a
    return a, b, c, total - a - b - c


def pair_counting_metrics(truth, pred) -> tuple[float, float, float, float]:
    """(ARI, FMI, JI, pairwise F1) from the pair confusion counts."""
    t = _as_assignment(truth)
    p = _as_assignment(pred)
    if t.size != p.size:
        raise ContractError(f"partition sizes differ: {t.size} vs {p.size}")
    if t.size < 2:
        raise ContractError("pair counting needs at least 2 elements")
    a, b, c, d = _pair_counts(t, p)
    if b == 0 and c == 0:
        return 1.0, 1.0, 1.0, 1.0
    ari = 2.0 * (a * d - b * c) / ((a + b) * (b + d) + (a + c) * (c + d))
    fmi = a / math.sqrt((a + b) * (a + c)) if a > 0 else 0.0
    ji = a / (a + b + c)
    f_measure = 2.0 * a / (2.0 * a + b + c)
    return ari, fmi, ji, f_measure


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_information(table: np.ndarray, rows: np.ndarray, cols: np.ndarray, n: int) -> float:
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(rows, cols)[nz] / (n * n)
    return float((pij * np.log(pij / outer)).sum())


def expected_mutual_information(rows: np.ndarray, cols: np.ndarray, n: int) -> float:
    """Expected MI of two fixed marginals under the permutation model."""
    emi = 0.0
    log_n = math.log(n)
    for ai in rows:
        for bj in cols:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_term = np.log(nij) + log_n - math.log(ai) - math.log(bj)
            log_prob = (gammaln(ai + 1) + gammaln(bj + 1)
                        + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                        - gammaln(n + 1) - gammaln(nij + 1)
                        - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                        - gammaln(n - ai - bj + nij + 1))
            emi += float(((nij / n) * log_term * np.exp(log_prob)).sum())
    return emi


def information_metrics(truth, pred) -> tuple[float, float]:
    """(NMI, AMI), both normalized by the arithmetic mean of entropies."""
    t = _as_assignment(truth)
    p = _as_assignment(pred)
    if t.size != p.size:
        raise ContractError(f"partition sizes differ: {t.size} vs {p.size}")
    if np.array_equal(t, p):
        # covers the degenerate identical cases (0/0 in the adjustment)
        return 1.0, 1.0
    table, rows, cols = _contingency(t, p)
    # canonical orientation so that swapping the arguments is bit-identical
    if (cols.tolist(), rows.tolist()) < (rows.tolist(), cols.tolist()):
        table, rows, cols = table.T, cols, rows
    if rows.size == 1 and cols.size == 1:
        return 1.0, 1.0
    n = t.size
    hu, hv = _entropy(rows, n), _entropy(cols, n)
    mi = _mutual_information(table, rows, cols, n)
    mean_h = 0.5 * (hu + hv)
    nmi = mi / mean_h if mean_h > 0 else 0.0

    emi = expected_mutual_information(rows, cols, n)
    denom = mean_h - emi
    eps = np.finfo(float).eps
    denom = min(denom, -eps) if denom < 0 else max(denom, eps)
    ami = (mi - emi) / denom
    return nmi, ami


# ---------------------------------------------------------------------------
# internal geometry metrics


def silhouette_values(embeddings: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-point silhouette; singleton clusters contribute 0."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    dist = cdist(emb, emb)
    uniq = np.unique(labels)
    sizes = {c: int((labels == c).sum()) for c in uniq}
    sil = np.zeros(n)
    mean_to = np.stack([dist[:, labels == c].mean(axis=1) for c in uniq], axis=1)
    col_of = {c: i for i, c in enumerate(uniq)}
    for i in range(n):
        c = labels[i]
        size = sizes[c]
        if size == 1:
            sil[i] = 0.0
            continue
        own = mean_to[i, col_of[c]] * size / (size - 1)  # exclude the zero self distance
        others = [mean_to[i, col_of[o]] for o in uniq if o != c]
        b = min(others)
        denom = max(own, b)
        sil[i] = 0.0 if denom == 0 else (b - own) / denom
    return sil


def _calinski_harabasz(emb: np.ndarray, labels: np.ndarray) -> float | None:
    uniq = np.unique(labels)
    k, n = uniq.size, emb.shape[0]
    if k < 2 or k >= n:
        return None
    overall = emb.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in uniq:
        pts = emb[labels == c]
        centroid = pts.mean(axis=0)
        between += pts.shape[0] * float(((centroid - overall) ** 2).sum())
        within += float(((pts - centroid) ** 2).sum())
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def _davies_bouldin(emb: np.ndarray, labels: np.ndarray) -> float | None:
    uniq = np.unique(labels)
    k = uniq.size
    if k < 2:
        return None
    centroids = np.stack([emb[labels == c].mean(axis=0) for c in uniq])
    scatter = np.array([cdist(emb[labels == c], centroids[i:i + 1]).mean()
                        for i, c in enumerate(uniq)])
    centroid_dist = cdist(centroids, centroids)
    worst = np.zeros(k)
    for i in range(k):
        ratios = [(scatter[i] + scatter[j]) / centroid_dist[i, j] if centroid_dist[i, j] > 0
                  else math.inf
                  for j in range(k) if j != i]
        worst[i] = max(ratios)
    return float(worst.mean())


def geometry_metrics(embeddings: np.ndarray, pred, truth
                     ) -> tuple[float | None, float | None, float | None, float | None]:
    """(SC, ASW, CHI, DBI); undefined values (single cluster) come back as None."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] < 3:
        raise ContractError("geometry metrics need at least 3 points")
    p = _as_assignment(pred)
    t = _as_assignment(truth)
    sc = float(silhouette_values(emb, p).mean()) if np.unique(p).size > 1 else None
    asw = float(silhouette_values(emb, t).mean()) if np.unique(t).size > 1 else None
    chi = _calinski_harabasz(emb, p)
    dbi = _davies_bouldin(emb, p)
    return sc, asw, chi, dbi


@dataclass
class MetricReport:
    """The ten-metric battery; geometry entries may be None when undefined."""

    ari: float
    nmi: float
    fmi: float
    asw: float | None
    ami: float
    ji: float
    sc: float | None
    chi: float | None
    f_measure: float
    dbi: float | None

    FIELD_ORDER = ("ari", "nmi", "fmi", "asw", "ami", "ji", "sc", "chi", "f_measure", "dbi")

    @classmethod
    def compute(cls, embeddings: np.ndarray, truth, pred) -> "MetricReport":
        ari, fmi, ji, f_measure = pair_counting_metrics(truth, pred)
        nmi, ami = information_metrics(truth, pred)
        sc, asw, chi, dbi = geometry_metrics(embeddings, pred, truth)
        return cls(ari=ari, nmi=nmi, fmi=fmi, asw=asw, ami=ami, ji=ji,
                   sc=sc, chi=chi, f_measure=f_measure, dbi=dbi)

    def to_json_dict(self) -> dict:
        out = {}
        for name in self.FIELD_ORDER:
            value = getattr(self, name)
            if value is None or not math.isfinite(value):
                out[name] = None
            else:
                out[name] = round(float(value), 6)
        return out
