"""Graph datasets: TU-format ingestion and export, featurization, folds, batching."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GraphRecord:
    node_count: int
    edges: np.ndarray  # (m, 2) int, undirected, i < j, no self-loops
    features: np.ndarray  # (node_count, d)
    label: int

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.node_count):
            raise DatasetFormatError("edge references a node outside the graph")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise DatasetFormatError("self-loops are not stored in records")
        if self.features.shape[0] != self.node_count:
            raise DatasetFormatError(
                f"feature rows {self.features.shape[0]} != node_count {self.node_count}"
            )
        object.__setattr__(self, "edges", edges)
        edges.setflags(write=False)
        self.features.setflags(write=False)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        if self.edges.size:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges.reshape(-1), 1)
        return deg


def normalize_edges(pairs: np.ndarray) -> np.ndarray:
    """Symmetrize, drop self-loops, deduplicate; rows sorted as (min, max)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if not pairs.size:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


@dataclass
class DatasetStats:
    graphs: int
    classes: int
    feature_dim: int
    avg_nodes: float
    avg_edges: float


def dataset_stats(records: Sequence[GraphRecord]) -> DatasetStats:
    return DatasetStats(
        graphs=len(records),
        classes=len({r.label for r in records}),
        feature_dim=records[0].features.shape[1] if records else 0,
        avg_nodes=float(np.mean([r.node_count for r in records])) if records else 0.0,
        avg_edges=float(np.mean([len(r.edges) for r in records])) if records else 0.0,
    )


def _read_ints(path: Path, cols: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vals = [int(float(tok)) for tok in line.replace(",", " ").split()]
            except ValueError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: not an integer row") from exc
            if len(vals) != cols:
                raise DatasetFormatError(f"{path.name}:{lineno}: expected {cols} values")
            rows.append(vals)
    return np.asarray(rows, dtype=np.int64).reshape(-1, cols)


def parse_tu_dataset(dir_path, name: str) -> tuple[list[GraphRecord], DatasetStats]:
    """Read ``<name>_A.txt`` and friends from ``dir_path``.

    Node labels, when present, become one-hot features (value order sorted);
    without them features are empty (width 0) until :func:`featurize_degrees`
    or :func:`constant_features` is applied. Graph labels are re-indexed to
    ``0..C-1`` in sorted order.
    """
    root = Path(dir_path)
    paths = {k: root / f"{name}_{k}.txt" for k in ("A", "graph_indicator", "graph_labels", "node_labels")}
    for key in ("A", "graph_indicator", "graph_labels"):
        if not paths[key].is_file():
            raise FileNotFoundError(f"missing TU file {paths[key]}")

    indicator = _read_ints(paths["graph_indicator"], 1)[:, 0]
    graph_labels = _read_ints(paths["graph_labels"], 1)[:, 0]
    n_graphs = len(graph_labels)
    if indicator.size == 0:
        raise DatasetFormatError("graph indicator is empty")
    if indicator.min() < 1 or indicator.max() > n_graphs:
        raise DatasetFormatError("graph indicator references a graph without a label")
    if np.any(np.diff(indicator) < 0):
        raise DatasetFormatError("graph indicator is not sorted by graph id")

    n_nodes = len(indicator)
    edges_1b = []
    with open(paths["A"]) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = [p for p in line.replace(",", " ").split()]
            if len(parts) != 2:
                raise DatasetFormatError(f"{paths['A'].name}:{lineno}: expected 'u, v'")
            u, v = int(parts[0]), int(parts[1])
            for node in (u, v):
                if node < 1 or node > n_nodes:
                    raise DatasetFormatError(
                        f"{paths['A'].name}:{lineno}: node {node} not in graph indicator"
                    )
            if indicator[u - 1] != indicator[v - 1]:
                raise DatasetFormatError(f"{paths['A'].name}:{lineno}: edge crosses graphs")
            edges_1b.append((u, v))
    all_edges = np.asarray(edges_1b, dtype=np.int64).reshape(-1, 2) - 1

    if paths["node_labels"].is_file():
        node_labels = _read_ints(paths["node_labels"], 1)[:, 0]
        if len(node_labels) != n_nodes:
            raise DatasetFormatError("node label count differs from graph indicator length")
        values = np.unique(node_labels)
        onehot = np.zeros((n_nodes, len(values)))
        onehot[np.arange(n_nodes), np.searchsorted(values, node_labels)] = 1.0
    else:
        onehot = np.zeros((n_nodes, 0))

    classes = np.unique(graph_labels)
    label_idx = np.searchsorted(classes, graph_labels)

    graph_of_node = indicator - 1
    starts = np.searchsorted(graph_of_node, np.arange(n_graphs), side="left")
    ends = np.searchsorted(graph_of_node, np.arange(n_graphs), side="right")
    edge_graph = graph_of_node[all_edges[:, 0]] if all_edges.size else np.zeros(0, dtype=np.int64)
    order = np.argsort(edge_graph, kind="stable")
    all_edges, edge_graph = all_edges[order], edge_graph[order]
    e_starts = np.searchsorted(edge_graph, np.arange(n_graphs), side="left")
    e_ends = np.searchsorted(edge_graph, np.arange(n_graphs), side="right")

    records = []
    for g in range(n_graphs):
        s, e = starts[g], ends[g]
        if e == s:
            raise DatasetFormatError(f"graph {g + 1} has no nodes")
        local = all_edges[e_starts[g]:e_ends[g]] - s
        records.append(
            GraphRecord(
                node_count=int(e - s),
                edges=normalize_edges(local),
                features=onehot[s:e].copy(),
                label=int(label_idx[g]),
            )
        )
    stats = dataset_stats(records)
    logger.info("parsed %s: %d graphs, %d classes", name, stats.graphs, stats.classes)
    return records, stats


def write_tu_dataset(records: Sequence[GraphRecord], dir_path, name: str, node_labels: bool = True) -> Path:
    """Export records in TU format; node labels are the argmax of one-hot features."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(root / f"{name}_A.txt", "w") as fa, open(root / f"{name}_graph_indicator.txt", "w") as fi, open(
        root / f"{name}_graph_labels.txt", "w"
    ) as fl:
        for gid, rec in enumerate(records, 1):
            for u, v in rec.edges:
                fa.write(f"{u + offset + 1}, {v + offset + 1}\n")
                fa.write(f"{v + offset + 1}, {u + offset + 1}\n")
            fi.write(f"{gid}\n" * rec.node_count)
            fl.write(f"{rec.label}\n")
            offset += rec.node_count
    if node_labels and records and records[0].features.shape[1] > 0:
        with open(root / f"{name}_node_labels.txt", "w") as fn:
            for rec in records:
                for lab in rec.features.argmax(axis=1):
                    fn.write(f"{int(lab)}\n")
    return root


def featurize_degrees(records: Sequence[GraphRecord], max_degree_cap: int = 64) -> list[GraphRecord]:
    """Replace features with one-hot node degree, clamped at ``max_degree_cap``."""
    out = []
    for rec in records:
        deg = np.minimum(rec.degrees(), max_degree_cap)
        feats = np.zeros((rec.node_count, max_degree_cap + 1))
        feats[np.arange(rec.node_count), deg] = 1.0
        out.append(GraphRecord(rec.node_count, rec.edges, feats, rec.label))
    return out


def constant_features(records: Sequence[GraphRecord]) -> list[GraphRecord]:
    return [GraphRecord(r.node_count, r.edges, np.ones((r.node_count, 1)), r.label) for r in records]


# ---------------------------------------------------------------------------
# folds


@dataclass
class Fold:
    train: list[int]
    val: list[int]
    test: list[int]


@dataclass
class FoldPlan:
    folds: list[Fold]
    seed: int
    k: int = field(default=10)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [{"train": f.train, "val": f.val, "test": f.test} for f in self.folds],
        }


def stratified_kfold(records: Sequence[GraphRecord], k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan: fold i is test, fold i+1 validation, the rest train.

    Each class is shuffled with ``seed`` and dealt round-robin onto the folds;
    the dealing position carries over between classes so fold sizes stay even.
    """
    labels = np.asarray([r.label for r in records])
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    cursor = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ValueError(f"class {int(cls)} has {len(members)} graphs, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        assignment[members] = (cursor + np.arange(len(members))) % k
        cursor = (cursor + len(members)) % k
    chunks = [sorted(np.flatnonzero(assignment == f).tolist()) for f in range(k)]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        train = sorted(idx for f in range(k) if f not in (i, v) for idx in chunks[f])
        folds.append(Fold(train=train, val=chunks[v], test=chunks[i]))
    return FoldPlan(folds=folds, seed=seed, k=k)


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    adjacency: np.ndarray  # (N, N) block diagonal, no self-loops
    features: np.ndarray  # (N, d)
    segments: np.ndarray  # (N,) graph index per node, sorted
    labels: np.ndarray  # (g,)
    node_counts: np.ndarray  # (g,)
    _norm_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_graphs(self) -> int:
        return len(self.labels)

    @property
    def num_nodes(self) -> int:
        return len(self.segments)

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.node_counts)])

    def gcn_propagation(self) -> np.ndarray:
        """Symmetric normalization D^-1/2 (A + I) D^-1/2, cached per batch."""
        if "gcn" not in self._norm_cache:
            a = self.adjacency + np.eye(self.num_nodes)
            dinv = 1.0 / np.sqrt(a.sum(axis=1))
            self._norm_cache["gcn"] = a * dinv[:, None] * dinv[None, :]
        return self._norm_cache["gcn"]

    def sparse_propagation(self):
        if "gcn_sparse" not in self._norm_cache:
            self._norm_cache["gcn_sparse"] = sparse.csr_matrix(self.gcn_propagation())
        return self._norm_cache["gcn_sparse"]

    def sparse_adjacency(self):
        if "adj_sparse" not in self._norm_cache:
            self._norm_cache["adj_sparse"] = sparse.csr_matrix(self.adjacency)
        return self._norm_cache["adj_sparse"]

    def graph_slice(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        off = self.offsets()
        s, e = off[g], off[g + 1]
        return self.adjacency[s:e, s:e], self.features[s:e]


def build_batch(records: Sequence[GraphRecord], indices: Sequence[int] | None = None) -> GraphBatch:
    if indices is None:
        indices = range(len(records))
    chosen = [records[i] for i in indices]
    if not chosen:
        raise ValueError("cannot build a batch from an empty index list")
    counts = np.asarray([r.node_count for r in chosen], dtype=np.int64)
    n = int(counts.sum())
    adj = np.zeros((n, n))
    off = 0
    for rec in chosen:
        if rec.edges.size:
            u, v = rec.edges[:, 0] + off, rec.edges[:, 1] + off
            adj[u, v] = 1.0
            adj[v, u] = 1.0
        off += rec.node_count
    return GraphBatch(
        adjacency=adj,
        features=np.concatenate([r.features for r in chosen], axis=0),
        segments=np.repeat(np.arange(len(chosen)), counts),
        labels=np.asarray([r.label for r in chosen], dtype=np.int64),
        node_counts=counts,
    )


def iter_minibatches(records, indices, batch_size: int, rng: np.random.Generator | None = None):
    """Yield batches over ``indices``; shuffled when ``rng`` is given."""
    idx = np.asarray(list(indices))
    if rng is not None:
        idx = idx[rng.permutation(len(idx))]
    for s in range(0, len(idx), batch_size):
        yield build_batch(records, idx[s:s + batch_size].tolist())


# ---------------------------------------------------------------------------
# synthetic diameter datasets


def bfs_eccentricities(neighbors: list[list[int]]) -> np.ndarray:
    n = len(neighbors)
    ecc = np.zeros(n, dtype=np.int64)
    for s in range(n):
        dist = [-1] * n
        dist[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for w in neighbors[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    q.append(w)
        ecc[s] = max(dist)
    return ecc


def random_tree_with_diameter(diameter: int, n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Edges of a random tree on ``n_nodes`` nodes whose diameter is exactly ``diameter``."""
    if diameter < 1:
        raise ValueError("diameter must be >= 1")
    if n_nodes < diameter + 1:
        raise ValueError(f"diameter {diameter} needs at least {diameter + 1} nodes, got {n_nodes}")
    if diameter == 1 and n_nodes != 2:
        raise ValueError("the only tree with diameter 1 has two nodes")
    edges = [(i, i + 1) for i in range(diameter)]
    neighbors: list[list[int]] = [[] for _ in range(diameter + 1)]
    for u, v in edges:
        neighbors[u].append(v)
        neighbors[v].append(u)
    # distance of every node to both ends of the spine; a tree's eccentricity
    # is the max distance to the endpoints of any diameter path
    d0 = list(range(diameter + 1))
    d1 = list(range(diameter, -1, -1))
    while len(neighbors) < n_nodes:
        eligible = [v for v in range(len(neighbors)) if max(d0[v], d1[v]) < diameter]
        parent = int(eligible[rng.integers(len(eligible))])
        new = len(neighbors)
        neighbors.append([parent])
        neighbors[parent].append(new)
        d0.append(d0[parent] + 1)
        d1.append(d1[parent] + 1)
        edges.append((parent, new))
    return normalize_edges(np.asarray(edges))


def synthesize_diameter_dataset(
    spec: Sequence[tuple[int, int]],
    seed: int = 0,
    n_nodes: tuple[int, int] = (15, 30),
) -> list[GraphRecord]:
    """Random trees labelled by the index of their diameter class in ``spec``.

    Node counts are drawn uniformly from ``n_nodes`` (inclusive) and raised to
    ``diameter + 1`` when needed; diameter 1 forces two nodes.
    """
    lo, hi = n_nodes
    rng = np.random.default_rng(seed)
    records = []
    for label, (diameter, count) in enumerate(spec):
        if diameter < 1:
            raise ValueError(f"diameter must be >= 1, got {diameter}")
        if diameter > 1 and diameter + 1 > hi:
            raise ValueError(f"diameter {diameter} exceeds the node budget {hi}")
        for _ in range(count):
            n = 2 if diameter == 1 else max(int(rng.integers(lo, hi + 1)), diameter + 1)
            edges = random_tree_with_diameter(diameter, n, rng)
            rec = GraphRecord(n, edges, np.ones((n, 1)), label)
            measured = int(bfs_eccentricities(rec.neighbors()).max())
            if measured != diameter:
                raise AssertionError(f"generated tree has diameter {measured}, wanted {diameter}")
            records.append(rec)
    return records


def parse_synthetic_spec(text: str) -> list[tuple[int, int]]:
    """Parse ``"5:10,14:50"`` into ``[(5, 10), (14, 50)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        d, _, c = part.partition(":")
        if not c:
            raise ValueError(f"bad synthetic spec entry {part!r}, expected diameter:count")
        out.append((int(d), int(c)))
    if not out:
        raise ValueError("empty synthetic spec")
    return out


def sort_pool_k(records: Sequence[GraphRecord], indices: Sequence[int] | None = None, q: float = 30.0) -> int:
    """Node count at the ``q``-th percentile of the given graphs, at least 1."""
    if indices is None:
        indices = range(len(records))
    counts = [records[i].node_count for i in indices]
    return max(1, int(np.floor(np.percentile(counts, q))))
