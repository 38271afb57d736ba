"""Diagnostics: 1-WL color refinement, over-smoothing distance, derived depth, diameters."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .data import GraphRecord, bfs_eccentricities
from .supernet import Architecture

logger = logging.getLogger(__name__)

INDISTINGUISHABLE = "indistinguishable"


def as_neighbors(graph) -> list[list[int]]:
    """Adjacency lists from a GraphRecord, a square adjacency matrix or adjacency lists."""
    if isinstance(graph, GraphRecord):
        return graph.neighbors()
    if isinstance(graph, np.ndarray):
        if graph.ndim != 2 or graph.shape[0] != graph.shape[1]:
            raise ValueError(f"adjacency matrix must be square, got {graph.shape}")
        return [sorted(np.flatnonzero(row).tolist()) for row in graph]
    return [list(nb) for nb in graph]


# ---------------------------------------------------------------------------
# 1-WL


@dataclass
class WlColoring:
    # colors[t][g] is the integer color array of graph g after t refinements
    colors: list[list[np.ndarray]]
    stable_at: int | None = None

    @property
    def iterations(self) -> int:
        return len(self.colors) - 1

    def histogram(self, t: int, g: int = 0) -> tuple[int, ...]:
        return tuple(sorted(self.colors[t][g].tolist()))

    def histograms(self, t: int) -> list[tuple[int, ...]]:
        return [self.histogram(t, g) for g in range(len(self.colors[t]))]

    def n_colors(self, t: int) -> int:
        return len({c for arr in self.colors[t] for c in arr.tolist()})


def _canonical(keys: Iterable) -> tuple[list[int], dict]:
    # fresh ids in first-seen order
    table: dict = {}
    out = []
    for k in keys:
        if k not in table:
            table[k] = len(table)
        out.append(table[k])
    return out, table


def wl_refine(graph, iterations: int, initial_colors=None, stop_early: bool = True) -> WlColoring:
    """Refine a single graph; ``initial_colors`` is one label per node."""
    init = None if initial_colors is None else [list(initial_colors)]
    return wl_refine_joint([graph], iterations, init, stop_early)


def wl_refine_joint(graphs: Sequence, iterations: int, initial_colors=None, stop_early: bool = True) -> WlColoring:
    """Refine several graphs with one shared palette so their histograms compare.

    Stops after the first iteration that splits no color class, unless
    ``stop_early`` is false.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    nbs = [as_neighbors(g) for g in graphs]
    sizes = [len(nb) for nb in nbs]
    if initial_colors is None:
        flat = [0] * sum(sizes)
    else:
        if len(initial_colors) != len(nbs):
            raise ValueError("need one initial color sequence per graph")
        flat = [c for cols in initial_colors for c in cols]
        if len(flat) != sum(sizes):
            raise ValueError("initial colors do not match node counts")
    ids, _ = _canonical(flat)

    def split(flat_ids):
        out, off = [], 0
        for n in sizes:
            out.append(np.asarray(flat_ids[off:off + n], dtype=np.int64))
            off += n
        return out

    colors = [split(ids)]
    stable_at = None
    for t in range(iterations):
        prev = colors[-1]
        keys = [
            (int(prev[g][v]), tuple(sorted(int(prev[g][w]) for w in nb[v])))
            for g, nb in enumerate(nbs)
            for v in range(len(nb))
        ]
        new_ids, table = _canonical(keys)
        colors.append(split(new_ids))
        if len(table) == len(set(ids)) and stable_at is None:
            stable_at = t
            if stop_early:
                break
        ids = new_ids
    return WlColoring(colors, stable_at)


def wl_distinguish_iteration(g1, g2, max_iter: int = 10):
    """Smallest iteration whose color histograms differ, or ``"indistinguishable"``."""
    n1, n2 = as_neighbors(g1), as_neighbors(g2)
    if not n1 or not n2:
        raise ValueError("graphs must be nonempty")
    col = wl_refine_joint([n1, n2], max_iter)
    for t in range(col.iterations + 1):
        if col.histogram(t, 0) != col.histogram(t, 1):
            return t
    return INDISTINGUISHABLE


# ---------------------------------------------------------------------------
# over-smoothing


@dataclass
class SmoothnessReport:
    distance: float
    graphs: int
    pairs: int
    skipped_rows: int
    per_graph: list[float] = field(default_factory=list)


def smoothness_report(h, segments: Sequence[int] | None = None) -> SmoothnessReport:
    """Mean L1 distance between L1-normalized rows, per graph, averaged over graphs."""
    h = np.asarray(getattr(h, "data", h), dtype=float)
    if h.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    seg = np.zeros(len(h), dtype=np.int64) if segments is None else np.asarray(segments)
    norms = np.abs(h).sum(axis=1)
    valid = norms > 0
    skipped = int((~valid).sum())
    per_graph, pairs = [], 0
    for g in np.unique(seg):
        rows = h[(seg == g) & valid]
        if len(rows) < 2:
            continue
        normed = rows / np.abs(rows).sum(axis=1, keepdims=True)
        d = pdist(normed, metric="cityblock")
        per_graph.append(float(d.mean()))
        pairs += len(d)
    if not per_graph:
        raise ValueError("no valid pairs")
    return SmoothnessReport(float(np.mean(per_graph)), len(per_graph), pairs, skipped, per_graph)


def smoothness_distance(h, segments: Sequence[int] | None = None) -> float:
    return smoothness_report(h, segments).distance


def smoothness_table(rows: Sequence[dict]) -> str:
    """CSV with columns layer, distance, accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "distance", "accuracy"])
    for r in rows:
        w.writerow([r["layer"], f"{r['distance']:.6f}", f"{r['accuracy']:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# depth and diameter


def architecture_depth(arch: Architecture) -> int:
    """Most aggregation ops on any ON path from op 0 to the sink."""
    b = arch.ops_per_cell
    best = {0: 0}
    for s, d in sorted(arch.on_edges(), key=lambda e: (e[1], e[0])):
        if s in best:
            gain = 1 if d % (b + 1) else 0
            best[d] = max(best.get(d, 0), best[s] + gain)
    if arch.sink not in best:
        raise ValueError("the sink is not reachable from op 0; repair the architecture first")
    return best[arch.sink]


@dataclass
class DiameterInfo:
    diameter: int
    connected: bool


def diameter_info(graph) -> DiameterInfo:
    nbs = as_neighbors(graph)
    n = len(nbs)
    if n == 0:
        raise ValueError("empty graph")
    comp = [-1] * n
    sizes = []
    for s in range(n):
        if comp[s] >= 0:
            continue
        cid = len(sizes)
        comp[s] = cid
        stack, size = [s], 0
        while stack:
            u = stack.pop()
            size += 1
            for w in nbs[u]:
                if comp[w] < 0:
                    comp[w] = cid
                    stack.append(w)
        sizes.append(size)
    largest = int(np.argmax(sizes))
    members = [v for v in range(n) if comp[v] == largest]
    index = {v: k for k, v in enumerate(members)}
    sub = [[index[w] for w in nbs[v]] for v in members]
    return DiameterInfo(int(bfs_eccentricities(sub).max()), len(sizes) == 1)


def graph_diameter(graph) -> int:
    """Maximum BFS eccentricity; the largest component's when disconnected (logged)."""
    info = diameter_info(graph)
    if not info.connected:
        logger.warning("graph is disconnected; using the largest component's diameter")
    return info.diameter


@dataclass
class DiameterSummary:
    histogram: dict[int, int]
    average: float
    disconnected: int


def diameter_summary(records: Sequence[GraphRecord]) -> DiameterSummary:
    infos = [diameter_info(r) for r in records]
    hist = Counter(i.diameter for i in infos)
    return DiameterSummary(
        dict(sorted(hist.items())),
        float(np.mean([i.diameter for i in infos])),
        sum(not i.connected for i in infos),
    )
