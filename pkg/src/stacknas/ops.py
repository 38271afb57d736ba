"""Candidate operations: aggregation layers, MLPs, merge and readout operations."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MERGE_KINDS = ("CONCAT", "LSTM", "ATT", "SUM", "MEAN", "MAX")
READOUT_KINDS = ("GMEAN", "GMAX", "GSUM", "GSORT", "GATT", "SET2SET", "MEMA")
AGG_KINDS = ("gcn", "gin")

_TINY = 1e-300


class Module:
    """Owns named parameters; child modules and module lists are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{k}"] = item
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())


def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = init_uniform(rng, d_in, (d_in, d_out))
        self.bias = init_uniform(rng, d_in, (1, d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP2(Module):
    """Linear -> ReLU -> Linear; used for pre- and post-processing."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, bias: bool = True):
        self.lin1 = Linear(d_in, hidden, rng, bias)
        self.lin2 = Linear(hidden, hidden, rng, bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))


def mlp2(h_in: Tensor, layer: MLP2) -> Tensor:
    return layer(h_in)


class GCNLayer(Module):
    """ReLU(Â H W) with Â = D^-1/2 (A + I) D^-1/2."""

    kind = "gcn"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = init_uniform(rng, d_in, (d_in, d_out))

    def __call__(self, batch, h: Tensor) -> Tensor:
        return ad.relu(ad.spmm(batch.sparse_propagation(), ad.matmul(h, self.weight)))


class GINLayer(Module):
    """ReLU(MLP((1 + eps) h + A h)) with a learnable scalar eps."""

    kind = "gin"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.eps = Tensor(np.zeros((1, 1)), requires_grad=True)
        self.lin1 = Linear(d_in, d_out, rng)
        self.lin2 = Linear(d_out, d_out, rng)

    def __call__(self, batch, h: Tensor) -> Tensor:
        agg = ad.spmm(batch.sparse_adjacency(), h)
        z = h * (self.eps + 1.0) + agg
        return ad.relu(self.lin2(ad.relu(self.lin1(z))))


def make_aggregation(kind: str, d_in: int, d_out: int, rng: np.random.Generator) -> Module:
    if kind == "gcn":
        return GCNLayer(d_in, d_out, rng)
    if kind == "gin":
        return GINLayer(d_in, d_out, rng)
    raise ValueError(f"unknown aggregation {kind!r}; choose from {AGG_KINDS}")


def gcn_layer(batch, h_in: Tensor, layer: GCNLayer) -> Tensor:
    return layer(batch, h_in)


def gin_layer(batch, h_in: Tensor, layer: GINLayer) -> Tensor:
    return layer(batch, h_in)


# ---------------------------------------------------------------------------
# merge operations
#
# A merge sees a fixed number of slots (one per incoming connection, DAG
# order). Discrete use passes ``presence=None`` and marks absent slots with
# None. Relaxed use passes every slot with a 1x1 presence weight in [0, 1];
# each kind reduces exactly to its discrete form when the weights are 0/1.


class MergeOp(Module):
    def __init__(self, kind: str, n_slots: int, hidden: int, rng: np.random.Generator):
        if kind not in MERGE_KINDS:
            raise ValueError(f"unknown merge {kind!r}")
        self.kind = kind
        self._n_slots = n_slots
        self._hidden = hidden
        if kind == "CONCAT":
            self.proj = Linear(n_slots * hidden, hidden, rng)
        elif kind == "LSTM":
            self.w_ih = init_uniform(rng, hidden, (hidden, 4 * hidden))
            self.w_hh = init_uniform(rng, hidden, (hidden, 4 * hidden))
            self.bias = init_uniform(rng, hidden, (1, 4 * hidden))
        elif kind == "ATT":
            self.score = init_uniform(rng, hidden, (hidden, 1))

    def __call__(self, slots: Sequence[Tensor | None], presence: Tensor | None = None, n_rows: int | None = None) -> Tensor:
        if len(slots) != self._n_slots:
            raise ValueError(f"{self.kind} merge expects {self._n_slots} slots, got {len(slots)}")
        if presence is None:
            return self._discrete(slots, n_rows)
        return self._relaxed(slots, presence)

    def _zeros(self, slots, n_rows):
        for s in slots:
            if s is not None:
                return Tensor(np.zeros(s.shape))
        if n_rows is None:
            raise ValueError("merge over no inputs needs n_rows")
        return Tensor(np.zeros((n_rows, self._hidden)))

    def _discrete(self, slots, n_rows):
        present = [s for s in slots if s is not None]
        kind = self.kind
        if kind == "CONCAT":
            zero = self._zeros(slots, n_rows)
            return self.proj(ad.concat_cols([s if s is not None else zero for s in slots]))
        if not present:
            return self._zeros(slots, n_rows)
        if kind == "SUM":
            return _sum(present)
        if kind == "MEAN":
            return _sum(present) * (1.0 / len(present))
        if kind == "MAX":
            out = present[0]
            for s in present[1:]:
                out = ad.maximum(out, s)
            return out
        if kind == "ATT":
            if len(present) == 1:
                return present[0]
            scores = ad.concat_cols([ad.matmul(s, self.score) for s in present])
            att = ad.softmax_row(scores)
            return _sum([ad.slice_cols(att, i, i + 1) * s for i, s in enumerate(present)])
        if kind == "LSTM":
            h = c = Tensor(np.zeros(present[0].shape))
            for s in present:
                h, c = ad.lstm_cell(s, h, c, self.w_ih, self.w_hh, self.bias)
            return h
        raise AssertionError(kind)

    def _relaxed(self, slots, presence: Tensor):
        kind = self.kind
        if kind == "SUM":
            return ad.mix(slots, presence)
        if kind == "CONCAT":
            return self.proj(ad.scale_concat(slots, presence))
        if kind == "MEAN":
            count = ad.maximum(ad.sum_all(presence), Tensor(1.0))
            return ad.mix(slots, presence) / count
        if kind == "MAX":
            return ad.gated_max(slots, presence)
        if kind == "ATT":
            logm = ad.log(ad.maximum(presence, Tensor(_TINY)))
            att = ad.softmax_row(ad.stacked_scores(slots, self.score) + logm)
            # scale by min(sum of presence, 1) so an all-absent merge yields zeros
            total = ad.sub(1.0, ad.relu(ad.sub(1.0, ad.sum_all(presence))))
            return ad.column_mix(slots, att) * total
        if kind == "LSTM":
            h = c = Tensor(np.zeros(slots[0].shape))
            for i, s in enumerate(slots):
                m = ad.slice_cols(presence, i, i + 1)
                h_new, c_new = ad.lstm_cell(s, h, c, self.w_ih, self.w_hh, self.bias)
                h = ad.lerp(h_new, h, m)
                c = ad.lerp(c_new, c, m)
            return h
        raise AssertionError(kind)


def _sum(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out


def merge(inputs: Sequence[Tensor], op: MergeOp) -> Tensor:
    """Discrete merge of the given (all present) inputs."""
    if not inputs:
        raise ValueError("merge needs at least one input")
    return op(list(inputs))


# ---------------------------------------------------------------------------
# readout operations


class ReadoutOp(Module):
    """Graph-level pooling to a ``hidden``-wide vector per graph."""

    def __init__(self, kind: str, hidden: int, rng: np.random.Generator, sort_k: int = 10, set2set_steps: int = 3):
        if kind not in READOUT_KINDS:
            raise ValueError(f"unknown readout {kind!r}")
        self.kind = kind
        self._hidden = hidden
        self._k = max(1, int(sort_k))
        self._steps = set2set_steps
        if kind == "GSORT":
            self.proj = Linear(self._k * hidden, hidden, rng)
        elif kind == "GATT":
            self.gate = Linear(hidden, hidden, rng)
            self.feat = Linear(hidden, hidden, rng)
        elif kind == "SET2SET":
            self.w_ih = init_uniform(rng, 2 * hidden, (2 * hidden, 4 * hidden))
            self.w_hh = init_uniform(rng, hidden, (hidden, 4 * hidden))
            self.bias = init_uniform(rng, hidden, (1, 4 * hidden))
            self.proj = Linear(2 * hidden, hidden, rng)
        elif kind == "MEMA":
            self.proj = Linear(2 * hidden, hidden, rng)

    def __call__(self, h: Tensor, segments: np.ndarray, num_graphs: int) -> Tensor:
        kind = self.kind
        if kind == "GMEAN":
            return ad.segment_reduce(h, segments, num_graphs, "mean")
        if kind == "GMAX":
            return ad.segment_reduce(h, segments, num_graphs, "max")
        if kind == "GSUM":
            return ad.segment_reduce(h, segments, num_graphs, "sum")
        if kind == "GSORT":
            index = sort_pool_index(h.data[:, -1], segments, num_graphs, self._k)
            pooled = ad.gather_rows(h, index)
            return self.proj(ad.reshape(pooled, num_graphs, self._k * h.shape[1]))
        if kind == "GATT":
            gated = ad.sigmoid(self.gate(h)) * ad.tanh(self.feat(h))
            return ad.segment_reduce(gated, segments, num_graphs, "sum")
        if kind == "SET2SET":
            hid = h.shape[1]
            q_star = Tensor(np.zeros((num_graphs, 2 * hid)))
            hs = cs = Tensor(np.zeros((num_graphs, hid)))
            for _ in range(self._steps):
                hs, cs = ad.lstm_cell(q_star, hs, cs, self.w_ih, self.w_hh, self.bias)
                e = ad.sum_cols(h * ad.gather_rows(hs, segments))
                a = ad.segment_softmax(e, segments, num_graphs)
                r = ad.segment_reduce(h * a, segments, num_graphs, "sum")
                q_star = ad.concat_cols([hs, r])
            return self.proj(q_star)
        if kind == "MEMA":
            mean = ad.segment_reduce(h, segments, num_graphs, "mean")
            mx = ad.segment_reduce(h, segments, num_graphs, "max")
            return self.proj(ad.concat_cols([mean, mx]))
        raise AssertionError(kind)


def sort_pool_index(key: np.ndarray, segments: np.ndarray, num_graphs: int, k: int) -> np.ndarray:
    """Row indices of the top-``k`` nodes per graph by ``key`` (descending, ties by
    node index), flattened graph-major; missing slots are -1 (zero padding)."""
    index = np.full(num_graphs * k, -1, dtype=np.int64)
    n = len(segments)
    order = np.lexsort((np.arange(n), -key, segments))
    starts = np.searchsorted(segments[order], np.arange(num_graphs), side="left")
    ends = np.searchsorted(segments[order], np.arange(num_graphs), side="right")
    for g in range(num_graphs):
        take = order[starts[g]:min(ends[g], starts[g] + k)]
        index[g * k:g * k + len(take)] = take
    return index


def readout(h: Tensor, segments: np.ndarray, num_graphs: int, op: ReadoutOp) -> Tensor:
    return op(h, segments, num_graphs)
