"""Dense reverse-mode automatic differentiation on 2-D float64 matrices.

Every value is a :class:`Tensor` holding a ``(rows, cols)`` array. Operations
record their parents and a backward closure; :meth:`Tensor.backward` replays
them in reverse topological order and accumulates gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DETECT_ANOMALY = True


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MissingGradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True):
    global _DETECT_ANOMALY
    prev, _DETECT_ANOMALY = _DETECT_ANOMALY, enabled
    try:
        yield
    finally:
        _DETECT_ANOMALY = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A matrix with an optional gradient buffer and a tape node."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a 1x1 output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DETECT_ANOMALY and not np.isfinite(data).all():
        raise NonFiniteError("non-finite value produced by forward operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        # constants such as propagation matrices get no gradient
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), backward)


def spmm(s, x: Tensor) -> Tensor:
    """Product of a constant (possibly scipy-sparse) matrix with ``x``."""
    if s.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: inner dimensions differ, {s.shape} @ {x.shape}")
    st = s.T
    return _make(np.asarray(s @ x.data), (x,), lambda g: (np.asarray(st @ g),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    shape = a.shape
    return _make(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


def softmax_row(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax_row(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but labels shape {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    loss = -logp[np.arange(n), labels].mean()
    p = e / s

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g.item() / n),)

    return _make(np.array([[loss]]), (logits,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g.item()),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.array([[x.data.mean()]]), (x,), lambda g: (np.full(shape, g.item() / n),))


def sum_rows(x: Tensor) -> Tensor:
    """Column sums: ``(n, d) -> (1, d)``."""
    n = x.shape[0]
    return _make(x.data.sum(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g, n, axis=0),))


def sum_cols(x: Tensor) -> Tensor:
    """Row sums: ``(n, d) -> (n, 1)``."""
    d = x.shape[1]
    return _make(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, d, axis=1),))


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=1), xs, backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows by index; an index of -1 yields a zero row."""
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    out = np.zeros((index.shape[0], x.shape[1]))
    out[valid] = x.data[index[valid]]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index[valid], g[valid])
        return (full,)

    return _make(out, (x,), backward)


def _segment_counts(segments: np.ndarray, num_segments: int) -> np.ndarray:
    counts = np.bincount(segments, minlength=num_segments)
    if counts.shape[0] > num_segments or (segments.size and segments.min() < 0):
        raise ValueError("segment id out of range")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"segment {int(empty[0])} has no rows")
    return counts


def segment_reduce(x: Tensor, segments: np.ndarray, num_segments: int, mode: str = "sum") -> Tensor:
    """Reduce rows of ``x`` per segment id with ``sum``, ``mean`` or ``max``.

    The max gradient goes to the lowest row index among tied maxima.
    """
    segments = np.asarray(segments, dtype=np.int64)
    counts = _segment_counts(segments, num_segments)
    n, d = x.shape
    if mode in ("sum", "mean"):
        out = np.zeros((num_segments, d))
        np.add.at(out, segments, x.data)
        if mode == "mean":
            out /= counts[:, None]
            scale = (1.0 / counts)[segments][:, None]
            return _make(out, (x,), lambda g: (g[segments] * scale,))
        return _make(out, (x,), lambda g: (g[segments],))
    if mode == "max":
        out = np.full((num_segments, d), -np.inf)
        np.maximum.at(out, segments, x.data)
        # lowest row index attaining the max, per (segment, column)
        hit = x.data == out[segments]
        rows = np.where(hit, np.arange(n)[:, None], n)
        arg = np.full((num_segments, d), n)
        np.minimum.at(arg, segments, rows)
        cols = np.arange(d)[None, :].repeat(num_segments, axis=0)

        def backward(g):
            full = np.zeros((n, d))
            full[arg, cols] = g
            return (full,)

        return _make(out, (x,), backward)
    raise ValueError(f"unknown segment reduction {mode!r}")


def segment_softmax(scores: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of a column of scores within each segment."""
    segments = np.asarray(segments, dtype=np.int64)
    _segment_counts(segments, num_segments)
    s = scores.data[:, 0]
    mx = np.full(num_segments, -np.inf)
    np.maximum.at(mx, segments, s)
    e = np.exp(s - mx[segments])
    tot = np.zeros(num_segments)
    np.add.at(tot, segments, e)
    out = (e / tot[segments])[:, None]

    def backward(g):
        gs = g[:, 0] * out[:, 0]
        acc = np.zeros(num_segments)
        np.add.at(acc, segments, gs)
        return ((gs - out[:, 0] * acc[segments])[:, None],)

    return _make(out, (scores,), backward)


class _GateScale(dict):
    def __missing__(self, hid: int) -> np.ndarray:
        v = np.full((1, 4 * hid), 0.5)
        v[0, 2 * hid:3 * hid] = 1.0
        self[hid] = v
        return v


_LSTM_SCALE = _GateScale()


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor):
    """One LSTM step with gate order (input, forget, cell, output)."""
    hid = h.shape[1]
    z = x.data @ w_ih.data
    z += h.data @ w_hh.data
    z += bias.data
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh pass covers all four gates
    t = z * _LSTM_SCALE[hid]
    np.tanh(t, out=t)
    gg = t[:, 2 * hid:3 * hid].copy()
    t += 1.0
    t *= 0.5
    i, f, o = t[:, :hid], t[:, hid:2 * hid], t[:, 3 * hid:]
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    xd, hd, cd = x.data, h.data, c.data
    parents = (x, h, c, w_ih, w_hh, bias)

    def backward(g):
        dh, dc = g[:, :hid], g[:, hid:]
        dc_tot = dc + dh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, :hid] = dc_tot * gg * i * (1 - i)
        dz[:, hid:2 * hid] = dc_tot * cd * f * (1 - f)
        dz[:, 2 * hid:3 * hid] = dc_tot * i * (1 - gg * gg)
        dz[:, 3 * hid:] = dh * tc * o * (1 - o)
        return (
            dz @ w_ih.data.T if x.requires_grad else None,
            dz @ w_hh.data.T if h.requires_grad else None,
            dc_tot * f,
            xd.T @ dz,
            hd.T @ dz,
            dz.sum(axis=0, keepdims=True),
        )

    # one tape node for both outputs so the gate gradients are formed once
    hc = _make(np.concatenate([h_new, c_new], axis=1), parents, backward)
    return slice_cols(hc, 0, hid), slice_cols(hc, hid, 2 * hid)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient buffer")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad.fill(0.0)


@dataclass
class AdaGradState:
    lr: float = 0.01
    eps: float = 1e-10
    weight_decay: float = 0.0
    step: int = 0
    acc: dict[str, np.ndarray] = field(default_factory=dict)


def adagrad_step(params: dict[str, Tensor], state: AdaGradState) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient buffer")
    state.step += 1
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        acc = state.acc.setdefault(name, np.zeros_like(p.data))
        acc += g * g
        p.data -= state.lr * g / (np.sqrt(acc) + state.eps)
        p.grad.fill(0.0)


def optimizer_step(params: dict[str, Tensor], state) -> None:
    if isinstance(state, AdamState):
        adam_step(params, state)
    elif isinstance(state, AdaGradState):
        adagrad_step(params, state)
    else:
        raise TypeError(f"unsupported optimizer state {type(state).__name__}")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, int] | None
    analytic: float
    numeric: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    coords: Iterable[tuple[str, tuple[int, int]]] | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    ``f`` must be deterministic (freeze any sampled noise). The relative error
    of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    if coords is None:
        coords = ((name, idx) for name, p in params.items() for idx in np.ndindex(p.shape))

    worst = (0.0, None, None, 0.0, 0.0)
    checked = 0
    with no_grad():
        for name, idx in coords:
            p = params[name]
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = f().item()
            p.data[idx] = orig - h
            fm = f().item()
            p.data[idx] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[name][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst[0] or worst[1] is None:
                worst = (err, name, tuple(int(i) for i in idx), float(ana), float(num))
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], worst[4], checked, tol)


# ---------------------------------------------------------------------------
# fused ops used by the relaxed supernet (fewer tape nodes per forward)


def mix(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """Weighted sum ``sum_k w[0, k] * xs[k]`` of same-shape tensors."""
    if w.shape != (1, len(xs)):
        raise DimensionError(f"mix: weights {w.shape} for {len(xs)} inputs")
    wd = w.data[0]
    datas = [x.data for x in xs]
    out = wd[0] * datas[0]
    for k in range(1, len(datas)):
        out = out + wd[k] * datas[k]

    def backward(g):
        gw = np.array([[float((g * d).sum()) for d in datas]])
        return tuple(wd[k] * g for k in range(len(datas))) + (gw,)

    return _make(out, (*xs, w), backward)


def scale_concat(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """``[w0 * x0, w1 * x1, ...]`` concatenated along columns."""
    wd = w.data[0]
    datas = [x.data for x in xs]
    bounds = np.cumsum([0] + [d.shape[1] for d in datas])
    out = np.concatenate([wd[k] * d for k, d in enumerate(datas)], axis=1)

    def backward(g):
        parts = [g[:, bounds[k]:bounds[k + 1]] for k in range(len(datas))]
        gw = np.array([[float((p * d).sum()) for p, d in zip(parts, datas)]])
        return tuple(wd[k] * parts[k] for k in range(len(datas))) + (gw,)

    return _make(out, (*xs, w), backward)


def lerp(a: Tensor, b: Tensor, w: Tensor) -> Tensor:
    """``w * a + (1 - w) * b`` with a 1x1 weight."""
    wv = w.data[0, 0]
    ad_, bd = a.data, b.data

    def backward(g):
        return wv * g, (1.0 - wv) * g, np.array([[float((g * (ad_ - bd)).sum())]])

    return _make(wv * ad_ + (1.0 - wv) * bd, (a, b, w), backward)


def gated_max(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """Elementwise max over inputs weighted by soft presence ``w`` (1 x k).

    With 0/1 weights this is the max over present inputs (zeros if none);
    ties prefer the earlier input.
    """
    wd = w.data[0]
    datas = [x.data for x in xs]
    shape = datas[0].shape
    r = np.zeros(shape)
    p = 0.0
    steps = []
    for m, s in zip(wd, datas):
        take_r = r >= s
        mx = np.where(take_r, r, s)
        cand = p * mx + (1.0 - p) * s
        steps.append((r, p, take_r, mx, cand))
        r = m * cand + (1.0 - m) * r
        p = p + m - p * m

    def backward(g):
        gr, gp = g, 0.0
        gx = [None] * len(datas)
        gw = np.zeros((1, len(datas)))
        for i in range(len(datas) - 1, -1, -1):
            r_prev, p_prev, take_r, mx, cand = steps[i]
            m, s = wd[i], datas[i]
            gw[0, i] = float((gr * (cand - r_prev)).sum()) + gp * (1.0 - p_prev)
            dcand = gr * m
            dmx = dcand * p_prev
            gx[i] = dcand * (1.0 - p_prev) + dmx * ~take_r
            gp_prev = float((dcand * (mx - s)).sum()) + gp * (1.0 - m)
            gr = gr * (1.0 - m) + dmx * take_r
            gp = gp_prev
        return tuple(gx) + (gw,)

    return _make(r, (*xs, w), backward)


def column_mix(xs: Sequence[Tensor], a: Tensor) -> Tensor:
    """Per-row mixture ``sum_k a[:, k] * xs[k]`` with ``a`` of shape (n, k)."""
    ad_ = a.data
    datas = [x.data for x in xs]
    out = ad_[:, 0:1] * datas[0]
    for k in range(1, len(datas)):
        out = out + ad_[:, k:k + 1] * datas[k]

    def backward(g):
        ga = np.concatenate([(g * d).sum(axis=1, keepdims=True) for d in datas], axis=1)
        return tuple(ad_[:, k:k + 1] * g for k in range(len(datas))) + (ga,)

    return _make(out, (*xs, a), backward)


def stacked_scores(xs: Sequence[Tensor], q: Tensor) -> Tensor:
    """Column k holds ``xs[k] @ q`` for a (d, 1) scoring vector."""
    qd = q.data
    datas = [x.data for x in xs]
    out = np.concatenate([d @ qd for d in datas], axis=1)

    def backward(g):
        gq = sum(d.T @ g[:, k:k + 1] for k, d in enumerate(datas))
        return tuple(g[:, k:k + 1] @ qd.T for k in range(len(datas))) + (gq,)

    return _make(out, (*xs, q), backward)


def gumbel_presence(logits: Sequence[Tensor], noise: Sequence[np.ndarray], lam: float) -> Tensor:
    """First-choice weight of a 2-way Gumbel-Softmax for each (1, 2) logit row.

    Equals ``softmax((theta + G) / lam)[0]`` = sigmoid of the scaled margin.
    """
    z = np.array([((t.data[0, 0] + n[0, 0]) - (t.data[0, 1] + n[0, 1])) / lam for t, n in zip(logits, noise)])
    on = 0.5 * (1.0 + np.tanh(0.5 * z))
    out = on.reshape(1, -1)

    def backward(g):
        d = g[0] * on * (1.0 - on) / lam
        return tuple(np.array([[dk, -dk]]) for dk in d)

    return _make(out, tuple(logits), backward)
