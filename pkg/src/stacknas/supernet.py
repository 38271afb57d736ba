"""Relaxed search space over stacked aggregation layers.

Node numbering is global. Op 0 is the pre-processing MLP. Cell ``c`` (0-based)
with ``b = B // C`` aggregation ops has its input at ``c * (b + 1)`` (op 0 or
the previous cell's post-processing op), aggregation ops at
``c * (b + 1) + 1 .. c * (b + 1) + b`` and its post-processing op at
``(c + 1) * (b + 1)``. The last post-processing op feeds the readout.
"""

from __future__ import annotations

import json
from importlib import resources
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ops import (
    AGG_KINDS,
    MERGE_KINDS,
    MLP2,
    READOUT_KINDS,
    Linear,
    MergeOp,
    Module,
    ReadoutOp,
    make_aggregation,
)

VARIANTS = ("full", "repeat", "diverse")
CONNECTION_CHOICES = ("ON", "OFF")


class ConfigError(ValueError):
    pass


@dataclass
class SuperNetConfig:
    in_dim: int
    n_classes: int
    B: int = 4
    C: int = 1
    variant: str = "full"
    hidden: int = 64
    agg: str = "gcn"
    lam_start: float = 1.0
    lam_end: float = 0.1
    anneal: str = "geometric"
    seed: int = 0
    sort_k: int = 10
    dropout: float = 0.0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.B < 1:
            raise ConfigError("B must be >= 1")
        if self.variant == "full" and self.C != 1:
            raise ConfigError("the full variant has exactly one cell (C=1)")
        if self.variant in ("repeat", "diverse"):
            if self.C < 2:
                raise ConfigError(f"{self.variant} needs C >= 2")
            if self.B % self.C:
                raise ConfigError(f"B={self.B} is not divisible by C={self.C}")
        if self.agg not in AGG_KINDS:
            raise ConfigError(f"aggregation must be one of {AGG_KINDS}")
        if self.hidden < 1 or self.in_dim < 1 or self.n_classes < 2:
            raise ConfigError("hidden and in_dim must be >= 1 and n_classes >= 2")
        if not (self.lam_start > 0 and self.lam_end > 0):
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def ops_per_cell(self) -> int:
        return self.B // self.C


def cell_connections(b: int) -> list[tuple[int, int]]:
    """Local (src, dst) pairs of one cell: every i < j for j in 1..b+1."""
    return [(i, j) for j in range(1, b + 2) for i in range(j)]


def global_id(cell: int, local: int, b: int) -> int:
    return cell * (b + 1) + local


def temperature(epoch: int, epochs: int, lam_start: float = 1.0, lam_end: float = 0.1, anneal: str = "geometric") -> float:
    if epochs <= 1:
        return lam_start
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    if anneal == "geometric":
        return lam_start * (lam_end / lam_start) ** frac
    if anneal == "linear":
        return lam_start + (lam_end - lam_start) * frac
    if anneal == "constant":
        return lam_start
    raise ConfigError(f"unknown anneal mode {anneal!r}")


# ---------------------------------------------------------------------------
# Gumbel-Softmax


class GumbelNoise:
    """Source of Gumbel perturbations keyed by architecture parameter name.

    ``mode="sample"`` draws fresh noise per forward pass (call
    :meth:`new_pass`); a parameter used several times in one pass sees the
    same draw. ``"frozen"`` draws once and keeps it; ``"off"`` returns zeros.
    """

    def __init__(self, rng: np.random.Generator | None = None, mode: str = "sample"):
        if mode not in ("sample", "frozen", "off"):
            raise ValueError(f"unknown noise mode {mode!r}")
        if mode != "off" and rng is None:
            raise ValueError("sampled noise needs a generator")
        self.rng = rng
        self.mode = mode
        self._cache: dict[str, np.ndarray] = {}

    def new_pass(self) -> None:
        if self.mode == "sample":
            self._cache.clear()

    def draw(self, key: str, k: int) -> np.ndarray:
        if self.mode == "off":
            return np.zeros((1, k))
        g = self._cache.get(key)
        if g is None:
            u = self.rng.uniform(np.finfo(float).tiny, 1.0, size=(1, k))
            g = self._cache[key] = -np.log(-np.log(u))
        return g


def gumbel_weights(alpha, lam: float, noise: np.ndarray | None = None) -> np.ndarray:
    """Mixing weights softmax((log alpha + G) / lam) for positive ``alpha``."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(1, -1)
    if np.any(alpha <= 0):
        raise ValueError("architecture weights must be strictly positive")
    if lam <= 0:
        raise ValueError("temperature must be positive")
    g = np.zeros_like(alpha) if noise is None else np.asarray(noise).reshape(1, -1)
    with ad.no_grad():
        return gumbel_softmax(Tensor(np.log(alpha)), lam, g).data[0]


def gumbel_softmax(log_alpha: Tensor, lam: float, noise: np.ndarray) -> Tensor:
    """Differentiable in ``log_alpha``; the noise is a constant."""
    return ad.softmax_row((log_alpha + Tensor(noise)) * (1.0 / lam))


# ---------------------------------------------------------------------------
# architectures


@dataclass
class Architecture:
    variant: str
    B: int
    C: int
    connections: list[list]  # [src, dst, on] with global ids
    merges: list[list]  # [op, kind]
    readout: str
    provenance: dict = field(default_factory=dict)

    @property
    def ops_per_cell(self) -> int:
        return self.B // self.C

    @property
    def sink(self) -> int:
        return self.C * (self.ops_per_cell + 1)

    def is_on(self, src: int, dst: int) -> bool:
        return any(s == src and d == dst and on for s, d, on in self.connections)

    def on_edges(self) -> list[tuple[int, int]]:
        return [(s, d) for s, d, on in self.connections if on]

    def merge_of(self, op: int) -> str:
        for o, kind in self.merges:
            if o == op:
                return kind
        raise KeyError(op)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "B": self.B,
            "C": self.C,
            "connections": [[int(s), int(d), bool(on)] for s, d, on in sorted(self.connections, key=lambda e: (e[1], e[0]))],
            "merges": [[int(o), k] for o, k in sorted(self.merges)],
            "readout": self.readout,
            "provenance": self.provenance,
        }

    def dumps(self) -> str:
        return _dump_doc(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        try:
            arch = cls(
                variant=doc["variant"],
                B=int(doc["B"]),
                C=int(doc["C"]),
                connections=[[int(s), int(d), bool(on)] for s, d, on in doc["connections"]],
                merges=[[int(o), str(k)] for o, k in doc["merges"]],
                readout=str(doc["readout"]),
                provenance=dict(doc.get("provenance", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchitectureFormatError(f"malformed architecture document: {exc!r}") from exc
        arch.validate()
        return arch

    @classmethod
    def loads(cls, text: str) -> "Architecture":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ArchitectureFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        b = self.ops_per_cell
        if self.C < 1 or self.B < 1 or self.B % self.C:
            raise ArchitectureFormatError("B must be a positive multiple of C")
        allowed = {
            (global_id(c, i, b) if i else c * (b + 1), global_id(c, j, b))
            for c in range(self.C)
            for i, j in cell_connections(b)
        }
        for s, d, _ in self.connections:
            if (s, d) not in allowed:
                raise ArchitectureFormatError(f"connection {s}->{d} is not in the search space")
        for _, kind in self.merges:
            if kind not in MERGE_KINDS:
                raise ArchitectureFormatError(f"unknown merge kind {kind!r}")
        if self.readout not in READOUT_KINDS:
            raise ArchitectureFormatError(f"unknown readout kind {self.readout!r}")


class ArchitectureFormatError(ValueError):
    pass


def _dump_doc(doc: dict) -> str:
    # one connection / merge per line keeps documents diffable
    lines = ["{"]
    keys = list(doc)
    for n, key in enumerate(keys):
        val = doc[key]
        comma = "," if n < len(keys) - 1 else ""
        if key in ("connections", "merges"):
            inner = ",\n".join("    " + json.dumps(item) for item in val)
            body = "[\n" + inner + "\n  ]" if val else "[]"
            lines.append(f'  "{key}": {body}{comma}')
        else:
            lines.append(f'  "{key}": {json.dumps(val, sort_keys=True)}{comma}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def all_node_ids(B: int, C: int) -> list[int]:
    return list(range(C * (B // C + 1) + 1))


def live_ops(arch: Architecture) -> set[int]:
    """Ops with an ON path to the sink (the sink included)."""
    live = {arch.sink}
    # edges point forward, so a descending sweep over destinations suffices
    edges = sorted(arch.on_edges(), key=lambda e: (-e[1], -e[0]))
    for s, d in edges:
        if d in live:
            live.add(s)
    return live


def repair_architecture(arch: Architecture) -> Architecture:
    """Put every op on an ON path from op 0 to the sink.

    Ops are visited in ascending order; one with no incoming ON connection
    gets the connection from its consecutive predecessor. A second pass gives
    every non-sink op without an outgoing ON connection the link to its
    consecutive successor. The all-OFF document becomes the plain chain, and
    repairing twice changes nothing.
    """
    b = arch.ops_per_cell
    conns = {(s, d): bool(on) for s, d, on in arch.connections}
    for c in range(arch.C):
        for i, j in cell_connections(b):
            conns.setdefault((global_id(c, i, b), global_id(c, j, b)), False)
    has_input = {d for (_, d), on in conns.items() if on}
    for op in range(1, arch.sink + 1):
        if op not in has_input:
            conns[(op - 1, op)] = True
    has_output = {s for (s, _), on in conns.items() if on}
    for op in range(arch.sink):
        if op not in has_output:
            conns[(op, op + 1)] = True
    return Architecture(
        variant=arch.variant,
        B=arch.B,
        C=arch.C,
        connections=[[s, d, on] for (s, d), on in sorted(conns.items(), key=lambda e: (e[0][1], e[0][0]))],
        merges=[list(m) for m in arch.merges],
        readout=arch.readout,
        provenance=dict(arch.provenance),
    )


# ---------------------------------------------------------------------------
# the supernet


class Cell(Module):
    """Operation weights and architecture logits of one cell."""

    def __init__(self, b: int, hidden: int, agg: str, rng: np.random.Generator):
        self.aggs = [make_aggregation(agg, hidden, hidden, rng) for _ in range(b)]
        self.post = MLP2(hidden, hidden, rng)
        # merge candidates of local op j (1..b+1) over its j incoming slots
        self.merges = {str(j): MergeSet(j, hidden, rng) for j in range(1, b + 2)}
        self._b = b

    def arch_logits(self) -> dict[str, Tensor]:
        return self._alpha

    def init_alpha(self) -> None:
        # log-alpha = 0, i.e. alpha = 1 for every candidate
        alpha = {}
        for i, j in cell_connections(self._b):
            alpha[f"conn.{i}_{j}"] = Tensor(np.zeros((1, len(CONNECTION_CHOICES))), requires_grad=True)
        for j in range(1, self._b + 2):
            alpha[f"merge.{j}"] = Tensor(np.zeros((1, len(MERGE_KINDS))), requires_grad=True)
        self._alpha = alpha


class MergeSet(Module):
    def __init__(self, n_slots: int, hidden: int, rng: np.random.Generator):
        self.ops = {kind: MergeOp(kind, n_slots, hidden, rng) for kind in MERGE_KINDS}


class SuperNet(Module):
    def __init__(self, config: SuperNetConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        h = config.hidden
        b = config.ops_per_cell
        self.pre = MLP2(config.in_dim, h, rng)
        n_templates = 1 if config.variant in ("full", "repeat") else config.C
        self._templates = [Cell(b, h, config.agg, rng) for _ in range(n_templates)]
        for cell in self._templates:
            cell.init_alpha()
        self.readouts = {kind: ReadoutOp(kind, h, rng, sort_k=config.sort_k) for kind in READOUT_KINDS}
        self.classifier = Linear(h, config.n_classes, rng)
        self._alpha_readout = Tensor(np.zeros((1, len(READOUT_KINDS))), requires_grad=True)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))
        self.training = False

    # -- structure ---------------------------------------------------------

    @property
    def cells(self) -> list[Cell]:
        """The cell used at each of the C positions (Repeat reuses one)."""
        if self.config.variant == "diverse":
            return list(self._templates)
        return [self._templates[0]] * self.config.C

    def template_name(self, position: int) -> str:
        return "cells.0" if self.config.variant != "diverse" else f"cells.{position}"

    def weight_parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.pre.named_parameters("pre."))
        for t, cell in enumerate(self._templates):
            params.update(cell.named_parameters(f"cells.{t}."))
        for kind, op in self.readouts.items():
            params.update(op.named_parameters(f"readout.{kind}."))
        params.update(self.classifier.named_parameters("classifier."))
        return params

    def arch_parameters(self) -> dict[str, Tensor]:
        params = {}
        for t, cell in enumerate(self._templates):
            for key, val in cell.arch_logits().items():
                params[f"alpha.cells.{t}.{key}"] = val
        params["alpha.readout"] = self._alpha_readout
        return params

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.weight_parameters().items()}
        out.update({prefix + k: v for k, v in self.arch_parameters().items()})
        return out

    def connection_vectors(self) -> int:
        return sum(1 for k in self.arch_parameters() if ".conn." in k)

    def merge_vectors(self) -> int:
        return sum(1 for k in self.arch_parameters() if ".merge." in k)

    # -- forward -------------------------------------------------------------

    def _drop(self, h: Tensor) -> Tensor:
        return ad.dropout(h, self.config.dropout, self.dropout_rng, self.training)

    def _embed_input(self, batch) -> Tensor:
        if batch.features.shape[1] != self.config.in_dim:
            raise ad.DimensionError(
                f"batch feature width {batch.features.shape[1]} != configured in_dim {self.config.in_dim}"
            )
        return self._drop(self.pre(Tensor(batch.features)))

    def forward_relaxed(self, batch, lam: float, noise: GumbelNoise, return_nodes: bool = False):
        """Mix every candidate with Gumbel-Softmax weights; returns (graph_vectors, logits)."""
        noise.new_pass()
        b = self.config.ops_per_cell
        h_cur = self._embed_input(batch)
        for pos, cell in enumerate(self.cells):
            tname = self.template_name(pos)
            alpha = cell.arch_logits()
            outs = [h_cur]
            for j in range(1, b + 2):
                slots = outs[:j]
                keys = [f"conn.{i}_{j}" for i in range(j)]
                presence = ad.gumbel_presence(
                    [alpha[k] for k in keys], [noise.draw(f"alpha.{tname}.{k}", 2) for k in keys], lam
                )
                wm = gumbel_softmax(alpha[f"merge.{j}"], lam, noise.draw(f"alpha.{tname}.merge.{j}", len(MERGE_KINDS)))
                ops = cell.merges[str(j)].ops
                mixed = ad.mix([ops[kind](slots, presence) for kind in MERGE_KINDS], wm)
                if j <= b:
                    outs.append(self._drop(cell.aggs[j - 1](batch, mixed)))
                else:
                    outs.append(cell.post(mixed))
            h_cur = outs[-1]
        wr = gumbel_softmax(self._alpha_readout, lam, noise.draw("alpha.readout", len(READOUT_KINDS)))
        graph_vec = ad.mix([self.readouts[k](h_cur, batch.segments, batch.num_graphs) for k in READOUT_KINDS], wr)
        logits = self.classifier(graph_vec)
        if return_nodes:
            return graph_vec, logits, h_cur
        return graph_vec, logits

    def forward_discrete(self, batch, arch: Architecture, return_layers: bool = False):
        """Execute only the ON connections, chosen merges and chosen readout."""
        cfg = self.config
        if (arch.B, arch.C) != (cfg.B, cfg.C):
            raise ConfigError(f"architecture B{arch.B}C{arch.C} does not fit supernet B{cfg.B}C{cfg.C}")
        b = cfg.ops_per_cell
        live = live_ops(arch)
        on = set(arch.on_edges())
        merges = dict((o, k) for o, k in arch.merges)
        h_cur = self._embed_input(batch)
        layers: dict[int, Tensor] = {0: h_cur}
        for pos, cell in enumerate(self.cells):
            base = pos * (b + 1)
            outs: dict[int, Tensor] = {0: h_cur}
            for j in range(1, b + 2):
                gid = base + j
                if gid not in live:
                    continue
                slots = [outs.get(i) if (base + i, gid) in on else None for i in range(j)]
                if any(s is None and (base + i, gid) in on for i, s in enumerate(slots)):
                    raise AssertionError("live op fed by a dead op")
                mixed = cell.merges[str(j)].ops[merges.get(gid, "SUM")](slots, None, n_rows=batch.num_nodes)
                if j <= b:
                    outs[j] = self._drop(cell.aggs[j - 1](batch, mixed))
                else:
                    outs[j] = cell.post(mixed)
                layers[gid] = outs[j]
            h_cur = outs[b + 1]
        graph_vec = self.readouts[arch.readout](h_cur, batch.segments, batch.num_graphs)
        logits = self.classifier(graph_vec)
        if return_layers:
            return graph_vec, logits, layers
        return graph_vec, logits

    # -- parameter bookkeeping -------------------------------------------------

    def parameter_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.named_parameters().items():
            v.data[...] = snap[k]


def build_supernet(config: SuperNetConfig) -> SuperNet:
    return SuperNet(config)


# ---------------------------------------------------------------------------
# presets


def preset_architecture(kind: str, L: int, B: int | None = None, readout: str = "GSUM") -> Architecture:
    """Stacked baselines hosted in a Full supernet with ``B >= L`` aggregation ops.

    ``kind`` is ``gcn_stack`` (consecutive only), ``resgcn`` (plus j-2 -> j
    skips, SUM merges) or ``jk`` (plus every aggregation op -> post, CONCAT at
    the post op).
    """
    B = L if B is None else B
    kind = kind.lower()
    if L < 1:
        raise ConfigError("preset depth must be >= 1")
    if L > B:
        raise ConfigError(f"preset depth L={L} exceeds the host's B={B}")
    post = B + 1
    on = {(j - 1, j) for j in range(1, L + 1)} | {(L, post)}
    merges = {j: "SUM" for j in range(1, post + 1)}
    if kind in ("gcn_stack", "gcn"):
        pass
    elif kind == "resgcn":
        on |= {(j - 2, j) for j in range(2, L + 1)}
    elif kind == "jk":
        on |= {(j, post) for j in range(1, L + 1)}
        merges[post] = "CONCAT"
    else:
        raise ConfigError(f"unknown preset {kind!r}")
    conns = [[i, j, (i, j) in on] for i, j in cell_connections(B)]
    return Architecture(
        variant="full",
        B=B,
        C=1,
        connections=conns,
        merges=[[o, k] for o, k in sorted(merges.items())],
        readout=readout,
        provenance={"preset": kind, "L": L},
    )


# ---------------------------------------------------------------------------
# derivation and counting


def derive_architecture(net: SuperNet, provenance: dict | None = None) -> Architecture:
    """Keep the largest-weight candidate per choice, then repair.

    A connection is ON only if its ON weight strictly exceeds OFF; merge and
    readout ties go to the first candidate in declaration order.
    """
    cfg = net.config
    b = cfg.ops_per_cell
    conns, merges = [], []
    for pos, cell in enumerate(net.cells):
        alpha = cell.arch_logits()
        for i, j in cell_connections(b):
            theta = alpha[f"conn.{i}_{j}"].data[0]
            src = pos * (b + 1) + i
            conns.append([src, pos * (b + 1) + j, bool(theta[0] > theta[1])])
        for j in range(1, b + 2):
            theta = alpha[f"merge.{j}"].data[0]
            merges.append([pos * (b + 1) + j, MERGE_KINDS[int(np.argmax(theta))]])
    readout = READOUT_KINDS[int(np.argmax(net._alpha_readout.data[0]))]
    prov = {"variant": cfg.variant, "B": cfg.B, "C": cfg.C, "seed": cfg.seed}
    prov.update(provenance or {})
    raw = Architecture(cfg.variant, cfg.B, cfg.C, conns, merges, readout, prov)
    return repair_architecture(raw)


@dataclass
class ParameterCounts:
    arch_params: int
    op_params: int
    connection_vectors: int
    merge_vectors: int
    readout_vectors: int

    @property
    def total(self) -> int:
        return self.arch_params + self.op_params


def count_parameters(net: SuperNet, arch: Architecture | None = None) -> ParameterCounts:
    """Parameter counts of the whole supernet, or of the ops an architecture executes."""
    if arch is None:
        arch_p = net.arch_parameters()
        return ParameterCounts(
            arch_params=sum(p.data.size for p in arch_p.values()),
            op_params=sum(p.data.size for p in net.weight_parameters().values()),
            connection_vectors=net.connection_vectors(),
            merge_vectors=net.merge_vectors(),
            readout_vectors=1,
        )
    b = net.config.ops_per_cell
    live = live_ops(arch)
    merges = dict((o, k) for o, k in arch.merges)
    seen: set[int] = set()
    total = net.pre.num_parameters() + net.classifier.num_parameters() + net.readouts[arch.readout].num_parameters()
    for pos, cell in enumerate(net.cells):
        for j in range(1, b + 2):
            gid = pos * (b + 1) + j
            if gid not in live:
                continue
            mods = [cell.merges[str(j)].ops[merges.get(gid, "SUM")]]
            mods.append(cell.aggs[j - 1] if j <= b else cell.post)
            for m in mods:
                if id(m) not in seen:  # Repeat cells share modules
                    seen.add(id(m))
                    total += m.num_parameters()
    return ParameterCounts(0, total, 0, 0, 0)


def config_dict(config: SuperNetConfig) -> dict:
    return asdict(config)


def iter_choice_weights(net: SuperNet, lam: float, noise: GumbelNoise) -> Iterable[np.ndarray]:
    """Every mixing-weight vector of one forward pass (for diagnostics and tests)."""
    noise.new_pass()
    for key, theta in net.arch_parameters().items():
        with ad.no_grad():
            yield gumbel_softmax(theta, lam, noise.draw(key, theta.shape[1])).data[0]


# ---------------------------------------------------------------------------
# shipped reference documents


def reference_names() -> list[str]:
    root = resources.files("stacknas") / "reference"
    return sorted(p.name[: -len(".arch")] for p in root.iterdir() if p.name.endswith(".arch"))


def reference_text(name: str) -> str:
    path = resources.files("stacknas") / "reference" / f"{name}.arch"
    if not path.is_file():
        raise KeyError(f"no reference architecture {name!r}; have {reference_names()}")
    return path.read_text()


def reference_architecture(name: str) -> Architecture:
    return Architecture.loads(reference_text(name))
