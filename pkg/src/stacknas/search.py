"""Bi-level architecture search, final training and hyperparameter tuning."""

from __future__ import annotations

import contextlib
import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdaGradState, AdamState, Tensor
from .data import Fold, GraphBatch, GraphRecord, build_batch, iter_minibatches
from .supernet import (
    Architecture,
    GumbelNoise,
    SuperNet,
    SuperNetConfig,
    derive_architecture,
    live_ops,
    repair_architecture,
    temperature,
)

logger = logging.getLogger(__name__)

__all__ = [
    "SearchConfig",
    "SearchState",
    "SearchDivergedError",
    "bilevel_step",
    "run_search",
    "derive_architecture",
    "repair_architecture",
    "train_final",
    "tune_hyperparams",
    "TrialSpace",
    "Hyper",
    "FinalResult",
    "TuneResult",
    "EpochMetrics",
    "SearchResult",
    "evaluate",
    "split_seeds",
    "used_parameters",
    "loss_trend_ok",
    "write_metrics",
]


class SearchDivergedError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_w: float = 0.005
    lr_alpha: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("search needs at least one epoch")
        if self.lr_w <= 0 or self.lr_alpha <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class SearchState:
    w_opt: AdamState
    a_opt: AdamState
    noise: GumbelNoise
    lam: float = 1.0
    epoch: int = 0
    updates: dict = field(default_factory=lambda: {"W": 0, "alpha": 0})
    # batches that reached each parameter group, by split
    sources: dict = field(default_factory=lambda: {"W": set(), "alpha": set()})


def make_state(config: SearchConfig, net: SuperNet, gumbel_rng: np.random.Generator) -> SearchState:
    return SearchState(
        w_opt=AdamState(lr=config.lr_w, weight_decay=config.weight_decay),
        a_opt=AdamState(lr=config.lr_alpha),
        noise=GumbelNoise(gumbel_rng, "sample"),
        lam=net.config.lam_start,
    )


@contextlib.contextmanager
def frozen(params: dict[str, Tensor]):
    """Temporarily exclude ``params`` from the tape."""
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]


def _diagnostic(net: SuperNet, state: SearchState) -> str:
    norms = {
        "W": float(np.sqrt(sum((p.data**2).sum() for p in net.weight_parameters().values()))),
        "alpha": float(np.sqrt(sum((p.data**2).sum() for p in net.arch_parameters().values()))),
    }
    return f"lambda={state.lam:.4g} epoch={state.epoch} |W|={norms['W']:.4g} |alpha|={norms['alpha']:.4g}"


def _relaxed_loss(net: SuperNet, batch: GraphBatch, state: SearchState) -> Tensor:
    try:
        _, logits = net.forward_relaxed(batch, state.lam, state.noise)
        loss = ad.cross_entropy(logits, batch.labels)
    except ad.NonFiniteError as exc:
        raise SearchDivergedError(f"non-finite forward pass ({_diagnostic(net, state)})") from exc
    if not np.isfinite(loss.item()):
        raise SearchDivergedError(f"loss is {loss.item()} ({_diagnostic(net, state)})")
    return loss


def bilevel_step(net: SuperNet, train_batch: GraphBatch, val_batch: GraphBatch, state: SearchState) -> tuple[float, float]:
    """One weight step on the training batch, then one architecture step on the validation batch."""
    w_params = net.weight_parameters()
    a_params = net.arch_parameters()
    net.training = True
    with frozen(a_params):
        loss = _relaxed_loss(net, train_batch, state)
        loss.backward()
    ad.adam_step(w_params, state.w_opt)
    state.updates["W"] += 1
    state.sources["W"].add("train")
    train_loss = loss.item()

    net.training = False
    with frozen(w_params):
        vloss = _relaxed_loss(net, val_batch, state)
        vloss.backward()
    ad.adam_step(a_params, state.a_opt)
    state.updates["alpha"] += 1
    state.sources["alpha"].add("val")
    return train_loss, vloss.item()


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    lam: float


@dataclass
class SearchResult:
    net: SuperNet
    architecture: Architecture
    metrics: list[EpochMetrics]
    state: SearchState


def split_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for the data, init, gumbel and tuner streams."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("data", "init", "gumbel", "tuner")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def run_search(
    records: Sequence[GraphRecord],
    fold: Fold,
    net_config: SuperNetConfig,
    config: SearchConfig,
    metrics_path: Path | None = None,
) -> SearchResult:
    """Alternate weight/architecture updates for ``config.epochs`` epochs and derive."""
    config.validate()
    seeds = split_seeds(config.seed)
    net = SuperNet(replace(net_config, seed=seeds["init"]))
    state = make_state(config, net, np.random.default_rng(seeds["gumbel"]))
    data_rng = np.random.default_rng(seeds["data"])
    metrics: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        state.epoch = epoch
        state.lam = temperature(epoch, config.epochs, net_config.lam_start, net_config.lam_end, net_config.anneal)
        val_batches = list(iter_minibatches(records, fold.val, config.batch_size, data_rng))
        val_cycle = itertools.cycle(val_batches)
        tl, vl = [], []
        for tb in iter_minibatches(records, fold.train, config.batch_size, data_rng):
            a, b = bilevel_step(net, tb, next(val_cycle), state)
            tl.append(a)
            vl.append(b)
        m = EpochMetrics(epoch, float(np.mean(tl)), float(np.mean(vl)), state.lam)
        metrics.append(m)
        logger.info("epoch %d train %.4f val %.4f lambda %.3f", epoch, m.train_loss, m.val_loss, m.lam)
    arch = derive_architecture(net, {"epoch": config.epochs, "search_seed": config.seed})
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return SearchResult(net, arch, metrics, state)


def write_metrics(metrics: Sequence[EpochMetrics], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lambda"])
        for m in metrics:
            w.writerow([m.epoch, f"{m.train_loss:.10g}", f"{m.val_loss:.10g}", f"{m.lam:.10g}"])


# ---------------------------------------------------------------------------
# final training of a discrete architecture


@dataclass
class Hyper:
    hidden: int = 64
    dropout: float = 0.0
    lr: float = 0.01
    optimizer: str = "adam"
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 64


@dataclass
class FinalResult:
    net: SuperNet
    test_acc: float
    val_acc: float
    train_acc: float
    best_epoch: int
    history: list[dict]
    # training-set accuracy of the last epoch's weights (before checkpoint selection)
    final_train_acc: float = float("nan")


def used_parameters(net: SuperNet, arch: Architecture) -> dict[str, Tensor]:
    """Weights touched by a discrete forward pass of ``arch``."""
    b = net.config.ops_per_cell
    live = live_ops(arch)
    merges = dict((o, k) for o, k in arch.merges)
    used: dict[str, Tensor] = {}
    used.update(net.pre.named_parameters("pre."))
    used.update(net.readouts[arch.readout].named_parameters(f"readout.{arch.readout}."))
    used.update(net.classifier.named_parameters("classifier."))
    for pos, cell in enumerate(net.cells):
        tname = net.template_name(pos)
        for j in range(1, b + 2):
            gid = pos * (b + 1) + j
            if gid not in live:
                continue
            kind = merges.get(gid, "SUM")
            used.update(cell.merges[str(j)].ops[kind].named_parameters(f"{tname}.merges.{j}.ops.{kind}."))
            if j <= b:
                used.update(cell.aggs[j - 1].named_parameters(f"{tname}.aggs.{j - 1}."))
            else:
                used.update(cell.post.named_parameters(f"{tname}.post."))
    return used


def evaluate(net: SuperNet, arch: Architecture, records: Sequence[GraphRecord], indices: Sequence[int], batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean loss) of the discrete architecture on ``indices``."""
    if not len(indices):
        return float("nan"), float("nan")
    net.training = False
    correct, loss_sum = 0, 0.0
    with ad.no_grad():
        for batch in iter_minibatches(records, indices, batch_size):
            _, logits = net.forward_discrete(batch, arch)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            loss_sum += ad.cross_entropy(logits, batch.labels).item() * batch.num_graphs
    return correct / len(indices), loss_sum / len(indices)


def _make_optimizer(hyper: Hyper):
    if hyper.optimizer.lower() == "adam":
        return AdamState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    if hyper.optimizer.lower() == "adagrad":
        return AdaGradState(lr=hyper.lr, weight_decay=hyper.weight_decay)
    raise ValueError(f"unknown optimizer {hyper.optimizer!r}")


def train_final(
    arch: Architecture,
    records: Sequence[GraphRecord],
    fold: Fold,
    hyper: Hyper,
    net_config: SuperNetConfig,
    seed: int = 0,
) -> FinalResult:
    """Train ``arch`` from scratch; select the epoch with the best validation
    accuracy (earliest on ties) and report its test accuracy."""
    seeds = split_seeds(seed)
    cfg = replace(net_config, hidden=hyper.hidden, dropout=hyper.dropout, seed=seeds["init"], B=arch.B, C=arch.C, variant=arch.variant)
    net = SuperNet(cfg)
    params = used_parameters(net, arch)
    opt = _make_optimizer(hyper)
    data_rng = np.random.default_rng(seeds["data"])

    val_acc, _ = evaluate(net, arch, records, fold.val)
    best = (val_acc, 0, net.parameter_snapshot())
    history = [{"epoch": 0, "train_loss": float("nan"), "val_acc": val_acc}]
    for epoch in range(1, hyper.epochs + 1):
        net.training = True
        losses = []
        for batch in iter_minibatches(records, fold.train, hyper.batch_size, data_rng):
            try:
                _, logits = net.forward_discrete(batch, arch)
                loss = ad.cross_entropy(logits, batch.labels)
            except ad.NonFiniteError as exc:
                raise SearchDivergedError(f"non-finite loss in final training at epoch {epoch}") from exc
            loss.backward()
            ad.optimizer_step(params, opt)
            losses.append(loss.item())
        val_acc, _ = evaluate(net, arch, records, fold.val)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_acc": val_acc})
        if val_acc > best[0]:
            best = (val_acc, epoch, net.parameter_snapshot())
    final_train_acc, _ = evaluate(net, arch, records, fold.train)
    net.load_snapshot(best[2])
    test_acc, _ = evaluate(net, arch, records, fold.test)
    train_acc, _ = evaluate(net, arch, records, fold.train)
    return FinalResult(net, test_acc, best[0], train_acc, best[1], history, final_train_acc)


# ---------------------------------------------------------------------------
# hyperparameter tuning


@dataclass
class TrialSpace:
    hidden: tuple = (8, 16, 32, 64, 128, 256)
    dropout: tuple = tuple(round(0.1 * i, 1) for i in range(10))
    lr: tuple = (0.001, 0.025)
    optimizer: tuple = ("adam", "adagrad")
    budget: int = 20

    def sample(self, rng: np.random.Generator, epochs: int, batch_size: int) -> Hyper:
        lo, hi = self.lr
        return Hyper(
            hidden=int(self.hidden[rng.integers(len(self.hidden))]),
            dropout=float(self.dropout[rng.integers(len(self.dropout))]),
            lr=float(rng.uniform(lo, hi)) if hi > lo else float(lo),
            optimizer=str(self.optimizer[rng.integers(len(self.optimizer))]),
            epochs=epochs,
            batch_size=batch_size,
        )


@dataclass
class TuneResult:
    best: Hyper
    best_index: int
    val_acc: float
    test_acc: float
    trials: list[dict]
    final: FinalResult


def tune_hyperparams(
    arch: Architecture,
    records: Sequence[GraphRecord],
    fold: Fold,
    space: TrialSpace,
    net_config: SuperNetConfig,
    seed: int = 0,
    epochs: int = 50,
    batch_size: int = 64,
    log_path: Path | None = None,
) -> TuneResult:
    """Random search over ``space``; the trial with the best validation accuracy wins
    (earliest trial on ties)."""
    if space.budget < 1:
        raise ValueError("trial budget must be >= 1")
    rng = np.random.default_rng(split_seeds(seed)["tuner"])
    trials: list[dict] = []
    best: tuple[float, int, Hyper, FinalResult] | None = None
    for t in range(space.budget):
        hyper = space.sample(rng, epochs, batch_size)
        res = train_final(arch, records, fold, hyper, net_config, seed=seed)
        trials.append({"trial": t, **asdict(hyper), "val_acc": res.val_acc, "test_acc": res.test_acc})
        if best is None or res.val_acc > best[0]:
            best = (res.val_acc, t, hyper, res)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(trials[0]))
            w.writeheader()
            w.writerows(trials)
    val_acc, idx, hyper, res = best
    return TuneResult(hyper, idx, val_acc, res.test_acc, trials, res)


def loss_trend_ok(metrics: Sequence[EpochMetrics]) -> bool:
    """Median train loss of the last 10% of epochs is below that of the first 10%."""
    n = max(1, len(metrics) // 10)
    first = np.median([m.train_loss for m in metrics[:n]])
    last = np.median([m.train_loss for m in metrics[-n:]])
    return bool(last < first)


def batch_of(records: Sequence[GraphRecord], indices: Sequence[int]) -> GraphBatch:
    return build_batch(records, indices)
