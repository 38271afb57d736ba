"""Command line entry point: ``stacknas {search, train, analyze}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis
from . import autodiff as ad
from .data import (
    DatasetFormatError,
    GraphRecord,
    build_batch,
    featurize_degrees,
    normalize_edges,
    parse_synthetic_spec,
    parse_tu_dataset,
    sort_pool_k,
    stratified_kfold,
    synthesize_diameter_dataset,
)
from .search import Hyper, SearchConfig, TrialSpace, run_search, split_seeds, train_final, tune_hyperparams
from .supernet import (
    Architecture,
    ArchitectureFormatError,
    ConfigError,
    SuperNetConfig,
    preset_architecture,
)

log = logging.getLogger("stacknas")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


DEFAULTS = {
    "dataset": None,
    "synthetic": None,
    "data_root": None,
    "subsample": None,
    "k": 10,
    "folds": None,
    "seed": 0,
    "out": "runs/latest",
    "variant": "full",
    "b": 8,
    "c": 1,
    "agg": "gcn",
    "hidden": 64,
    "dropout": 0.0,
    "epochs": 30,
    "batch_size": 64,
    "lr_w": 0.005,
    "lr_alpha": 0.01,
    "weight_decay": 5e-4,
    "lam_start": 1.0,
    "lam_end": 0.1,
    "anneal": "geometric",
    "parallel_folds": 1,
    # train
    "arch": None,
    "preset": None,
    "trials": 20,
    "train_epochs": 50,
    "lr": None,
    "optimizer": None,
}


# ---------------------------------------------------------------------------
# datasets


def read_tu_graph(path: Path) -> GraphRecord:
    """One graph per ``.tu`` file: the first line is the node count, then one ``u v`` edge per line."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DatasetFormatError(f"{path}: empty graph file")
    try:
        n = int(lines[0])
        pairs = [tuple(int(t) for t in ln.split()) for ln in lines[1:]]
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    for lineno, pr in enumerate(pairs, start=2):
        if len(pr) != 2 or not (0 <= pr[0] < n and 0 <= pr[1] < n):
            raise DatasetFormatError(f"{path}:{lineno}: bad edge {pr}")
    edges = normalize_edges(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    return GraphRecord(n, edges, np.ones((n, 1)), 0)


def data_root(cfg: dict) -> Path:
    return Path(cfg.get("data_root") or os.environ.get("STACKNAS_DATA", "data"))


def load_records(cfg: dict) -> list[GraphRecord]:
    if cfg.get("synthetic"):
        try:
            spec = parse_synthetic_spec(cfg["synthetic"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        records = featurize_degrees(synthesize_diameter_dataset(spec, seed=split_seeds(cfg["seed"])["data"]))
    elif cfg.get("dataset"):
        name = cfg["dataset"]
        path = Path(name)
        if path.is_dir():
            name = path.name
        else:
            path = data_root(cfg) / name
        if not path.is_dir():
            raise UsageError(f"dataset directory not found: {path}")
        try:
            records, _ = parse_tu_dataset(path, name)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
        if records and records[0].features.shape[1] == 0:
            records = featurize_degrees(records)
    else:
        raise UsageError("one of --dataset or --synthetic is required")
    if cfg.get("subsample"):
        records = stratified_subsample(records, int(cfg["subsample"]), cfg["seed"])
    return records


def stratified_subsample(records: list[GraphRecord], n: int, seed: int) -> list[GraphRecord]:
    """Keep ``n`` graphs with class proportions preserved (largest remainders)."""
    if n >= len(records):
        return list(records)
    rng = np.random.default_rng(split_seeds(seed)["data"])
    labels = np.asarray([r.label for r in records])
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n / len(records)
    take = np.floor(quota).astype(int)
    for c in np.argsort(-(quota - take), kind="stable")[: n - take.sum()]:
        take[c] += 1
    keep = []
    for c, t in zip(classes, take):
        idx = np.flatnonzero(labels == c)
        keep.extend(rng.choice(idx, size=t, replace=False).tolist())
    return [records[i] for i in sorted(keep)]


def selected_folds(cfg: dict) -> list[int]:
    if cfg.get("folds") is None:
        return list(range(cfg["k"]))
    folds = cfg["folds"]
    if isinstance(folds, str):
        folds = [int(f) for f in folds.split(",") if f.strip()]
    elif isinstance(folds, int):
        folds = [folds]
    bad = [f for f in folds if not 0 <= f < cfg["k"]]
    if bad:
        raise UsageError(f"fold index out of range: {bad}")
    return list(folds)


def net_config(cfg: dict, records, fold) -> SuperNetConfig:
    return SuperNetConfig(
        in_dim=records[0].features.shape[1],
        n_classes=int(max(r.label for r in records)) + 1,
        B=cfg["b"],
        C=cfg["c"],
        variant=cfg["variant"],
        hidden=cfg["hidden"],
        agg=cfg["agg"],
        lam_start=cfg["lam_start"],
        lam_end=cfg["lam_end"],
        anneal=cfg["anneal"],
        sort_k=sort_pool_k(records, fold.train),
        dropout=cfg["dropout"],
    )


def fold_seed(root: int, fold: int) -> int:
    return int(np.random.SeedSequence([root, fold]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# commands


def _search_fold(cfg: dict, records, fold, k: int, out: Path) -> dict:
    ncfg = net_config(cfg, records, fold)
    scfg = SearchConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr_w=cfg["lr_w"],
        lr_alpha=cfg["lr_alpha"],
        weight_decay=cfg["weight_decay"],
        seed=fold_seed(cfg["seed"], k),
    )
    res = run_search(records, fold, ncfg, scfg, metrics_path=out / f"fold{k}.metrics.csv")
    arch = res.architecture
    arch.provenance.update({"fold": k, "root_seed": cfg["seed"]})
    (out / f"fold{k}.arch").write_text(arch.dumps())
    return {
        "fold": k,
        "depth": analysis.architecture_depth(arch),
        "initial_train_loss": res.metrics[0].train_loss,
        "final_train_loss": res.metrics[-1].train_loss,
        "final_val_loss": res.metrics[-1].val_loss,
    }


def _mean_std(xs) -> dict:
    xs = np.asarray(xs, dtype=float)
    return {"mean": float(xs.mean()), "std": float(xs.std())}


def prepare_run(cfg: dict) -> tuple[list[GraphRecord], object, Path]:
    records = load_records(cfg)
    plan = stratified_kfold(records, k=cfg["k"], seed=split_seeds(cfg["seed"])["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return records, plan, out


def cmd_search(cfg: dict) -> int:
    records, plan, out = prepare_run(cfg)
    folds = selected_folds(cfg)
    jobs = [(cfg, records, plan.folds[k], k, out) for k in folds]
    if cfg["parallel_folds"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["parallel_folds"]) as pool:
            results = list(pool.map(_search_fold, *zip(*jobs)))
    else:
        results = [_search_fold(*job) for job in jobs]
    summary = {
        "folds": results,
        "depth": _mean_std([r["depth"] for r in results]),
        "final_val_loss": _mean_std([r["final_val_loss"] for r in results]),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in results:
        print(f"fold {r['fold']}: depth {r['depth']} train loss {r['initial_train_loss']:.4f} -> {r['final_train_loss']:.4f}")
    print(f"architectures written to {out}")
    return EXIT_OK


def load_architecture(path: Path) -> Architecture:
    try:
        return Architecture.loads(Path(path).read_text())
    except ArchitectureFormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def architecture_for_fold(cfg: dict, k: int) -> Architecture:
    if cfg.get("preset"):
        kind, _, depth = cfg["preset"].partition(":")
        if not depth:
            raise UsageError("--preset expects kind:depth, e.g. gcn_stack:4")
        try:
            return preset_architecture(kind, int(depth))
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    if not cfg.get("arch"):
        raise UsageError("one of --arch or --preset is required")
    path = Path(cfg["arch"])
    if path.is_dir():
        path = path / f"fold{k}.arch"
    if not path.is_file():
        raise UsageError(f"architecture document not found: {path}")
    return load_architecture(path)


def _train_fold(cfg: dict, records, fold, k: int, arch: Architecture, out: Path) -> dict:
    ncfg = net_config(cfg, records, fold)
    seed = fold_seed(cfg["seed"], k)
    space = TrialSpace(budget=cfg["trials"])
    if cfg.get("lr") is not None:
        space.lr = (cfg["lr"], cfg["lr"])
    if cfg.get("optimizer"):
        space.optimizer = (cfg["optimizer"],)
    res = tune_hyperparams(
        arch, records, fold, space, ncfg, seed=seed,
        epochs=cfg["train_epochs"], batch_size=cfg["batch_size"],
        log_path=out / f"fold{k}.trials.csv",
    )
    return {
        "fold": k,
        "test_acc": res.test_acc,
        "val_acc": res.val_acc,
        "depth": analysis.architecture_depth(arch),
        "hyper": asdict(res.best),
    }


def format_accuracy(accs, depths) -> str:
    accs = 100 * np.asarray(accs, dtype=float)
    # most common depth across folds, smaller on ties
    depth = min(Counter(depths).most_common(), key=lambda kv: (-kv[1], kv[0]))[0]
    return f"{accs.mean():.2f}({accs.std():.2f}) [L{depth}]"


def cmd_train(cfg: dict) -> int:
    folds = selected_folds(cfg)
    archs = {k: architecture_for_fold(cfg, k) for k in folds}
    records, plan, out = prepare_run(cfg)
    jobs = [(cfg, records, plan.folds[k], k, archs[k], out) for k in folds]
    if cfg["parallel_folds"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["parallel_folds"]) as pool:
            results = list(pool.map(_train_fold, *zip(*jobs)))
    else:
        results = [_train_fold(*job) for job in jobs]
    line = format_accuracy([r["test_acc"] for r in results], [r["depth"] for r in results])
    summary = {"folds": results, "test_acc": _mean_std([r["test_acc"] for r in results]), "table": line}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(line)
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    what = cfg["what"]
    if what == "wl":
        g1, g2 = (read_graph_arg(p) for p in cfg["pair"])
        k = analysis.wl_distinguish_iteration(g1, g2, max_iter=cfg["max_iter"])
        print(f"k={k}")
    elif what == "depth":
        print(analysis.architecture_depth(load_architecture(Path(cfg["arch"]))))
    elif what == "diameter":
        summ = analysis.diameter_summary(load_records(cfg))
        print("diameter,count")
        for d, n in summ.histogram.items():
            print(f"{d},{n}")
        print(f"average {summ.average:.2f}")
        if summ.disconnected:
            print(f"disconnected graphs (largest component used): {summ.disconnected}")
    elif what == "smooth":
        print(smoothing_table(cfg), end="")
    return EXIT_OK


def read_graph_arg(path: str) -> GraphRecord:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"graph file not found: {p}")
    return read_tu_graph(p)


def smoothing_table(cfg: dict) -> str:
    """Train each preset depth on one fold; report the test-graph smoothness of its last aggregation layer."""
    records = load_records(cfg)
    plan = stratified_kfold(records, k=cfg["k"], seed=split_seeds(cfg["seed"])["data"])
    fold = plan.folds[selected_folds(cfg)[0]]
    rows = []
    for depth in [int(d) for d in str(cfg["depths"]).split(",")]:
        row = smoothing_point(cfg, records, fold, cfg["family"], depth)
        rows.append(row)
    return analysis.smoothness_table(rows)


def smoothing_point(cfg: dict, records, fold, family: str, depth: int) -> dict:
    arch = preset_architecture(family, depth)
    ncfg = net_config({**cfg, "b": depth, "c": 1, "variant": "full"}, records, fold)
    hyper = Hyper(
        hidden=cfg["hidden"], dropout=cfg["dropout"], lr=cfg.get("lr") or 0.01,
        optimizer=cfg.get("optimizer") or "adam", epochs=cfg["train_epochs"], batch_size=cfg["batch_size"],
    )
    res = train_final(arch, records, fold, hyper, ncfg, seed=cfg["seed"])
    dist = final_layer_smoothness(res.net, arch, records, fold.test)
    return {"layer": depth, "distance": dist, "accuracy": res.test_acc}


def final_layer_smoothness(net, arch: Architecture, records, indices) -> float:
    """Smoothness of the deepest aggregation output, averaged over the given graphs."""
    net.training = False
    last = max(g for g in range(1, arch.sink) if g % (arch.ops_per_cell + 1))
    with ad.no_grad():
        batch = build_batch(records, indices)
        _, _, layers = net.forward_discrete(batch, arch, return_layers=True)
    return analysis.smoothness_distance(layers[last].data, batch.segments)


# ---------------------------------------------------------------------------
# argument parsing


def _add_data_args(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--dataset", default=S, help="TU dataset name under the data root, or a directory")
    p.add_argument("--synthetic", default=S, help='diameter dataset spec such as "5:10,14:50"')
    p.add_argument("--data-root", dest="data_root", default=S, help="directory holding TU datasets ($STACKNAS_DATA)")
    p.add_argument("--subsample", type=int, default=S, help="stratified subsample size")
    p.add_argument("--k", type=int, default=S, help="number of folds")
    p.add_argument("--folds", default=S, help="comma separated fold indices (default: all)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="run directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--variant", choices=["full", "repeat", "diverse"], default=S)
    p.add_argument("--b", type=int, default=S, help="aggregation ops B")
    p.add_argument("--c", type=int, default=S, help="cells C")
    p.add_argument("--agg", choices=["gcn", "gin"], default=S)
    p.add_argument("--hidden", type=int, default=S)
    p.add_argument("--dropout", type=float, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--parallel-folds", dest="parallel_folds", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="stacknas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("search", help="search an architecture per fold")
    _add_data_args(ps)
    _add_model_args(ps)
    ps.add_argument("--epochs", type=int, default=S)
    ps.add_argument("--lr-w", dest="lr_w", type=float, default=S)
    ps.add_argument("--lr-alpha", dest="lr_alpha", type=float, default=S)
    ps.add_argument("--weight-decay", dest="weight_decay", type=float, default=S)
    ps.add_argument("--lam-start", dest="lam_start", type=float, default=S)
    ps.add_argument("--lam-end", dest="lam_end", type=float, default=S)
    ps.add_argument("--anneal", choices=["geometric", "linear", "constant"], default=S)

    pt = sub.add_parser("train", help="tune and train a fixed architecture per fold")
    _add_data_args(pt)
    _add_model_args(pt)
    pt.add_argument("--arch", default=S, help="architecture document, or a search run directory")
    pt.add_argument("--preset", default=S, help="kind:depth, e.g. gcn_stack:4, resgcn:4, jk:4")
    pt.add_argument("--trials", type=int, default=S)
    pt.add_argument("--epochs", dest="train_epochs", type=int, default=S)
    pt.add_argument("--lr", type=float, default=S, help="pin the learning rate")
    pt.add_argument("--optimizer", choices=["adam", "adagrad"], default=S, help="pin the optimizer")

    pa = sub.add_parser("analyze", help="diagnostics")
    asub = pa.add_subparsers(dest="what", required=True)
    w = asub.add_parser("wl", help="first WL iteration separating two graphs")
    w.add_argument("--pair", nargs=2, required=True, metavar="GRAPH.tu")
    w.add_argument("--max-iter", dest="max_iter", type=int, default=10)
    d = asub.add_parser("depth", help="longest-path depth of an architecture document")
    d.add_argument("--arch", required=True)
    dm = asub.add_parser("diameter", help="diameter histogram of a dataset")
    _add_data_args(dm)
    sm = asub.add_parser("smooth", help="smoothness and accuracy per preset depth")
    _add_data_args(sm)
    _add_model_args(sm)
    sm.add_argument("--family", choices=["gcn_stack", "resgcn", "jk"], default="gcn_stack")
    sm.add_argument("--depths", default="2,4,8,16")
    sm.add_argument("--epochs", dest="train_epochs", type=int, default=S)
    sm.add_argument("--lr", type=float, default=S)
    sm.add_argument("--optimizer", choices=["adam", "adagrad"], default=S)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    given = vars(args).copy()
    path = given.pop("config", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        # a persisted run config records its subcommand; the command line decides it
        doc.pop("command", None)
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
        cfg.update(doc)
    cfg.update(given)
    cfg.pop("verbose", None)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_analyze(cfg)
    except (UsageError, ConfigError, DatasetFormatError, ArchitectureFormatError) as exc:
        parser.print_usage(sys.stderr)
        print(f"stacknas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"stacknas: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
