"""Time one search epoch on a synthetic stand-in with PROTEINS-like shape and project 30 epochs.

    python benchmarks/proteins_surrogate.py [--hidden 32]
"""

import argparse
import time

import numpy as np

from stacknas.data import GraphRecord, iter_minibatches, normalize_edges, sort_pool_k, stratified_kfold
from stacknas.search import SearchConfig, bilevel_step, make_state, split_seeds
from stacknas.supernet import SuperNet, SuperNetConfig


def surrogate(rng, n_graphs=(663, 450), mean_nodes=39.06, edges_per_node=1.86):
    recs = []
    for label, count in enumerate(n_graphs):
        for _ in range(count):
            n = int(np.clip(rng.gamma(2.0, mean_nodes / 2.0), 4, 620))
            pairs = [(i, i + 1) for i in range(n - 1)]
            while len(pairs) < round(n * edges_per_node):
                u, v = sorted(rng.integers(0, n, 2))
                if 0 < v - u < 6:
                    pairs.append((u, v))
            edges = normalize_edges(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
            recs.append(GraphRecord(n, edges, np.eye(3)[rng.integers(0, 3, n)], label))
    return recs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--b", type=int, default=8)
    args = ap.parse_args()
    recs = surrogate(np.random.default_rng(0))
    fold = stratified_kfold(recs, k=10, seed=split_seeds(1)["data"]).folds[0]
    cfg = SuperNetConfig(in_dim=3, n_classes=2, B=args.b, C=1, variant="full", hidden=args.hidden,
                         sort_k=sort_pool_k(recs, fold.train))
    net = SuperNet(cfg)
    state = make_state(SearchConfig(), net, np.random.default_rng(0))
    data_rng = np.random.default_rng(0)
    val = list(iter_minibatches(recs, fold.val, 64, data_rng))
    start, steps = time.perf_counter(), 0
    for i, tb in enumerate(iter_minibatches(recs, fold.train, 64, data_rng)):
        bilevel_step(net, tb, val[i % len(val)], state)
        steps += 1
    epoch = time.perf_counter() - start
    print(f"graphs {len(recs)}, mean nodes {np.mean([r.node_count for r in recs]):.1f}, "
          f"mean edges {np.mean([len(r.edges) for r in recs]):.1f}")
    print(f"{steps} steps/epoch, {epoch / steps:.2f} s/step, projected 30 epochs {30 * epoch / 60:.1f} min")


if __name__ == "__main__":
    main()
