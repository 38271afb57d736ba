import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from stacknas import autodiff as ad
from stacknas import search as S
from stacknas.analysis import architecture_depth
from stacknas.data import Fold, build_batch, featurize_degrees, stratified_kfold, synthesize_diameter_dataset
from stacknas.supernet import (
    Architecture,
    SuperNet,
    SuperNetConfig,
    cell_connections,
    preset_architecture,
)

from conftest import random_graph, tu_dataset_dir


def net_cfg(in_dim, **kw):
    base = dict(in_dim=in_dim, n_classes=2, B=3, C=1, variant="full", hidden=8, sort_k=3)
    base.update(kw)
    return SuperNetConfig(**base)


@pytest.fixture
def toy(triangle, path3):
    """Two graphs separable by node degree."""
    return featurize_degrees([triangle, path3], max_degree_cap=3)


@pytest.fixture(scope="module")
def diameter_records():
    return featurize_degrees(synthesize_diameter_dataset([(5, 10), (14, 50)], seed=S.split_seeds(0)["data"]))


@pytest.fixture
def records(rng):
    return featurize_degrees([random_graph(rng, int(rng.integers(3, 9)), label=i % 2) for i in range(40)], 8)


def fresh(config_in_dim, seed=0, **kw):
    net = SuperNet(net_cfg(config_in_dim, seed=seed, **kw))
    state = S.make_state(S.SearchConfig(), net, np.random.default_rng(seed))
    return net, state


class TestBilevelStep:
    def test_freezing_contract(self, toy, monkeypatch):
        net, state = fresh(4)
        w, a = net.weight_parameters(), net.arch_parameters()
        seen = []
        real = ad.adam_step

        def spy(params, opt):
            other = a if opt is state.w_opt else w
            seen.append(max(float(np.abs(p.grad).max()) for p in other.values()))
            # the group being stepped did receive gradient
            assert any(np.abs(p.grad).max() > 0 for p in params.values())
            real(params, opt)

        monkeypatch.setattr(ad, "adam_step", spy)
        batch = build_batch(toy)
        for _ in range(3):
            S.bilevel_step(net, batch, batch, state)
        assert seen == [0.0] * 6
        assert state.updates == {"W": 3, "alpha": 3}

    def test_frozen_restores_flags(self):
        net = SuperNet(net_cfg(4))
        a = net.arch_parameters()
        with S.frozen(a):
            assert not any(p.requires_grad for p in a.values())
        assert all(p.requires_grad for p in a.values())

    def test_toy_converges(self, toy):
        net, state = fresh(4)
        batch = build_batch(toy)
        for _ in range(200):
            train_loss, _ = S.bilevel_step(net, batch, batch, state)
        net.training = False
        with ad.no_grad():
            _, logits = net.forward_relaxed(batch, state.lam, state.noise)
        assert ad.cross_entropy(logits, batch.labels).item() < 0.1
        assert train_loss < 0.1

    def test_deterministic(self, toy):
        batch = build_batch(toy)
        runs = []
        for _ in range(2):
            net, state = fresh(4, seed=3)
            runs.append([S.bilevel_step(net, batch, batch, state) for _ in range(5)])
        assert runs[0] == runs[1]

    def test_nan_aborts_with_diagnostic(self, toy):
        net, state = fresh(4)
        next(iter(net.weight_parameters().values())).data[...] = np.nan
        batch = build_batch(toy)
        with pytest.raises(S.SearchDivergedError, match=r"lambda=.*epoch=.*\|W\|"):
            S.bilevel_step(net, batch, batch, state)


class TestRunSearch:
    def test_alternation_purity_and_metrics(self, records, tmp_path):
        fold = stratified_kfold(records, k=5, seed=0).folds[0]
        cfg = S.SearchConfig(epochs=3, batch_size=8, seed=1)
        out = tmp_path / "m.csv"
        res = S.run_search(records, fold, net_cfg(9), cfg, out)
        steps_per_epoch = -(-len(fold.train) // 8)
        assert res.state.updates == {"W": 3 * steps_per_epoch, "alpha": 3 * steps_per_epoch}
        assert res.state.sources == {"W": {"train"}, "alpha": {"val"}}
        rows = list(csv.DictReader(out.open()))
        assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
        assert float(rows[0]["lambda"]) == 1.0
        res.architecture.validate()
        assert res.architecture.provenance["epoch"] == 3 and res.architecture.provenance["search_seed"] == 1

    def test_same_seed_same_architecture(self, records):
        fold = stratified_kfold(records, k=5, seed=0).folds[1]
        cfg = S.SearchConfig(epochs=2, batch_size=8, seed=4)
        a = S.run_search(records, fold, net_cfg(9), cfg)
        b = S.run_search(records, fold, net_cfg(9), cfg)
        assert a.architecture.dumps() == b.architecture.dumps()
        assert [m.train_loss for m in a.metrics] == [m.train_loss for m in b.metrics]

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr_w=0.0), dict(lr_alpha=-1.0)])
    def test_config_rejected(self, bad):
        with pytest.raises(ValueError):
            S.SearchConfig(**bad).validate()

CONFIGS = sorted((Path(__file__).parents[1] / "configs").glob("*.json"))


@pytest.mark.slow
@pytest.mark.parametrize("config_path", CONFIGS, ids=lambda p: p.stem)
def test_monotonicity_on_shipped_configs(config_path, tmp_path):
    from stacknas.cli import main

    doc = json.loads(config_path.read_text())
    if doc.get("dataset") and tu_dataset_dir(doc["dataset"]) is None:
        pytest.skip(f"{doc['dataset']} not found under $STACKNAS_DATA")
    argv = ["search", "--config", str(config_path), "--out", str(tmp_path), "--folds", "0"]
    if doc.get("dataset"):
        argv += ["--dataset", str(tu_dataset_dir(doc["dataset"]))]
    assert main(argv) == 0
    rows = list(csv.DictReader((tmp_path / "fold0.metrics.csv").open()))
    metrics = [S.EpochMetrics(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lambda"])) for r in rows]
    assert S.loss_trend_ok(metrics)


def test_loss_trend_helper():
    m = [S.EpochMetrics(i, v, 0.0, 1.0) for i, v in enumerate([3, 2, 2, 2, 2, 2, 2, 2, 2, 1])]
    assert S.loss_trend_ok(m)
    assert not S.loss_trend_ok(list(reversed(m)))


def test_split_seeds_distinct():
    s = S.split_seeds(7)
    assert set(s) == {"data", "init", "gumbel", "tuner"}
    assert len(set(s.values())) == 4
    assert s == S.split_seeds(7)


class TestRepair:
    def test_all_off_gives_chain(self):
        conns = [[i, j, False] for i, j in cell_connections(4)]
        arch = Architecture("full", 4, 1, conns, [[o, "SUM"] for o in range(1, 6)], "GSUM")
        fixed = S.repair_architecture(arch)
        assert set(fixed.on_edges()) == {(j - 1, j) for j in range(1, 6)}
        assert architecture_depth(fixed) == 4

    def test_idempotent_on_presets(self):
        for kind in ("gcn_stack", "resgcn", "jk"):
            arch = preset_architecture(kind, 4)
            assert S.repair_architecture(arch).dumps() == arch.dumps()


class TestTrainFinal:
    @pytest.fixture
    def setup(self, records):
        fold = stratified_kfold(records, k=5, seed=0).folds[0]
        return records, fold, net_cfg(9, B=2)

    def test_zero_epochs_is_untrained(self, setup):
        records, fold, cfg = setup
        arch = preset_architecture("gcn_stack", 2)
        hyper = S.Hyper(hidden=8, epochs=0)
        res = S.train_final(arch, records, fold, hyper, cfg, seed=5)
        untrained = SuperNet(replace(cfg, hidden=8, seed=S.split_seeds(5)["init"]))
        assert res.test_acc == S.evaluate(untrained, arch, records, fold.test)[0]
        assert res.best_epoch == 0

    def test_deterministic(self, setup):
        records, fold, cfg = setup
        arch = preset_architecture("jk", 2)
        hyper = S.Hyper(hidden=8, epochs=3, batch_size=8)
        a = S.train_final(arch, records, fold, hyper, cfg, seed=2)
        b = S.train_final(arch, records, fold, hyper, cfg, seed=2)
        assert (a.test_acc, a.val_acc, a.best_epoch) == (b.test_acc, b.val_acc, b.best_epoch)
        assert repr(a.history) == repr(b.history)

    def test_selects_best_validation_epoch(self, setup):
        records, fold, cfg = setup
        res = S.train_final(preset_architecture("gcn_stack", 2), records, fold, S.Hyper(hidden=8, epochs=4, batch_size=8), cfg)
        vals = [h["val_acc"] for h in res.history]
        assert res.val_acc == max(vals)
        assert res.best_epoch == vals.index(max(vals))

    def test_only_used_parameters_change(self, setup):
        records, fold, cfg = setup
        arch = preset_architecture("gcn_stack", 2)
        net = SuperNet(replace(cfg, hidden=8))
        used = S.used_parameters(net, arch)
        assert {k.split(".")[0] for k in used} == {"pre", "cells", "classifier"}
        assert not any(".merges.1.ops.LSTM" in k or "readout." in k for k in used)
        assert set(used) < set(net.weight_parameters())

    @pytest.mark.slow
    def test_gcn_stack2_fits_diameter_dataset(self, diameter_records):
        fold = stratified_kfold(diameter_records, k=10, seed=0).folds[0]
        hyper = S.Hyper(hidden=128, lr=0.01, optimizer="adam", batch_size=64, epochs=100)
        res = S.train_final(preset_architecture("gcn_stack", 2), diameter_records, fold, hyper, net_cfg(65, B=2))
        assert res.final_train_acc >= 0.99


class TestTune:
    @pytest.fixture
    def setup(self, records):
        fold = stratified_kfold(records, k=5, seed=0).folds[0]
        return records, fold, net_cfg(9, B=2), preset_architecture("gcn_stack", 2)

    def test_budget_one(self, setup, tmp_path):
        records, fold, cfg, arch = setup
        space = S.TrialSpace(hidden=(8,), budget=1)
        log = tmp_path / "trials.csv"
        res = S.tune_hyperparams(arch, records, fold, space, cfg, epochs=2, batch_size=8, log_path=log)
        assert res.best_index == 0 and len(res.trials) == 1
        assert res.test_acc == res.trials[0]["test_acc"]
        assert len(list(csv.DictReader(log.open()))) == 1

    def test_collapsed_space(self, setup):
        records, fold, cfg, arch = setup
        space = S.TrialSpace(hidden=(8,), dropout=(0.0,), lr=(0.01, 0.01), optimizer=("adam",), budget=3)
        res = S.tune_hyperparams(arch, records, fold, space, cfg, epochs=2, batch_size=8)
        assert len({tuple(sorted(t.items() - {("trial", t["trial"])})) for t in res.trials}) == 1

    def test_argmax_property(self, setup):
        records, fold, cfg, arch = setup
        space = S.TrialSpace(hidden=(4, 8, 16), budget=4)
        res = S.tune_hyperparams(arch, records, fold, space, cfg, seed=3, epochs=2, batch_size=8)
        accs = [t["val_acc"] for t in res.trials]
        assert res.val_acc == max(accs)
        assert res.best_index == accs.index(max(accs))

    def test_samples_stay_in_space(self, rng):
        space = S.TrialSpace()
        for _ in range(200):
            h = space.sample(rng, 5, 16)
            assert h.hidden in space.hidden and h.dropout in space.dropout
            assert 0.001 <= h.lr <= 0.025 and h.optimizer in ("adam", "adagrad")

    def test_zero_budget_rejected(self, setup):
        records, fold, cfg, arch = setup
        with pytest.raises(ValueError):
            S.tune_hyperparams(arch, records, fold, S.TrialSpace(budget=0), cfg)
