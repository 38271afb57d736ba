import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacknas import autodiff as ad
from stacknas.data import build_batch
from stacknas.ops import MERGE_KINDS, READOUT_KINDS
from stacknas.supernet import (
    Architecture,
    ArchitectureFormatError,
    ConfigError,
    GumbelNoise,
    SuperNet,
    SuperNetConfig,
    cell_connections,
    count_parameters,
    derive_architecture,
    gumbel_weights,
    iter_choice_weights,
    live_ops,
    preset_architecture,
    reference_architecture,
    reference_names,
    reference_text,
    repair_architecture,
    temperature,
)

from conftest import random_graph


def cfg(**kw):
    base = dict(in_dim=3, n_classes=2, B=4, C=1, variant="full", hidden=6, sort_k=3)
    base.update(kw)
    return SuperNetConfig(**base)


@pytest.fixture
def batch(rng):
    return build_batch([random_graph(rng, n, label=n % 2) for n in (4, 6, 3)])


def set_alpha(net, on_edges, merges=None, readout="GSUM", strength=3.0):
    """Drive every architecture logit towards a chosen discrete architecture."""
    b = net.config.ops_per_cell
    for pos, cell in enumerate(net.cells):
        alpha = cell.arch_logits()
        base = pos * (b + 1)
        for i, j in cell_connections(b):
            on = (base + i, base + j) in on_edges
            alpha[f"conn.{i}_{j}"].data[...] = [[strength, 0.0]] if on else [[0.0, strength]]
        for j in range(1, b + 2):
            kind = (merges or {}).get(base + j, "SUM")
            row = np.zeros(len(MERGE_KINDS))
            row[MERGE_KINDS.index(kind)] = strength
            alpha[f"merge.{j}"].data[...] = row
    row = np.zeros(len(READOUT_KINDS))
    row[READOUT_KINDS.index(readout)] = strength
    net._alpha_readout.data[...] = row


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(variant="full", C=2), dict(variant="repeat", C=1), dict(variant="diverse", B=7, C=2), dict(B=0), dict(variant="ring")],
    )
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            SuperNet(cfg(**kw))

    def test_temperature_schedule(self):
        assert temperature(0, 10) == 1.0
        assert temperature(9, 10) == pytest.approx(0.1)
        assert temperature(5, 11) == pytest.approx(np.sqrt(0.1))
        assert temperature(3, 7, anneal="linear") == pytest.approx(0.55)


class TestConnections:
    @pytest.mark.parametrize("B, expected", [(4, 15), (12, 91)])
    def test_full_counts(self, B, expected):
        net = SuperNet(cfg(B=B, hidden=2))
        assert net.connection_vectors() == expected
        assert net.merge_vectors() == B + 1

    def test_repeat_stores_one_cell(self):
        net = SuperNet(cfg(B=12, C=3, variant="repeat", hidden=2))
        assert net.connection_vectors() == 15
        assert len({id(c) for c in net.cells}) == 1

    def test_diverse_stores_all_cells(self):
        net = SuperNet(cfg(B=12, C=3, variant="diverse", hidden=2))
        assert net.connection_vectors() == 45
        assert len({id(c) for c in net.cells}) == 3

    def test_full_b12_vector_counts(self):
        counts = count_parameters(SuperNet(cfg(B=12, hidden=2)))
        assert (counts.connection_vectors, counts.merge_vectors, counts.readout_vectors) == (91, 13, 1)

    def test_parameter_ordering(self):
        full = count_parameters(SuperNet(cfg(B=12, hidden=8))).total
        rep = count_parameters(SuperNet(cfg(B=12, C=3, variant="repeat", hidden=8))).total
        div = count_parameters(SuperNet(cfg(B=12, C=3, variant="diverse", hidden=8))).total
        assert rep < div < full

    def test_alpha_initialised_to_one(self):
        net = SuperNet(cfg())
        for theta in net.arch_parameters().values():
            np.testing.assert_array_equal(np.exp(theta.data), 1.0)


class TestGumbel:
    def test_equal_alpha_no_noise_uniform(self):
        for lam in (0.1, 1.0, 5.0):
            np.testing.assert_allclose(gumbel_weights(np.full(6, 2.0), lam), 1 / 6, atol=1e-15)

    def test_analytic_identity(self):
        np.testing.assert_allclose(gumbel_weights([0.7, 0.3], 1.0), [0.7, 0.3], atol=1e-15)

    def test_saturation(self, rng):
        alpha = rng.uniform(0.1, 2, size=7)
        g = rng.gumbel(size=7)
        w = gumbel_weights(alpha, 1e-4, g)
        onehot = np.eye(7)[np.argmax(np.log(alpha) + g)]
        np.testing.assert_allclose(w, onehot, atol=1e-9)

    @pytest.mark.parametrize("bad", [[1.0, 0.0], [1.0, -2.0]])
    def test_non_positive_rejected(self, bad):
        with pytest.raises(ValueError):
            gumbel_weights(bad, 1.0)

    def test_every_choice_sums_to_one(self, rng):
        net = SuperNet(cfg())
        for theta in net.arch_parameters().values():
            theta.data[...] = rng.normal(size=theta.shape)
        for w in iter_choice_weights(net, 0.5, GumbelNoise(rng)):
            assert abs(w.sum() - 1) < 1e-12

    def test_differentiable_in_alpha(self, rng):
        from stacknas.supernet import gumbel_softmax

        theta = ad.Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        g = rng.gumbel(size=(1, 4))
        v = ad.Tensor(rng.normal(size=(1, 4)))
        rep = ad.finite_diff_check(lambda: ad.sum_all(gumbel_softmax(theta, 0.7, g) * v), {"t": theta})
        assert rep.passed


class TestForward:
    def test_width_mismatch(self, batch):
        net = SuperNet(cfg(in_dim=5))
        with pytest.raises(ad.DimensionError):
            net.forward_relaxed(batch, 1.0, GumbelNoise(mode="off"))

    @pytest.mark.parametrize("variant, B, C", [("full", 4, 1), ("repeat", 4, 2), ("diverse", 6, 3)])
    def test_relaxed_matches_discrete_at_low_temperature(self, rng, batch, variant, B, C):
        net = SuperNet(cfg(B=B, C=C, variant=variant))
        b = B // C
        # a mixed architecture: chain plus a few skips, non-trivial merges
        on = set()
        for c in range(C):
            base = c * (b + 1)
            on |= {(base + j - 1, base + j) for j in range(1, b + 2)} | {(base, base + 2), (base + 1, base + b + 1)}
        merges = {j: MERGE_KINDS[j % len(MERGE_KINDS)] for j in range(1, C * (b + 1) + 1)}
        set_alpha(net, on, merges, readout="SET2SET")
        arch = derive_architecture(net)
        assert set(arch.on_edges()) == on
        with ad.no_grad():
            _, relaxed = net.forward_relaxed(batch, 1e-4, GumbelNoise(mode="off"))
            _, discrete = net.forward_discrete(batch, arch)
        np.testing.assert_allclose(relaxed.data, discrete.data, atol=1e-4)

    def test_all_off_relaxed_is_finite(self, batch):
        net = SuperNet(cfg())
        set_alpha(net, set())
        with ad.no_grad():
            _, logits = net.forward_relaxed(batch, 1e-4, GumbelNoise(mode="off"))
            post_zero = net.cells[0].post(ad.Tensor(np.zeros((batch.num_nodes, 6))))
            expected = net.classifier(net.readouts["GSUM"](post_zero, batch.segments, batch.num_graphs))
        assert np.isfinite(logits.data).all()
        np.testing.assert_allclose(logits.data, expected.data, atol=1e-9)

    def test_repeat_sharing(self, rng, batch):
        net = SuperNet(cfg(B=4, C=2, variant="repeat"))
        assert net.cells[0] is net.cells[1]
        key = "alpha.cells.0.conn.0_1"
        assert key in net.arch_parameters() and "alpha.cells.1.conn.0_1" not in net.arch_parameters()

    def test_diverse_independence(self, rng):
        net = SuperNet(cfg(B=6, C=3, variant="diverse"))
        before = {k: v.data.copy() for k, v in net.arch_parameters().items() if k.startswith("alpha.cells.1") or k.startswith("alpha.cells.2")}
        net.cells[0].arch_logits()["conn.0_1"].data[...] = [[5.0, -5.0]]
        for k, v in before.items():
            assert net.arch_parameters()[k].data.tobytes() == v.tobytes()

    def test_noise_shared_within_a_pass(self, rng):
        noise = GumbelNoise(rng)
        noise.new_pass()
        a = noise.draw("x", 3)
        assert noise.draw("x", 3) is a
        noise.new_pass()
        assert not np.array_equal(noise.draw("x", 3), a)


class TestPresets:
    def test_gcn_stack(self):
        arch = preset_architecture("gcn_stack", 4)
        assert set(arch.on_edges()) == {(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)}

    def test_jk(self):
        arch = preset_architecture("jk", 4)
        assert set(arch.on_edges()) == {(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 5), (2, 5), (3, 5)}
        assert arch.merge_of(5) == "CONCAT"

    def test_resgcn(self):
        arch = preset_architecture("resgcn", 2)
        assert set(arch.on_edges()) == {(0, 1), (1, 2), (0, 2), (2, 3)}
        assert arch.merge_of(2) == "SUM"

    def test_depth_exceeds_host(self):
        with pytest.raises(ConfigError):
            preset_architecture("gcn_stack", 5, B=4)

    def test_gcn_stack_equals_hand_rolled(self, rng, batch):
        net = SuperNet(cfg(B=3))
        arch = preset_architecture("gcn_stack", 3)
        with ad.no_grad():
            _, logits = net.forward_discrete(batch, arch)
        p = batch.gcn_propagation()
        h = net.pre(ad.Tensor(batch.features)).data
        for layer in net.cells[0].aggs:
            h = np.maximum(p @ h @ layer.weight.data, 0)
        h = net.cells[0].post(ad.Tensor(h)).data
        pooled = np.stack([h[batch.segments == g].sum(axis=0) for g in range(3)])
        expected = pooled @ net.classifier.weight.data + net.classifier.bias.data
        np.testing.assert_allclose(logits.data, expected, atol=1e-9)


class TestArchitectureDocument:
    def test_round_trip(self):
        arch = preset_architecture("jk", 3, B=5)
        text = arch.dumps()
        assert Architecture.loads(text).dumps() == text

    def test_parse_error_location(self):
        text = preset_architecture("jk", 3).dumps().replace('"readout"', "readout", 1)
        with pytest.raises(ArchitectureFormatError, match=r"line \d+ column \d+"):
            Architecture.loads(text)

    def test_foreign_connection_rejected(self):
        doc = preset_architecture("gcn_stack", 2).to_dict()
        doc["connections"].append([3, 1, True])
        with pytest.raises(ArchitectureFormatError):
            Architecture.from_dict(doc)

    def test_reference_documents(self):
        names = reference_names()
        assert {"NCI1_full_B8C1", "NCI109_full_B8C1"} <= set(names)
        for name in names:
            assert reference_architecture(name).dumps() == reference_text(name)


class TestDerive:
    def test_one_hot_alpha(self):
        net = SuperNet(cfg(B=4))
        on = {(0, 1), (1, 2), (0, 3), (2, 3), (3, 4), (1, 5), (4, 5)}
        merges = {1: "SUM", 2: "LSTM", 3: "MAX", 4: "ATT", 5: "CONCAT"}
        set_alpha(net, on, merges, readout="GATT")
        arch = derive_architecture(net)
        assert set(arch.on_edges()) == on
        assert dict((o, k) for o, k in arch.merges) == merges
        assert arch.readout == "GATT"

    def test_all_off_repairs_to_chain(self):
        net = SuperNet(cfg(B=4))
        set_alpha(net, set())
        arch = derive_architecture(net)
        assert set(arch.on_edges()) == {(j - 1, j) for j in range(1, 6)}

    def test_ties(self):
        net = SuperNet(cfg(B=3))  # alpha initialised to equal logits everywhere
        arch = derive_architecture(net)
        assert set(arch.on_edges()) == {(0, 1), (1, 2), (2, 3), (3, 4)}
        assert all(k == "CONCAT" for _, k in arch.merges)
        assert arch.readout == "GMEAN"

    def test_deterministic(self, rng):
        net = SuperNet(cfg(B=5))
        for theta in net.arch_parameters().values():
            theta.data[...] = rng.normal(size=theta.shape)
        assert derive_architecture(net).dumps() == derive_architecture(net).dumps()


class TestRepair:
    def test_valid_unchanged(self):
        arch = preset_architecture("resgcn", 4)
        assert repair_architecture(arch).dumps() == arch.dumps()

    def test_single_orphan(self):
        arch = preset_architecture("jk", 4)
        arch.connections = [[s, d, on and (s, d) != (2, 3)] for s, d, on in arch.connections]
        fixed = repair_architecture(arch)
        assert set(fixed.on_edges()) - set(arch.on_edges()) == {(2, 3)}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.data())
    def test_soundness_and_idempotence(self, b, C, data):
        B = b * C
        variant = "full" if C == 1 else "diverse"
        conns = []
        for c in range(C):
            base = c * (b + 1)
            for i, j in cell_connections(b):
                conns.append([base + i, base + j, data.draw(st.booleans())])
        arch = Architecture(variant, B, C, conns, [[o, "SUM"] for o in range(1, C * (b + 1) + 1)], "GSUM")
        fixed = repair_architecture(arch)
        assert repair_architecture(fixed).dumps() == fixed.dumps()
        # every op has an input, so every op is reachable from op 0 ...
        reach = {0}
        for s, d in sorted(fixed.on_edges(), key=lambda e: e[1]):
            if s in reach:
                reach.add(d)
        assert reach == set(range(fixed.sink + 1))
        # ... and every op reaches the sink
        assert live_ops(fixed) == reach
