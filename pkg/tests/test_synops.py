import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synoptic import autodiff as ad
from synoptic.errors import ConfigError
from synoptic.network import LayerSpec, NetworkSpec, forward, forward_graph, init_weights, toy_network
from synoptic.selftest import brute_force_fanout, random_spec
from synoptic.synops import (
    FanoutTable,
    LossConfig,
    compute_fanout,
    estimate_synops,
    synop_loss,
    synop_penalty,
    synop_penalty_node,
)


def table(*fanouts):
    return FanoutTable(list(fanouts), [np.full((1,), f) for f in fanouts])


class TestFanout:
    """Per-layer fanout from the network description."""

    def test_linear_readout(self):
        spec = NetworkSpec((3, 4, 4), (LayerSpec.conv(2, 3, padding=1), LayerSpec.act(), LayerSpec.linear(10)))
        assert compute_fanout(spec).scalar[1] == 10

    def test_pool_then_conv(self):
        spec = NetworkSpec((1, 12, 12), (
            LayerSpec.conv(2, 3, padding=1), LayerSpec.act(),
            LayerSpec.avgpool(2), LayerSpec.conv(4, 3, padding=1), LayerSpec.act(),
            LayerSpec.linear(3),
        ))
        assert compute_fanout(spec).scalar[1] == 36

    def test_output_layer_zero(self):
        f = compute_fanout(toy_network())
        assert f.scalar[-1] == 0 and not f.maps[-1].any()
        assert all(s > 0 for s in f.scalar[:-1])

    def test_toy_network_values(self):
        f = compute_fanout(toy_network((1, 16, 16), 4, (4, 8)))
        # input -> 3x3 conv with 4 channels, layer 1 -> 3x3 conv with 8, layer 2 -> pool -> linear 4
        assert f.scalar == [36.0, 72.0, 4.0, 0.0]

    def test_boundary_neurons_have_fewer(self):
        f = compute_fanout(toy_network((1, 8, 8), 2, (2, 2)))
        m = f.maps[1][0]
        assert m[0, 0] == 4 * 2 and m[0, 3] == 6 * 2 and m[3, 3] == 9 * 2

    def test_depends_only_on_spec(self):
        spec = toy_network()
        a, b = compute_fanout(spec), compute_fanout(NetworkSpec.from_dict(spec.to_dict()))
        assert a.scalar == b.scalar
        assert all(np.array_equal(x, y) for x, y in zip(a.maps, b.maps))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        spec = random_spec(np.random.default_rng(seed))
        f = compute_fanout(spec)
        for s, m, b in zip(f.scalar, f.maps, brute_force_fanout(spec)):
            np.testing.assert_array_equal(m, b)
            assert s == b.max()

    def test_pool_after_conv_in_same_group(self):
        spec = NetworkSpec((1, 8, 8), (
            LayerSpec.conv(2, 3, padding=1), LayerSpec.act(),
            LayerSpec.conv(3, 3, padding=1), LayerSpec.avgpool(2), LayerSpec.act(),
            LayerSpec.linear(2),
        ))
        f = compute_fanout(spec)
        # a 3x3 neighbourhood spans at most 2x2 pooled cells
        assert f.scalar[1] == 4 * 3
        np.testing.assert_array_equal(f.maps[1], brute_force_fanout(spec)[1])


class TestEstimate:
    """SynOp estimates from activations."""

    def test_zero_activations(self):
        est = estimate_synops([np.zeros((4, 3)), np.zeros((4, 2))], table(0, 5, 0))
        assert est.layers == [0.0, 0.0] and est.penalized == 0

    def test_single_layer(self):
        a = np.zeros((1, 10))
        a[0, :4] = 25
        est = estimate_synops([a, np.zeros((1, 1))], table(0, 36, 0))
        assert est.layers[0] == 3600

    def test_two_layers(self):
        a1, a2 = np.full((1, 5), 1.0), np.full((1, 7), 1.0)
        est = estimate_synops([a1, a2, np.zeros((1, 2))], table(0, 10, 4, 0))
        assert est.layers[:2] == [50, 28] and est.penalized == 78

    def test_batch_mean(self):
        a = np.array([[1.0, 1.0], [3.0, 3.0]])
        est = estimate_synops([a, np.zeros((2, 1))], table(0, 2, 0))
        assert est.layers[0] == 2 * (2 + 6) / 2

    def test_input_reported_not_penalized(self):
        x = np.full((2, 1, 2, 2), 3.0)
        est = estimate_synops([np.ones((2, 3)), np.zeros((2, 1))], table(5, 1, 0), inputs=x)
        assert est.input == 5 * 12 and est.includes_input
        assert est.penalized == 3 and est.total == 63

    def test_missing_layer(self):
        with pytest.raises(ConfigError):
            estimate_synops([np.ones((1, 2))], table(1, 2, 0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_linear_in_activations(self, seed):
        rng = np.random.default_rng(seed)
        f = table(3, 7, 2, 0)
        a = [rng.uniform(0, 5, size=(3, 6)), rng.uniform(0, 5, size=(3, 4)), np.zeros((3, 2))]
        b = [rng.uniform(0, 5, size=(3, 6)), rng.uniform(0, 5, size=(3, 4)), np.zeros((3, 2))]
        ea, eb = estimate_synops(a, f), estimate_synops(b, f)
        eab = estimate_synops([x + y for x, y in zip(a, b)], f)
        np.testing.assert_allclose(eab.layers, np.add(ea.layers, eb.layers), rtol=1e-12)

    def test_values_non_negative_total_is_sum(self):
        spec = toy_network((1, 8, 8), 3, (2, 3))
        x = np.random.default_rng(0).uniform(0, 4, size=(5, 1, 8, 8))
        _, acts = forward(spec, init_weights(spec, 0), x, quantize=True, output_activation=True)
        est = estimate_synops(acts, compute_fanout(spec), inputs=x)
        assert all(v >= 0 for v in est.layers)
        assert est.total == pytest.approx(sum(est.layers) + est.input)

    def test_exact_map_never_exceeds_scalar(self):
        spec = toy_network((1, 8, 8), 3, (2, 3))
        x = np.random.default_rng(0).uniform(0, 4, size=(5, 1, 8, 8))
        _, acts = forward(spec, init_weights(spec, 0), x, quantize=True, output_activation=True)
        f = compute_fanout(spec)
        exact, approx = estimate_synops(acts, f, exact=True), estimate_synops(acts, f)
        assert all(e <= a + 1e-9 for e, a in zip(exact.layers, approx.layers))


class TestLoss:
    """Quadratic SynOp penalty and its configuration."""

    def test_alpha_default(self):
        assert LossConfig("synop", 2000.0).resolved_alpha() == 1 / 2000.0**2

    def test_alpha_undefined_at_zero_target(self):
        with pytest.raises(ConfigError):
            LossConfig("synop", 0.0).resolved_alpha()

    def test_explicit_alpha_allows_zero_target(self):
        assert LossConfig("synop", 0.0, 1e-6).resolved_alpha() == 1e-6

    def test_spike_l1_needs_alpha(self):
        with pytest.raises(ConfigError):
            LossConfig("spike-L1").resolved_alpha()

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            LossConfig("energy")

    def test_at_target_no_penalty(self):
        est = estimate_synops([np.full((1, 4), 1.0), np.zeros((1, 1))], table(0, 25, 0))
        assert synop_loss(0.7, est, LossConfig("synop", 100.0)) == 0.7

    def test_double_target(self):
        est = estimate_synops([np.full((1, 2), 1e6), np.zeros((1, 1))], table(0, 1, 0))
        assert synop_penalty(est, LossConfig("synop", 1e6)) == pytest.approx(1.0)

    def test_none_mode(self):
        est = estimate_synops([np.full((1, 2), 9.0), np.zeros((1, 1))], table(0, 3, 0))
        assert synop_loss(1.25, est, LossConfig("none")) == 1.25

    def test_spike_l1_counts_unweighted(self):
        est = estimate_synops([np.full((1, 2), 3.0), np.zeros((1, 1))], table(0, 100, 0))
        assert synop_penalty(est, LossConfig("spike-L1", alpha=0.5)) == 0.5 * 6

    @given(st.floats(1.0, 1e7), st.floats(0.0, 1e7))
    def test_symmetric_and_dimensionless(self, s0, s):
        est = lambda v: estimate_synops([np.full((1, 1), v), np.zeros((1, 1))], table(0, 1, 0))
        cfg = LossConfig("synop", s0)
        p = synop_penalty(est(s), cfg)
        assert p == pytest.approx(synop_penalty(est(2 * s0 - s), cfg), rel=1e-9, abs=1e-12)
        assert p == pytest.approx(synop_penalty(est(2 * s), LossConfig("synop", 2 * s0)), rel=1e-9, abs=1e-12)


class TestPenaltyGradient:
    """Penalty gradients through the quantized graph."""

    @pytest.fixture
    def setup(self):
        spec = NetworkSpec((1, 5, 5), (LayerSpec.conv(2, 3, padding=1), LayerSpec.act(),
                                       LayerSpec.conv(2, 3, padding=1), LayerSpec.act(), LayerSpec.linear(3)))
        ws = [w.astype(np.float64) * 3 for w in init_weights(spec, 1)]
        x = np.random.default_rng(2).uniform(0, 3, size=(2, 1, 5, 5))
        return spec, ws, x

    def _penalty_grad(self, spec, ws, x, cfg, quantize):
        params = [ad.leaf(w, True) for w in ws]
        _, acts = forward_graph(spec, params, x, quantize=quantize)
        node, _ = synop_penalty_node(acts, compute_fanout(spec), cfg)
        node.backward()
        return node, params

    def test_matches_fd_on_relaxation(self, setup):
        spec, ws, x = setup
        f = compute_fanout(spec)
        cfg = LossConfig("synop", 50.0)
        node, params = self._penalty_grad(spec, ws, x, cfg, quantize=False)

        def pen(w0):
            _, acts = forward(spec, [w0] + ws[1:], x, output_activation=True)
            return synop_penalty(estimate_synops(acts, f), cfg)

        assert ad.max_relative_error(params[0].grad, ad.numerical_gradient(pen, ws[0], h=1e-4)) < 1e-3

    def test_surrogate_reaches_weights_under_quantization(self, setup):
        spec, ws, x = setup
        _, params = self._penalty_grad(spec, ws, x, LossConfig("synop", 10.0), quantize=True)
        assert np.abs(params[0].grad).sum() > 0

    def test_penalty_value_uses_quantized_activity(self, setup):
        spec, ws, x = setup
        cfg = LossConfig("synop", 10.0)
        node, _ = self._penalty_grad(spec, ws, x, cfg, quantize=True)
        _, acts = forward(spec, ws, x, quantize=True, output_activation=True)
        assert float(node.value) == pytest.approx(synop_penalty(estimate_synops(acts, compute_fanout(spec)), cfg))

    def test_output_layer_not_penalized(self, setup):
        spec, ws, x = setup
        params = [ad.leaf(w, True) for w in ws]
        _, acts = forward_graph(spec, params, x, quantize=True)
        node, _ = synop_penalty_node(acts, compute_fanout(spec), LossConfig("synop", 1.0))
        assert acts[-1] not in node.inputs
