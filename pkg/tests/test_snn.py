import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synoptic.converter import TrainedModel
from synoptic.data import EventStream, make_events, synth_events
from synoptic.errors import ConfigError, DimensionError
from synoptic.network import LayerSpec, NetworkSpec, forward, init_weights, toy_network
from synoptic.selftest import identity_model
from synoptic.snn import (
    IafLayerState,
    SimConfig,
    SpikeLedger,
    bin_events,
    iaf_step,
    measure_synops,
    run_sample,
    run_timecourse,
    simulate,
)
from synoptic.synops import compute_fanout, estimate_synops

from oracles import iaf_loop

CC = SimConfig("constant-current", n_dt=10)


@pytest.fixture
def small_model():
    spec = toy_network((1, 8, 8), 3, (2, 3))
    ws = [np.abs(w) * s for w, s in zip(init_weights(spec, 4), (1.5, 1.0, 1.0))]
    return TrainedModel(spec, ws, {"quantized": True})


@pytest.fixture
def images():
    return np.random.default_rng(0).integers(0, 6, size=(6, 1, 8, 8)).astype(np.float32)


class TestIafStep:
    """Single integrate-and-fire step with subtractive reset."""

    def test_exact_multiple(self):
        st_ = IafLayerState((1,))
        n, st_ = iaf_step(st_, np.array([5.0]))
        assert n[0] == 5 and st_.v[0] == 0

    def test_three_step_accumulation(self):
        st_ = IafLayerState((1,))
        out = [int(iaf_step(st_, np.array([0.35]))[0][0]) for _ in range(3)]
        assert out == [0, 0, 1]
        assert st_.v[0] == pytest.approx(0.05)

    def test_silent(self):
        st_ = IafLayerState((3,))
        for _ in range(20):
            n, _ = iaf_step(st_, np.zeros(3))
            assert not n.any()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            iaf_step(IafLayerState((2,)), np.zeros(3))

    def test_negative_unbounded_by_default(self):
        st_ = IafLayerState((1,))
        for _ in range(5):
            iaf_step(st_, np.array([-2.0]))
        assert st_.v[0] == -10.0
        n, _ = iaf_step(st_, np.array([10.5]))
        assert n[0] == 0

    def test_v_floor(self):
        st_ = IafLayerState((1,), v_floor=True)
        for _ in range(5):
            iaf_step(st_, np.array([-2.0]))
        assert st_.v[0] == 0.0
        n, _ = iaf_step(st_, np.array([1.5]))
        assert n[0] == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-3, 5, allow_nan=False), min_size=1, max_size=40), st.floats(0.25, 3))
    def test_matches_scalar_loop(self, currents, vth):
        st_ = IafLayerState((1,), threshold=vth)
        got = [int(iaf_step(st_, np.array([c]))[0][0]) for c in currents]
        want, v = iaf_loop(currents, vth)
        assert got == want
        assert st_.v[0] == pytest.approx(v, abs=1e-9)
        assert st_.v[0] < vth

    def test_reset(self):
        st_ = IafLayerState((2,))
        iaf_step(st_, np.array([2.5, -1.0]))
        st_.reset()
        assert not st_.v.any()


class TestQuantizationEquivalence:
    """Constant-current spike totals equal the floor of the drive."""

    @pytest.mark.parametrize("n_dt", range(1, 11))
    def test_spike_total_is_floor(self, n_dt):
        rng = np.random.default_rng(n_dt)
        x = rng.uniform(0, 12, size=200).astype(np.float32)
        x[:20] = np.round(x[:20])
        res = simulate(identity_model(200), SimConfig("constant-current", n_dt=n_dt), x.reshape(1, 1, 1, -1))
        np.testing.assert_array_equal(res.output_per_step[0].sum(0), np.floor(x.astype(np.float64)))

    def test_single_layer_matches_qrelu(self):
        spec = NetworkSpec((1, 1, 6), (LayerSpec.linear(4),))
        w = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
        model = TrainedModel(spec, [w], {"quantized": True})
        x = np.random.default_rng(1).uniform(0, 3, size=(20, 1, 1, 6)).astype(np.float32)
        res = simulate(model, CC, x)
        out, _ = forward(spec, [w], x, quantize=True, output_activation=True)
        np.testing.assert_array_equal(res.neuron_counts[-1], out)


class TestSimulate:
    """Batched simulation: reset, conservation and SynOp accounting."""

    def test_zero_input(self, small_model):
        res = simulate(small_model, CC, np.zeros((2, 1, 8, 8), np.float32))
        assert not res.layer_spikes.any() and not res.layer_synops.any()
        assert (res.predictions == 0).all() and res.ties.all()

    def test_reset_gives_independent_samples(self, small_model, images):
        batch = simulate(small_model, CC, images)
        for i in range(len(images)):
            alone = simulate(small_model, CC, images[i : i + 1])
            assert alone.ledger(0).to_dict() == batch.ledger(i).to_dict()

    def test_repeatable(self, small_model, images):
        a, b = simulate(small_model, CC, images), simulate(small_model, CC, images)
        assert a.to_json() == b.to_json()

    def test_conservation(self, small_model, images):
        res = simulate(small_model, CC, images)
        np.testing.assert_array_equal(res.output_per_step.sum(1), res.neuron_counts[-1].reshape(len(images), -1))

    def test_synops_are_spikes_times_exact_fanout(self, small_model, images):
        res = simulate(small_model, CC, images)
        fan = compute_fanout(small_model.spec)
        for g, counts in enumerate(res.neuron_counts):
            want = (counts * fan.maps[g + 1][None]).reshape(len(images), -1).sum(1)
            np.testing.assert_array_equal(res.layer_synops[:, g], want)
        assert not res.layer_synops[:, -1].any()

    def test_membrane_bound(self, small_model, images):
        from synoptic import snn

        states = []
        orig = snn.IafLayerState.fire

        def spy(self):
            n = orig(self)
            states.append(self.v.max())
            return n

        snn.IafLayerState.fire = spy
        try:
            simulate(small_model, CC, images)
        finally:
            snn.IafLayerState.fire = orig
        assert max(states) < 1.0

    def test_input_shape_mismatch(self, small_model):
        with pytest.raises(DimensionError):
            simulate(small_model, CC, np.zeros((1, 1, 7, 7)))

    def test_no_reset_carries_state(self):
        model = identity_model(1)
        x = np.full((2, 1, 1, 1), 0.6, np.float32)
        cfg = SimConfig("constant-current", n_dt=1, reset=False)
        res = simulate(model, cfg, x)
        assert res.neuron_counts[-1].ravel().tolist() == [0, 1]
        assert simulate(model, CC, x).neuron_counts[-1].ravel().tolist() == [0, 0]

    def test_multilayer_close_to_quantized_ann(self, small_model, images):
        res = simulate(small_model, CC, images)
        _, acts = small_model.forward(images, quantize=True, output_activation=True)
        est = estimate_synops(acts, compute_fanout(small_model.spec), exact=True)
        assert abs(measure_synops(res).penalized - est.penalized) <= 0.02 * est.penalized


class TestEventReplay:
    """Millisecond binning of recorded events."""

    def test_binning(self):
        ev = make_events(np.array([0, 500, 999, 1000, 3500]), np.array([1, 1, 2, 0, 0]), np.array([0, 0, 0, 1, 1]),
                         np.array([1, 0, 1, 1, 0]))
        frames, lengths = bin_events([EventStream(ev, 3, 2)], 1000)
        assert frames.shape == (1, 4, 1, 2, 3) and lengths[0] == 4
        assert frames[0, 0, 0, 0, 1] == 2 and frames[0, 0, 0, 0, 2] == 1
        assert frames[0, 1, 0, 1, 0] == 1 and frames[0, 3, 0, 1, 0] == 1
        assert frames.sum() == 5

    def test_input_synops_counted(self, small_model):
        stream = synth_events(0, 3, 600, (8, 8))
        res = simulate(small_model, SimConfig(), [stream])
        fan = compute_fanout(small_model.spec)
        from synoptic.data import collapse

        assert res.input_events[0] == 600
        assert res.input_synops[0] == (collapse(stream)[0] * fan.maps[0][0]).sum()

    def test_replay_total_equals_constant_current_for_single_layer(self):
        # one linear layer, non-negative weights: floor of the final charge either way
        spec = NetworkSpec((1, 8, 8), (LayerSpec.linear(3),))
        w = np.abs(np.random.default_rng(0).normal(size=(3, 64))).astype(np.float32) * 0.05
        model = TrainedModel(spec, [w])
        stream = synth_events(1, 0, 800, (8, 8))
        from synoptic.data import collapse

        replay = simulate(model, SimConfig(), [stream])
        cc = simulate(model, SimConfig("constant-current", n_dt=3), collapse(stream)[None].astype(np.float32))
        np.testing.assert_array_equal(replay.neuron_counts[-1], cc.neuron_counts[-1])

    def test_sensor_mismatch(self, small_model):
        with pytest.raises(DimensionError):
            simulate(small_model, SimConfig(), [synth_events(0, 0, 100, (6, 6))])


class TestRunSample:
    """Per-sample prediction and spike ledger."""

    def test_prediction_and_ledger(self, small_model, images):
        pred, ledger = run_sample(small_model, CC, images[0])
        assert pred == int(np.argmax(ledger.output_counts))
        assert all(isinstance(v, int) and v >= 0 for v in ledger.layer_spikes)

    def test_ledger_json_round_trip(self, small_model, images):
        _, ledger = run_sample(small_model, CC, images[1])
        back = SpikeLedger.from_dict(json.loads(json.dumps(ledger.to_dict())))
        assert back.to_dict() == ledger.to_dict()

    def test_result_json(self, small_model, images):
        doc = json.loads(simulate(small_model, CC, images).to_json())
        assert len(doc["samples"]) == len(images) and "aggregate" in doc


class TestTimecourse:
    """Predictions and cumulative SynOps at checkpoints."""

    def test_last_checkpoint_equals_run_sample(self, small_model, images):
        pred, ledger = run_sample(small_model, CC, images[2])
        (steps, p, syn), = run_timecourse(small_model, CC, images[2], [10])
        assert steps == 10 and p == pred
        assert syn == pytest.approx(ledger.total_synops)

    def test_monotone(self, small_model, images):
        tc = run_timecourse(small_model, CC, images[3], list(range(1, 11)))
        syn = [s for _, _, s in tc]
        assert syn == sorted(syn)

    def test_unsorted(self, small_model, images):
        with pytest.raises(ConfigError):
            run_timecourse(small_model, CC, images[0], [5, 2])

    def test_beyond_length(self, small_model, images):
        with pytest.raises(ConfigError):
            run_timecourse(small_model, CC, images[0], [11])


class TestMeasure:
    """Aggregation of measured SynOps."""

    def test_zero_ledger(self):
        ledger = SpikeLedger([0, 0], [0.0, 0.0], 0, 0.0, np.zeros((3, 2), np.int64))
        m = measure_synops([ledger])
        assert m.layers == [0.0, 0.0] and m.input == 0.0

    def test_interior_neuron(self):
        spec = NetworkSpec((1, 12, 12), (
            LayerSpec.conv(1, 1), LayerSpec.act(),
            LayerSpec.avgpool(2), LayerSpec.conv(4, 3, padding=1), LayerSpec.act(), LayerSpec.linear(2),
        ))
        fan = compute_fanout(spec)
        assert fan.maps[1][0, 5, 5] == 36
        w0 = np.ones((1, 1, 1, 1), np.float32)
        model = TrainedModel(spec, [w0, np.zeros((4, 1, 3, 3), np.float32), np.zeros((2, 144), np.float32)])
        x = np.zeros((1, 1, 12, 12), np.float32)
        x[0, 0, 5, 5] = 3
        res = simulate(model, CC, x)
        assert res.layer_synops[0, 0] == 108

    def test_averaged_per_sample(self, small_model, images):
        res = simulate(small_model, CC, images)
        m = measure_synops(res)
        np.testing.assert_allclose(m.layers, res.layer_synops.mean(0))
        m2 = measure_synops(res.ledgers())
        np.testing.assert_allclose(m2.layers, m.layers)
