"""Fast invariant checks run by ``synoptic selftest``.

Each check returns ``(ok, detail)``. ``fault`` names a check whose result
is deliberately corrupted, so the failure path can be exercised.
"""

from __future__ import annotations

import io
import time
import warnings

import numpy as np

from . import autodiff as ad
from .converter import TrainedModel, model_from_bytes, model_to_bytes
from .data import events_from_bytes, events_to_bytes, synth_events
from .errors import ConfigError
from .network import LayerSpec, NetworkSpec, init_weights
from .snn import SimConfig, simulate
from .synops import compute_fanout

GRAD_TOL = 1e-3


def brute_force_fanout(spec):
    """Per-neuron fanout by pushing one-hot inputs through all-ones weights.

    Independent of the axis enumeration in :func:`compute_fanout`: every
    source neuron is propagated through its downstream group and the
    nonzero outputs are counted.
    """
    sources = [spec.input_shape] + spec.spiking_shapes()
    maps = []
    for g, group in enumerate(spec.groups()):
        shape = sources[g]
        n = int(np.prod(shape))
        x = np.eye(n, dtype=np.float64).reshape((n,) + tuple(shape))
        for i in group:
            layer = spec.layers[i]
            if layer.kind == "conv":
                ones = np.ones((layer.size, x.shape[1]) + tuple(layer.kernel))
                x = ad.conv2d(x, ones, layer.stride, layer.padding)
            elif layer.kind == "avgpool":
                x = ad.avgpool2d(x, layer.kernel, layer.stride)
            elif layer.kind == "linear":
                x = ad.linear(x, np.ones((layer.size, int(np.prod(x.shape[1:])))))
        counts = (x.reshape(n, -1) > 0).sum(1).astype(np.float64)
        maps.append(counts.reshape(shape))
    maps.append(np.zeros(sources[-1]))
    return maps


def random_spec(rng):
    """A random valid conv/pool/linear chain on a small input."""
    while True:
        shape = (int(rng.integers(1, 3)), int(rng.integers(6, 11)), int(rng.integers(6, 11)))
        layers = []
        for _ in range(int(rng.integers(1, 3))):
            layers.append(LayerSpec.conv(int(rng.integers(1, 5)), int(rng.integers(1, 4)),
                                         int(rng.integers(1, 3)), int(rng.integers(0, 2))))
            if rng.random() < 0.4:
                layers.append(LayerSpec.avgpool(2))
            layers.append(LayerSpec.act())
        if rng.random() < 0.5:
            layers.append(LayerSpec.avgpool(2))
        layers.append(LayerSpec.linear(int(rng.integers(2, 6))))
        try:
            return NetworkSpec(shape, tuple(layers))
        except ConfigError:
            continue


def _grad_cases(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=ad.conv2d(x, w, 1, 1).shape)

    def conv_x(v):
        return float((ad.conv2d(v, w, 1, 1) * g).sum())

    def conv_w(v):
        return float((ad.conv2d(x, v, 1, 1) * g).sum())

    gx, gw = ad.conv2d_backward(g, x, w, 1, 1)
    yield "conv2d input", gx, ad.numerical_gradient(conv_x, x)
    yield "conv2d weight", gw, ad.numerical_gradient(conv_w, w)

    gp = rng.normal(size=(2, 2, 2, 2))
    yield ("avgpool2d", ad.avgpool2d_backward(gp, x[:, :, :4, :4], 2),
           ad.numerical_gradient(lambda v: float((ad.avgpool2d(v, 2) * gp).sum()), x[:, :, :4, :4]))

    xl, wl = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    gl = rng.normal(size=(3, 4))
    gxl, gwl = ad.linear_backward(gl, xl, wl)
    yield "linear input", gxl, ad.numerical_gradient(lambda v: float((ad.linear(v, wl) * gl).sum()), xl)
    yield "linear weight", gwl, ad.numerical_gradient(lambda v: float((ad.linear(xl, v) * gl).sum()), wl)

    # keep FD probes away from the kink at 0
    xr = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    gr = rng.normal(size=xr.shape)
    yield ("relu", ad.relu_backward(gr, xr),
           ad.numerical_gradient(lambda v: float((ad.relu(v) * gr).sum()), xr))

    logits, targets = rng.normal(size=(4, 5)), rng.integers(0, 5, size=4)
    _, gce = ad.softmax_cross_entropy(logits, targets)
    yield ("softmax cross-entropy", gce,
           ad.numerical_gradient(lambda v: float(ad.softmax_cross_entropy(v, targets)[0]), logits))


def check_gradients(fault=False, seeds=(0, 1, 2)):
    worst = 0.0
    for seed in seeds:
        for _, analytic, numeric in _grad_cases(np.random.default_rng(seed)):
            if fault:
                analytic = analytic * 1.01
            worst = max(worst, ad.max_relative_error(analytic, numeric))
    return worst < GRAD_TOL, f"max relative error {worst:.2e}"


def identity_model(n):
    spec = NetworkSpec((1, 1, n), (LayerSpec.linear(n),))
    return TrainedModel(spec, [np.eye(n, dtype=np.float32)], {"quantized": True})


def check_quantization_equivalence(fault=False, n=1000, seed=0):
    """Constant-current spike totals equal floor(X) for every N_dt in 1..10."""
    rng = np.random.default_rng(seed)
    x = (rng.uniform(0, 20, size=n) * rng.random(n) ** 2).astype(np.float32)
    x[: n // 10] = np.floor(x[: n // 10])  # exact integers sit on the floor boundary
    model = identity_model(n)
    bad = 0
    for n_dt in range(1, 11):
        res = simulate(model, SimConfig("constant-current", n_dt=n_dt), x.reshape(1, 1, 1, n))
        spikes = res.output_per_step[0].sum(0)
        if fault:
            spikes = spikes + (np.arange(n) == 0)
        bad += int((spikes != np.floor(x.astype(np.float64))).sum())
    return bad == 0, f"{bad} mismatches over {10 * n} cases"


def check_fanout(fault=False, n_specs=20, seed=0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_specs):
        spec = random_spec(rng)
        table = compute_fanout(spec)
        brute = brute_force_fanout(spec)
        for s, m, b in zip(table.scalar, table.maps, brute):
            if fault:
                s += 1
            if s != b.max() or not np.array_equal(m, b):
                bad += 1
    return bad == 0, f"{bad} mismatching layers over {n_specs} random networks"


def check_round_trips(fault=False):
    stream = synth_events(1, 7, 500)
    blob = events_to_bytes(stream)
    if fault:
        blob = blob[:-1] + bytes([blob[-1] ^ 1])
    ok = events_from_bytes(blob) == stream
    spec = NetworkSpec((1, 6, 6), (LayerSpec.conv(2, 3), LayerSpec.act(), LayerSpec.linear(3)))
    model = TrainedModel(spec, init_weights(spec, 0), {"rho": 2.0})
    back = model_from_bytes(model_to_bytes(model))
    ok &= all(np.array_equal(a, b) for a, b in zip(model.weights, back.weights)) and back.metadata == model.metadata
    return ok, "event and model files"


CHECKS = {
    "gradients": check_gradients,
    "quantization-equivalence": check_quantization_equivalence,
    "fanout": check_fanout,
    "round-trips": check_round_trips,
}


def run_selftest(fault=None):
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ok, detail = fn(fault=(fault == name))
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"check": name, "ok": bool(ok), "detail": detail,
                         "seconds": round(time.perf_counter() - t0, 3)})
    return results


def format_table(results):
    out = io.StringIO()
    width = max(len(r["check"]) for r in results)
    for r in results:
        out.write(f"{r['check']:<{width}}  {'PASS' if r['ok'] else 'FAIL'}  {r['detail']}\n")
    return out.getvalue()
