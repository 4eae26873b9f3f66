"""Training, dual-path evaluation, SynOp and rho sweeps, and report export."""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .converter import TrainedModel, robust_normalize, scale_input_weights, weight_stats
from .data import read_dataset, synthetic_dataset
from .errors import ConfigError, TrainingDiverged
from .network import dropout_rng, forward, forward_graph, init_weights, predict
from .snn import SimConfig, measure_synops, simulate
from .synops import LossConfig, compute_fanout, estimate_synops, synop_penalty_node

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _lr_at(epoch, lr, milestones, decay):
    return lr * decay ** sum(epoch >= m for m in milestones)


def train_model(spec, x, y, *, epochs=30, batch_size=32, lr=1e-3, seed=0, loss=None, quantize=False,
                weight_decay=0.0, decoupled=False, milestones=(), decay=0.1, init=None, metadata=None):
    """Minimize cross-entropy (+ activity penalty) with Adam.

    Returns ``(model, log)`` where ``log`` has one dict per epoch. Raises
    :class:`TrainingDiverged` carrying the last finite model if the loss
    becomes non-finite.
    """
    loss = loss or LossConfig()
    alpha = loss.resolved_alpha()  # fail fast on an undefined alpha
    weights = [w.copy() for w in init.weights] if init is not None else init_weights(spec, seed)
    fanout = compute_fanout(spec)
    state = ad.AdamState.for_params(weights, lr=lr, weight_decay=weight_decay, decoupled=decoupled)
    n = len(x)
    order_rng = np.random.default_rng([int(seed), 0x0DE5])
    meta = {
        "quantized": bool(quantize),
        "loss_mode": loss.mode,
        "target": float(loss.target),
        "alpha": alpha,
        "seed": int(seed),
        "epochs": int(epochs),
    }
    meta.update(metadata or {})
    history = []
    for epoch in range(epochs):
        state.lr = _lr_at(epoch, lr, milestones, decay)
        perm = order_rng.permutation(n)
        sums = {"ce": 0.0, "penalty": 0.0, "synops": 0.0, "correct": 0}
        good = [w.copy() for w in weights]
        for b, start in enumerate(range(0, n, batch_size)):
            idx = perm[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            params = [ad.leaf(w, requires_grad=True) for w in weights]
            out, acts = forward_graph(
                spec, params, xb, quantize, train=True, rng_for=lambda i: dropout_rng(seed, epoch, b, i)
            )
            logits = out.value.reshape(len(idx), -1)
            ce = ad.softmax_cross_entropy_node(out, yb)
            total = ce
            pen_value, synops = 0.0, 0.0
            if loss.mode != "none":
                pen, synops = synop_penalty_node(acts, fanout, loss)
                pen_value = float(pen.value)
                total = ad.add_node(ce, pen)
            else:
                synops = sum(f * float(a.value.reshape(len(idx), -1).sum(1).mean())
                             for f, a in zip(fanout.scalar[1:], acts[:-1]))
            if not np.isfinite(total.value):
                model = TrainedModel(spec, good, dict(meta))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", model, history)
            total.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
            ad.adam_step(weights, grads, state)
            sums["ce"] += float(ce.value) * len(idx)
            sums["penalty"] += pen_value * len(idx)
            sums["synops"] += synops * len(idx)
            sums["correct"] += int((predict(logits) == yb).sum())
        history.append({
            "epoch": epoch,
            "lr": state.lr,
            "ce": sums["ce"] / n,
            "penalty": sums["penalty"] / n,
            "estimated_synops": sums["synops"] / n,
            "train_accuracy": sums["correct"] / n,
        })
        log.debug("epoch %d %s", epoch, history[-1])
    return TrainedModel(spec, weights, meta), history


def load_data(cfg):
    d = cfg.data
    if d.root:
        return read_dataset(d.root)
    return synthetic_dataset(d.classes, d.per_class, tuple(d.sensor), d.frame_events, d.seed,
                             d.test_fraction, d.noise)


def network_spec(cfg, ds):
    w, h = ds.sensor
    return cfg.network.build((1, h, w), ds.n_classes)


def train(cfg, ds=None, init=None):
    """Train per ``cfg.training`` / ``cfg.loss`` / ``cfg.optimizer``."""
    ds = ds if ds is not None else load_data(cfg)
    spec = network_spec(cfg, ds)
    x, y = ds.train
    o, t = cfg.optimizer, cfg.training
    return train_model(
        spec, x, y, epochs=t.epochs, batch_size=t.batch_size, lr=o.lr, seed=t.seed, loss=cfg.loss.build(),
        quantize=t.quantize, weight_decay=o.weight_decay, decoupled=o.decoupled, milestones=o.milestones,
        decay=o.decay, init=init,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Row:
    model_id: str
    method: str
    target: float | None = None
    rho: float = 1.0
    estimated_synops: float = 0.0
    estimated_synops_exact: float = 0.0
    measured_synops: float = 0.0
    input_synops_estimated: float = 0.0
    input_synops_measured: float = 0.0
    ann_accuracy: float = 0.0
    ann_accuracy_act: float = 0.0
    snn_accuracy: float = 0.0
    snn_ties: int = 0
    null_fraction: float = 0.0
    quantiles: dict = field(default_factory=dict)
    per_layer_estimated: list = field(default_factory=list)
    per_layer_measured: list = field(default_factory=list)
    timecourse: list = field(default_factory=list)
    compensation: dict = field(default_factory=dict)

    @property
    def total_estimated(self):
        return self.estimated_synops + self.input_synops_estimated

    @property
    def total_measured(self):
        return self.measured_synops + self.input_synops_measured


COLUMNS = [f.name for f in fields(Row)]
JSON_COLUMNS = ("quantiles", "per_layer_estimated", "per_layer_measured", "timecourse", "compensation")


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def to_dict(self):
        return {"schema_version": REPORT_SCHEMA_VERSION, "rows": [_row_dict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ConfigError(f"unsupported report schema {d.get('schema_version')}")
        return cls([Row(**r) for r in d["rows"]])


def _row_dict(r):
    return {name: getattr(r, name) for name in COLUMNS}


def _test_inputs(ds, sim):
    x, y = ds.test
    if sim.mode == "event-replay":
        return x, y, ds.streams(ds.test_idx)
    return x, y, x


def _checkpoint_steps(sim, checkpoints, total_steps):
    if sim.mode == "constant-current":
        steps = [c for c in (checkpoints or range(1, sim.n_dt + 1)) if c <= sim.n_dt]
    else:
        # checkpoints are given in milliseconds
        steps = [int(round(c * 1000 / sim.dt_us)) for c in (checkpoints or [])]
        steps = [s for s in steps if 1 <= s <= total_steps]
    return sorted(set(steps) | {total_steps})


def _simulate_inputs(sim, streams_or_x):
    from .snn import bin_events

    if sim.mode == "event-replay":
        frames, _ = bin_events(streams_or_x, sim.dt_us)
        return frames
    return streams_or_x


def evaluate(model, ds, sim=None, checkpoints=None, compensation=(1.0,), model_id="model", method="baseline",
             target=None, sim_inputs=None):
    """ANN and SNN evaluation of ``model`` on the test split, as one report row."""
    sim = sim or SimConfig()
    x, y, raw = _test_inputs(ds, sim)
    frames = sim_inputs if sim_inputs is not None else _simulate_inputs(sim, raw)
    fan = compute_fanout(model.spec)

    out, _ = model.forward(x, output_activation=False)
    out_act, _ = model.forward(x, output_activation=True)
    _, qacts = model.forward(x, quantize=True, output_activation=True)
    est = estimate_synops(qacts, fan, inputs=x)
    est_exact = estimate_synops(qacts, fan, inputs=x, exact=True)

    total_steps = sim.n_dt if sim.mode == "constant-current" else frames.shape[1]
    steps = _checkpoint_steps(sim, checkpoints, total_steps)
    res = simulate(model, sim, frames, steps)
    meas = measure_synops(res)
    stats = weight_stats(model)

    timecourse = []
    for c in res.checkpoints:
        t = c.steps if sim.mode == "constant-current" else c.steps * sim.dt_us / 1000
        net = float(c.synops.mean()) if len(c.synops) else 0.0
        timecourse.append([t, float((c.predictions == y).mean()), net])

    comp = {}
    for f in compensation:
        if f == 1.0:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scaled = scale_input_weights(model, f)
        r = simulate(scaled, sim, frames)
        m = measure_synops(r)
        comp[repr(float(f))] = {"snn_accuracy": float((r.predictions == y).mean()), "measured_synops": m.penalized}

    return Row(
        model_id=model_id,
        method=method,
        target=None if target is None else float(target),
        rho=float(model.metadata.get("rho", 1.0)),
        estimated_synops=est.penalized,
        estimated_synops_exact=est_exact.penalized,
        measured_synops=meas.penalized,
        input_synops_estimated=est.input,
        input_synops_measured=meas.input if sim.mode == "event-replay" else 0.0,
        ann_accuracy=float((predict(out) == y).mean()),
        ann_accuracy_act=float((predict(out_act) == y).mean()),
        snn_accuracy=float((res.predictions == y).mean()),
        snn_ties=int(res.ties.sum()),
        null_fraction=stats.null_fraction,
        quantiles={repr(k): v for k, v in stats.quantiles.items()},
        per_layer_estimated=[float(v) for v in est.layers],
        per_layer_measured=[float(v) for v in meas.layers],
        timecourse=timecourse,
        compensation=comp,
    )


def train_synops(model, ds, quantize=True):
    """Quantized-activation SynOp estimate (penalized part) on the training split."""
    x, _ = ds.train
    _, acts = model.forward(x, quantize=quantize, output_activation=True)
    return estimate_synops(acts, compute_fanout(model.spec)).penalized


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def sweep_synop_targets(cfg, ds, initial, *, sim_inputs=None, on_model=None):
    """Warm-started chain of SynOp-loss fine-tunings, each with half the previous SynOps.

    Returns ``(report, models)``. Stops early once SNN accuracy falls below
    ``accuracy_floor`` x chance. A training failure keeps the partial report.
    """
    sw = cfg.sweep
    sim = cfg.simulation.build()
    checkpoints = cfg.simulation.checkpoints
    comp = cfg.conversion.compensation
    floor = sw.accuracy_floor / ds.n_classes
    method = {"synop": "synop", "spike-L1": "spike-L1"}[sw.mode]
    if sw.mode == "synop" and sw.quantize:
        method = "synop+quant"
    if sim_inputs is None:
        sim_inputs = _simulate_inputs(sim, _test_inputs(ds, sim)[2])

    report = SweepReport()
    models = [initial]
    report.rows.append(evaluate(initial, ds, sim, checkpoints, comp, "baseline", "baseline", sim_inputs=sim_inputs))
    if on_model:
        on_model("baseline", initial)
    targets = list(sw.targets) if sw.targets else [None] * sw.halvings
    current = initial
    x, y = ds.train
    for k, target in enumerate(targets, start=1):
        if target is None:
            target = train_synops(current, ds, sw.quantize) / 2
        loss = LossConfig(sw.mode, float(target), sw.alpha)
        try:
            model, _ = train_model(
                current.spec, x, y, epochs=sw.finetune_epochs, batch_size=cfg.training.batch_size, lr=sw.lr,
                seed=cfg.training.seed + k, loss=loss, quantize=sw.quantize, weight_decay=sw.weight_decay,
                init=current, metadata={"sweep_index": k, "rho": float(current.metadata.get("rho", 1.0))},
            )
        except TrainingDiverged as exc:
            log.warning("sweep stopped at step %d: %s", k, exc)
            break
        model_id = f"{method}-{k}"
        row = evaluate(model, ds, sim, checkpoints, comp, model_id, method, target, sim_inputs=sim_inputs)
        report.rows.append(row)
        models.append(model)
        if on_model:
            on_model(model_id, model)
        current = model
        if row.snn_accuracy < floor:
            break
    return report, models


def sweep_rho(cfg, ds, model, rhos, method="rho-scaled", *, sim_inputs=None, checkpoints=None):
    """SNN accuracy and SynOps of ``model`` with its first layer scaled by each rho."""
    sim = cfg.simulation.build()
    if sim_inputs is None:
        sim_inputs = _simulate_inputs(sim, _test_inputs(ds, sim)[2])
    report = SweepReport()
    for rho in rhos:
        if rho <= 0:
            raise ConfigError(f"rho must be positive, got {rho}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scaled = scale_input_weights(model, rho)
        row = evaluate(scaled, ds, sim, checkpoints, (1.0,), f"{method}-{rho!r}", method, rho,
                       sim_inputs=sim_inputs)
        report.rows.append(row)
    return report


def robust_baseline(cfg, ds, model):
    x, _ = ds.train
    return robust_normalize(model, x, cfg.conversion.percentile)


def match_budget(cfg, ds, model, budget, method, *, tol=0.1, sim_inputs=None, max_iter=40):
    """Find rho so the first-layer-scaled model spends ``budget`` SynOps (+-tol); returns its row.

    Log-space bisection on measured (network) SynOps; returns the closest
    row found if the tolerance cannot be met.
    """
    sim = cfg.simulation.build()
    if sim_inputs is None:
        sim_inputs = _simulate_inputs(sim, _test_inputs(ds, sim)[2])
    y = ds.test[1]

    def run(rho):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scaled = scale_input_weights(model, rho)
        res = simulate(scaled, sim, sim_inputs)
        return measure_synops(res).penalized, float((res.predictions == y).mean())

    lo, hi = 1.0, 1.0
    s_lo = s_hi = run(1.0)[0]
    while s_lo > budget and lo > 1e-6:
        lo /= 2
        s_lo, _ = run(lo)
    while s_hi < budget and hi < 1e6:
        hi *= 2
        s_hi, _ = run(hi)
    best = None
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        s, acc = run(mid)
        if best is None or abs(s - budget) < abs(best[1] - budget):
            best = (mid, s, acc)
        if abs(s - budget) <= tol * budget:
            break
        if s > budget:
            hi = mid
        else:
            lo = mid
    rho, s, acc = best
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scaled = scale_input_weights(model, rho)
    return evaluate(scaled, ds, sim, None, (1.0,), f"{method}@{budget:.0f}", method, rho, sim_inputs=sim_inputs)


def latency_curves(models, ds, sim, checkpoints):
    """Accuracy and cumulative SynOps at each checkpoint, one pass per model."""
    x, y, raw = _test_inputs(ds, sim)
    frames = _simulate_inputs(sim, raw)
    total_steps = sim.n_dt if sim.mode == "constant-current" else frames.shape[1]
    steps = _checkpoint_steps(sim, checkpoints, total_steps)
    out = []
    for model_id, model in models:
        res = simulate(model, sim, frames, steps)
        curve = []
        for c in res.checkpoints:
            t = c.steps if sim.mode == "constant-current" else c.steps * sim.dt_us / 1000
            curve.append({"time": t, "accuracy": float((c.predictions == y).mean()),
                          "synops": float(c.synops.mean())})
        out.append({"model_id": model_id, "curve": curve})
    return out


# ---------------------------------------------------------------------------
# report export
# ---------------------------------------------------------------------------


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_csv(report, joules_per_synop=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = COLUMNS + (["joules"] if joules_per_synop is not None else [])
    w.writerow(cols)
    for r in report.rows:
        cells = [_cell(getattr(r, c)) for c in COLUMNS]
        if joules_per_synop is not None:
            cells.append(_cell(float(r.measured_synops * joules_per_synop)))
        w.writerow(cells)
    return buf.getvalue()


def report_from_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    types = {f.name: f.type for f in fields(Row)}
    rows = []
    for rec in reader:
        kw = {}
        for name in COLUMNS:
            raw = rec[name]
            if name in JSON_COLUMNS:
                kw[name] = json.loads(raw)
            elif raw == "":
                kw[name] = None
            elif name in ("model_id", "method"):
                kw[name] = raw
            elif name == "snn_ties":
                kw[name] = int(raw)
            else:
                kw[name] = float(raw)
        rows.append(Row(**kw))
    return SweepReport(rows)


def emit_report(report, path, fmt="csv", joules_per_synop=None):
    path = Path(path)
    if fmt == "csv":
        text = report_to_csv(report, joules_per_synop)
    elif fmt == "json":
        doc = report.to_dict()
        if joules_per_synop is not None:
            doc["joules_per_synop"] = joules_per_synop
            for r in doc["rows"]:
                r["joules"] = r["measured_synops"] * joules_per_synop
        text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path


def read_report(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        for r in doc["rows"]:
            r.pop("joules", None)
        return SweepReport.from_dict(doc)
    return report_from_csv(text)
