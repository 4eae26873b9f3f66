"""Discrete-time simulation of non-leaky integrate-and-fire networks with subtract reset.

Each neuron integrates ``v += R * I * dt`` (R = 1, no bias current) and emits
``floor(v / v_th)`` spikes per step, subtracting ``v_th`` per spike. Spikes
emitted in a step reach the next layer within the same step, weighted by
their count. Pooling is a fixed-weight synaptic stage inside a group, not a
spiking layer.

State is kept as cumulative quantities: total integrated charge and total
spike count per neuron, with ``v = charge + offset - count * v_th``. Because
every group is linear and bias-free, a layer's charge after step k is the
group map applied to its presynaptic cumulative spike counts, which avoids
accumulating rounding error over time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .network import apply_group, group_weights
from .synops import SynopEstimate, compute_fanout

MODES = ("event-replay", "constant-current")


@dataclass
class SimConfig:
    mode: str = "event-replay"
    dt_us: int = 1000  # event-replay bin width
    n_dt: int = 10  # constant-current steps
    threshold: float = 1.0
    reset: bool = True
    v_floor: bool = False  # clamp membrane potential at 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown simulation mode {self.mode!r}")
        if self.n_dt < 1:
            raise ConfigError("n_dt must be >= 1")
        if self.dt_us <= 0 or self.threshold <= 0:
            raise ConfigError("dt and threshold must be positive")


class IafLayerState:
    """Membrane state of one layer (any batch-first shape)."""

    R = 1.0
    I_BIAS = 0.0

    def __init__(self, shape, threshold=1.0, v_floor=False):
        self.threshold = float(threshold)
        self.v_floor = v_floor
        self.charge = np.zeros(shape, dtype=np.float64)
        self.offset = np.zeros(shape, dtype=np.float64)
        self.count = np.zeros(shape, dtype=np.int64)

    @property
    def v(self):
        return self.charge + self.offset - self.count * self.threshold

    def reset(self):
        self.charge[...] = 0
        self.offset[...] = 0
        self.count[...] = 0

    def fire(self):
        """Emit all due spikes; returns the per-neuron spike count of this step."""
        due = np.floor((self.charge + self.offset) / self.threshold).astype(np.int64) - self.count
        n = np.maximum(due, 0)
        self.count += n
        if self.v_floor:
            v = self.v
            self.offset += np.where(v < 0, -v, 0.0)
        return n


def iaf_step(state, current, dt=1.0):
    """Advance one step with input current ``current``; returns (spikes, state)."""
    current = np.asarray(current, dtype=np.float64)
    if current.shape != state.charge.shape:
        raise DimensionError(f"current shape {current.shape} != state shape {state.charge.shape}")
    state.charge = state.charge + state.R * (current + state.I_BIAS) * dt
    return state.fire(), state


@dataclass
class SpikeLedger:
    """Spike and SynOp accounting for one sample.

    ``layer_spikes[g]`` / ``layer_synops[g]`` refer to spiking layer g+1 (the
    output of group g); the last entry is the output layer, whose SynOps are 0.
    """

    layer_spikes: list
    layer_synops: list
    input_events: int
    input_synops: float
    output_per_step: np.ndarray
    prediction: int = 0
    tie: bool = False

    @property
    def output_counts(self):
        return self.output_per_step.sum(axis=0)

    @property
    def total_synops(self):
        return float(sum(self.layer_synops)) + self.input_synops

    def to_dict(self):
        return {
            "layer_spikes": [int(x) for x in self.layer_spikes],
            "layer_synops": [float(x) for x in self.layer_synops],
            "input_events": int(self.input_events),
            "input_synops": float(self.input_synops),
            "output_per_step": self.output_per_step.astype(int).tolist(),
            "prediction": int(self.prediction),
            "tie": bool(self.tie),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["layer_spikes"],
            d["layer_synops"],
            d["input_events"],
            d["input_synops"],
            np.asarray(d["output_per_step"], dtype=np.int64).reshape(len(d["output_per_step"]), -1),
            d["prediction"],
            d["tie"],
        )


@dataclass
class Checkpoint:
    steps: int
    predictions: np.ndarray
    synops: np.ndarray  # cumulative per-sample total, input included


@dataclass
class SimResult:
    predictions: np.ndarray
    ties: np.ndarray
    layer_spikes: np.ndarray  # [N, G]
    layer_synops: np.ndarray  # [N, G]
    input_events: np.ndarray
    input_synops: np.ndarray
    output_per_step: np.ndarray  # [N, T, classes]
    neuron_counts: list = field(default_factory=list)  # per layer [N, ...]
    checkpoints: list = field(default_factory=list)

    def __len__(self):
        return len(self.predictions)

    def ledger(self, i):
        return SpikeLedger(
            self.layer_spikes[i].tolist(),
            self.layer_synops[i].tolist(),
            int(self.input_events[i]),
            float(self.input_synops[i]),
            self.output_per_step[i],
            int(self.predictions[i]),
            bool(self.ties[i]),
        )

    def ledgers(self):
        return [self.ledger(i) for i in range(len(self))]

    def to_json(self):
        per = [self.ledger(i).to_dict() for i in range(len(self))]
        agg = measure_synops(self).to_dict()
        return json.dumps({"samples": per, "aggregate": agg}, sort_keys=True)


def _prediction(counts):
    flat = counts.reshape(counts.shape[0], -1)
    pred = np.argmax(flat, axis=1)
    top = flat.max(axis=1, keepdims=True)
    ties = (flat == top).sum(axis=1) > 1
    return pred, ties


def bin_events(streams, dt_us=1000, sensor=None):
    """Spike-count frames [N, T, 1, H, W] from event streams, polarity ignored.

    Bins are counted from each stream's first event; shorter streams are
    padded with empty bins.
    """
    if not streams:
        raise ConfigError("no event streams to bin")
    w, h = sensor if sensor is not None else (streams[0].width, streams[0].height)
    lengths = []
    bins = []
    for s in streams:
        if (s.width, s.height) != (w, h):
            raise DimensionError(f"stream sensor {s.width}x{s.height} != {w}x{h}")
        ev = s.events
        if len(ev):
            b = ((ev["t"] - ev["t"][0]) // np.uint64(dt_us)).astype(np.int64)
            lengths.append(int(b[-1]) + 1)
        else:
            b = np.zeros(0, dtype=np.int64)
            lengths.append(0)
        bins.append(b)
    t_max = max(max(lengths), 1)
    frames = np.zeros((len(streams), t_max, 1, h, w), dtype=np.float64)
    for i, (s, b) in enumerate(zip(streams, bins)):
        ev = s.events
        np.add.at(frames[i, :, 0], (b, ev["y"].astype(np.int64), ev["x"].astype(np.int64)), 1.0)
    return frames, np.asarray(lengths)


class _Drive:
    """Cumulative input charge per step."""

    def __init__(self, model, cfg, inputs):
        spec = model.spec
        self.cfg = cfg
        if cfg.mode == "constant-current":
            x = np.asarray(inputs, dtype=np.float64)
            if x.shape[1:] != spec.input_shape:
                raise DimensionError(f"input shape {x.shape[1:]} != network input {spec.input_shape}")
            self.x = x
            self.steps = cfg.n_dt
            self.events = np.zeros(len(x))
            self.n = len(x)
        else:
            if isinstance(inputs, np.ndarray):
                frames = np.asarray(inputs, dtype=np.float64)
            else:
                frames, _ = bin_events(list(inputs), cfg.dt_us)
            if frames.ndim != 5 or frames.shape[2:] != spec.input_shape:
                raise DimensionError(f"binned input shape {frames.shape[2:]} != network input {spec.input_shape}")
            self.cum = np.cumsum(frames, axis=1)
            self.steps = frames.shape[1]
            self.events = self.cum[:, -1].reshape(len(frames), -1).sum(axis=1)
            self.n = len(frames)

    def at(self, k):
        """Cumulative input after step k (1-based)."""
        if self.cfg.mode == "constant-current":
            # k / n_dt is exactly 1.0 at the last step
            return self.x * (k / self.steps)
        return self.cum[:, k - 1]

    def slice(self, i):
        d = object.__new__(_Drive)
        d.cfg = self.cfg
        d.steps = self.steps
        d.n = 1
        d.events = self.events[i : i + 1]
        if self.cfg.mode == "constant-current":
            d.x = self.x[i : i + 1]
        else:
            d.cum = self.cum[i : i + 1]
        return d


def simulate(model, cfg, inputs, checkpoints=None):
    """Run a batch of samples; each sample starts from a reset state.

    ``inputs`` is an analog batch [N, C, H, W] (constant-current) or a list
    of event streams / pre-binned frames [N, T, C, H, W] (event-replay).
    ``checkpoints`` are step counts at which predictions and cumulative
    SynOps are snapshotted within the same pass.
    """
    drive = _Drive(model, cfg, inputs)
    if not cfg.reset:
        parts = []
        states = None
        for i in range(drive.n):
            r, states = _run(model, cfg, drive.slice(i), checkpoints, states)
            parts.append(r)
        return _concat(parts)
    result, _ = _run(model, cfg, drive, checkpoints, None)
    return result


def _run(model, cfg, drive, checkpoints, states):
    spec = model.spec
    checkpoints = sorted(checkpoints or [])
    if checkpoints and (checkpoints[0] < 1 or checkpoints[-1] > drive.steps):
        raise ConfigError(f"checkpoints must lie in [1, {drive.steps}], got {checkpoints}")
    fan = compute_fanout(spec)
    wmap = group_weights(spec, model.weights)
    wmap = {k: v.astype(np.float64) for k, v in wmap.items()}
    groups = spec.groups()
    n = drive.n
    shapes = spec.spiking_shapes()
    if states is None:
        states = [IafLayerState((n,) + tuple(s), cfg.threshold, cfg.v_floor) for s in shapes]
    else:
        # carry charge into the next sample: rebase cumulative quantities
        for st in states:
            st.offset = st.v.copy()
            st.charge[...] = 0
            st.count[...] = 0

    out_steps = np.zeros((n, drive.steps) + tuple(shapes[-1]), dtype=np.int64)
    snaps = []
    ci = 0
    for k in range(1, drive.steps + 1):
        src = drive.at(k)
        for g, group in enumerate(groups):
            st = states[g]
            st.charge = apply_group(spec, wmap, group, src)
            spikes = st.fire()
            src = st.count.astype(np.float64)
        out_steps[:, k - 1] = spikes
        while ci < len(checkpoints) and checkpoints[ci] == k:
            pred, _ = _prediction(states[-1].count)
            syn = sum(_synops(st.count, m) for st, m in zip(states, fan.maps[1:]))
            if cfg.mode == "event-replay":
                syn = syn + _synops(drive.at(k), fan.maps[0])
            snaps.append(Checkpoint(k, pred, syn))
            ci += 1

    counts = [st.count.copy() for st in states]
    layer_spikes = np.stack([c.reshape(n, -1).sum(axis=1) for c in counts], axis=1)
    layer_synops = np.stack([_synops(c, m) for c, m in zip(counts, fan.maps[1:])], axis=1)
    if cfg.mode == "event-replay":
        input_synops = _synops(drive.at(drive.steps), fan.maps[0])
    else:
        input_synops = np.zeros(n)
    pred, ties = _prediction(counts[-1])
    result = SimResult(
        pred,
        ties,
        layer_spikes,
        layer_synops,
        drive.events.astype(np.int64),
        input_synops,
        out_steps.reshape(n, drive.steps, -1),
        counts,
        snaps,
    )
    return result, states


def _synops(counts, fanout_map):
    n = counts.shape[0]
    return (counts.reshape(n, -1) * fanout_map.reshape(1, -1)).sum(axis=1).astype(np.float64)


def _concat(parts):
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    checkpoints = []
    for j, c in enumerate(parts[0].checkpoints):
        checkpoints.append(
            Checkpoint(
                c.steps,
                np.concatenate([p.checkpoints[j].predictions for p in parts]),
                np.concatenate([p.checkpoints[j].synops for p in parts]),
            )
        )
    return SimResult(
        cat("predictions"),
        cat("ties"),
        cat("layer_spikes"),
        cat("layer_synops"),
        cat("input_events"),
        cat("input_synops"),
        cat("output_per_step"),
        [np.concatenate([p.neuron_counts[g] for p in parts]) for g in range(len(parts[0].neuron_counts))],
        checkpoints,
    )


def run_sample(model, cfg, sample):
    """Simulate one sample; returns (prediction, ledger)."""
    batch = [sample] if cfg.mode == "event-replay" and not isinstance(sample, np.ndarray) else np.asarray(sample)[None]
    res = simulate(model, cfg, batch)
    ledger = res.ledger(0)
    return ledger.prediction, ledger


def run_timecourse(model, cfg, sample, checkpoints):
    """(steps, prediction, cumulative SynOps) at each checkpoint, from one pass."""
    if list(checkpoints) != sorted(checkpoints):
        raise ConfigError("checkpoints must be sorted ascending")
    batch = [sample] if cfg.mode == "event-replay" and not isinstance(sample, np.ndarray) else np.asarray(sample)[None]
    res = simulate(model, cfg, batch, checkpoints)
    return [(c.steps, int(c.predictions[0]), float(c.synops[0])) for c in res.checkpoints]


def measure_synops(result):
    """Per-sample-averaged measured SynOps from a simulation or list of ledgers."""
    if isinstance(result, SimResult):
        layers = result.layer_synops.mean(axis=0) if len(result) else np.zeros(result.layer_synops.shape[1])
        spikes = result.layer_spikes.mean(axis=0) if len(result) else np.zeros(result.layer_spikes.shape[1])
        inp = float(result.input_synops.mean()) if len(result) else 0.0
    else:
        ledgers = [result] if isinstance(result, SpikeLedger) else list(result)
        if not ledgers:
            return SynopEstimate([], [], 0.0, True)
        layers = np.mean([l.layer_synops for l in ledgers], axis=0)
        spikes = np.mean([l.layer_spikes for l in ledgers], axis=0)
        inp = float(np.mean([l.input_synops for l in ledgers]))
    return SynopEstimate([float(x) for x in layers], [float(x) for x in spikes], inp, True)
