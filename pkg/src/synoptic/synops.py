"""Fanout tables, SynOp estimates from analog activations, and the SynOp loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

LOSS_MODES = ("synop", "spike-L1", "none")


@dataclass
class FanoutTable:
    """Fanout per spiking layer.

    Index 0 is the input layer, index ``g + 1`` is the output of group ``g``;
    the last entry (network output) is always 0. ``scalar`` holds the
    interior-neuron maximum used by the estimate, ``maps`` the exact
    per-neuron counts used by the simulator.
    """

    scalar: list
    maps: list

    def __len__(self):
        return len(self.scalar)


def _axis_targets(pos, stages):
    """Distinct target positions along one axis reached from source ``pos``."""
    reach = {pos}
    for k, s, pad, out in stages:
        nxt = set()
        for q in reach:
            # o*s - pad <= q <= o*s - pad + k - 1
            lo = -(-(q + pad - k + 1) // s)
            hi = (q + pad) // s
            nxt.update(range(max(lo, 0), min(hi, out - 1) + 1))
        reach = nxt
        if not reach:
            break
    return len(reach)


def _group_fanout_map(spec, group, source_shape, layer_shapes):
    if len(source_shape) == 1:
        # only a linear layer can read a flat source
        linear = [spec.layers[i] for i in group if spec.layers[i].kind == "linear"]
        if not linear:
            raise ConfigError("flat source must feed a linear layer")
        return np.full(source_shape, float(linear[0].size))
    c, h, w = source_shape
    stages_h, stages_w = [], []
    factor = 1
    flat = False
    in_shape = source_shape
    for i in group:
        layer = spec.layers[i]
        out_shape = layer_shapes[i]
        if layer.kind in ("conv", "avgpool"):
            pad = layer.padding if layer.kind == "conv" else (0, 0)
            stages_h.append((layer.kernel[0], layer.stride[0], pad[0], out_shape[1]))
            stages_w.append((layer.kernel[1], layer.stride[1], pad[1], out_shape[2]))
            if layer.kind == "conv":
                factor *= layer.size
        elif layer.kind == "linear":
            factor *= layer.size
            flat = True
        elif layer.kind != "dropout":
            raise ConfigError(f"unsupported layer kind {layer.kind!r} in fanout computation")
        in_shape = out_shape
    ch = np.array([_axis_targets(p, stages_h) for p in range(h)], dtype=np.float64)
    cw = np.array([_axis_targets(p, stages_w) for p in range(w)], dtype=np.float64)
    if flat:
        ch, cw = (ch > 0).astype(np.float64), (cw > 0).astype(np.float64)
    plane = np.outer(ch, cw) * factor
    return np.broadcast_to(plane, (c, h, w)).copy()


def compute_fanout(spec):
    """Fanout of every spiking layer, from the network structure alone."""
    layer_shapes = spec.layer_shapes()
    sources = [spec.input_shape] + spec.spiking_shapes()
    maps = []
    for g, group in enumerate(spec.groups()):
        maps.append(_group_fanout_map(spec, group, sources[g], layer_shapes))
    maps.append(np.zeros(sources[-1]))
    scalar = [float(m.max()) if m.size else 0.0 for m in maps]
    return FanoutTable(scalar, maps)


@dataclass
class SynopEstimate:
    """Per-sample SynOps: ``layers[g]`` is elicited by spiking layer g+1 (the
    output of group g). ``activity[g]`` is the raw summed activation."""

    layers: list
    activity: list = field(default_factory=list)
    input: float = 0.0
    includes_input: bool = False

    @property
    def penalized(self):
        return float(sum(self.layers))

    @property
    def total(self):
        return self.penalized + (self.input if self.includes_input else 0.0)

    def to_dict(self):
        return {
            "layers": [float(x) for x in self.layers],
            "activity": [float(x) for x in self.activity],
            "input": float(self.input),
            "includes_input": self.includes_input,
            "total": self.total,
        }


def _per_sample_sum(a, weights=None):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if weights is not None:
        a = a * weights
    return a.reshape(n, -1).sum(axis=1)


def estimate_synops(activations, fanout, inputs=None, exact=False):
    """s = f_out * sum_i a_i per spiking layer, averaged over the batch.

    ``activations`` holds one batch-first array per spiking layer after the
    input (as returned by :func:`network.forward`). ``inputs`` adds the
    input-layer SynOps, which are reported but never penalized.
    """
    if len(activations) != len(fanout) - 1:
        raise ConfigError(
            f"fanout table covers {len(fanout) - 1} spiking layers, got {len(activations)} activations"
        )
    layers, activity = [], []
    for a, f, fmap in zip(activations, fanout.scalar[1:], fanout.maps[1:]):
        sums = _per_sample_sum(a)
        activity.append(float(sums.mean()) if sums.size else 0.0)
        if exact:
            s = _per_sample_sum(a, fmap)
            layers.append(float(s.mean()) if s.size else 0.0)
        else:
            layers.append(f * activity[-1])
    est = SynopEstimate(layers, activity)
    if inputs is not None:
        weights = fanout.maps[0] if exact else None
        s = _per_sample_sum(inputs, weights)
        mean = float(s.mean()) if s.size else 0.0
        est.input = mean if exact else fanout.scalar[0] * mean
        est.includes_input = True
    return est


@dataclass
class LossConfig:
    mode: str = "none"
    target: float = 0.0
    alpha: float | None = None

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; expected one of {LOSS_MODES}")
        if self.target < 0:
            raise ConfigError("SynOp target must be non-negative")

    def resolved_alpha(self):
        if self.alpha is not None:
            return float(self.alpha)
        if self.mode == "none":
            return 0.0
        if self.mode == "spike-L1":
            raise ConfigError("spike-L1 mode needs an explicit alpha")
        if self.target == 0:
            raise ConfigError("alpha = 1/S0^2 is undefined for S0 = 0; set alpha explicitly")
        return 1.0 / self.target**2


def synop_penalty(estimate, cfg):
    alpha = cfg.resolved_alpha()
    if cfg.mode == "synop":
        return alpha * (cfg.target - estimate.penalized) ** 2
    if cfg.mode == "spike-L1":
        return alpha * float(sum(estimate.activity[:-1]))
    return 0.0


def synop_loss(classification_loss, estimate, cfg):
    """Cross-entropy plus the configured activity penalty."""
    return float(classification_loss) + synop_penalty(estimate, cfg)


def synop_penalty_node(acts, fanout, cfg):
    """Differentiable penalty over hidden activation nodes.

    Returns ``(node, synops)`` where ``synops`` is the batch-mean estimate of
    the penalized SynOps. The output layer (fanout 0) is never penalized.
    """
    alpha = cfg.resolved_alpha()
    hidden = acts[:-1]
    fs = fanout.scalar[1 : len(hidden) + 1]
    n = hidden[0].value.shape[0] if hidden else 1
    sums = [float(_per_sample_sum(a.value).mean()) for a in hidden]
    synops = float(sum(f * s for f, s in zip(fs, sums)))
    if cfg.mode == "synop":
        value = alpha * (cfg.target - synops) ** 2
        coefs = [-2.0 * alpha * (cfg.target - synops) * f / n for f in fs]
    elif cfg.mode == "spike-L1":
        value = alpha * float(sum(sums))
        coefs = [alpha / n for _ in fs]
    else:
        value = 0.0
        coefs = [0.0 for _ in fs]

    def back(g):
        g = float(g)
        return tuple(np.full(a.value.shape, g * c, dtype=a.value.dtype) for a, c in zip(hidden, coefs))

    return ad.Node("synop-penalty", np.float64(value), hidden, back), synops
