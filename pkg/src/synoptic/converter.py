"""Turning trained analog weights into SNN-ready weights, plus the model file format.

Model file layout (all integers little-endian)::

    b"SYNM"  u32 version  u64 meta_len  meta (canonical JSON, utf-8)
    u32 n_tensors
    per tensor: u32 rank, rank x u32 extents, float32 data
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import copy
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .network import NetworkSpec, forward

MAGIC = b"SYNM"
FORMAT_VERSION = 1
NULL_THRESHOLD = 1e-9
QUANTILE_PROBS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class TrainedModel:
    spec: NetworkSpec
    weights: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.weight_shapes()
        if len(shapes) != len(self.weights):
            raise ConfigError(f"spec has {len(shapes)} weighted layers, got {len(self.weights)} tensors")
        for i, (s, w) in enumerate(zip(shapes, self.weights)):
            if tuple(w.shape) != tuple(s):
                raise ConfigError(f"weight {i} has shape {w.shape}, spec expects {s}")

    @property
    def quantized(self):
        return bool(self.metadata.get("quantized", False))

    def copy(self):
        return TrainedModel(self.spec, [w.copy() for w in self.weights], copy.deepcopy(self.metadata))

    def forward(self, x, quantize=None, output_activation=None):
        q = self.quantized if quantize is None else quantize
        return forward(self.spec, self.weights, x, q, output_activation)


def _scale_layer(model, index, factor, key):
    if not factor > 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")
    if model.quantized and factor != 1:
        warnings.warn(
            "scaling weights of a quantized network changes its behavior; "
            "scale invariance only holds for pure-ReLU networks",
            stacklevel=3,
        )
    out = model.copy()
    w = out.weights[index]
    out.weights[index] = (w.astype(np.float64) * factor).astype(w.dtype)
    out.metadata[key] = float(out.metadata.get(key, 1.0)) * factor
    return out


def scale_input_weights(model, rho):
    """Multiply the first weighted layer by ``rho`` (same as scaling the input)."""
    return _scale_layer(model, 0, rho, "rho")


def scale_output_weights(model, factor):
    """Multiply the last weighted layer by ``factor``."""
    return _scale_layer(model, len(model.weights) - 1, factor, "output_scale")


def layer_percentiles(model, data, percentile=99.0, batch_size=256):
    """Percentile of analog (ReLU) activations per spiking layer, pooled over ``data``."""
    per_layer = None
    for start in range(0, len(data), batch_size):
        _, acts = forward(model.spec, model.weights, data[start : start + batch_size], False, True)
        flat = [a.reshape(-1).astype(np.float64) for a in acts]
        per_layer = flat if per_layer is None else [np.concatenate([p, f]) for p, f in zip(per_layer, flat)]
    if per_layer is None:
        raise ConfigError("calibration set is empty")
    return [float(np.percentile(p, percentile)) for p in per_layer]


def robust_normalize(model, data, percentile=99.0):
    """Rescale each layer so the ``percentile``-th activation is 1 in every spiking layer.

    Group ``g`` is multiplied by lambda_{g-1} / lambda_g (lambda_{-1} = 1).
    Computed on ReLU activations including the output layer.
    """
    if len(data) == 0:
        raise ConfigError("calibration set is empty")
    lams = layer_percentiles(model, data, percentile)
    for g, lam in enumerate(lams):
        if lam <= 0:
            raise ConfigError(f"spiking layer {g + 1} is silent on the calibration data (percentile {lam})")
    out = model.copy()
    prev = 1.0
    for g, lam in enumerate(lams):
        w = out.weights[g]
        out.weights[g] = (w.astype(np.float64) * (prev / lam)).astype(w.dtype)
        prev = lam
    out.metadata["robust_normalized"] = True
    out.metadata["robust_percentile"] = float(percentile)
    out.metadata["robust_lambdas"] = lams
    return out


@dataclass
class WeightStats:
    null_fraction: float
    quantiles: dict
    count: int

    @property
    def median(self):
        return self.quantiles[0.5]

    def to_dict(self):
        return {
            "null_fraction": self.null_fraction,
            "quantiles": {str(k): v for k, v in self.quantiles.items()},
            "count": self.count,
        }


def weight_stats(model, threshold=NULL_THRESHOLD, probs=QUANTILE_PROBS):
    weights = model.weights if isinstance(model, TrainedModel) else model
    flat = np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in weights])
    if flat.size == 0:
        return WeightStats(0.0, {p: 0.0 for p in probs}, 0)
    null = float(np.count_nonzero(np.abs(flat) < threshold)) / flat.size
    qs = np.quantile(flat, probs)
    return WeightStats(null, {float(p): float(q) for p, q in zip(probs, qs)}, int(flat.size))


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def model_to_bytes(model):
    meta = _canonical_json({"spec": model.spec.to_dict(), "metadata": model.metadata})
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(model.weights))]
    for w in model.weights:
        w = np.asarray(w, dtype="<f4")
        parts.append(struct.pack(f"<I{w.ndim}I", w.ndim, *w.shape))
        parts.append(w.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(blob):
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise FormatError("not a SYNM model file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("model file checksum mismatch (truncated or corrupt)")
    version, meta_len = struct.unpack_from("<IQ", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    off = 16
    try:
        doc = json.loads(body[off : off + meta_len])
        off += meta_len
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        weights = []
        for _ in range(n):
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            count = int(np.prod(shape))
            data = np.frombuffer(body, dtype="<f4", count=count, offset=off)
            off += 4 * count
            weights.append(data.reshape(shape).astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"malformed model file: {exc}") from exc
    if off != len(body):
        raise FormatError("trailing bytes in model file")
    return TrainedModel(NetworkSpec.from_dict(doc["spec"]), weights, doc["metadata"])


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
