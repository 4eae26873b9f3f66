"""Event streams, count-based frame accumulation, synthetic data and dataset splits.

Binary event file (little-endian)::

    b"SYNE"  u32 version  u16 width  u16 height  u64 count
    count x (u64 t_us, u16 x, u16 y, u8 polarity, u8 pad)   # 16 bytes each
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

EVENT_MAGIC = b"SYNE"
EVENT_VERSION = 1
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])
HEADER = struct.Struct("<4sIHHQ")
FRAME_EVENTS = 3000
PIXEL_MAX = 255


@dataclass
class EventStream:
    events: np.ndarray  # EVENT_DTYPE records
    width: int
    height: int

    def __len__(self):
        return len(self.events)

    def validate(self):
        ev = self.events
        if len(ev) == 0:
            return self
        bad = np.flatnonzero((ev["x"] >= self.width) | (ev["y"] >= self.height))
        if bad.size:
            i = int(bad[0])
            raise FormatError(
                f"record {i}: coordinate ({ev['x'][i]}, {ev['y'][i]}) outside {self.width}x{self.height} sensor"
            )
        back = np.flatnonzero(np.diff(ev["t"].astype(np.int64)) < 0)
        if back.size:
            raise FormatError(f"record {int(back[0]) + 1}: timestamp goes backwards")
        bad = np.flatnonzero(ev["p"] > 1)
        if bad.size:
            raise FormatError(f"record {int(bad[0])}: polarity must be 0 or 1")
        return self

    def __eq__(self, other):
        return (
            isinstance(other, EventStream)
            and (self.width, self.height) == (other.width, other.height)
            and self.events.tobytes() == other.events.tobytes()
        )


def make_events(t, x, y, p=None):
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"] = t, x, y
    if p is not None:
        ev["p"] = p
    return ev


def events_to_bytes(stream):
    ev = np.ascontiguousarray(stream.events, dtype=EVENT_DTYPE)
    return HEADER.pack(EVENT_MAGIC, EVENT_VERSION, stream.width, stream.height, len(ev)) + ev.tobytes()


def events_from_bytes(blob, source="<bytes>"):
    if len(blob) < HEADER.size:
        raise FormatError(f"{source}: file shorter than header")
    magic, version, w, h, count = HEADER.unpack_from(blob)
    if magic != EVENT_MAGIC:
        raise FormatError(f"{source}: not a SYNE event file")
    if version != EVENT_VERSION:
        raise FormatError(f"{source}: unsupported event format version {version}")
    body = len(blob) - HEADER.size
    if body != count * EVENT_DTYPE.itemsize:
        have = body // EVENT_DTYPE.itemsize
        raise FormatError(f"{source}: header declares {count} records, file holds {have} (record {have} truncated)")
    ev = np.frombuffer(blob, dtype=EVENT_DTYPE, count=count, offset=HEADER.size).copy()
    stream = EventStream(ev, w, h)
    try:
        stream.validate()
    except FormatError as exc:
        raise FormatError(f"{source}: {exc}") from None
    return stream


def save_events(stream, path):
    stream.validate()
    Path(path).write_bytes(events_to_bytes(stream))


def load_events(path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        raise FormatError(f"{path}: use load_events_csv for CSV input")
    return events_from_bytes(path.read_bytes(), str(path))


def load_events_csv(path, width, height):
    """CSV with a ``t,x,y,p`` header row."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "x", "y", "p"]:
            raise FormatError(f"{path}: expected header t,x,y,p")
        for i, row in enumerate(reader):
            try:
                t, x, y, p = (int(v) for v in row)
            except ValueError:
                raise FormatError(f"{path}: line {i + 2} (record {i}): malformed row {row!r}") from None
            if min(t, x, y, p) < 0:
                raise FormatError(f"{path}: line {i + 2} (record {i}): negative field")
            rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    stream = EventStream(make_events(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]), width, height)
    try:
        stream.validate()
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return stream


def save_events_csv(stream, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "p"])
        for e in stream.events:
            w.writerow([int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"])])


def collapse(stream):
    """Per-pixel event counts [1, H, W] (polarity ignored)."""
    frame = np.zeros((stream.height, stream.width), dtype=np.int64)
    ev = stream.events
    np.add.at(frame, (ev["y"].astype(np.int64), ev["x"].astype(np.int64)), 1)
    return frame[None]


@dataclass
class FramePair:
    counts: np.ndarray  # [1, H, W] unclamped event counts
    events: EventStream
    label: int

    @property
    def image(self):
        """Training image: counts clamped to the 0-255 encoding."""
        return np.minimum(self.counts, PIXEL_MAX).astype(np.float32)


def accumulate_frames(stream, count=FRAME_EVENTS, label=-1):
    """Consecutive, non-overlapping slices of exactly ``count`` events; the remainder is dropped."""
    if count < 1:
        raise ConfigError("frame event count must be >= 1")
    pairs = []
    for k in range(len(stream) // count):
        sl = EventStream(stream.events[k * count : (k + 1) * count].copy(), stream.width, stream.height)
        pairs.append(FramePair(collapse(sl), sl, label))
    return pairs


def synth_events(class_id, seed, n_events=FRAME_EVENTS, sensor=(16, 16), n_classes=4, noise=0.1):
    """Deterministic toy DVS recording of class ``class_id``.

    A bar at orientation ``class_id * pi / n_classes`` drifts a few pixels
    across the sensor. Each pixel integrates the bar's intensity and emits an
    event whenever the integral crosses a unit level (a threshold-crossing
    pixel, not a Poisson source); a ``noise`` fraction of events is uniform
    background activity. The recording stops after ``n_events`` events.
    """
    if n_events < 1:
        raise ConfigError("n_events must be >= 1")
    w, h = sensor
    rng = np.random.default_rng([int(seed), int(class_id), 0x5E])
    duration_us = int(rng.integers(60_000, 100_001))
    theta = np.pi * class_id / n_classes + rng.normal(0, 0.12)
    direction = np.array([np.cos(theta), np.sin(theta)])
    normal = np.array([-direction[1], direction[0]])
    start = np.array([w, h]) / 2 + rng.uniform(-2.5, 2.5, size=2)
    drift = rng.uniform(-2, 2, size=2)
    half_len = rng.uniform(3, 5)
    width = rng.uniform(0.6, 1.0)

    n_steps = duration_us // 250
    t_grid = (np.arange(n_steps) + 1) * (duration_us / n_steps)
    px = np.stack(np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5), axis=-1).reshape(-1, 2)
    centre = start[None] + (t_grid / duration_us)[:, None] * drift[None]
    rel = px[None] - centre[:, None]
    along = np.abs(rel @ direction)
    across = rel @ normal
    intensity = np.exp(-0.5 * (across / width) ** 2) / (1 + np.exp((along - half_len) / 0.4))

    # 10% headroom so the recording reaches n_events before it ends
    n_signal = n_events - int(round(noise * n_events))
    rate = 1.1 * n_signal / max(intensity.sum(), 1e-12)
    level = np.cumsum(intensity * rate, axis=0) + rng.random(len(px))[None]
    fired = np.diff(np.floor(level), axis=0, prepend=np.floor(level[:1] - intensity[:1] * rate))
    step_idx, pix = np.nonzero(fired)
    reps = fired[step_idx, pix].astype(np.int64)
    step_idx, pix = np.repeat(step_idx, reps), np.repeat(pix, reps)
    t_sig = t_grid[step_idx] - rng.uniform(0, duration_us / n_steps, size=len(step_idx))

    n_noise = int(round(noise * n_events * 1.1))
    t_noise = rng.uniform(0, duration_us, size=n_noise)
    pix_noise = rng.integers(0, w * h, size=n_noise)

    t = np.concatenate([t_sig, t_noise])
    pix = np.concatenate([pix, pix_noise])
    order = np.argsort(t, kind="stable")[:n_events]
    t, pix = np.floor(t[order]).astype(np.uint64), pix[order]
    p = rng.integers(0, 2, size=len(t))
    return EventStream(make_events(t, pix % w, pix // w, p), w, h)


@dataclass
class AugmentConfig:
    crop_padding: int = 4
    flip_prob: float = 0.5
    normalize: bool = True
    pixel_max: float = 255.0


def hflip(batch):
    return batch[..., ::-1].copy()


def normalize_pixels(batch, pixel_max=255.0):
    """Affine map of [0, pixel_max] onto [-1, 1]."""
    return (np.asarray(batch, dtype=np.float64) * (2.0 / pixel_max) - 1.0).astype(np.float32)


def augment_images(batch, cfg, rng):
    """Random pad-and-crop, horizontal flip, then normalization. batch: [N, C, H, W]."""
    batch = np.asarray(batch)
    n, c, h, w = batch.shape
    out = np.empty(batch.shape, dtype=np.float32)
    pad = cfg.crop_padding
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else batch
    for i in range(n):
        dy, dx = (rng.integers(0, 2 * pad + 1, size=2) if pad else (0, 0))
        img = padded[i, :, dy : dy + h, dx : dx + w]
        if rng.random() < cfg.flip_prob:
            img = img[..., ::-1]
        out[i] = img
    if cfg.normalize:
        out = normalize_pixels(out, cfg.pixel_max)
    return out


def split_dataset(labels, test_fraction=0.2, seed=0):
    """Stratified, seeded split. Returns (train_indices, test_indices), each sorted."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(labels) < len(classes) or len(labels) == 0:
        raise ConfigError("fewer items than classes")
    if not 0 <= test_fraction <= 1:
        raise ConfigError("test_fraction must lie in [0, 1]")
    rng = np.random.default_rng([int(seed), 0x5F11])
    train, test = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(len(idx) * test_fraction))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return sorted(train), sorted(test)


# ---------------------------------------------------------------------------
# dataset directory: <root>/<class-id>/<sample>.bin plus manifest.json
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class Dataset:
    sensor: tuple
    class_names: list
    pairs: list
    train_idx: list
    test_idx: list
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.class_names)

    def images(self, idx):
        return np.stack([self.pairs[i].image for i in idx]).astype(np.float32)

    def labels(self, idx):
        return np.array([self.pairs[i].label for i in idx], dtype=np.int64)

    def streams(self, idx):
        return [self.pairs[i].events for i in idx]

    @property
    def train(self):
        return self.images(self.train_idx), self.labels(self.train_idx)

    @property
    def test(self):
        return self.images(self.test_idx), self.labels(self.test_idx)


def synthetic_dataset(n_classes=4, per_class=200, sensor=(16, 16), n_events=FRAME_EVENTS, seed=0,
                      test_fraction=0.2, noise=0.1):
    pairs = []
    for c in range(n_classes):
        for k in range(per_class):
            stream = synth_events(c, seed * 1_000_003 + k, n_events, sensor, n_classes, noise)
            pairs.extend(accumulate_frames(stream, n_events, label=c))
    train, test = split_dataset([p.label for p in pairs], test_fraction, seed)
    meta = {"synthetic": True, "seed": seed, "noise": noise, "frame_events": n_events}
    return Dataset(tuple(sensor), [str(c) for c in range(n_classes)], pairs, train, test, meta)


def dataset_from_streams(streams, labels, count=FRAME_EVENTS, test_fraction=0.2, seed=0, class_names=None):
    pairs = []
    for s, lab in zip(streams, labels):
        pairs.extend(accumulate_frames(s, count, label=int(lab)))
    if not pairs:
        raise ConfigError("no complete frames in the input streams")
    train, test = split_dataset([p.label for p in pairs], test_fraction, seed)
    n_classes = max(p.label for p in pairs) + 1
    names = class_names or [str(c) for c in range(n_classes)]
    s0 = streams[0]
    return Dataset((s0.width, s0.height), names, pairs, train, test, {"frame_events": count, "seed": seed})


def write_dataset(ds, root):
    """Write event slices and a manifest; byte-identical for identical datasets."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    split = {i: "train" for i in ds.train_idx}
    split.update({i: "test" for i in ds.test_idx})
    samples = []
    per_class = {}
    for i, pair in enumerate(ds.pairs):
        k = per_class.get(pair.label, 0)
        per_class[pair.label] = k + 1
        rel = f"{pair.label}/{k:05d}.bin"
        blob = events_to_bytes(pair.events)
        (root / str(pair.label)).mkdir(exist_ok=True)
        (root / rel).write_bytes(blob)
        samples.append({"path": rel, "label": pair.label, "split": split[i],
                        "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "sensor": {"width": ds.sensor[0], "height": ds.sensor[1]},
        "class_names": list(ds.class_names),
        "sample_counts": {
            "total": len(ds.pairs),
            "train": len(ds.train_idx),
            "test": len(ds.test_idx),
            "per_class": {str(k): v for k, v in sorted(per_class.items())},
        },
        "meta": ds.meta,
        "samples": samples,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root / MANIFEST


def read_dataset(root):
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root / MANIFEST}: {exc}") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{root / MANIFEST}: unsupported manifest version")
    pairs, train, test = [], [], []
    for i, s in enumerate(manifest["samples"]):
        stream = load_events(root / s["path"])
        pairs.append(FramePair(collapse(stream), stream, int(s["label"])))
        (train if s["split"] == "train" else test).append(i)
    sensor = (manifest["sensor"]["width"], manifest["sensor"]["height"])
    return Dataset(sensor, manifest["class_names"], pairs, train, test, manifest.get("meta", {}))
