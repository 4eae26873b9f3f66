"""``synoptic`` command-line entry point.

Exit codes: 0 success, 1 divergence or validation failure, 2 I/O or parse
error. Data goes to stdout, diagnostics to stderr. Every command that
writes artifacts also writes ``<command>.run.json`` into ``--out`` with the
config snapshot, seed, tool version and output hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import yaml

from . import __version__, harness
from .config import load_config
from .converter import load_model, robust_normalize, save_model, scale_input_weights, scale_output_weights
from .data import dataset_from_streams, load_events, load_events_csv, synthetic_dataset, write_dataset
from .errors import ConfigError, FormatError, TrainingDiverged
from .selftest import format_table, run_selftest

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2
SEED_ENV = "SYNOPTIC_SEED"

log = logging.getLogger("synoptic")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _load_cfg(args, extra=()):
    overrides = list(args.set or []) + list(extra)
    seed = _resolve_seed(args)
    if seed is not None:
        overrides += [f"training.seed={seed}", f"data.seed={seed}"]
    try:
        cfg = load_config(args.config, overrides)
    except yaml.YAMLError as exc:
        raise FormatError(f"{args.config}: {exc}") from None
    return cfg


def _input_path(out, p):
    """Relative inputs are looked up under ``--out`` first, then the working directory."""
    p = Path(p)
    if not p.is_absolute() and (out / p).exists():
        return out / p
    return p


def _write_run_manifest(out, command, cfg, outputs, extra=None):
    doc = {
        "command": command,
        "tool_version": __version__,
        "seed": cfg.training.seed,
        "config": cfg.to_dict(),
        "outputs": {str(Path(p).relative_to(out)): _sha256(p) for p in sorted(map(str, outputs))},
    }
    doc.update(extra or {})
    path = out / f"{command}.run.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _load_dataset(cfg, args, out):
    if getattr(args, "data", None):
        cfg.data.root = str(_input_path(out, args.data))
    return harness.load_data(cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _parse_synthetic(tokens):
    opts = {"classes": None, "streams": None}
    for tok in tokens:
        key, _, val = tok.partition("=")
        if key not in opts or not val:
            raise ConfigError(f"--synthetic expects classes=K streams=N, got {tok!r}")
        try:
            opts[key] = int(val)
        except ValueError:
            raise ConfigError(f"--synthetic {key} must be an integer") from None
    return opts


def cmd_prepare_data(args, out):
    cfg = _load_cfg(args)
    d = cfg.data
    if args.synthetic is not None:
        opts = _parse_synthetic(args.synthetic)
        classes = opts["classes"] or d.classes
        per_class = opts["streams"] or d.per_class
        ds = synthetic_dataset(classes, per_class, tuple(d.sensor), d.frame_events, d.seed, d.test_fraction, d.noise)
    elif args.input:
        root = Path(args.input)
        if not root.is_dir():
            raise FileNotFoundError(f"{root}: input directory not found")
        streams, labels = [], []
        class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
        for label, cdir in enumerate(class_dirs):
            for f in sorted(cdir.iterdir()):
                if f.suffix.lower() == ".csv":
                    streams.append(load_events_csv(f, *d.sensor))
                elif f.suffix.lower() == ".bin":
                    streams.append(load_events(f))
                else:
                    continue
                labels.append(label)
        if not streams:
            raise ConfigError(f"{root}: no .bin or .csv event files under <class>/ directories")
        ds = dataset_from_streams(streams, labels, d.frame_events, d.test_fraction, d.seed,
                                  [p.name for p in class_dirs])
    else:
        raise ConfigError("prepare-data needs --input DIR or --synthetic classes=K streams=N")
    manifest = write_dataset(ds, out)
    counts = json.loads(manifest.read_text())["sample_counts"]
    _write_run_manifest(out, "prepare-data", cfg, [manifest])
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_train(args, out):
    extra = []
    if args.mode:
        extra.append(f"loss.mode={args.mode}")
    if args.target is not None:
        extra.append(f"loss.target={args.target}")
    if args.quantize:
        extra.append("training.quantize=true")
    if args.epochs is not None:
        extra.append(f"training.epochs={args.epochs}")
    cfg = _load_cfg(args, extra)
    ds = _load_dataset(cfg, args, out)
    init = load_model(_input_path(out, args.init)) if args.init else None
    model_path, log_path = out / "model.synm", out / "train-log.json"
    try:
        model, history = harness.train(cfg, ds, init)
    except TrainingDiverged as exc:
        good = out / "model.last-good.synm"
        save_model(exc.last_good, good)
        log_path.write_text(json.dumps(exc.log, indent=1) + "\n")
        _write_run_manifest(out, "train", cfg, [good, log_path], {"status": "diverged"})
        raise
    save_model(model, model_path)
    log_path.write_text(json.dumps(history, indent=1) + "\n")
    _write_run_manifest(out, "train", cfg, [model_path, log_path], {"status": "ok"})
    print(json.dumps(history[-1], sort_keys=True))
    return EXIT_OK


def cmd_convert(args, out):
    cfg = _load_cfg(args)
    model = load_model(_input_path(out, args.model))
    with warnings.catch_warnings():
        if not args.warn:
            warnings.simplefilter("ignore")
        if args.robust:
            ds = _load_dataset(cfg, args, out)
            model = robust_normalize(model, ds.train[0], cfg.conversion.percentile)
        if args.rho is not None:
            model = scale_input_weights(model, args.rho)
        if args.output_scale is not None:
            model = scale_output_weights(model, args.output_scale)
    path = out / args.name
    save_model(model, path)
    _write_run_manifest(out, "convert", cfg, [path])
    print(json.dumps(model.metadata, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args, out):
    extra = []
    if args.mode:
        extra.append(f"simulation.mode={args.mode}")
    if args.n_dt is not None:
        extra.append(f"simulation.n_dt={args.n_dt}")
    if args.dt_us is not None:
        extra.append(f"simulation.dt_us={args.dt_us}")
    cfg = _load_cfg(args, extra)
    ds = _load_dataset(cfg, args, out)
    model = load_model(_input_path(out, args.model))
    sim = cfg.simulation.build()
    checkpoints = cfg.simulation.checkpoints if sim.mode == "event-replay" else None
    row = harness.evaluate(model, ds, sim, checkpoints, cfg.conversion.compensation, Path(args.model).stem,
                           "baseline" if model.metadata.get("loss_mode", "none") == "none" else "synop")
    report = harness.SweepReport([row])
    path = harness.emit_report(report, out / "simulation.json", "json")
    _write_run_manifest(out, "simulate", cfg, [path])
    print(json.dumps(harness._row_dict(row), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args, out):
    extra = []
    if args.mode:
        extra.append(f"sweep.mode={args.mode}")
    if args.halvings is not None:
        extra.append(f"sweep.halvings={args.halvings}")
    cfg = _load_cfg(args, extra)
    ds = _load_dataset(cfg, args, out)
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    written = []

    def keep(model_id, model):
        p = models_dir / f"{model_id}.synm"
        save_model(model, p)
        written.append(p)

    if args.model:
        initial = load_model(_input_path(out, args.model))
    else:
        initial, _ = harness.train(cfg, ds)
    report, models = harness.sweep_synop_targets(cfg, ds, initial, on_model=keep)
    if args.baselines:
        rhos = cfg.conversion.rhos
        report.rows += harness.sweep_rho(cfg, ds, initial, rhos).rows
        if cfg.conversion.robust_normalize:
            robust = harness.robust_baseline(cfg, ds, initial)
            report.rows += harness.sweep_rho(cfg, ds, robust, rhos, "robust-scaled").rows
    path = harness.emit_report(report, out / "sweep.json", "json")
    _write_run_manifest(out, "sweep", cfg, [path] + written)
    print(json.dumps({"rows": len(report.rows), "report": str(path)}))
    return EXIT_OK


def cmd_report(args, out):
    cfg = _load_cfg(args)
    report = harness.read_report(_input_path(out, args.input))
    joules = cfg.report.joules_per_synop if args.joules else None
    path = harness.emit_report(report, out / f"report.{args.format}", args.format, joules)
    _write_run_manifest(out, "report", cfg, [path])
    sys.stdout.write(path.read_text())
    return EXIT_OK


def cmd_selftest(args, out):
    results = run_selftest(args.inject_fault)
    if args.json:
        print(json.dumps({"ok": all(r["ok"] for r in results), "checks": results}, sort_keys=True))
    else:
        sys.stdout.write(format_table(results))
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help=f"run seed (fallback: ${SEED_ENV})")
    common.add_argument("-s", "--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. optimizer.lr=0.001 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="synoptic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", parents=[common], help="accumulate frames, split, write a dataset")
    s.add_argument("--input", help="directory of <class>/<file>.bin|.csv event recordings")
    s.add_argument("--synthetic", nargs="*", metavar="KEY=N", help="synthetic data: classes=K streams=N")
    s.set_defaults(fn=cmd_prepare_data)

    s = sub.add_parser("train", parents=[common], help="train a network")
    s.add_argument("--data", help="prepared dataset directory (synthetic when omitted)")
    s.add_argument("--mode", choices=["none", "synop", "spike-L1"])
    s.add_argument("--target", type=float, help="SynOp target S0")
    s.add_argument("--quantize", action="store_true", help="quantized activations")
    s.add_argument("--epochs", type=int)
    s.add_argument("--init", help="warm-start model file")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("convert", parents=[common], help="scale weights for SNN transfer")
    s.add_argument("--model", required=True)
    s.add_argument("--rho", type=float, help="first-layer scale")
    s.add_argument("--robust", action="store_true", help="percentile normalization on the training split")
    s.add_argument("--output-scale", type=float, help="last-layer scale")
    s.add_argument("--data", help="calibration dataset directory")
    s.add_argument("--name", default="converted.synm", help="output file name under --out")
    s.add_argument("--warn", action="store_true", help="show quantized-scaling warnings")
    s.set_defaults(fn=cmd_convert)

    s = sub.add_parser("simulate", parents=[common], help="ANN and SNN evaluation on the test split")
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--mode", choices=["event-replay", "constant-current"])
    s.add_argument("--n-dt", type=int, help="constant-current steps")
    s.add_argument("--dt-us", type=int, help="event-replay bin width")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("sweep", parents=[common], help="SynOp-target sweep (plus optional rho baselines)")
    s.add_argument("--model", help="initial model (trained from config when omitted)")
    s.add_argument("--data")
    s.add_argument("--mode", choices=["synop", "spike-L1"])
    s.add_argument("--halvings", type=int)
    s.add_argument("--baselines", action="store_true", help="add rho-scaled and robust-scaled rows")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("report", parents=[common], help="export a sweep report")
    s.add_argument("--input", required=True, help="report file (.json or .csv)")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--joules", action="store_true", help="add a joules column")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("selftest", parents=[common], help="fast invariant checks")
    s.add_argument("--json", action="store_true", help="machine-readable output")
    s.add_argument("--inject-fault", choices=["gradients", "quantization-equivalence", "fanout", "round-trips"],
                   help="corrupt one check (testing the failure path)")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.command != "selftest":
            out.mkdir(parents=True, exist_ok=True)
        return args.fn(args, out)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
