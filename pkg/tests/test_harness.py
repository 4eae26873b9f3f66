import json

import numpy as np
import pytest

from synoptic import harness
from synoptic.config import ExperimentConfig
from synoptic.converter import TrainedModel
from synoptic.errors import ConfigError, TrainingDiverged
from synoptic.harness import Row, SweepReport, report_from_csv, report_to_csv
from synoptic.synops import LossConfig

from oracles import spearman

TINY = [
    "data.per_class=12", "data.sensor=[8, 8]", "data.frame_events=400",
    "network.channels=[2, 4]", "training.epochs=4", "sweep.halvings=2", "sweep.finetune_epochs=3",
    "simulation.checkpoints=[5, 10, 20]", "sweep.accuracy_floor=0.0",
]


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig().with_overrides(TINY)


@pytest.fixture(scope="module")
def ds(cfg):
    return harness.load_data(cfg)


@pytest.fixture(scope="module")
def trained(cfg, ds):
    return harness.train(cfg, ds)


@pytest.fixture(scope="module")
def sweep(cfg, ds, trained):
    return harness.sweep_synop_targets(cfg, ds, trained[0])


class TestTraining:
    """Seeded Adam training on the synthetic task."""

    def test_log_per_epoch(self, trained):
        _, hist = trained
        assert [h["epoch"] for h in hist] == [0, 1, 2, 3]
        assert all(np.isfinite(h["ce"]) for h in hist)

    def test_loss_decreases(self, trained):
        hist = trained[1]
        assert hist[-1]["ce"] < hist[0]["ce"]

    def test_deterministic(self, cfg, ds, trained):
        again, _ = harness.train(cfg, ds)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(again.weights, trained[0].weights))

    def test_metadata(self, trained):
        meta = trained[0].metadata
        assert meta["quantized"] is False and meta["loss_mode"] == "none" and meta["seed"] == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_keeps_last_good(self, cfg, ds):
        x, y = ds.train
        spec = harness.network_spec(cfg, ds)
        with pytest.raises(TrainingDiverged) as info:
            harness.train_model(spec, np.full_like(x, np.inf), y, epochs=2)
        assert isinstance(info.value.last_good, TrainedModel)
        assert all(np.isfinite(w).all() for w in info.value.last_good.weights)

    def test_spike_l1_requires_alpha(self, cfg, ds):
        x, y = ds.train
        with pytest.raises(ConfigError):
            harness.train_model(harness.network_spec(cfg, ds), x, y, epochs=1, loss=LossConfig("spike-L1"))

    def test_synop_loss_lowers_estimate(self, cfg, ds, trained):
        base = trained[0]
        target = harness.train_synops(base, ds) / 4
        x, y = ds.train
        tuned, _ = harness.train_model(base.spec, x, y, epochs=3, loss=LossConfig("synop", target), quantize=True,
                                       init=base)
        assert harness.train_synops(tuned, ds) < harness.train_synops(base, ds)


class TestEvaluate:
    """ANN and SNN paths evaluated on the same test split."""

    def test_row_fields(self, cfg, ds, trained):
        row = harness.evaluate(trained[0], ds, cfg.simulation.build(), cfg.simulation.checkpoints)
        assert 0 <= row.snn_accuracy <= 1 and 0 <= row.ann_accuracy <= 1
        assert row.total_measured == pytest.approx(sum(row.per_layer_measured) + row.input_synops_measured)
        assert row.per_layer_measured[-1] == 0.0

    def test_timecourse_monotone(self, cfg, ds, trained):
        row = harness.evaluate(trained[0], ds, cfg.simulation.build(), cfg.simulation.checkpoints)
        syn = [s for _, _, s in row.timecourse]
        assert syn == sorted(syn)
        assert row.timecourse[-1][1] == row.snn_accuracy

    def test_zero_weights_chance_row(self, cfg, ds, trained):
        zero = trained[0].copy()
        zero.weights = [np.zeros_like(w) for w in zero.weights]
        row = harness.evaluate(zero, ds, cfg.simulation.build())
        assert row.measured_synops == 0 and row.estimated_synops == 0
        assert row.null_fraction == 1.0
        assert row.snn_ties == len(ds.test_idx)
        assert row.snn_accuracy == pytest.approx(np.mean(ds.test[1] == 0))

    def test_constant_current(self, ds, trained):
        cfg = ExperimentConfig().with_overrides(TINY + ["simulation.mode=constant-current"])
        row = harness.evaluate(trained[0], ds, cfg.simulation.build())
        assert row.input_synops_measured == 0.0
        assert [t for t, _, _ in row.timecourse] == list(range(1, 11))


class TestSweep:
    """Warm-started SynOp-target chain and rho baselines."""

    def test_rows(self, sweep):
        report, models = sweep
        assert [r.model_id for r in report.rows] == ["baseline", "synop+quant-1", "synop+quant-2"]
        assert len(models) == 3

    def test_targets_halve_training_estimate(self, sweep, ds):
        report, models = sweep
        for k in (1, 2):
            assert report.rows[k].target == pytest.approx(harness.train_synops(models[k - 1], ds) / 2)

    def test_repeatable(self, cfg, ds, trained, sweep):
        again, _ = harness.sweep_synop_targets(cfg, ds, trained[0])
        assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(sweep[0].to_dict(), sort_keys=True)

    def test_rho_sweep_monotone_synops(self, cfg, ds, trained):
        rep = harness.sweep_rho(cfg, ds, trained[0], [0.25, 0.5, 1.0, 2.0])
        syn = [r.measured_synops for r in rep.rows]
        assert spearman([0.25, 0.5, 1.0, 2.0], syn) == pytest.approx(1.0)

    def test_rho_must_be_positive(self, cfg, ds, trained):
        with pytest.raises(ConfigError):
            harness.sweep_rho(cfg, ds, trained[0], [0.0])

    def test_match_budget(self, cfg, ds, trained):
        base = harness.evaluate(trained[0], ds, cfg.simulation.build())
        budget = base.measured_synops / 3
        row = harness.match_budget(cfg, ds, trained[0], budget, "rho-scaled")
        assert abs(row.measured_synops - budget) <= 0.1 * budget
        assert row.rho < 1


class TestReportExport:
    """CSV and JSON reports round-trip and carry the optional joules column."""

    @pytest.fixture
    def report(self):
        return SweepReport([
            Row("a", "baseline", None, 1.0, 10.5, 9.0, 11.25, 3.0, 3.0, 0.9, 0.875, 0.85, 2, 0.0,
                {"0.5": 0.1}, [10.5, 0.0], [11.25, 0.0], [[10.0, 0.5, 4.0]], {"1.5": {"snn_accuracy": 0.9}}),
            Row("b", "synop+quant", 123.0, 1.0, 1 / 3, 0.1, 0.2),
        ])

    def test_csv_round_trip(self, report):
        assert report_from_csv(report_to_csv(report)) == report

    def test_csv_stable(self, report):
        assert report_to_csv(report) == report_to_csv(report_from_csv(report_to_csv(report)))

    def test_json_round_trip(self, report, tmp_path):
        path = harness.emit_report(report, tmp_path / "r.json", "json")
        assert harness.read_report(path) == report

    def test_joules_column(self, report):
        text = report_to_csv(report, joules_per_synop=1e-11)
        header, first = text.splitlines()[:2]
        assert header.split(",")[-1] == "joules"
        assert float(first.split(",")[-1]) == pytest.approx(11.25e-11)
        assert report_from_csv(text) == report

    def test_json_joules(self, report, tmp_path):
        doc = json.loads(harness.emit_report(report, tmp_path / "r.json", "json", 2.0).read_text())
        assert doc["rows"][0]["joules"] == 22.5
        assert harness.read_report(tmp_path / "r.json") == report

    def test_unknown_format(self, report, tmp_path):
        with pytest.raises(ConfigError):
            harness.emit_report(report, tmp_path / "r.x", "xml")

    def test_schema_version(self):
        with pytest.raises(ConfigError):
            SweepReport.from_dict({"schema_version": 99, "rows": []})
