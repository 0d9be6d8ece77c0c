"""Sweep orchestration, report emission, the upsampling ablation, and the
command-line interface."""

import csv
import json

import numpy as np
import pytest

from fairprune.cli import main as cli_main
from fairprune.data import SynthSpec, synth_gaussian_groups, upsample_group
from fairprune.fairaudit import AuditOptions, group_grad_norm
from fairprune.harness import (
    ConfigError,
    ExperimentConfig,
    SweepReport,
    emit,
    run_sweep,
    run_upsample_ablation,
)
from fairprune.mitigator import MitigationOptions, regime
from fairprune.netcore import ModelSpec, TrainConfig, init_model, train


def small_config(**overrides) -> ExperimentConfig:
    base = dict(
        model=ModelSpec((4, 6, 2)),
        train=TrainConfig(learning_rate=0.3, epochs=8, batch_size=30, seed=0),
        rates=(0.3, 0.6),
        seeds=(0,),
        synth=SynthSpec((0.5, 0.3, 0.2), 2.5, 1.0, 90, 4, 2, seed=3),
        regimes=("no_mitigation",),
        audit=AuditOptions(with_hessian=False),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestExperimentConfig:
    def test_rates_must_ascend(self):
        with pytest.raises(ConfigError, match="ascending"):
            small_config(rates=(0.5, 0.2))

    def test_needs_exactly_one_data_source(self):
        with pytest.raises(ConfigError, match="exactly one"):
            small_config(csv_path="also.csv")

    def test_unknown_regime(self):
        with pytest.raises(ConfigError, match="regimes"):
            small_config(regimes=("no_mitigation", "extra_hard"))

    def test_round_trips_through_dict(self):
        cfg = small_config(regimes=("no_mitigation", "fair_after"))
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


class TestRunSweep:
    def test_row_cardinality(self):
        cfg = small_config(rates=(0.5,), seeds=(1,))
        report = run_sweep(cfg)
        assert len(report.rows) == 3  # one regime, one rate, one seed, m=3
        assert not report.failures

    def test_row_accounting(self):
        cfg = small_config(rates=(0.2, 0.8), seeds=(0, 1),
                           regimes=("no_mitigation", "fair_after"),
                           mitigation=MitigationOptions(retrain_epochs=2))
        report = run_sweep(cfg)
        assert len(report.rows) == 2 * 2 * 2 * 3 - 3 * len(report.failures)

    def test_rate_zero_rows_have_zero_loss_violation(self):
        cfg = small_config(rates=(0.0, 0.5))
        report = run_sweep(cfg)
        for row in report.rows:
            if row.rate == 0.0:
                assert row.xi_loss == 0.0

    def test_prefix_sharing_matches_standalone_regimes(self):
        """Sharing the trained prefix across rates never changes any cell."""
        cfg = small_config(rates=(0.3, 0.7), seeds=(2,),
                           regimes=("no_mitigation", "fair_after"),
                           mitigation=MitigationOptions(retrain_epochs=3))
        report = run_sweep(cfg)
        ds = synth_gaussian_groups(cfg.synth)
        from dataclasses import replace
        tcfg = replace(cfg.train, seed=2)
        for regime_id in cfg.regimes:
            for rate in cfg.rates:
                standalone = regime(cfg.model, ds, tcfg, regime_id, rate,
                                    cfg.mitigation, cfg.audit)
                rows = [r for r in report.rows
                        if r.regime == regime_id and r.rate == rate]
                for row, g in zip(rows, standalone.audit.groups):
                    assert row.excessive_loss == g.excessive_loss
                    assert row.accuracy == g.accuracy
                    assert row.xi_acc == standalone.audit.violation.accuracy_based

    def test_failures_recorded_not_raised(self):
        cfg = small_config(
            model=ModelSpec((4, 2), output="linear", loss_kind="mse"),
            train=TrainConfig(learning_rate=1e200, epochs=3, batch_size=30, seed=0),
        )
        report = run_sweep(cfg)
        assert report.failures
        assert all("DivergenceError" in f.error for f in report.failures)


class TestEmit:
    def test_deterministic_csv_bytes(self, tmp_path):
        cfg = small_config()
        a = emit(run_sweep(cfg), tmp_path / "a")
        b = emit(run_sweep(cfg), tmp_path / "b")
        assert a["sweep_csv"].read_bytes() == b["sweep_csv"].read_bytes()
        assert a["json"].read_bytes() == b["json"].read_bytes()

    def test_empty_report_writes_header_only(self, tmp_path):
        report = SweepReport(config=small_config().to_dict(), rows=(),
                             aggregates=(), failures=())
        written = emit(report, tmp_path)
        lines = written["sweep_csv"].read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("seed,rate,regime,group,")

    def test_json_round_trip(self, tmp_path):
        cfg = small_config(
            model=ModelSpec((4, 5, 1), output="sigmoid_binary",
                            loss_kind="binary_cross_entropy"),
            audit=AuditOptions(with_hessian=True, eig_max_iters=500),
            seeds=(0, 1), rates=(0.4,),
        )
        report = run_sweep(cfg)
        written = emit(report, tmp_path)
        back = SweepReport.from_dict(json.loads(written["json"].read_text()))
        assert back == report

    def test_minmax_normalization(self, tmp_path):
        cfg = small_config(normalization="minmax_per_sweep", seeds=(0, 1))
        report = run_sweep(cfg)
        written = emit(report, tmp_path)
        payload = json.loads(written["json"].read_text())
        ranges = payload["normalization_ranges"]
        assert "accuracy" in ranges and len(ranges["accuracy"]) == 2
        with written["normalized_csv"].open() as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                for col in ("loss", "accuracy", "grad_norm", "excessive_loss"):
                    value = float(row[col])
                    if np.isfinite(value):
                        assert -1e-12 <= value <= 1.0 + 1e-12
        # raw CSV still emitted alongside
        assert written["sweep_csv"].exists()

    def test_output_root_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FAIRPRUNE_OUTPUT_ROOT", str(tmp_path / "rooted"))
        report = SweepReport(config=small_config().to_dict(), rows=(),
                             aggregates=(), failures=())
        written = emit(report, "rel_out")
        assert written["sweep_csv"].is_relative_to(tmp_path / "rooted")

    def test_unknown_format_rejected(self, tmp_path):
        report = SweepReport(config=small_config().to_dict(), rows=(),
                             aggregates=(), failures=())
        with pytest.raises(ValueError, match="unknown formats"):
            emit(report, tmp_path, formats=("yaml",))


class TestUpsampleAblation:
    def test_factor_one_matches_baseline_training(self):
        cfg = small_config(rates=(0.5,), seeds=(3,))
        report = run_upsample_ablation(cfg, group_id=2, factors=(1, 5))
        ds = synth_gaussian_groups(cfg.synth)
        from dataclasses import replace
        tcfg = replace(cfg.train, seed=3)
        params = train(cfg.model, init_model(cfg.model, 3), ds, tcfg).params
        for row in report.rows:
            if row.factor == 1:
                expected = group_grad_norm(cfg.model, params, ds, row.group_id)
                assert row.grad_norm == expected

    def test_upsampled_sizes_recorded(self):
        cfg = small_config(rates=(0.5,), seeds=(0,))
        report = run_upsample_ablation(cfg, group_id=2, factors=(1, 5))
        ds = synth_gaussian_groups(cfg.synth)
        base = int(ds.group_sizes()[2])
        sizes = {r.factor: r.size for r in report.rows if r.group_id == 2}
        assert sizes == {1: base, 5: 5 * base}

    def test_emit_ablation(self, tmp_path):
        cfg = small_config(rates=(0.5,), seeds=(0,))
        report = run_upsample_ablation(cfg, group_id=0, factors=(1,))
        written = emit(report, tmp_path)
        lines = written["ablation_csv"].read_text().strip().splitlines()
        assert lines[0] == "seed,factor,group,group_id,size,grad_norm"
        assert len(lines) == 1 + 3

    def test_unknown_group(self):
        cfg = small_config()
        with pytest.raises(ConfigError, match="unknown group"):
            run_upsample_ablation(cfg, group_id=7)


class TestCli:
    def _write_sweep_config(self, tmp_path, **overrides):
        payload = small_config(**overrides).to_dict()
        payload["output_dir"] = str(tmp_path / "out")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(payload))
        return path

    def test_generate_train_prune_audit_pipeline(self, tmp_path):
        data_dir = tmp_path / "data"
        rc = cli_main([
            "generate-data", "--out", str(data_dir),
            "--proportions", "0.6,0.4", "--separation", "2.5", "--noise", "1.0",
            "--n-total", "80", "--dims", "4", "--classes", "2", "--seed", "5",
        ])
        assert rc == 0
        assert (data_dir / "data.csv").exists()
        assert (data_dir / "manifest.json").exists()

        params_path = tmp_path / "model.params"
        rc = cli_main([
            "train", "--data", str(data_dir / "data.csv"),
            "--layers", "4,6,2", "--lr", "0.3", "--epochs", "5",
            "--batch-size", "20", "--seed", "0", "--out", str(params_path),
        ])
        assert rc == 0
        assert params_path.exists()

        pruned_path = tmp_path / "pruned.params"
        rc = cli_main([
            "prune", "--params", str(params_path), "--rate", "0.5",
            "--out", str(pruned_path), "--mask-out", str(tmp_path / "mask.bin"),
        ])
        assert rc == 0

        report_path = tmp_path / "audit.json"
        rc = cli_main([
            "audit", "--data", str(data_dir / "data.csv"),
            "--orig", str(params_path), "--pruned", str(pruned_path),
            "--out", str(report_path), "--no-hessian",
        ])
        assert rc == 0
        payload = json.loads(report_path.read_text())
        assert "violation" in payload

    def test_sweep_command(self, tmp_path):
        config = self._write_sweep_config(tmp_path)
        rc = cli_main(["sweep", "--config", str(config)])
        assert rc == 0
        assert (tmp_path / "out" / "sweep.csv").exists()
        assert (tmp_path / "out" / "sweep.json").exists()

    def test_sweep_partial_failure_exit_code(self, tmp_path):
        config = self._write_sweep_config(
            tmp_path,
            model=ModelSpec((4, 2), output="linear", loss_kind="mse"),
            train=TrainConfig(learning_rate=1e200, epochs=3, batch_size=30, seed=0),
        )
        rc = cli_main(["sweep", "--config", str(config)])
        assert rc == 2

    def test_config_error_exit_code(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert cli_main(["sweep", "--config", str(path)]) == 1

    def test_mitigate_command(self, tmp_path):
        data_dir = tmp_path / "data"
        cli_main([
            "generate-data", "--out", str(data_dir),
            "--proportions", "0.7,0.3", "--separation", "2.0", "--noise", "1.0",
            "--n-total", "60", "--dims", "3", "--classes", "2", "--seed", "1",
        ])
        out = tmp_path / "fair.params"
        rc = cli_main([
            "mitigate", "--data", str(data_dir / "data.csv"),
            "--layers", "3,4,2", "--lr", "0.3", "--epochs", "4",
            "--batch-size", "20", "--seed", "0", "--out", str(out),
        ])
        assert rc == 0
        assert out.exists()
        assert (tmp_path / "fair.params.mitigation.json").exists()

    def test_ablate_command(self, tmp_path):
        config = self._write_sweep_config(tmp_path)
        rc = cli_main([
            "ablate-upsample", "--config", str(config), "--group", "0",
            "--factors", "1,2",
        ])
        assert rc == 0
        assert (tmp_path / "out" / "ablation.csv").exists()
