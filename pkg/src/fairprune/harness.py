"""Config-driven experiment sweeps over pruning rate x regime x seed, the
group-upsampling ablation, and plot-ready CSV/JSON report emission.

A sweep trains once per (seed, regime-prefix), prunes at every rate, audits,
and aggregates across seeds with mean and sample standard deviation. Cell
failures are recorded and skipped; a sweep is a batch job, not a
transaction. Outputs are deterministic functions of the config, and the
config is echoed into the JSON outputs for provenance.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ColumnSchema, Dataset, SynthSpec, load_csv, synth_gaussian_groups, upsample_group
from .fairaudit import AuditOptions, group_grad_norm
from .mitigator import REGIMES, MitigationOptions, RegimeResult, finish_regime, train_prefix
from .netcore import ModelSpec, TrainConfig, init_model, train

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SweepRow",
    "SweepReport",
    "AblationRow",
    "AblationReport",
    "load_dataset",
    "run_sweep",
    "run_upsample_ablation",
    "emit",
    "resolve_output_dir",
]

OUTPUT_ROOT_ENV = "FAIRPRUNE_OUTPUT_ROOT"

NORMALIZATIONS = ("none", "minmax_per_sweep")

# fixed CSV column order for sweep rows
SWEEP_COLUMNS = (
    "seed", "rate", "regime", "group", "size", "loss", "accuracy", "grad_norm",
    "hess_max_eig", "boundary_term", "excessive_loss", "bound_first",
    "bound_second", "bound_total", "residual", "xi_loss", "xi_acc", "flags",
)

# the subset of columns treated as metrics for aggregation / normalization
METRIC_COLUMNS = (
    "loss", "accuracy", "grad_norm", "hess_max_eig", "boundary_term",
    "excessive_loss", "bound_first", "bound_second", "bound_total",
    "residual", "xi_loss", "xi_acc",
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep needs: data source, model, training, mitigation,
    the rate grid, the regime subset, and the seed list."""

    model: ModelSpec
    train: TrainConfig
    rates: tuple[float, ...]
    seeds: tuple[int, ...]
    synth: SynthSpec | None = None
    csv_path: str | None = None
    csv_group_column: str = "group"
    csv_label_column: str = "label"
    regimes: tuple[str, ...] = ("no_mitigation",)
    mitigation: MitigationOptions = field(default_factory=MitigationOptions)
    audit: AuditOptions = field(default_factory=AuditOptions)
    output_dir: str = "out"
    normalization: str = "none"

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        if not rates or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError("rates must be a nonempty strictly ascending list")
        if rates[0] < 0.0 or rates[-1] > 1.0:
            raise ConfigError("rates must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if (self.synth is None) == (self.csv_path is None):
            raise ConfigError("configure exactly one of synth / csv_path")
        bad = [r for r in self.regimes if r not in REGIMES]
        if bad or not self.regimes:
            raise ConfigError(f"regimes must be a nonempty subset of {REGIMES}, got {self.regimes}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "regimes", tuple(self.regimes))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "rates": list(self.rates),
            "seeds": list(self.seeds),
            "synth": None if self.synth is None else {
                "group_proportions": list(self.synth.group_proportions),
                "class_separation": _scalar_or_list(self.synth.class_separation),
                "noise_scale": _scalar_or_list(self.synth.noise_scale),
                "n_total": self.synth.n_total,
                "dims": self.synth.dims,
                "n_classes": self.synth.n_classes,
                "seed": self.synth.seed,
            },
            "csv_path": self.csv_path,
            "csv_group_column": self.csv_group_column,
            "csv_label_column": self.csv_label_column,
            "regimes": list(self.regimes),
            "mitigation": self.mitigation.to_dict(),
            "audit": {
                "with_hessian": self.audit.with_hessian,
                "eig_tol": self.audit.eig_tol,
                "eig_max_iters": self.audit.eig_max_iters,
                "eig_seed": self.audit.eig_seed,
                "eig_restarts": self.audit.eig_restarts,
            },
            "output_dir": self.output_dir,
            "normalization": self.normalization,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        try:
            synth = None
            if d.get("synth") is not None:
                s = dict(d["synth"])
                s["group_proportions"] = tuple(s["group_proportions"])
                for key in ("class_separation", "noise_scale"):
                    if isinstance(s[key], (list, tuple)):
                        s[key] = tuple(s[key])
                synth = SynthSpec(**s)
            return ExperimentConfig(
                model=ModelSpec.from_dict(d["model"]),
                train=TrainConfig.from_dict(d["train"]),
                rates=tuple(d["rates"]),
                seeds=tuple(d["seeds"]),
                synth=synth,
                csv_path=d.get("csv_path"),
                csv_group_column=d.get("csv_group_column", "group"),
                csv_label_column=d.get("csv_label_column", "label"),
                regimes=tuple(d.get("regimes", ("no_mitigation",))),
                mitigation=MitigationOptions.from_dict(d.get("mitigation", {})),
                audit=AuditOptions(**d.get("audit", {})),
                output_dir=d.get("output_dir", "out"),
                normalization=d.get("normalization", "none"),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @staticmethod
    def from_json_file(path: str | Path) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return ExperimentConfig.from_dict(payload)


def _scalar_or_list(v):
    if isinstance(v, (tuple, list)):
        return [float(x) for x in v]
    return float(v)


def resolve_output_dir(path: str | Path) -> Path:
    """Resolve an output directory, honoring the output-root env override
    for relative paths."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synth is not None:
        return synth_gaussian_groups(cfg.synth)
    schema = ColumnSchema(cfg.csv_group_column, cfg.csv_label_column)
    return load_csv(cfg.csv_path, schema)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    seed: int
    rate: float
    regime: str
    group: str
    size: int
    loss: float
    accuracy: float
    grad_norm: float
    hess_max_eig: float
    boundary_term: float
    excessive_loss: float
    bound_first: float
    bound_second: float
    bound_total: float
    residual: float
    xi_loss: float
    xi_acc: float
    flags: str


@dataclass(frozen=True)
class CellFailure:
    seed: int
    rate: float
    regime: str
    error: str


@dataclass(frozen=True)
class SweepReport:
    config: dict
    rows: tuple[SweepRow, ...]
    aggregates: tuple[dict, ...]
    failures: tuple[CellFailure, ...]

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": list(self.aggregates),
            "failures": [asdict(f) for f in self.failures],
        }

    @staticmethod
    def from_dict(d: dict) -> "SweepReport":
        return SweepReport(
            config=d["config"],
            rows=tuple(SweepRow(**r) for r in d["rows"]),
            aggregates=tuple(d["aggregates"]),
            failures=tuple(CellFailure(**f) for f in d["failures"]),
        )


def _rows_from_cell(seed: int, result: RegimeResult) -> list[SweepRow]:
    taylor_by_group = {t.group_id: t for t in result.audit.taylor}
    xi_loss = result.audit.violation.loss_based
    xi_acc = result.audit.violation.accuracy_based
    rows = []
    for g in result.audit.groups:
        t = taylor_by_group.get(g.group_id)
        rows.append(SweepRow(
            seed=seed,
            rate=result.rate,
            regime=result.regime,
            group=g.group_name,
            size=g.size,
            loss=g.loss,
            accuracy=g.accuracy,
            grad_norm=g.grad_norm,
            hess_max_eig=g.hessian_max_eig,
            boundary_term=math.nan if g.mean_boundary_term is None else g.mean_boundary_term,
            excessive_loss=g.excessive_loss,
            bound_first=t.first_order if t else math.nan,
            bound_second=t.second_order if t else math.nan,
            bound_total=t.bound_total if t else math.nan,
            residual=t.residual if t else math.nan,
            xi_loss=xi_loss,
            xi_acc=xi_acc,
            flags=";".join(g.flags),
        ))
    return rows


def _aggregate(rows: Sequence[SweepRow]) -> tuple[dict, ...]:
    """Mean and sample standard deviation of every metric across seeds, per
    (rate, regime, group)."""
    cells: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        cells.setdefault((r.rate, r.regime, r.group), []).append(r)
    out = []
    for (rate, regime_id, group), members in sorted(cells.items(), key=lambda kv: (
            kv[0][0], kv[0][1], kv[0][2])):
        entry: dict = {
            "rate": rate, "regime": regime_id, "group": group,
            "n_seeds": len(members),
        }
        for col in METRIC_COLUMNS:
            vals = np.array([getattr(m, col) for m in members], dtype=np.float64)
            entry[f"{col}_mean"] = float(np.mean(vals))
            if len(vals) > 1:
                entry[f"{col}_std"] = float(np.std(vals, ddof=1))
            else:
                entry[f"{col}_std"] = math.nan
        out.append(entry)
    return tuple(out)


def run_sweep(cfg: ExperimentConfig) -> SweepReport:
    """Train per (seed, regime-prefix), prune at each rate, audit each cell.

    Prefix training is shared: no_mitigation and fair_after reuse the plain
    run; fair_before and fair_both reuse the fair run. Per-cell failures are
    recorded and the sweep continues.
    """
    ds = load_dataset(cfg)
    rows: list[SweepRow] = []
    failures: list[CellFailure] = []
    for seed in cfg.seeds:
        tcfg = replace(cfg.train, seed=seed)
        prefixes: dict[bool, tuple] = {}
        for regime_id in cfg.regimes:
            fair = regime_id in ("fair_before", "fair_both")
            if fair not in prefixes:
                try:
                    prefixes[fair] = train_prefix(cfg.model, ds, tcfg, fair, cfg.mitigation)
                except Exception as exc:  # noqa: BLE001 - isolate the whole prefix
                    prefixes[fair] = exc
            prefix = prefixes[fair]
            if isinstance(prefix, Exception):
                for rate in cfg.rates:
                    failures.append(CellFailure(seed, float(rate), regime_id, repr(prefix)))
                continue
            prefix_params, pre_state = prefix
            for rate in cfg.rates:
                try:
                    cell = finish_regime(
                        cfg.model, ds, tcfg, regime_id, rate, prefix_params,
                        cfg.mitigation, cfg.audit, pre_state,
                    )
                    rows.extend(_rows_from_cell(seed, cell))
                except Exception as exc:  # noqa: BLE001 - isolate the cell
                    failures.append(CellFailure(seed, float(rate), regime_id, repr(exc)))
    return SweepReport(
        config=cfg.to_dict(),
        rows=tuple(rows),
        aggregates=_aggregate(rows),
        failures=tuple(failures),
    )


# ---------------------------------------------------------------------------
# group-upsampling ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    seed: int
    factor: int
    group: str
    group_id: int
    size: int
    grad_norm: float


@dataclass(frozen=True)
class AblationReport:
    config: dict
    upsampled_group: int
    factors: tuple[int, ...]
    rows: tuple[AblationRow, ...]

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "config": self.config,
            "upsampled_group": self.upsampled_group,
            "factors": list(self.factors),
            "rows": [asdict(r) for r in self.rows],
        }

    @staticmethod
    def from_dict(d: dict) -> "AblationReport":
        return AblationReport(
            config=d["config"],
            upsampled_group=d["upsampled_group"],
            factors=tuple(d["factors"]),
            rows=tuple(AblationRow(**r) for r in d["rows"]),
        )


def run_upsample_ablation(
    cfg: ExperimentConfig,
    group_id: int,
    factors: Sequence[int] = (1, 5, 10, 20),
) -> AblationReport:
    """Duplicate one group by each factor, retrain, and record every group's
    final full-batch gradient norm."""
    ds = load_dataset(cfg)
    if not 0 <= group_id < ds.n_groups:
        raise ConfigError(f"unknown group id {group_id}")
    rows: list[AblationRow] = []
    for seed in cfg.seeds:
        tcfg = replace(cfg.train, seed=seed)
        for factor in factors:
            ds_f = upsample_group(ds, group_id, int(factor), seed=seed)
            params = train(cfg.model, init_model(cfg.model, seed), ds_f, tcfg).params
            sizes = ds_f.group_sizes()
            for a in range(ds_f.n_groups):
                rows.append(AblationRow(
                    seed=seed,
                    factor=int(factor),
                    group=ds_f.group_name(a),
                    group_id=a,
                    size=int(sizes[a]),
                    grad_norm=group_grad_norm(cfg.model, params, ds_f, a),
                ))
    return AblationReport(
        config=cfg.to_dict(),
        upsampled_group=group_id,
        factors=tuple(int(f) for f in factors),
        rows=tuple(rows),
    )


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _minmax_normalize(rows: list[dict]) -> tuple[list[dict], dict]:
    """Map each metric column onto [0, 1] over the sweep; constant columns
    map to 0. Returns the normalized rows and the stored (min, max) ranges."""
    ranges: dict[str, tuple[float, float]] = {}
    out = [dict(r) for r in rows]
    for col in METRIC_COLUMNS:
        vals = np.array([r[col] for r in rows], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        if finite.size == 0:
            continue
        lo, hi = float(finite.min()), float(finite.max())
        ranges[col] = (lo, hi)
        span = hi - lo
        for r in out:
            v = r[col]
            if np.isfinite(v):
                r[col] = (v - lo) / span if span > 0 else 0.0
    return out, ranges


def emit(report, out_dir: str | Path, formats: Sequence[str] = ("json", "csv")) -> dict[str, Path]:
    """Write a report to disk.

    Sweep reports produce sweep.csv (raw rows), sweep_aggregate.csv, and
    sweep.json (config echo, rows, aggregates, failures); with min-max
    normalization configured, also sweep_normalized.csv plus the stored
    per-column ranges in the JSON. Ablation reports produce
    ablation.csv/.json. Returns the written paths keyed by artifact name.
    """
    bad = [f for f in formats if f not in ("json", "csv")]
    if bad:
        raise ValueError(f"unknown formats {bad}; choose from json, csv")
    out_dir = resolve_output_dir(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    if isinstance(report, SweepReport):
        payload = report.to_dict()
        row_dicts = payload["rows"]
        normalization = report.config.get("normalization", "none")
        if normalization == "minmax_per_sweep":
            normalized, ranges = _minmax_normalize(row_dicts)
            payload["normalization_ranges"] = {k: list(v) for k, v in ranges.items()}
        if "csv" in formats:
            path = out_dir / "sweep.csv"
            _write_csv(path, SWEEP_COLUMNS, row_dicts)
            written["sweep_csv"] = path
            agg_cols = (["rate", "regime", "group", "n_seeds"]
                        + [f"{c}_{s}" for c in METRIC_COLUMNS for s in ("mean", "std")])
            agg_path = out_dir / "sweep_aggregate.csv"
            _write_csv(agg_path, agg_cols, list(report.aggregates))
            written["aggregate_csv"] = agg_path
            if normalization == "minmax_per_sweep":
                npath = out_dir / "sweep_normalized.csv"
                _write_csv(npath, SWEEP_COLUMNS, normalized)
                written["normalized_csv"] = npath
        if "json" in formats:
            jpath = out_dir / "sweep.json"
            jpath.write_text(json.dumps(payload, indent=2), encoding="utf-8")
            written["json"] = jpath
        return written

    if isinstance(report, AblationReport):
        payload = report.to_dict()
        if "csv" in formats:
            cols = ("seed", "factor", "group", "group_id", "size", "grad_norm")
            path = out_dir / "ablation.csv"
            _write_csv(path, cols, payload["rows"])
            written["ablation_csv"] = path
        if "json" in formats:
            jpath = out_dir / "ablation.json"
            jpath.write_text(json.dumps(payload, indent=2), encoding="utf-8")
            written["json"] = jpath
        return written

    raise TypeError(f"cannot emit report of type {type(report).__name__}")
