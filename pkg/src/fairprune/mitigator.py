"""Fair training via a Lagrangian-dual penalty on group-vs-population loss
gaps, plus monitoring (not optimizing) the gradient-norm and Hessian-
eigenvalue equality targets those gaps stand in for.

The constrained problem equalizes every group's loss with the population
loss. Each epoch alternates a primal pass, minimizing

    J(theta; D) + sum_a lambda_a * |J(theta; D_a) - J(theta; D)|

by SGD over mini-batches, with a dual ascent step

    lambda_a <- lambda_a + s * |J(theta; D_a) - J(theta; D)|

on the full-dataset violations. Folding the equality constraint through an
absolute value keeps the dual update sign-free, so multipliers start at zero
and never decrease. Directly constraining per-group gradient norms or
Hessian eigenvalues would require differentiating through them at every
step, which is far too expensive; those quantities are therefore only
monitored, via the same audit code paths.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .fairaudit import (
    AuditOptions,
    AuditResult,
    audit,
    group_grad_norm,
    group_hessian_max_eig,
)
from .netcore import (
    ModelSpec,
    ParamVector,
    TrainConfig,
    _run_sgd,
    dataset_tensors,
    forward_raw_t,
    init_model,
    per_sample_losses_t,
    train,
)
from .pruner import PruneMask, magnitude_prune

__all__ = [
    "REGIMES",
    "MitigationOptions",
    "MitigationState",
    "Eq5Record",
    "RegimeResult",
    "fair_train",
    "monitor_eq5_constraints",
    "regime",
    "train_prefix",
    "finish_regime",
]

REGIMES = ("no_mitigation", "fair_before", "fair_after", "fair_both")


@dataclass(frozen=True)
class MitigationOptions:
    """Dual step size, multiplier cap, and the post-prune retraining budget.

    `retrain_epochs` of None means a quarter of the primary epoch budget
    (rounded, at least 1); an explicit 0 disables post-prune retraining.
    """

    lagrangian_step: float = 0.001
    multiplier_cap: float = 100.0
    retrain_fraction: float = 0.25
    retrain_epochs: int | None = None
    retrain_seed_offset: int = 1

    def __post_init__(self):
        if self.lagrangian_step < 0:
            raise ValueError("lagrangian_step must be >= 0")
        if self.multiplier_cap <= 0:
            raise ValueError("multiplier_cap must be > 0")

    def resolve_retrain_epochs(self, train_epochs: int) -> int:
        if self.retrain_epochs is not None:
            return self.retrain_epochs
        return max(1, int(round(self.retrain_fraction * train_epochs)))

    def to_dict(self) -> dict:
        return {
            "lagrangian_step": self.lagrangian_step,
            "multiplier_cap": self.multiplier_cap,
            "retrain_fraction": self.retrain_fraction,
            "retrain_epochs": self.retrain_epochs,
            "retrain_seed_offset": self.retrain_seed_offset,
        }

    @staticmethod
    def from_dict(d: dict) -> "MitigationOptions":
        return MitigationOptions(**d)


@dataclass(frozen=True)
class MitigationState:
    """Final multipliers and the per-epoch group-violation trajectory."""

    multipliers: np.ndarray
    lagrangian_step: float
    violation_history: tuple[np.ndarray, ...]

    def to_dict(self) -> dict:
        return {
            "multipliers": [float(v) for v in self.multipliers],
            "lagrangian_step": self.lagrangian_step,
            "violation_history": [[float(v) for v in row] for row in self.violation_history],
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path


def fair_train(
    spec: ModelSpec,
    params: ParamVector,
    ds: Dataset,
    cfg: TrainConfig,
    options: MitigationOptions | None = None,
    *,
    mask: np.ndarray | None = None,
) -> tuple[ParamVector, MitigationState]:
    """Alternate penalized primal SGD epochs with additive dual updates.

    Per-batch penalties use the batch's own group and population losses (a
    group absent from a batch contributes nothing); dual updates use the
    full dataset once per epoch. With all multipliers at zero the batch loss
    reduces to the plain risk, so a zero dual step reproduces `train`
    exactly. Multipliers exceeding the cap are clipped with a warning. An
    optional keep-mask freezes pruned coordinates, as in `train`.
    """
    opts = options or MitigationOptions()
    m = ds.n_groups
    if m < 2:
        raise ValueError("fair_train needs at least 2 groups")
    layout = params.layout
    multipliers = np.zeros(m, dtype=np.float64)
    history: list[np.ndarray] = []
    capped = [False]
    X_full, y_full = dataset_tensors(ds)
    g_full = torch.from_numpy(np.array(ds.groups, dtype=np.int64))

    def batch_loss(theta, Xb, yb, gb):
        per = per_sample_losses_t(spec, forward_raw_t(spec, theta, layout, Xb), yb)
        base = per.mean()
        if not np.any(multipliers > 0.0):
            return base
        total = base
        for a in torch.unique(gb).tolist():
            lam = multipliers[a]
            if lam > 0.0:
                total = total + lam * torch.abs(per[gb == a].mean() - base)
        return total

    def after_epoch(epoch: int, theta: torch.Tensor) -> None:
        del epoch
        with torch.no_grad():
            per = per_sample_losses_t(
                spec, forward_raw_t(spec, theta, layout, X_full), y_full
            )
            j_full = per.mean()
            gaps = np.array(
                [abs(float(per[g_full == a].mean() - j_full)) for a in range(m)]
            )
        history.append(gaps)
        multipliers[:] = multipliers + opts.lagrangian_step * gaps
        over = multipliers > opts.multiplier_cap
        if np.any(over):
            multipliers[over] = opts.multiplier_cap
            if not capped[0]:
                capped[0] = True
                warnings.warn(
                    f"multiplier cap {opts.multiplier_cap} reached for groups "
                    f"{np.flatnonzero(over).tolist()}",
                    stacklevel=2,
                )

    result = _run_sgd(
        spec, params, ds, cfg, mask=mask, batch_loss_fn=batch_loss,
        after_epoch=after_epoch,
    )
    state = MitigationState(multipliers.copy(), opts.lagrangian_step, tuple(history))
    return result.params, state


@dataclass(frozen=True)
class Eq5Record:
    """Per-group gap between group and population first/second-order stats."""

    group_id: int
    grad_norm: float
    grad_norm_full: float
    grad_gap: float
    hess_eig: float
    hess_eig_full: float
    hess_gap: float
    eig_converged: bool


def monitor_eq5_constraints(
    spec: ModelSpec,
    params: ParamVector,
    ds: Dataset,
    *,
    with_hessian: bool = True,
    eig_tol: float = 1e-8,
    eig_max_iters: int = 2000,
    eig_seed: int = 0,
    eig_restarts: int = 3,
) -> list[Eq5Record]:
    """Report |group grad norm - full grad norm| and the matching Hessian
    eigenvalue gaps. Shares code paths with the audit metrics, so the values
    agree exactly with independently computed ones."""
    full_grad = group_grad_norm(spec, params, ds, None)
    full_eig_value, full_conv = np.nan, True
    if with_hessian:
        full_eig = group_hessian_max_eig(
            spec, params, ds, None, tol=eig_tol, max_iters=eig_max_iters,
            seed=eig_seed, restarts=eig_restarts,
        )
        full_eig_value, full_conv = full_eig.value, full_eig.converged
    records = []
    for a in range(ds.n_groups):
        gn = group_grad_norm(spec, params, ds, a)
        eig_value, conv = np.nan, True
        if with_hessian:
            est = group_hessian_max_eig(
                spec, params, ds, a, tol=eig_tol, max_iters=eig_max_iters,
                seed=eig_seed, restarts=eig_restarts,
            )
            eig_value, conv = est.value, est.converged
        records.append(Eq5Record(
            group_id=a,
            grad_norm=gn,
            grad_norm_full=full_grad,
            grad_gap=abs(gn - full_grad),
            hess_eig=eig_value,
            hess_eig_full=full_eig_value,
            hess_gap=abs(eig_value - full_eig_value) if with_hessian else np.nan,
            eig_converged=conv and full_conv,
        ))
    return records


@dataclass(frozen=True)
class RegimeResult:
    regime: str
    rate: float
    orig_params: ParamVector
    final_params: ParamVector
    mask: PruneMask
    audit: AuditResult
    pre_state: MitigationState | None
    post_state: MitigationState | None


def train_prefix(
    spec: ModelSpec,
    ds: Dataset,
    cfg: TrainConfig,
    fair: bool,
    options: MitigationOptions | None = None,
) -> tuple[ParamVector, MitigationState | None]:
    """The shared pre-pruning stage: plain or fair training from a seeded
    initialization."""
    init = init_model(spec, cfg.seed)
    if fair:
        return fair_train(spec, init, ds, cfg, options)
    return train(spec, init, ds, cfg).params, None


def finish_regime(
    spec: ModelSpec,
    ds: Dataset,
    cfg: TrainConfig,
    regime_id: str,
    rate: float,
    prefix_params: ParamVector,
    options: MitigationOptions | None = None,
    audit_options: AuditOptions | None = None,
    pre_state: MitigationState | None = None,
) -> RegimeResult:
    """Prune the prefix parameters and, for the fair_after/fair_both regimes,
    retrain the surviving weights fairly with the mask frozen."""
    if regime_id not in REGIMES:
        raise ValueError(f"unknown regime {regime_id!r}; choose from {REGIMES}")
    opts = options or MitigationOptions()
    mask, pruned = magnitude_prune(prefix_params, rate)
    post_state = None
    final = pruned
    if regime_id in ("fair_after", "fair_both"):
        epochs = opts.resolve_retrain_epochs(cfg.epochs)
        if epochs > 0:
            recfg = replace(cfg, epochs=epochs, seed=cfg.seed + opts.retrain_seed_offset)
            final, post_state = fair_train(
                spec, pruned, ds, recfg, opts, mask=mask.keep
            )
    result = audit(spec, prefix_params, final, ds, audit_options)
    return RegimeResult(
        regime=regime_id,
        rate=float(rate),
        orig_params=prefix_params,
        final_params=final,
        mask=mask,
        audit=result,
        pre_state=pre_state,
        post_state=post_state,
    )


def regime(
    spec: ModelSpec,
    ds: Dataset,
    cfg: TrainConfig,
    regime_id: str,
    rate: float,
    options: MitigationOptions | None = None,
    audit_options: AuditOptions | None = None,
) -> RegimeResult:
    """Run one train / prune / (retrain) / audit pipeline.

    no_mitigation: plain training, prune, no fine-tuning.
    fair_before:   fair training, prune.
    fair_after:    plain training, prune, masked fair retraining.
    fair_both:     fair training, prune, masked fair retraining.
    """
    if regime_id not in REGIMES:
        raise ValueError(f"unknown regime {regime_id!r}; choose from {REGIMES}")
    fair = regime_id in ("fair_before", "fair_both")
    prefix, pre_state = train_prefix(spec, ds, cfg, fair, options)
    return finish_regime(
        spec, ds, cfg, regime_id, rate, prefix, options, audit_options, pre_state
    )
