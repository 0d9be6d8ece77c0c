"""Per-group disparity audits for pruned classifiers.

Quantities computed here, per protected group:

  * excessive loss: the increase in a group's empirical risk caused by
    replacing the trained parameters with their pruned counterpart;
  * fairness violations: the max-min spread of excessive losses across
    groups, and the max-min spread of group accuracies of the pruned model;
  * group gradient norms and maximum (signed) group-Hessian eigenvalues at
    the trained parameters;
  * a second-order upper bound on the excessive loss,
    |g_a| * |delta| + (1/2) * lambda_max(H_a) * |delta|^2, with its exact
    expansion residual;
  * closed-form upper bounds on the group gradient norm and on the group
    Hessian's top eigenvalue in terms of per-sample soft errors, boundary
    closeness f(1-f), and derivatives of the pre-squashing network outputs.

"Maximum eigenvalue" always means the largest signed eigenvalue (the
Rayleigh-quotient supremum), not the spectral radius; the two-stage shifted
power iteration below enforces that. All audits are pure functions of the
immutable (params, data) pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .data import Dataset
from .diffengine import (
    DENSE_GUARD_K,
    HvpOperator,
    gradient,
    raw_output_hessian_per_class,
    raw_output_jacobian,
)
from .netcore import ModelSpec, ParamVector, accuracy, group_risk, predict_soft
from .pruner import magnitude_prune, prune_delta_norm

__all__ = [
    "EigEstimate",
    "AuditOptions",
    "GroupAuditReport",
    "TaylorBoundReport",
    "FairnessViolation",
    "Corollary1Result",
    "AuditResult",
    "power_iteration_max_eig",
    "group_hessian_max_eig",
    "excessive_loss",
    "fairness_violation",
    "group_grad_norm",
    "taylor_bound",
    "corollary1_check",
    "boundary_term",
    "mean_boundary_term",
    "mean_soft_error",
    "hessian_bound_rhs",
    "grad_norm_bound_rhs",
    "audit",
]


class EigEstimate(NamedTuple):
    value: float
    iterations: int
    converged: bool


def _power_stage(matvec: Callable[[np.ndarray], np.ndarray], v: np.ndarray,
                 tol: float, max_iters: int) -> EigEstimate:
    """Plain power iteration with Rayleigh-quotient readout.

    Converges to the dominant-magnitude eigenvalue; stops when successive
    Rayleigh quotients differ by less than tol * (1 + |rho|).
    """
    rho_prev = None
    rho = 0.0
    for t in range(1, max_iters + 1):
        w = matvec(v)
        rho = float(v @ w)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0 or not np.isfinite(norm_w):
            # operator annihilates the iterate: zero eigenvalue direction
            return EigEstimate(0.0, t, norm_w == 0.0)
        v = w / norm_w
        if rho_prev is not None and abs(rho - rho_prev) < tol * (1.0 + abs(rho)):
            return EigEstimate(rho, t, True)
        rho_prev = rho
    return EigEstimate(rho, max_iters, False)


def power_iteration_max_eig(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    *,
    tol: float = 1e-9,
    max_iters: int = 1000,
    seed: int = 0,
    restarts: int = 3,
) -> EigEstimate:
    """Maximum signed eigenvalue of a symmetric operator.

    Stage 1 runs power iteration to the dominant-magnitude eigenvalue; if its
    Rayleigh quotient is negative, stage 2 reruns on the shifted operator
    H + (|rho| + 1) I, whose spectrum is positive, and subtracts the shift.
    Each of `restarts` runs starts from a distinct seeded unit vector and the
    largest Rayleigh value wins, guarding against near-orthogonal starts.
    Non-convergence is flagged, never raised; the last estimate is returned.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    best = -np.inf
    iterations = 0
    all_converged = True
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        v0 = rng.standard_normal(dim)
        v0 /= np.linalg.norm(v0)
        stage1 = _power_stage(matvec, v0, tol, max_iters)
        iterations += stage1.iterations
        if stage1.value < 0.0:
            shift = abs(stage1.value) + 1.0
            shifted = lambda u, s=shift: matvec(u) + s * u  # noqa: E731
            v1 = rng.standard_normal(dim)
            v1 /= np.linalg.norm(v1)
            stage2 = _power_stage(shifted, v1, tol, max_iters)
            iterations += stage2.iterations
            estimate = stage2.value - shift
            converged = stage1.converged and stage2.converged
        else:
            estimate, converged = stage1.value, stage1.converged
        best = max(best, estimate)
        all_converged = all_converged and converged
    return EigEstimate(float(best), iterations, all_converged)


def group_hessian_max_eig(
    spec: ModelSpec,
    params: ParamVector,
    ds: Dataset,
    group: int | None,
    tol: float = 1e-9,
    max_iters: int = 1000,
    *,
    seed: int = 0,
    restarts: int = 3,
) -> EigEstimate:
    """Maximum signed eigenvalue of the (group-restricted) risk Hessian,
    via shifted power iteration on the matrix-free HVP operator. A group of
    None means the full dataset."""
    op = HvpOperator(spec, params, ds, scope=group)
    return power_iteration_max_eig(
        op, params.k, tol=tol, max_iters=max_iters, seed=seed, restarts=restarts
    )


# ---------------------------------------------------------------------------
# excessive loss and fairness violations
# ---------------------------------------------------------------------------

def excessive_loss(spec: ModelSpec, orig: ParamVector, pruned: ParamVector,
                   ds: Dataset, group: int) -> float:
    """Change in a group's risk caused by pruning; negative means the group
    improved."""
    return group_risk(spec, pruned, ds, group) - group_risk(spec, orig, ds, group)


@dataclass(frozen=True)
class FairnessViolation:
    """Max-min spreads across groups: of excessive losses, and of the pruned
    model's group accuracies."""

    loss_based: float
    accuracy_based: float
    loss_max_group: int
    loss_min_group: int
    acc_max_group: int
    acc_min_group: int


def fairness_violation(spec: ModelSpec, orig: ParamVector, pruned: ParamVector,
                       ds: Dataset) -> FairnessViolation:
    """Largest pairwise excessive-loss difference, plus the accuracy spread
    of the pruned model."""
    m = ds.n_groups
    losses = np.array([excessive_loss(spec, orig, pruned, ds, a) for a in range(m)])
    accs = np.array([accuracy(spec, pruned, ds, a) for a in range(m)])
    return FairnessViolation(
        loss_based=float(losses.max() - losses.min()),
        accuracy_based=float(accs.max() - accs.min()),
        loss_max_group=int(np.argmax(losses)),
        loss_min_group=int(np.argmin(losses)),
        acc_max_group=int(np.argmax(accs)),
        acc_min_group=int(np.argmin(accs)),
    )


def group_grad_norm(spec: ModelSpec, params: ParamVector, ds: Dataset,
                    group: int | None) -> float:
    """Euclidean norm of the (group-restricted) risk gradient."""
    return gradient(spec, params, ds, scope=group).norm


# ---------------------------------------------------------------------------
# second-order excessive-loss bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaylorBoundReport:
    """Second-order upper bound on a group's excessive loss.

    first_order = |g_a| * |delta|, second_order = 0.5 * lambda * |delta|^2,
    and `residual` is the exact remainder R(a) - (g_a . delta +
    0.5 delta^T H_a delta) computed with exact inner products, i.e. the
    third-order-and-up content of the loss change.
    """

    group_id: int
    first_order: float
    second_order: float
    bound_total: float
    actual: float
    residual: float
    delta_norm: float
    grad_norm: float
    hessian_max_eig: float
    eig_iterations: int
    eig_converged: bool


def taylor_bound(
    spec: ModelSpec,
    orig: ParamVector,
    pruned: ParamVector,
    ds: Dataset,
    group: int,
    *,
    eig_tol: float = 1e-9,
    eig_max_iters: int = 2000,
    eig_seed: int = 0,
    eig_restarts: int = 3,
) -> TaylorBoundReport:
    delta = pruned.values - orig.values
    delta_norm = float(np.linalg.norm(delta))
    grad = gradient(spec, orig, ds, scope=group).values
    grad_norm = float(np.linalg.norm(grad))
    op = HvpOperator(spec, orig, ds, scope=group)
    eig = power_iteration_max_eig(
        op, orig.k, tol=eig_tol, max_iters=eig_max_iters, seed=eig_seed,
        restarts=eig_restarts,
    )
    quad = float(delta @ op(delta))
    actual = excessive_loss(spec, orig, pruned, ds, group)
    first = grad_norm * delta_norm
    second = 0.5 * eig.value * delta_norm**2
    return TaylorBoundReport(
        group_id=group,
        first_order=first,
        second_order=second,
        bound_total=first + second,
        actual=actual,
        residual=actual - (float(grad @ delta) + 0.5 * quad),
        delta_norm=delta_norm,
        grad_norm=grad_norm,
        hessian_max_eig=eig.value,
        eig_iterations=eig.iterations,
        eig_converged=eig.converged,
    )


@dataclass(frozen=True)
class Corollary1Result:
    """Bound sequences over an ascending pruning-rate grid.

    With a nonnegative group-Hessian eigenvalue the bound is provably
    nondecreasing in the rate; negative-curvature groups are flagged and
    their monotonicity reported rather than asserted.
    """

    ok: bool
    rates: tuple[float, ...]
    delta_norms: tuple[float, ...]
    bounds: tuple[tuple[float, ...], ...]  # [group][rate]
    grad_norms: tuple[float, ...]
    hessian_eigs: tuple[float, ...]
    negative_curvature: tuple[bool, ...]
    monotone: tuple[bool, ...]
    eig_converged: tuple[bool, ...]


def corollary1_check(
    spec: ModelSpec,
    orig: ParamVector,
    ds: Dataset,
    rates: list[float] | tuple[float, ...],
    *,
    eig_tol: float = 1e-9,
    eig_max_iters: int = 2000,
    eig_seed: int = 0,
    eig_restarts: int = 3,
) -> Corollary1Result:
    """Evaluate the excessive-loss bound per group over nested pruning rates,
    holding the gradient and Hessian terms fixed at the unpruned parameters."""
    rates = tuple(float(r) for r in rates)
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError("rates must be strictly ascending")
    if rates and (rates[0] < 0.0 or rates[-1] > 1.0):
        raise ValueError("rates must lie in [0, 1]")
    m = ds.n_groups
    grad_norms, eigs, eig_flags = [], [], []
    for a in range(m):
        grad_norms.append(group_grad_norm(spec, orig, ds, a))
        est = group_hessian_max_eig(
            spec, orig, ds, a, tol=eig_tol, max_iters=eig_max_iters,
            seed=eig_seed, restarts=eig_restarts,
        )
        eigs.append(est.value)
        eig_flags.append(est.converged)
    delta_norms = []
    for r in rates:
        _, pruned = magnitude_prune(orig, r)
        delta_norms.append(prune_delta_norm(orig, pruned))

    bounds, neg, mono = [], [], []
    for a in range(m):
        seq = [grad_norms[a] * d + 0.5 * eigs[a] * d * d for d in delta_norms]
        bounds.append(tuple(seq))
        neg.append(eigs[a] < 0.0)
        mono.append(all(y >= x for x, y in zip(seq, seq[1:])))
    ok = all(mono[a] for a in range(m) if not neg[a])
    return Corollary1Result(
        ok=ok,
        rates=rates,
        delta_norms=tuple(delta_norms),
        bounds=tuple(bounds),
        grad_norms=tuple(grad_norms),
        hessian_eigs=tuple(eigs),
        negative_curvature=tuple(neg),
        monotone=tuple(mono),
        eig_converged=tuple(eig_flags),
    )


# ---------------------------------------------------------------------------
# boundary terms and closed-form bound right-hand sides
# ---------------------------------------------------------------------------

def _require_binary(spec: ModelSpec, what: str) -> None:
    if spec.output != "sigmoid_binary":
        raise ValueError(f"{what} is defined for sigmoid_binary models only")


def boundary_term(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> float:
    """f(x) * (1 - f(x)) for a binary soft output: 0.25 on the decision
    boundary, vanishing at saturated predictions."""
    _require_binary(spec, "boundary_term")
    f = predict_soft(spec, params, np.asarray(x, dtype=np.float64))
    return float(f * (1.0 - f))


def mean_boundary_term(spec: ModelSpec, params: ParamVector, ds: Dataset,
                       group: int | None = None) -> float:
    _require_binary(spec, "mean_boundary_term")
    rows = None if group is None else ds.group_indices(group)
    feats = ds.features if rows is None else ds.features[rows]
    f = predict_soft(spec, params, feats)
    return float(np.mean(f * (1.0 - f)))


def _soft_targets(spec: ModelSpec, labels: np.ndarray) -> np.ndarray:
    if spec.output == "sigmoid_binary":
        return labels.astype(np.float64)
    if spec.n_outputs == 1:
        return labels.astype(np.float64)
    return np.eye(spec.n_outputs)[labels]


def mean_soft_error(spec: ModelSpec, params: ParamVector, ds: Dataset,
                    group: int | None = None) -> float:
    """Mean Euclidean distance between soft outputs and encoded targets."""
    rows = None if group is None else ds.group_indices(group)
    feats = ds.features if rows is None else ds.features[rows]
    labels = ds.labels if rows is None else ds.labels[rows]
    soft = predict_soft(spec, params, feats)
    target = _soft_targets(spec, labels)
    if soft.ndim == 1:
        return float(np.mean(np.abs(soft - target)))
    return float(np.mean(np.linalg.norm(soft - target, axis=1)))


def hessian_bound_rhs(spec: ModelSpec, params: ParamVector, ds: Dataset,
                      group: int | None) -> float:
    """Per-sample upper bound on the top group-Hessian eigenvalue for binary
    cross-entropy models.

    Averages f(1-f) * |grad z|^2 + lambda_max((f - y) * hess z) over the
    group, where z is the pre-sigmoid output. Both steps are eigenvalue
    subadditivity, so the result dominates lambda_max(H_a) exactly. Note the
    second term uses the top eigenvalue of the actual signed matrix
    (f - y) * hess z, i.e. |f - y| times the top eigenvalue of hess z for
    over-predictions and of -hess z for under-predictions.
    """
    _require_binary(spec, "hessian_bound_rhs")
    if spec.loss_kind != "binary_cross_entropy":
        raise ValueError("hessian_bound_rhs requires binary_cross_entropy")
    if params.k > DENSE_GUARD_K:
        raise ValueError(f"per-sample output Hessians need k <= {DENSE_GUARD_K}")
    rows = ds.group_indices(group) if group is not None else np.arange(ds.n)
    total = 0.0
    for i in rows:
        x = ds.features[i]
        y = float(ds.labels[i])
        f = float(predict_soft(spec, params, x))
        grad_z = raw_output_jacobian(spec, params, x)[0]
        hess_z = raw_output_hessian_per_class(spec, params, x, 0)
        eigs = np.linalg.eigvalsh(hess_z)
        s = f - y
        signed_top = s * eigs[-1] if s >= 0.0 else s * eigs[0]
        total += f * (1.0 - f) * float(grad_z @ grad_z) + signed_top
    return total / rows.size


def grad_norm_bound_rhs(spec: ModelSpec, params: ParamVector, ds: Dataset,
                        group: int | None) -> float:
    """Per-sample upper bound on the group gradient norm.

    Averages |soft(x) - y| * |J(x)|_F over the group, where J is the
    Jacobian of the pre-squashing outputs; the mean-squared-error form
    carries an extra factor two from its output-space gradient.
    """
    if spec.loss_kind not in ("cross_entropy", "binary_cross_entropy", "mse"):
        raise ValueError(f"unsupported loss kind {spec.loss_kind!r}")
    factor = 2.0 if spec.loss_kind == "mse" else 1.0
    rows = ds.group_indices(group) if group is not None else np.arange(ds.n)
    targets = _soft_targets(spec, ds.labels)
    total = 0.0
    for i in rows:
        x = ds.features[i]
        soft = predict_soft(spec, params, x)
        err = float(np.linalg.norm(np.atleast_1d(soft - targets[i])))
        jac = raw_output_jacobian(spec, params, x)
        total += factor * err * float(np.linalg.norm(jac))
    return total / rows.size


# ---------------------------------------------------------------------------
# composite audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditOptions:
    """Knobs for the composite audit.

    Hessian eigenvalues dominate the cost; `with_hessian=False` skips them
    (and the second-order bound) for cheap sweeps, recording a flag.
    """

    with_hessian: bool = True
    eig_tol: float = 1e-8
    eig_max_iters: int = 2000
    eig_seed: int = 0
    eig_restarts: int = 3


@dataclass(frozen=True)
class GroupAuditReport:
    """Per-group audit row.

    Loss and accuracy describe the pruned model; the gradient norm, Hessian
    eigenvalue, boundary term, and soft error are taken at the original
    (unpruned) parameters, where the excessive-loss bound is anchored.
    Binary-only fields are None for multiclass models.
    """

    group_id: int
    group_name: str
    size: int
    loss: float
    accuracy: float
    grad_norm: float
    hessian_max_eig: float
    eig_iterations: int
    eig_converged: bool
    mean_boundary_term: float | None
    mean_soft_error: float
    excessive_loss: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class AuditResult:
    groups: tuple[GroupAuditReport, ...]
    violation: FairnessViolation
    taylor: tuple[TaylorBoundReport, ...]
    delta_norm: float

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "delta_norm": self.delta_norm,
            "violation": asdict(self.violation),
            "groups": [asdict(g) for g in self.groups],
            "taylor": [asdict(t) for t in self.taylor],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _try(flags: list[str], label: str, fn: Callable[[], float], default: float = np.nan):
    try:
        return fn()
    except Exception as exc:  # noqa: BLE001 - audits must not abort
        flags.append(f"{label}_error:{type(exc).__name__}")
        return default


def audit(spec: ModelSpec, orig: ParamVector, pruned: ParamVector, ds: Dataset,
          options: AuditOptions | None = None) -> AuditResult:
    """Run every per-group metric plus violations and second-order bounds.

    Individual metric failures are recorded as flags on the group row and
    never abort the rest of the audit.
    """
    opts = options or AuditOptions()
    m = ds.n_groups
    is_binary = spec.output == "sigmoid_binary"
    delta_norm = prune_delta_norm(orig, pruned)

    reports: list[GroupAuditReport] = []
    taylor_reports: list[TaylorBoundReport] = []
    for a in range(m):
        flags: list[str] = []
        loss = _try(flags, "loss", lambda a=a: group_risk(spec, pruned, ds, a))
        acc = _try(flags, "accuracy", lambda a=a: accuracy(spec, pruned, ds, a))
        gnorm = _try(flags, "grad_norm", lambda a=a: group_grad_norm(spec, orig, ds, a))
        soft_err = _try(flags, "soft_error", lambda a=a: mean_soft_error(spec, orig, ds, a))
        boundary = None
        if is_binary:
            boundary = _try(flags, "boundary", lambda a=a: mean_boundary_term(spec, orig, ds, a))
        excess = _try(flags, "excessive_loss",
                      lambda a=a: excessive_loss(spec, orig, pruned, ds, a))

        eig_value, eig_iters, eig_conv = np.nan, 0, False
        if opts.with_hessian:
            # taylor_bound already carries the group eigenvalue; reuse it
            def _taylor(a=a):
                return taylor_bound(
                    spec, orig, pruned, ds, a, eig_tol=opts.eig_tol,
                    eig_max_iters=opts.eig_max_iters, eig_seed=opts.eig_seed,
                    eig_restarts=opts.eig_restarts,
                )
            tb = _try(flags, "taylor_bound", _taylor, default=None)
            if tb is not None:
                taylor_reports.append(tb)
                eig_value = tb.hessian_max_eig
                eig_iters = tb.eig_iterations
                eig_conv = tb.eig_converged
                if not tb.eig_converged:
                    flags.append("eig_not_converged")
        else:
            flags.append("hessian_skipped")

        reports.append(GroupAuditReport(
            group_id=a,
            group_name=ds.group_name(a),
            size=int(ds.group_sizes()[a]),
            loss=loss,
            accuracy=acc,
            grad_norm=gnorm,
            hessian_max_eig=eig_value,
            eig_iterations=eig_iters,
            eig_converged=eig_conv,
            mean_boundary_term=boundary,
            mean_soft_error=soft_err,
            excessive_loss=excess,
            flags=tuple(flags),
        ))

    violation = fairness_violation(spec, orig, pruned, ds)
    return AuditResult(tuple(reports), violation, tuple(taylor_reports), delta_norm)
