"""Exact first- and second-order differentiation of model risks and outputs.

Gradients come from reverse-mode autodiff; Hessian-vector products from
differentiating the gradient again (reverse-over-reverse), never from finite
differences. Finite-difference routines exist only as independent test
oracles. Dense assembly (full Hessians, per-sample output Hessians) is
guarded to small parameter counts.

ReLU is handled almost-everywhere: its second derivative is taken as zero and
the subgradient at the kink is zero, so second-order audits of ReLU models
hold off the kink set only. tanh is the smooth default elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch

from .data import Dataset
from .netcore import (
    ModelSpec,
    ParamVector,
    dataset_tensors,
    forward_raw_t,
    param_tensor,
    risk_t,
    soft_from_raw_t,
    to_tensor,
)

__all__ = [
    "DENSE_GUARD_K",
    "GradVector",
    "HvpOperator",
    "DenseHessian",
    "gradient",
    "hvp",
    "dense_hessian",
    "output_jacobian",
    "raw_output_jacobian",
    "output_hessian_per_class",
    "raw_output_hessian_per_class",
    "fd_gradient",
    "fd_hvp",
]

# dense k x k assembly stays under seconds below this size
DENSE_GUARD_K = 2000


@dataclass(frozen=True)
class GradVector:
    """A gradient of the (possibly group-restricted) empirical risk.

    `scope` is None for the full dataset or a group id; `at_params` keeps the
    identity of the parameter vector the gradient was taken at.
    """

    values: np.ndarray
    scope: int | None
    at_params: ParamVector

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def _scope_rows(ds: Dataset, scope: int | None) -> np.ndarray | None:
    return None if scope is None else ds.group_indices(scope)


def gradient(spec: ModelSpec, params: ParamVector, ds: Dataset,
             scope: int | None = None) -> GradVector:
    """Exact reverse-mode gradient of the scoped empirical risk."""
    X, y = dataset_tensors(ds, _scope_rows(ds, scope))
    theta = param_tensor(params).requires_grad_(True)
    loss = risk_t(spec, theta, params.layout, X, y)
    (g,) = torch.autograd.grad(loss, theta)
    return GradVector(g.numpy(), scope, params)


class HvpOperator:
    """Matrix-free v -> H v for the Hessian of a scoped empirical risk.

    The first-order graph is built once at construction and reused read-only,
    so each application costs one extra backward pass. The operator is linear:
    op(a*u + b*v) = a*op(u) + b*op(v) up to roundoff.
    """

    def __init__(self, spec: ModelSpec, params: ParamVector, ds: Dataset,
                 scope: int | None = None):
        self.spec = spec
        self.params = params
        self.scope = scope
        self.k = params.k
        X, y = dataset_tensors(ds, _scope_rows(ds, scope))
        self._theta = param_tensor(params).requires_grad_(True)
        loss = risk_t(spec, self._theta, params.layout, X, y)
        (self._grad,) = torch.autograd.grad(loss, self._theta, create_graph=True)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.k,):
            raise ValueError(f"expected a vector of length {self.k}, got {v.shape}")
        vt = to_tensor(v)
        (hv,) = torch.autograd.grad((self._grad * vt).sum(), self._theta, retain_graph=True)
        return hv.numpy()


def hvp(op: Callable[[np.ndarray], np.ndarray], v: np.ndarray) -> np.ndarray:
    """Apply a Hessian-vector-product operator to v."""
    return op(v)


class DenseHessian(NamedTuple):
    matrix: np.ndarray
    asymmetry: float  # max |H - H^T| entry observed before symmetrization


def _check_guard(k: int) -> None:
    if k > DENSE_GUARD_K:
        raise ValueError(f"dense assembly guard: k={k} exceeds {DENSE_GUARD_K}")


def dense_hessian(spec: ModelSpec, params: ParamVector, ds: Dataset,
                  scope: int | None = None) -> DenseHessian:
    """Full Hessian assembled column-by-column from HVPs on basis vectors,
    then symmetrized as (H + H^T)/2."""
    _check_guard(params.k)
    op = HvpOperator(spec, params, ds, scope)
    k = params.k
    H = np.empty((k, k), dtype=np.float64)
    basis = np.zeros(k, dtype=np.float64)
    for i in range(k):
        basis[i] = 1.0
        H[:, i] = op(basis)
        basis[i] = 0.0
    asym = float(np.max(np.abs(H - H.T))) if k else 0.0
    return DenseHessian((H + H.T) / 2.0, asym)


def _single_x(spec: ModelSpec, x: np.ndarray) -> torch.Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"expected a single sample of dimension {spec.input_dim}")
    return to_tensor(x[None, :])


def _output_fn(spec: ModelSpec, params: ParamVector, x: np.ndarray, soft: bool):
    X1 = _single_x(spec, x)
    layout = params.layout

    def fn(theta: torch.Tensor) -> torch.Tensor:
        raw = forward_raw_t(spec, theta, layout, X1)
        out = soft_from_raw_t(spec, raw) if soft else raw
        return out[0]

    return fn


def _jacobian(spec: ModelSpec, params: ParamVector, x: np.ndarray, soft: bool) -> np.ndarray:
    fn = _output_fn(spec, params, x, soft)
    jac = torch.autograd.functional.jacobian(fn, param_tensor(params), vectorize=True)
    return jac.numpy().reshape(spec.n_outputs, params.k)


def output_jacobian(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Jacobian of the soft outputs at one sample, shape (n_outputs, k)."""
    return _jacobian(spec, params, x, soft=True)


def raw_output_jacobian(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Jacobian of the pre-squashing outputs at one sample, shape (n_outputs, k)."""
    return _jacobian(spec, params, x, soft=False)


def _output_hessian(spec: ModelSpec, params: ParamVector, x: np.ndarray,
                    class_index: int, soft: bool) -> np.ndarray:
    _check_guard(params.k)
    if not 0 <= class_index < spec.n_outputs:
        raise ValueError(f"class index {class_index} out of range")
    fn = _output_fn(spec, params, x, soft)
    scalar = lambda theta: fn(theta)[class_index]  # noqa: E731
    H = torch.autograd.functional.hessian(scalar, param_tensor(params), vectorize=True)
    H = H.numpy().reshape(params.k, params.k)
    return (H + H.T) / 2.0


def output_hessian_per_class(spec: ModelSpec, params: ParamVector, x: np.ndarray,
                             class_index: int) -> np.ndarray:
    """Hessian of one soft output at one sample, shape (k, k)."""
    return _output_hessian(spec, params, x, class_index, soft=True)


def raw_output_hessian_per_class(spec: ModelSpec, params: ParamVector, x: np.ndarray,
                                 class_index: int) -> np.ndarray:
    """Hessian of one pre-squashing output at one sample, shape (k, k)."""
    return _output_hessian(spec, params, x, class_index, soft=False)


# ---------------------------------------------------------------------------
# finite-difference oracles (tests only, never the production path)
# ---------------------------------------------------------------------------

def _risk_at(spec: ModelSpec, params: ParamVector, X: torch.Tensor, y: torch.Tensor,
             values: np.ndarray) -> float:
    with torch.no_grad():
        return float(risk_t(spec, to_tensor(values), params.layout, X, y))


def fd_gradient(spec: ModelSpec, params: ParamVector, ds: Dataset,
                scope: int | None = None, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scoped risk."""
    X, y = dataset_tensors(ds, _scope_rows(ds, scope))
    base = params.values.copy()
    g = np.empty_like(base)
    for i in range(base.size):
        step = np.zeros_like(base)
        step[i] = h
        g[i] = (
            _risk_at(spec, params, X, y, base + step)
            - _risk_at(spec, params, X, y, base - step)
        ) / (2.0 * h)
    return g


def fd_hvp(spec: ModelSpec, params: ParamVector, ds: Dataset, v: np.ndarray,
           scope: int | None = None, h: float = 1e-4) -> np.ndarray:
    """Central difference of exact gradients along v: (g(x+hv) - g(x-hv)) / 2h."""
    v = np.asarray(v, dtype=np.float64)
    plus = gradient(spec, params.with_values(params.values + h * v), ds, scope).values
    minus = gradient(spec, params.with_values(params.values - h * v), ds, scope).values
    return (plus - minus) / (2.0 * h)
