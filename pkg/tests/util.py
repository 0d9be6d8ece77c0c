"""Shared builders and independent numpy oracles for the test suite."""

from __future__ import annotations

import numpy as np

from fairprune.data import Dataset
from fairprune.netcore import ModelSpec, ParamVector, init_model, layout_for


def numpy_forward(spec: ModelSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    """Independent forward pass used as an oracle: plain numpy, no torch."""
    acts = {"relu": lambda h: np.maximum(h, 0.0),
            "tanh": np.tanh,
            "sigmoid": lambda h: 1.0 / (1.0 + np.exp(-h))}
    act = acts[spec.hidden_activation]
    h = X
    n_layers = len(spec.layer_sizes) - 1
    for i in range(n_layers):
        h = h @ params.slot_values(f"W{i}").T
        if spec.use_bias:
            h = h + params.slot_values(f"b{i}")
        if i < n_layers - 1:
            h = act(h)
    return h


def numpy_per_sample_losses(spec: ModelSpec, params: ParamVector, ds: Dataset) -> np.ndarray:
    """Per-sample losses recomputed from scratch in numpy."""
    raw = numpy_forward(spec, params, ds.features)
    y = ds.labels
    if spec.loss_kind == "cross_entropy":
        zmax = raw.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(raw - zmax).sum(axis=1))
        return lse - raw[np.arange(len(y)), y]
    if spec.loss_kind == "binary_cross_entropy":
        z = raw[:, 0]
        return np.logaddexp(0.0, z) - y * z
    if spec.n_outputs == 1:
        return (raw[:, 0] - y) ** 2
    onehot = np.eye(spec.n_outputs)[y]
    return ((raw - onehot) ** 2).sum(axis=1)


def make_dataset(rng: np.random.Generator, n: int, d: int, n_classes: int = 2,
                 n_groups: int = 1, scale: float = 1.0) -> Dataset:
    """Random features with round-robin group/label assignment, so every
    group and label is present."""
    features = scale * rng.standard_normal((n, d))
    groups = np.arange(n) % n_groups
    labels = np.arange(n) % n_classes
    perm = rng.permutation(n)
    return Dataset(features, groups[perm], labels[perm])


def random_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 0.8) -> ParamVector:
    layout, k = layout_for(spec)
    return ParamVector(scale * rng.standard_normal(k), layout)


def tiny_net(rng: np.random.Generator, d: int = 3, hidden: int = 4, n_classes: int = 3,
             activation: str = "tanh") -> ModelSpec:
    return ModelSpec((d, hidden, n_classes), hidden_activation=activation)


def tiny_binary_net(rng: np.random.Generator, d: int = 3, hidden: int = 4,
                    activation: str = "tanh") -> ModelSpec:
    return ModelSpec((d, hidden, 1), hidden_activation=activation,
                     output="sigmoid_binary", loss_kind="binary_cross_entropy")


def tiny_mse_net(d: int = 3, hidden: int = 4, n_out: int = 2,
                 activation: str = "tanh") -> ModelSpec:
    return ModelSpec((d, hidden, n_out), hidden_activation=activation,
                     output="linear", loss_kind="mse")


def linear_mse_model(d: int, n_out: int = 1, use_bias: bool = True) -> ModelSpec:
    """A model whose training loss is exactly quadratic in the parameters."""
    return ModelSpec((d, n_out), output="linear", loss_kind="mse", use_bias=use_bias)


def trained_like(spec: ModelSpec, seed: int) -> ParamVector:
    return init_model(spec, seed)


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation (no tie correction; inputs here have distinct ranks)."""
    rx = np.argsort(np.argsort(x)).astype(np.float64)
    ry = np.argsort(np.argsort(y)).astype(np.float64)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    return float(rx @ ry / denom) if denom > 0 else 0.0
