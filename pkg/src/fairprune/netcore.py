"""Dense feed-forward classifiers over flat parameter vectors.

Models are pure functions of a flat float64 parameter vector plus a layout
descriptor, so pruning masks, gradients, and Hessian-vector products all
operate on one shared coordinate system. Forward passes and training run on
torch (CPU, float64); all public interfaces speak numpy.

Training is plain SGD with momentum and additive L2 weight decay. Evaluation
operations are pure and safe to call concurrently on shared parameters;
`train` keeps its optimizer state private. Runs are bit-reproducible for a
fixed seed and thread count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from .data import Dataset

__all__ = [
    "ModelSpec",
    "ParamVector",
    "TrainConfig",
    "TrainResult",
    "DivergenceError",
    "init_model",
    "predict_raw",
    "predict_soft",
    "predict_labels",
    "accuracy",
    "empirical_risk",
    "group_risk",
    "train",
    "save_params",
    "load_params",
]

_ACTIVATIONS = ("relu", "tanh", "sigmoid")
_OUTPUTS = ("softmax", "sigmoid_binary", "linear")
_LOSSES = ("cross_entropy", "binary_cross_entropy", "mse")

# each output kind is trained under exactly one loss
_OUTPUT_LOSS = {
    "softmax": "cross_entropy",
    "sigmoid_binary": "binary_cross_entropy",
    "linear": "mse",
}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and loss of a dense feed-forward classifier.

    `layer_sizes` runs input dimension through hidden widths to the output
    width: the class count for softmax/linear outputs, or 1 for the
    sigmoid-binary output (labels in {0, 1}). A linear output of width 1 is
    treated as scalar regression: labels are used as numeric targets.
    """

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output: str = "softmax"
    loss_kind: str = "cross_entropy"
    use_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"layer_sizes must list >=2 positive sizes, got {sizes}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output not in _OUTPUTS:
            raise ValueError(f"unknown output kind {self.output!r}")
        if self.loss_kind not in _LOSSES:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if _OUTPUT_LOSS[self.output] != self.loss_kind:
            raise ValueError(
                f"output {self.output!r} must be trained with "
                f"{_OUTPUT_LOSS[self.output]!r}, got {self.loss_kind!r}"
            )
        if self.output == "sigmoid_binary" and sizes[-1] != 1:
            raise ValueError("sigmoid_binary requires an output width of 1")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_classes(self) -> int:
        return 2 if self.output == "sigmoid_binary" else self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output": self.output,
            "loss_kind": self.loss_kind,
            "use_bias": self.use_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            layer_sizes=tuple(d["layer_sizes"]),
            hidden_activation=d["hidden_activation"],
            output=d["output"],
            loss_kind=d["loss_kind"],
            use_bias=bool(d.get("use_bias", True)),
        )


class Slot(NamedTuple):
    """Location of one named layer parameter inside the flat vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layout_for(spec: ModelSpec) -> tuple[tuple[Slot, ...], int]:
    """Per-layer (offset, shape) slots and total parameter count k."""
    slots = []
    offset = 0
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        w = Slot(f"W{i}", offset, (sizes[i + 1], sizes[i]))
        offset += w.size
        slots.append(w)
        if spec.use_bias:
            b = Slot(f"b{i}", offset, (sizes[i + 1],))
            offset += b.size
            slots.append(b)
    return tuple(slots), offset


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus its layer layout."""

    values: np.ndarray
    layout: tuple[Slot, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        k = sum(s.size for s in self.layout)
        if vals.size != k:
            raise ValueError(f"expected {k} parameters for this layout, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameter vector contains non-finite entries")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def k(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def slot_values(self, name: str) -> np.ndarray:
        for s in self.layout:
            if s.name == name:
                return self.values[s.offset : s.offset + s.size].reshape(s.shape)
        raise KeyError(name)

    def bias_indices(self) -> np.ndarray:
        """Flat indices of all bias entries (empty for bias-free layouts)."""
        idx = [
            np.arange(s.offset, s.offset + s.size)
            for s in self.layout
            if s.name.startswith("b")
        ]
        return np.concatenate(idx) if idx else np.array([], dtype=np.int64)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass(frozen=True)
class TrainResult:
    params: ParamVector
    epoch_losses: np.ndarray


class DivergenceError(RuntimeError):
    """Training loss became NaN/Inf; carries the last finite state."""

    def __init__(self, message: str, last_params: ParamVector, epochs_completed: int,
                 epoch_losses: np.ndarray):
        super().__init__(message)
        self.last_params = last_params
        self.epochs_completed = epochs_completed
        self.epoch_losses = epoch_losses


# ---------------------------------------------------------------------------
# torch functional core (shared with the differentiation services)
# ---------------------------------------------------------------------------

def to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, dtype=np.float64, copy=True))


def param_tensor(params: ParamVector) -> torch.Tensor:
    return to_tensor(params.values)


def unflatten(theta: torch.Tensor, layout: tuple[Slot, ...]) -> dict[str, torch.Tensor]:
    return {s.name: theta[s.offset : s.offset + s.size].reshape(s.shape) for s in layout}


def forward_raw_t(spec: ModelSpec, theta: torch.Tensor, layout: tuple[Slot, ...],
                  X: torch.Tensor) -> torch.Tensor:
    """Pre-squashing network outputs, shape (n, n_outputs). Differentiable."""
    slots = unflatten(theta, layout)
    h = X
    n_layers = len(spec.layer_sizes) - 1
    for i in range(n_layers):
        h = h @ slots[f"W{i}"].T
        if spec.use_bias:
            h = h + slots[f"b{i}"]
        if i < n_layers - 1:
            if spec.hidden_activation == "relu":
                h = torch.relu(h)
            elif spec.hidden_activation == "tanh":
                h = torch.tanh(h)
            else:
                h = torch.sigmoid(h)
    return h


def soft_from_raw_t(spec: ModelSpec, raw: torch.Tensor) -> torch.Tensor:
    if spec.output == "softmax":
        return torch.softmax(raw, dim=1)
    if spec.output == "sigmoid_binary":
        return torch.sigmoid(raw)
    return raw


def _check_labels(spec: ModelSpec, labels: np.ndarray) -> None:
    top = int(labels.max())
    if spec.output == "sigmoid_binary" and top > 1:
        raise ValueError("sigmoid_binary models need labels in {0, 1}")
    if spec.output == "softmax" and top >= spec.n_outputs:
        raise ValueError(f"label {top} out of range for {spec.n_outputs} outputs")


def per_sample_losses_t(spec: ModelSpec, raw: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample losses from raw outputs. Differentiable.

    cross_entropy and binary_cross_entropy are computed in log-sum-exp form,
    so their analytic output-space gradient is exactly soft(raw) - target.
    mse is squared error to the one-hot target (or to the numeric label for a
    width-1 output).
    """
    if spec.loss_kind == "cross_entropy":
        return torch.logsumexp(raw, dim=1) - raw[torch.arange(raw.shape[0]), y]
    if spec.loss_kind == "binary_cross_entropy":
        z = raw[:, 0]
        return torch.nn.functional.softplus(z) - y.to(raw.dtype) * z
    if spec.n_outputs == 1:
        return (raw[:, 0] - y.to(raw.dtype)) ** 2
    onehot = torch.nn.functional.one_hot(y, num_classes=spec.n_outputs).to(raw.dtype)
    return ((raw - onehot) ** 2).sum(dim=1)


def risk_t(spec: ModelSpec, theta: torch.Tensor, layout: tuple[Slot, ...],
           X: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    raw = forward_raw_t(spec, theta, layout, X)
    return per_sample_losses_t(spec, raw, y).mean()


def dataset_tensors(ds: Dataset, rows: np.ndarray | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    feats = ds.features if rows is None else ds.features[rows]
    labels = ds.labels if rows is None else ds.labels[rows]
    return to_tensor(feats), torch.from_numpy(np.array(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def init_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    layout, k = layout_for(spec)
    rng = np.random.default_rng(seed)
    values = np.zeros(k, dtype=np.float64)
    for s in layout:
        if s.name.startswith("W"):
            scale = 1.0 / np.sqrt(s.shape[1])
            values[s.offset : s.offset + s.size] = rng.uniform(-scale, scale, s.size)
    return ParamVector(values, layout)


def _as_batch(spec: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"expected {spec.input_dim} features, got {x.shape[1]}")
    return x, single


def predict_raw(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Pre-squashing outputs for one sample (d,) or a batch (n, d)."""
    xb, single = _as_batch(spec, x)
    with torch.no_grad():
        raw = forward_raw_t(spec, param_tensor(params), params.layout, to_tensor(xb))
    out = raw.numpy()
    return out[0] if single else out


def predict_soft(spec: ModelSpec, params: ParamVector, x: np.ndarray):
    """Soft outputs: probability vector (softmax), scalar in (0,1)
    (sigmoid_binary), or the raw outputs (linear)."""
    xb, single = _as_batch(spec, x)
    with torch.no_grad():
        raw = forward_raw_t(spec, param_tensor(params), params.layout, to_tensor(xb))
        soft = soft_from_raw_t(spec, raw).numpy()
    if spec.output == "sigmoid_binary":
        soft = soft[:, 0]
        return float(soft[0]) if single else soft
    return soft[0] if single else soft


def predict_labels(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Hard top-1 predictions (threshold 0.5 for binary, rounding for
    width-1 regression outputs)."""
    xb, _ = _as_batch(spec, x)
    soft = predict_soft(spec, params, xb)
    if spec.output == "sigmoid_binary":
        return (soft >= 0.5).astype(np.int64)
    if spec.output == "linear" and spec.n_outputs == 1:
        return np.rint(soft[:, 0]).astype(np.int64)
    return np.argmax(soft, axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, ds: Dataset,
             group_id: int | None = None) -> float:
    """Top-1 exact-match rate, optionally restricted to one group."""
    rows = None if group_id is None else ds.group_indices(group_id)
    feats = ds.features if rows is None else ds.features[rows]
    labels = ds.labels if rows is None else ds.labels[rows]
    pred = predict_labels(spec, params, feats)
    return float(np.mean(pred == labels))


def empirical_risk(spec: ModelSpec, params: ParamVector, ds: Dataset) -> float:
    """Mean per-sample loss over the dataset."""
    if ds.n == 0:
        raise ValueError("empty dataset")
    _check_labels(spec, ds.labels)
    X, y = dataset_tensors(ds)
    with torch.no_grad():
        return float(risk_t(spec, param_tensor(params), params.layout, X, y))


def group_risk(spec: ModelSpec, params: ParamVector, ds: Dataset, group_id: int) -> float:
    """Mean per-sample loss over one group's samples."""
    rows = ds.group_indices(group_id)
    _check_labels(spec, ds.labels)
    X, y = dataset_tensors(ds, rows)
    with torch.no_grad():
        return float(risk_t(spec, param_tensor(params), params.layout, X, y))


BatchLossFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def _run_sgd(
    spec: ModelSpec,
    params: ParamVector,
    ds: Dataset,
    cfg: TrainConfig,
    *,
    mask: np.ndarray | None = None,
    batch_loss_fn: BatchLossFn | None = None,
    after_epoch: Callable[[int, torch.Tensor], None] | None = None,
) -> TrainResult:
    """Shared SGD-with-momentum loop.

    `batch_loss_fn(theta, Xb, yb, gb)` returns the (torch) loss minimized on
    each mini-batch; the default is the plain mean loss. A boolean keep-mask
    zeroes the masked coordinates' gradient contributions every step, so
    coordinates that start at zero stay exactly zero. `after_epoch` runs with
    the detached parameter tensor after each epoch's loss is recorded.
    """
    _check_labels(spec, ds.labels)
    X, y = dataset_tensors(ds)
    g_all = torch.from_numpy(np.array(ds.groups, dtype=np.int64))
    layout = params.layout
    theta = param_tensor(params)
    vel = torch.zeros_like(theta)
    mask_t = None
    if mask is not None:
        mask_arr = np.asarray(mask, dtype=bool)
        if mask_arr.shape != (params.k,):
            raise ValueError(f"mask must have shape ({params.k},)")
        mask_t = torch.from_numpy(mask_arr.astype(np.float64))

    if batch_loss_fn is None:
        def batch_loss_fn(th, Xb, yb, gb):  # noqa: ARG001 - uniform signature
            return risk_t(spec, th, layout, Xb, yb)

    rng = np.random.default_rng(cfg.seed)
    n = ds.n
    epoch_losses: list[float] = []
    last_finite = theta.clone()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size])
            leaf = theta.detach().requires_grad_(True)
            loss = batch_loss_fn(leaf, X[idx], y[idx], g_all[idx])
            (grad,) = torch.autograd.grad(loss, leaf)
            if cfg.weight_decay != 0.0:
                grad = grad + cfg.weight_decay * leaf.detach()
            if mask_t is not None:
                grad = grad * mask_t
            vel = cfg.momentum * vel + grad
            theta = leaf.detach() - cfg.learning_rate * vel
        with torch.no_grad():
            full = float(risk_t(spec, theta, layout, X, y))
        if not np.isfinite(full):
            raise DivergenceError(
                f"training diverged at epoch {epoch} (loss {full})",
                params.with_values(last_finite.numpy()),
                epoch,
                np.array(epoch_losses),
            )
        epoch_losses.append(full)
        last_finite = theta.clone()
        if after_epoch is not None:
            after_epoch(epoch, theta)

    return TrainResult(params.with_values(theta.numpy()), np.array(epoch_losses))


def train(spec: ModelSpec, params: ParamVector, ds: Dataset, cfg: TrainConfig,
          *, mask: np.ndarray | None = None) -> TrainResult:
    """SGD with momentum and additive L2 weight decay.

    Mini-batch order is drawn from the config seed, the full-dataset loss is
    recorded after every epoch, and a NaN/Inf loss raises DivergenceError
    carrying the last finite parameters. An optional keep-mask freezes pruned
    coordinates at zero (used for retraining pruned models).
    """
    return _run_sgd(spec, params, ds, cfg, mask=mask)


# ---------------------------------------------------------------------------
# parameter vector serialization
# ---------------------------------------------------------------------------

_MAGIC = b"FPRUNEPV"


def save_params(params: ParamVector, path: str | Path,
                spec: ModelSpec | None = None) -> Path:
    """Write magic + layout header + little-endian float64 values, plus a
    `<path>.json` sidecar carrying the ModelSpec."""
    path = Path(path)
    header = json.dumps(
        {"k": params.k, "layout": [[s.name, s.offset, list(s.shape)] for s in params.layout]}
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())
    sidecar = {"model_spec": spec.to_dict() if spec else None}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_params(path: str | Path) -> tuple[ParamVector, ModelSpec | None]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a parameter vector file")
    (hlen,) = struct.unpack_from("<I", blob, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    layout = tuple(Slot(n, int(o), tuple(sh)) for n, o, sh in header["layout"])
    values = np.frombuffer(blob[start + hlen :], dtype="<f8").astype(np.float64)
    params = ParamVector(values, layout)
    sidecar_path = Path(str(path) + ".json")
    spec = None
    if sidecar_path.exists():
        d = json.loads(sidecar_path.read_text(encoding="utf-8"))
        if d.get("model_spec"):
            spec = ModelSpec.from_dict(d["model_spec"])
    return params, spec
