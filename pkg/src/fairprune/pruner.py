"""Global magnitude pruning of flat parameter vectors, mask algebra, and
pruning-perturbation norms. All functions are pure."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .netcore import ParamVector

__all__ = [
    "PruneMask",
    "TIE_POLICY",
    "magnitude_prune",
    "apply_mask",
    "nested",
    "prune_delta_norm",
    "save_mask",
    "load_mask",
]

# smallest magnitudes pruned first; equal magnitudes broken by lower index
TIE_POLICY = "abs_ascending_index_ascending"


def _checksum(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class PruneMask:
    """Boolean keep-vector over the flat parameter coordinates.

    `source_checksum` identifies the parameter vector the mask was derived
    from; mask algebra refuses to mix masks from different sources.
    """

    keep: np.ndarray
    rate: float
    tie_policy_tag: str = TIE_POLICY
    source_checksum: str = ""

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool).copy()
        keep.flags.writeable = False
        object.__setattr__(self, "keep", keep)

    @property
    def k(self) -> int:
        return self.keep.size

    @property
    def n_pruned(self) -> int:
        return int(np.sum(~self.keep))

    def pruned_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.keep)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def magnitude_prune(
    params: ParamVector,
    rate: float,
    exempt_indices: Sequence[int] | np.ndarray | None = None,
) -> tuple[PruneMask, ParamVector]:
    """Zero the `rate` fraction of smallest-magnitude parameters.

    The pruned count is round-half-up of rate times the prunable coordinate
    count (all coordinates unless `exempt_indices` excludes some, e.g. the
    biases). Returns the mask and the pruned vector, which keeps full length
    with zeros in the pruned slots. Deterministic; ties in magnitude are
    pruned lowest-index first.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    values = params.values
    prunable = np.ones(params.k, dtype=bool)
    if exempt_indices is not None:
        prunable[np.asarray(exempt_indices, dtype=np.int64)] = False
    candidates = np.flatnonzero(prunable)
    n_prune = _round_half_up(rate * candidates.size)
    # stable sort keeps lower indices first among equal magnitudes
    order = candidates[np.argsort(np.abs(values[candidates]), kind="stable")]
    keep = np.ones(params.k, dtype=bool)
    keep[order[:n_prune]] = False
    mask = PruneMask(keep, float(rate), TIE_POLICY, _checksum(values))
    return mask, params.with_values(np.where(keep, values, 0.0))


def apply_mask(params: ParamVector, mask: PruneMask) -> ParamVector:
    if mask.k != params.k:
        raise ValueError(f"mask length {mask.k} != parameter count {params.k}")
    return params.with_values(np.where(mask.keep, params.values, 0.0))


def nested(mask_low: PruneMask, mask_high: PruneMask) -> bool:
    """True iff the lower-rate pruned set is contained in the higher-rate one.

    Both masks must come from the same source parameters."""
    if mask_low.k != mask_high.k:
        raise ValueError(f"mask lengths differ: {mask_low.k} vs {mask_high.k}")
    if mask_low.source_checksum != mask_high.source_checksum:
        raise ValueError("masks were derived from different source parameters")
    return bool(np.all(mask_low.keep | ~mask_high.keep))


def prune_delta_norm(orig: ParamVector, pruned: ParamVector) -> float:
    """Euclidean norm of the pruning perturbation."""
    if orig.k != pruned.k:
        raise ValueError(f"parameter counts differ: {orig.k} vs {pruned.k}")
    return float(np.linalg.norm(orig.values - pruned.values))


_MAGIC = b"FPRUNEMK"


def save_mask(mask: PruneMask, path: str | Path) -> Path:
    """Bit-packed mask plus a `<path>.json` sidecar with rate and provenance."""
    path = Path(path)
    packed = np.packbits(mask.keep)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", mask.k))
        fh.write(packed.tobytes())
    sidecar = {
        "rate": mask.rate,
        "tie_policy_tag": mask.tie_policy_tag,
        "source_checksum": mask.source_checksum,
        "k": mask.k,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_mask(path: str | Path) -> PruneMask:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a mask file")
    (k,) = struct.unpack_from("<I", blob, len(_MAGIC))
    packed = np.frombuffer(blob[len(_MAGIC) + 4 :], dtype=np.uint8)
    keep = np.unpackbits(packed, count=k).astype(bool)
    sidecar = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    return PruneMask(keep, float(sidecar["rate"]), sidecar["tie_policy_tag"],
                     sidecar["source_checksum"])
