"""Flat parameter-space algebra, low-rank adapters, and task checkpoints.

A parameter vector is a plain 1-D float64 numpy array.  All mergeable
weights of a model are flattened into one fixed coordinate layout that is
established when an experiment starts, so vectors produced by different
tasks can be added, differenced, and merged without index bookkeeping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and return a finite 1-D float64 copy of ``values``."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {vec.shape}")
    if dim is not None and vec.size != dim:
        raise DimensionError(f"expected dim {dim}, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise FormatError("vector contains non-finite entries")
    return vec.copy()


def check_same_dim(*vecs: np.ndarray) -> int:
    dims = {v.size for v in vecs}
    if len(dims) != 1:
        raise DimensionError(f"mismatched vector dims: {sorted(dims)}")
    return dims.pop()


def axpy(base: np.ndarray, scale: float, delta: np.ndarray) -> np.ndarray:
    """Return ``base + scale * delta`` as a new vector."""
    check_same_dim(base, delta)
    if not np.isfinite(scale):
        raise ValueError(f"non-finite scale {scale!r}")
    return base + scale * delta


@dataclass(frozen=True)
class Layout:
    """Named blocks packed into one flat coordinate space."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    dim: int

    @classmethod
    def from_blocks(cls, blocks: list[tuple[str, tuple[int, ...]]]) -> "Layout":
        names, shapes, offsets = [], [], []
        off = 0
        for name, shape in blocks:
            names.append(name)
            shapes.append(tuple(shape))
            offsets.append(off)
            off += int(np.prod(shape))
        return cls(tuple(names), tuple(shapes), tuple(offsets), off)

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self.shapes[self.names.index(name)]

    def slice_of(self, name: str) -> slice:
        i = self.names.index(name)
        size = int(np.prod(self.shapes[i]))
        return slice(self.offsets[i], self.offsets[i] + size)

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        """A reshaped view of ``theta``'s block; writes through to theta."""
        if theta.size != self.dim:
            raise DimensionError(f"vector dim {theta.size} != layout dim {self.dim}")
        return theta[self.slice_of(name)].reshape(self.shape_of(name))


@dataclass
class LowRankAdapter:
    """Rank-r factorization ``a @ b`` targeting one named weight block."""

    a: np.ndarray  # (d, r)
    b: np.ndarray  # (r, k)
    site: str

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise DimensionError("adapter factors must be 2-D")
        if self.a.shape[1] != self.b.shape[0]:
            raise DimensionError(
                f"inner dims differ: a is {self.a.shape}, b is {self.b.shape}"
            )
        d, r = self.a.shape
        k = self.b.shape[1]
        if r > min(d, k):
            raise DimensionError(f"rank {r} exceeds min(d, k) = {min(d, k)}")

    @property
    def rank(self) -> int:
        return self.a.shape[1]


def materialize(adapter: LowRankAdapter, layout: Layout) -> np.ndarray:
    """Embed the adapter's product into a flat vector, zeros elsewhere."""
    if adapter.site not in layout.names:
        raise DimensionError(f"layout has no block named {adapter.site!r}")
    shape = layout.shape_of(adapter.site)
    if (adapter.a.shape[0], adapter.b.shape[1]) != shape:
        raise DimensionError(
            f"adapter product shape {(adapter.a.shape[0], adapter.b.shape[1])} "
            f"does not match block {adapter.site!r} shape {shape}"
        )
    delta = np.zeros(layout.dim)
    delta[layout.slice_of(adapter.site)] = (adapter.a @ adapter.b).ravel()
    return delta


@dataclass
class FisherDiag:
    """Diagonal curvature estimate: non-negative entries, one per coordinate."""

    values: np.ndarray
    n_samples: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DimensionError("fisher diagonal must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise FormatError("fisher diagonal contains non-finite entries")
        if np.any(self.values < 0):
            raise FormatError("fisher diagonal has negative entries")
        if self.n_samples < 1:
            raise FormatError("n_samples must be positive")

    @property
    def dim(self) -> int:
        return self.values.size


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


@dataclass
class TaskCheckpoint:
    """Frozen per-task state: solution, curvature, classes, merge weights."""

    task_id: int
    theta_star: np.ndarray
    fisher: FisherDiag
    classes: tuple[int, ...]
    alpha_raw: float
    alpha_used: float

    def __post_init__(self) -> None:
        if self.task_id < 1:
            raise FormatError(f"task_id must be >= 1, got {self.task_id}")
        self.theta_star = as_vector(self.theta_star)
        check_same_dim(self.theta_star, self.fisher.values)
        self.classes = tuple(int(c) for c in self.classes)
        if abs(self.alpha_used - _clamp01(self.alpha_raw)) > 1e-12:
            raise FormatError(
                f"alpha_used {self.alpha_used} != clamp(alpha_raw={self.alpha_raw})"
            )

    @property
    def dim(self) -> int:
        return self.theta_star.size


def checkpoint_path(out_dir: str | Path, task_id: int) -> Path:
    return Path(out_dir) / f"task_{task_id}.ckpt.json"


def save_checkpoint(ckpt: TaskCheckpoint, path: str | Path) -> None:
    """Write a checkpoint as JSON with round-trip float precision."""
    payload = {
        "task_id": ckpt.task_id,
        "dim": ckpt.dim,
        "theta_star": ckpt.theta_star.tolist(),
        "fisher": {
            "values": ckpt.fisher.values.tolist(),
            "n_samples": ckpt.fisher.n_samples,
        },
        "classes": list(ckpt.classes),
        "alpha_raw": ckpt.alpha_raw,
        "alpha_used": ckpt.alpha_used,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> TaskCheckpoint:
    """Load a checkpoint; malformed content raises FormatError."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed checkpoint {path}: {exc}") from exc
    try:
        dim = int(payload["dim"])
        theta_star = as_vector(payload["theta_star"], dim)
        fisher = FisherDiag(
            as_vector(payload["fisher"]["values"], dim),
            int(payload["fisher"]["n_samples"]),
        )
        return TaskCheckpoint(
            task_id=int(payload["task_id"]),
            theta_star=theta_star,
            fisher=fisher,
            classes=tuple(int(c) for c in payload["classes"]),
            alpha_raw=float(payload["alpha_raw"]),
            alpha_used=float(payload["alpha_used"]),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, DimensionError) as exc:
        raise FormatError(f"invalid checkpoint {path}: {exc}") from exc
