"""Small differentiable classifiers over one flat parameter vector.

Two kinds are supported: ``logistic`` (a single linear layer) and ``mlp2``
(one tanh hidden layer).  The classifier head holds one column per class
over the union of all classes the experiment will ever see; class subsets
restrict the softmax and the argmax, which is how incremental evaluation
works.  Everything is plain float64 numpy and bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyDataError,
    LabelError,
    UnsupportedModelError,
)
from .params import Layout, LowRankAdapter, as_vector

KINDS = ("logistic", "mlp2")

# activation -> (value, derivative expressed through the value)
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
}


@dataclass
class Batch:
    """A labelled sample block: inputs (n, d) and integer labels (n,)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DimensionError(f"inputs must be (n, d), got {self.inputs.shape}")
        if self.labels.ndim != 1 or self.labels.size != self.inputs.shape[0]:
            raise DimensionError("labels must be 1-D and match the number of rows")
        if self.inputs.shape[0] == 0:
            raise EmptyDataError("batch has no samples")
        if np.any(self.labels < 0):
            raise LabelError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass(eq=False)
class ModelSpec:
    """Immutable description of one model: architecture plus frozen base.

    ``num_classes`` is the total head width allocated up front; which
    columns are active at any point is decided by the class subsets passed
    to the loss and accuracy functions.  ``frozen_base`` holds the flat
    coordinates of the pretrained starting point.
    """

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "tanh"
    adapter_rank: int = 0
    frozen_base: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise UnsupportedModelError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ConfigError("input_dim and num_classes must be positive")
        if self.kind == "mlp2" and self.hidden_dim < 1:
            raise ConfigError("mlp2 requires hidden_dim >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        lay = layout(self)
        sites = adapter_sites(self)
        if self.adapter_rank < 0:
            raise ConfigError("adapter_rank must be >= 0")
        if self.adapter_rank > 0 and sites:
            cap = min(min(lay.shape_of(s)) for s in sites)
            if self.adapter_rank > cap:
                raise ConfigError(
                    f"adapter_rank {self.adapter_rank} exceeds site capacity {cap}"
                )
        if self.frozen_base is None:
            self.frozen_base = np.zeros(lay.dim)
        else:
            self.frozen_base = as_vector(self.frozen_base, lay.dim)

    @property
    def dim(self) -> int:
        return layout(self).dim


def layout(spec: ModelSpec) -> Layout:
    """The flat coordinate layout for a spec's kind and sizes."""
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "logistic":
        return Layout.from_blocks([("w", (d, c)), ("b", (c,))])
    return Layout.from_blocks(
        [("w1", (d, h)), ("b1", (h,)), ("w2", (h, c)), ("b2", (c,))]
    )


def adapter_sites(spec: ModelSpec) -> tuple[str, ...]:
    """Weight blocks that per-task low-rank adapters are allowed to touch."""
    return ("w1",) if spec.kind == "mlp2" else ()


def head_blocks(spec: ModelSpec) -> tuple[str, str]:
    return ("w", "b") if spec.kind == "logistic" else ("w2", "b2")


def head_coords(spec: ModelSpec, classes) -> np.ndarray:
    """Flat indices of the head columns (weights and bias) for ``classes``."""
    lay = layout(spec)
    wname, bname = head_blocks(spec)
    rows = lay.shape_of(wname)[0]
    ncls = lay.shape_of(wname)[1]
    woff = lay.slice_of(wname).start
    boff = lay.slice_of(bname).start
    cols = np.asarray(sorted(int(c) for c in classes), dtype=np.int64)
    if cols.size and (cols[0] < 0 or cols[-1] >= ncls):
        raise LabelError(f"class ids {cols.tolist()} outside head width {ncls}")
    widx = (woff + np.arange(rows)[:, None] * ncls + cols[None, :]).ravel()
    return np.concatenate([widx, boff + cols])


def trainable_mask(spec: ModelSpec, new_classes, include_adapter: bool = True) -> np.ndarray:
    """Boolean mask of coordinates a task is allowed to move."""
    mask = np.zeros(spec.dim, dtype=bool)
    if include_adapter and spec.adapter_rank > 0:
        lay = layout(spec)
        for site in adapter_sites(spec):
            mask[lay.slice_of(site)] = True
    idx = head_coords(spec, new_classes)
    mask[idx] = True
    return mask


def new_adapter(spec: ModelSpec, rng: np.random.Generator) -> LowRankAdapter | None:
    """Fresh adapter whose materialized delta is zero but trainable.

    One factor starts at small random values and the other at zero; a
    double-zero start would have identically zero gradients.
    """
    sites = adapter_sites(spec)
    if not sites or spec.adapter_rank == 0:
        return None
    site = sites[0]
    d, k = layout(spec).shape_of(site)
    a = rng.standard_normal((d, spec.adapter_rank)) / np.sqrt(d)
    b = np.zeros((spec.adapter_rank, k))
    return LowRankAdapter(a=a, b=b, site=site)


def _class_index(spec: ModelSpec, classes) -> np.ndarray:
    if classes is None:
        return np.arange(spec.num_classes, dtype=np.int64)
    cols = np.asarray(sorted(int(c) for c in set(classes)), dtype=np.int64)
    if cols.size == 0:
        raise LabelError("class subset is empty")
    if cols[0] < 0 or cols[-1] >= spec.num_classes:
        raise LabelError(f"class subset {cols.tolist()} outside [0, {spec.num_classes})")
    return cols


def forward(spec: ModelSpec, theta: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Logits (n, num_classes) at the flat parameter vector ``theta``."""
    lay = layout(spec)
    if theta.size != lay.dim:
        raise DimensionError(f"theta dim {theta.size} != model dim {lay.dim}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"inputs must be (n, {spec.input_dim}), got {x.shape}")
    if spec.kind == "logistic":
        return x @ lay.view(theta, "w") + lay.view(theta, "b")
    act, _ = ACTIVATIONS[spec.activation]
    hidden = act(x @ lay.view(theta, "w1") + lay.view(theta, "b1"))
    return hidden @ lay.view(theta, "w2") + lay.view(theta, "b2")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels: np.ndarray, cols: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(cols, labels)
    bad = (pos >= cols.size) | (cols[np.minimum(pos, cols.size - 1)] != labels)
    if np.any(bad):
        raise LabelError(
            f"labels {sorted(set(labels[bad].tolist()))} outside active classes"
        )
    return pos


def ce_loss(spec: ModelSpec, theta: np.ndarray, batch: Batch, classes=None) -> float:
    """Mean cross-entropy over the batch, softmax over ``classes`` columns."""
    cols = _class_index(spec, classes)
    pos = _check_labels(batch.labels, cols)
    logp = _log_softmax(forward(spec, theta, batch.inputs)[:, cols])
    return float(-logp[np.arange(batch.n), pos].mean())


def loss_and_grad(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    classes=None,
    mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy and its analytic gradient in the flat space.

    Coordinates where ``mask`` is False are frozen and get zero gradient.
    """
    lay = layout(spec)
    if theta.size != lay.dim:
        raise DimensionError(f"theta dim {theta.size} != model dim {lay.dim}")
    cols = _class_index(spec, classes)
    pos = _check_labels(batch.labels, cols)
    x = batch.inputs
    n = batch.n

    if spec.kind == "logistic":
        logits = x @ lay.view(theta, "w") + lay.view(theta, "b")
        hidden = None
    else:
        act, _ = ACTIVATIONS[spec.activation]
        hidden = act(x @ lay.view(theta, "w1") + lay.view(theta, "b1"))
        logits = hidden @ lay.view(theta, "w2") + lay.view(theta, "b2")

    logp = _log_softmax(logits[:, cols])
    loss = float(-logp[np.arange(n), pos].mean())

    dsub = np.exp(logp)
    dsub[np.arange(n), pos] -= 1.0
    dsub /= n
    dlogits = np.zeros_like(logits)
    dlogits[:, cols] = dsub

    grad_vec = np.zeros(lay.dim)
    if spec.kind == "logistic":
        lay.view(grad_vec, "w")[:] = x.T @ dlogits
        lay.view(grad_vec, "b")[:] = dlogits.sum(axis=0)
    else:
        _, dact = ACTIVATIONS[spec.activation]
        lay.view(grad_vec, "w2")[:] = hidden.T @ dlogits
        lay.view(grad_vec, "b2")[:] = dlogits.sum(axis=0)
        dz = (dlogits @ lay.view(theta, "w2").T) * dact(hidden)
        lay.view(grad_vec, "w1")[:] = x.T @ dz
        lay.view(grad_vec, "b1")[:] = dz.sum(axis=0)
    if mask is not None:
        grad_vec[~mask] = 0.0
    return loss, grad_vec


def grad(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    classes=None,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    return loss_and_grad(spec, theta, batch, classes, mask)[1]


def predict(spec: ModelSpec, theta: np.ndarray, inputs: np.ndarray, class_subset=None) -> np.ndarray:
    """Predicted labels; argmax restricted to the subset, ties to lowest id."""
    cols = _class_index(spec, class_subset)
    logits = forward(spec, theta, inputs)[:, cols]
    # np.argmax returns the first maximum; cols is sorted, so ties resolve
    # to the lowest class id.
    return cols[np.argmax(logits, axis=1)]


def accuracy(spec: ModelSpec, theta: np.ndarray, batch: Batch, class_subset=None) -> float:
    if batch.n == 0:
        raise EmptyDataError("accuracy over an empty dataset")
    pred = predict(spec, theta, batch.inputs, class_subset)
    return float((pred == batch.labels).mean())
