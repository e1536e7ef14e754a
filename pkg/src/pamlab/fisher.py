"""Diagonal curvature estimates and quadratic forms built on them.

The empirical diagonal here is the per-coordinate mean of squared
log-likelihood gradients, taken at a task's solution over its training
set with true labels.  It stands in for the loss Hessian inside the merge
objective; the finite-difference and analytic-Hessian helpers exist to
check that substitution.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import (
    DimensionError,
    EmptyDataError,
    NumericalError,
    UnsupportedModelError,
)
from .models import (
    ACTIVATIONS,
    Batch,
    ModelSpec,
    _check_labels,
    _class_index,
    _log_softmax,
    ce_loss,
    layout,
)
from .params import FisherDiag

FISHER_FLOOR = 1e-12  # used wherever a fisher diagonal appears as a denominator


def _per_sample_dlogits(spec: ModelSpec, theta: np.ndarray, batch: Batch, classes):
    """Per-sample d(-log p_y)/d(logits) plus the forward intermediates."""
    lay = layout(spec)
    cols = _class_index(spec, classes)
    pos = _check_labels(batch.labels, cols)
    x = batch.inputs
    if spec.kind == "logistic":
        hidden = None
        logits = x @ lay.view(theta, "w") + lay.view(theta, "b")
    else:
        act, _ = ACTIVATIONS[spec.activation]
        hidden = act(x @ lay.view(theta, "w1") + lay.view(theta, "b1"))
        logits = hidden @ lay.view(theta, "w2") + lay.view(theta, "b2")
    probs = np.exp(_log_softmax(logits[:, cols]))
    dsub = probs.copy()
    dsub[np.arange(batch.n), pos] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[:, cols] = dsub
    return dlogits, hidden, probs, cols


def fisher_diag(
    spec: ModelSpec,
    theta: np.ndarray,
    batch: Batch,
    classes=None,
    mask: np.ndarray | None = None,
) -> FisherDiag:
    """Mean squared per-sample log-likelihood gradient, per coordinate.

    Frozen coordinates (mask False) get exactly zero.
    """
    if batch.n == 0:
        raise EmptyDataError("fisher_diag over an empty dataset")
    lay = layout(spec)
    dlogits, hidden, _, _ = _per_sample_dlogits(spec, theta, batch, classes)
    x2 = batch.inputs**2
    dl2 = dlogits**2
    diag = np.zeros(lay.dim)
    if spec.kind == "logistic":
        lay.view(diag, "w")[:] = x2.T @ dl2
        lay.view(diag, "b")[:] = dl2.sum(axis=0)
    else:
        _, dact = ACTIVATIONS[spec.activation]
        lay.view(diag, "w2")[:] = hidden.T**2 @ dl2
        lay.view(diag, "b2")[:] = dl2.sum(axis=0)
        dz2 = ((dlogits @ lay.view(theta, "w2").T) * dact(hidden)) ** 2
        lay.view(diag, "w1")[:] = x2.T @ dz2
        lay.view(diag, "b1")[:] = dz2.sum(axis=0)
    diag /= batch.n
    if mask is not None:
        diag[~mask] = 0.0
    return FisherDiag(diag, batch.n)


def quad_form(diag: FisherDiag, v: np.ndarray) -> float:
    """v' diag(F) v."""
    if diag.dim != v.size:
        raise DimensionError(f"fisher dim {diag.dim} != vector dim {v.size}")
    return float(np.sum(diag.values * v * v))


def cross_form(diag: FisherDiag, u: np.ndarray, v: np.ndarray) -> float:
    """u' diag(F) v; exactly symmetric in u and v."""
    if diag.dim != u.size or diag.dim != v.size:
        raise DimensionError("fisher/vector dims differ")
    return float(np.sum(diag.values * u * v))


def fd_quad_form(
    loss_fn: Callable[[np.ndarray], float],
    theta: np.ndarray,
    delta: np.ndarray,
    eps: float,
) -> float:
    """Symmetric three-point estimate of the curvature quadratic form.

    [L(theta + eps*delta) + L(theta - eps*delta) - 2 L(theta)] / eps**2;
    exact on quadratics, O(eps^2) error on smooth losses.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if theta.size != delta.size:
        raise DimensionError("theta and delta dims differ")
    lp = loss_fn(theta + eps * delta)
    lm = loss_fn(theta - eps * delta)
    l0 = loss_fn(theta)
    out = (lp + lm - 2.0 * l0) / (eps * eps)
    if not np.isfinite(out):
        raise NumericalError(f"non-finite curvature estimate {out!r}")
    return float(out)


def quad_form_fd(
    spec: ModelSpec,
    theta: np.ndarray,
    delta: np.ndarray,
    eps: float,
    batch: Batch,
    classes=None,
) -> float:
    """fd_quad_form specialized to a model's cross-entropy on one batch."""
    return fd_quad_form(lambda p: ce_loss(spec, p, batch, classes), theta, delta, eps)


def logistic_hessian_quad(
    spec: ModelSpec,
    theta: np.ndarray,
    delta: np.ndarray,
    batch: Batch,
    classes=None,
) -> float:
    """Exact delta' H delta for the logistic cross-entropy Hessian.

    Per sample the Hessian in logit space is diag(p) - p p'; the linear
    logit map lifts it to parameter space, so the quadratic form reduces
    to moments of u = J delta, computed without materializing H.
    """
    if spec.kind != "logistic":
        raise UnsupportedModelError("analytic Hessian oracle requires kind='logistic'")
    if theta.size != delta.size:
        raise DimensionError("theta and delta dims differ")
    lay = layout(spec)
    cols = _class_index(spec, classes)
    _check_labels(batch.labels, cols)
    logits = batch.inputs @ lay.view(theta, "w") + lay.view(theta, "b")
    probs = np.exp(_log_softmax(logits[:, cols]))
    u = (batch.inputs @ lay.view(delta, "w") + lay.view(delta, "b"))[:, cols]
    quad = np.sum(probs * u * u, axis=1) - np.sum(probs * u, axis=1) ** 2
    return float(quad.mean())


def logistic_hessian_diag(
    spec: ModelSpec, theta: np.ndarray, batch: Batch, classes=None
) -> np.ndarray:
    """Exact diagonal of the logistic cross-entropy Hessian."""
    if spec.kind != "logistic":
        raise UnsupportedModelError("analytic Hessian oracle requires kind='logistic'")
    lay = layout(spec)
    cols = _class_index(spec, classes)
    _check_labels(batch.labels, cols)
    logits = batch.inputs @ lay.view(theta, "w") + lay.view(theta, "b")
    probs = np.exp(_log_softmax(logits[:, cols]))
    pvar = probs * (1.0 - probs)  # diag of diag(p) - p p'
    diag = np.zeros(lay.dim)
    wview = lay.view(diag, "w")
    wview[:, cols] = (batch.inputs**2).T @ pvar / batch.n
    lay.view(diag, "b")[cols] = pvar.sum(axis=0) / batch.n
    return diag
