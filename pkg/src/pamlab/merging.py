"""Closed-form convex merging of a task solution into the running model.

After task t finishes at theta_star with curvature diagonal F_t, the
running model moves along the task vector delta = theta_star - theta_hat:

    theta_hat <- theta_hat + alpha * delta

where alpha minimizes the second-order estimate of the summed loss
increase over all tasks seen so far,

    J(alpha) = sum_i 0.5 * [e_i' F_i e_i + 2 alpha e_i' F_i delta
                            + alpha^2 delta' F_i delta],
    e_i = theta_hat - theta_star_i,

giving alpha = -(sum_i e_i' F_i delta) / (sum_i delta' F_i delta).
The applied value is clamped to [0, 1]; the raw value is kept for logs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateTaskVector, DimensionError
from .fisher import cross_form, quad_form
from .params import FisherDiag, TaskCheckpoint, check_same_dim

DEGENERATE_DENOM = 1e-12


@dataclass(frozen=True)
class MergeState:
    """The running merged model plus the per-task history behind it."""

    theta_hat: np.ndarray
    history: tuple[TaskCheckpoint, ...] = ()

    @property
    def t(self) -> int:
        return len(self.history)

    @classmethod
    def initial(cls, theta0: np.ndarray) -> "MergeState":
        return cls(theta_hat=np.array(theta0, dtype=np.float64), history=())


@dataclass(frozen=True)
class MergeInfo:
    """Diagnostics recorded for one merge step."""

    task_id: int
    alpha_raw: float
    alpha_used: float
    denominator: float
    j_at_alpha: float
    bound_first_term: float
    bound_second_term: float
    degenerate: bool


def _alpha_terms(
    state: MergeState, theta_star_t: np.ndarray, fisher_t: FisherDiag
) -> tuple[float, float]:
    """Numerator and denominator of the optimal coefficient."""
    check_same_dim(state.theta_hat, theta_star_t, fisher_t.values)
    delta = theta_star_t - state.theta_hat
    entries = [(ck.theta_star, ck.fisher) for ck in state.history]
    entries.append((theta_star_t, fisher_t))
    num = 0.0
    den = 0.0
    for theta_i, fisher_i in entries:
        e_i = state.theta_hat - theta_i
        num += cross_form(fisher_i, e_i, delta)
        den += quad_form(fisher_i, delta)
    return -num, den


def optimal_alpha(
    state: MergeState, theta_star_t: np.ndarray, fisher_t: FisherDiag
) -> tuple[float, float]:
    """(alpha_raw, alpha_used) minimizing J; raises on a vanished direction.

    With an empty history the i = t term forces alpha_raw = 1 exactly,
    because e_t = -delta makes numerator and denominator coincide.
    """
    num, den = _alpha_terms(state, theta_star_t, fisher_t)
    if den < DEGENERATE_DENOM:
        raise DegenerateTaskVector(f"merge denominator {den!r} below {DEGENERATE_DENOM}")
    raw = num / den
    return raw, min(1.0, max(0.0, raw))


def objective_J(
    state: MergeState, theta_star_t: np.ndarray, fisher_t: FisherDiag, alpha: float
) -> float:
    """Estimated total loss increase if the merge used coefficient alpha."""
    check_same_dim(state.theta_hat, theta_star_t, fisher_t.values)
    delta = theta_star_t - state.theta_hat
    entries = [(ck.theta_star, ck.fisher) for ck in state.history]
    entries.append((theta_star_t, fisher_t))
    total = 0.0
    for theta_i, fisher_i in entries:
        e_i = state.theta_hat - theta_i
        total += 0.5 * (
            quad_form(fisher_i, e_i)
            + 2.0 * alpha * cross_form(fisher_i, e_i, delta)
            + alpha * alpha * quad_form(fisher_i, delta)
        )
    return total


def delta_estimate(ckpt: TaskCheckpoint, theta_hat_t: np.ndarray) -> float:
    """Second-order estimate of task i's loss increase at theta_hat_t."""
    if ckpt.dim != theta_hat_t.size:
        raise DimensionError("checkpoint and vector dims differ")
    return 0.5 * quad_form(ckpt.fisher, theta_hat_t - ckpt.theta_star)


@dataclass(frozen=True)
class BoundCheck:
    first_term: float
    second_term: float
    holds: bool


def bound_check(
    state: MergeState, theta_star_t: np.ndarray, fisher_t: FisherDiag
) -> BoundCheck:
    """Evaluate J at the optimal alpha as (first term) - (second term).

    first = 0.5 * sum_i e_i' F_i e_i, second = (sum_i e_i' F_i delta)^2 /
    (2 sum_i delta' F_i delta).  Cauchy-Schwarz guarantees second <= first,
    with equality when delta is parallel to the single displacement.
    """
    check_same_dim(state.theta_hat, theta_star_t, fisher_t.values)
    delta = theta_star_t - state.theta_hat
    entries = [(ck.theta_star, ck.fisher) for ck in state.history]
    entries.append((theta_star_t, fisher_t))
    first = 0.0
    cross = 0.0
    den = 0.0
    for theta_i, fisher_i in entries:
        e_i = state.theta_hat - theta_i
        first += 0.5 * quad_form(fisher_i, e_i)
        cross += cross_form(fisher_i, e_i, delta)
        den += quad_form(fisher_i, delta)
    den = max(den, DEGENERATE_DENOM)
    second = cross * cross / (2.0 * den)
    return BoundCheck(first, second, holds=bool(second <= first + 1e-9))


def apply_alpha(
    theta_prev: np.ndarray,
    theta_star: np.ndarray,
    alpha: float,
    carry_coords: np.ndarray | None = None,
) -> np.ndarray:
    """Move theta_prev toward theta_star by alpha along their difference.

    alpha 0 and 1 reproduce the endpoints exactly.  Coordinates listed in
    carry_coords are copied from theta_star verbatim regardless of alpha;
    the run loop uses this for head columns of newly introduced classes.
    """
    check_same_dim(theta_prev, theta_star)
    if alpha == 1.0:
        merged = theta_star.copy()
    elif alpha == 0.0:
        merged = theta_prev.copy()
    else:
        merged = theta_prev + alpha * (theta_star - theta_prev)
    if carry_coords is not None and carry_coords.size:
        merged[carry_coords] = theta_star[carry_coords]
    return merged


def merge(
    state: MergeState,
    task_id: int,
    theta_star_t: np.ndarray,
    fisher_t: FisherDiag,
    classes,
    alpha: float | None = None,
    carry_coords: np.ndarray | None = None,
) -> tuple[MergeState, MergeInfo]:
    """Fold task t's solution into the running model.

    alpha None selects the closed-form optimum; a degenerate task vector
    falls back to alpha = 1 and is flagged in the returned info.  Forced
    alpha values (baselines) are recorded as both raw and clamped applied
    value.
    """
    num, den = _alpha_terms(state, theta_star_t, fisher_t)
    degenerate = False
    if alpha is None:
        if den < DEGENERATE_DENOM:
            degenerate = True
            raw = 1.0
        else:
            raw = num / den
    else:
        raw = float(alpha)
    used = min(1.0, max(0.0, raw))
    bound = bound_check(state, theta_star_t, fisher_t)
    info = MergeInfo(
        task_id=task_id,
        alpha_raw=raw,
        alpha_used=used,
        denominator=den,
        j_at_alpha=objective_J(state, theta_star_t, fisher_t, used),
        bound_first_term=bound.first_term,
        bound_second_term=bound.second_term,
        degenerate=degenerate,
    )
    ckpt = TaskCheckpoint(
        task_id=task_id,
        theta_star=theta_star_t,
        fisher=fisher_t,
        classes=tuple(sorted(int(c) for c in classes)),
        alpha_raw=raw,
        alpha_used=used,
    )
    merged = apply_alpha(state.theta_hat, theta_star_t, used, carry_coords)
    new_state = replace(state, theta_hat=merged, history=state.history + (ckpt,))
    return new_state, info
