"""Per-task training with stochastic scaling of the current task vector.

Each step evaluates the loss at theta_hat + (1 + e) * delta, where delta
is the materialized adapter-plus-new-head update and e is drawn from
{-eps, 0, +eps} with probabilities (p_minus, p0, p_plus).  In expectation
this equals a three-point regularized objective whose strength is
lambda_eff = eps^2 * (1 - p0) / 2; the exact3 mode optimizes that
expectation directly and the gauss_control mode replaces the scaled task
vector by norm-matched Gaussian noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, NumericalError
from .models import (
    Batch,
    ModelSpec,
    adapter_sites,
    ce_loss,
    head_blocks,
    head_coords,
    layout,
    loss_and_grad,
    new_adapter,
)
from .streams import TaskDataset, stream_rng

MODES = ("stochastic", "exact3", "off", "gauss_control")

DIVERGENCE_LIMIT = 1e6

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# purpose tags for the per-step counter-based streams
_P_SHUFFLE = 11
_P_BRANCH = 12
_P_NOISE = 13
_P_ADAPTER = 14


@dataclass(frozen=True)
class PerturbConfig:
    """Perturbation settings; branch probabilities derive from p0."""

    eps: float = 0.5
    p0: float = 1.0 / 3.0
    mode: str = "stochastic"

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0.0 <= self.p0 <= 1.0:
            raise ConfigError("p0 must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"unknown perturbation mode {self.mode!r}")

    @property
    def p_plus(self) -> float:
        return (1.0 - self.p0) / 2.0

    @property
    def p_minus(self) -> float:
        return (1.0 - self.p0) / 2.0

    @property
    def lambda_eff(self) -> float:
        return self.eps * self.eps * (1.0 - self.p0) / 2.0


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings: AdamW with decoupled weight decay."""

    epochs: int = 15
    batch_size: int = 32
    lr_adapter: float = 1e-3
    lr_head: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr_adapter <= 0 or self.lr_head <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


class AdamW:
    """Adaptive moment optimizer with decoupled weight decay.

    Parameters are updated in place; each array carries its own learning
    rate so adapter factors and head columns can differ.
    """

    def __init__(self, params_with_lr, weight_decay: float = 0.0):
        self.params = [p for p, _ in params_with_lr]
        self.lrs = [lr for _, lr in params_with_lr]
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient count does not match parameter count")
        self.step_count += 1
        b1, b2 = ADAM_BETAS
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


def sample_perturbation(rng: np.random.Generator, cfg: PerturbConfig) -> float:
    """Draw from {-eps, 0, +eps} with probabilities (p_minus, p0, p_plus)."""
    u = rng.random()
    if u < cfg.p_minus:
        return -cfg.eps
    if u < cfg.p_minus + cfg.p0:
        return 0.0
    return cfg.eps


def perturbed_loss(
    spec: ModelSpec,
    theta_hat_prev: np.ndarray,
    delta: np.ndarray,
    eps_tilde: float,
    batch: Batch,
    classes=None,
) -> float:
    """Cross-entropy at theta_hat_prev + (1 + eps_tilde) * delta."""
    loss = ce_loss(spec, theta_hat_prev + (1.0 + eps_tilde) * delta, batch, classes)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite perturbed loss {loss!r}")
    return loss


def regularized_loss_exact3(
    spec: ModelSpec,
    theta_hat_prev: np.ndarray,
    delta: np.ndarray,
    cfg: PerturbConfig,
    batch: Batch,
    classes=None,
    lam: float | None = None,
) -> float:
    """The three-point objective the stochastic branch equals in expectation.

    (1 - 2 lam / eps^2) L(theta) + (lam / eps^2) [L(theta + eps*delta)
    + L(theta - eps*delta)] with theta = theta_hat_prev + delta.
    """
    lam = cfg.lambda_eff if lam is None else float(lam)
    e2 = cfg.eps * cfg.eps
    if lam > e2 / 2.0 + 1e-15:
        raise ConfigError(f"lambda {lam} exceeds eps^2/2 = {e2 / 2.0}")
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    w0 = 1.0 - 2.0 * lam / e2
    wpm = lam / e2
    l0 = perturbed_loss(spec, theta_hat_prev, delta, 0.0, batch, classes)
    lp = perturbed_loss(spec, theta_hat_prev, delta, cfg.eps, batch, classes)
    lm = perturbed_loss(spec, theta_hat_prev, delta, -cfg.eps, batch, classes)
    return w0 * l0 + wpm * (lp + lm)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    n_minus: int
    n_zero: int
    n_plus: int
    grad_norm: float


@dataclass
class TrainLog:
    task_id: int
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "n_minus", "n_zero", "n_plus", "grad_norm"])
            for rec in self.epochs:
                writer.writerow(
                    [rec.epoch, repr(rec.mean_loss), rec.n_minus, rec.n_zero,
                     rec.n_plus, repr(rec.grad_norm)]
                )


class _TaskParams:
    """Trainable state for one task: adapter factors plus new head columns."""

    def __init__(self, spec: ModelSpec, new_classes, seed: int, task_id: int):
        self.spec = spec
        self.lay = layout(spec)
        self.adapter = new_adapter(spec, stream_rng(seed, task_id, _P_ADAPTER))
        self.new_classes = tuple(sorted(int(c) for c in new_classes))
        wname, _ = head_blocks(spec)
        rows = self.lay.shape_of(wname)[0]
        self.head_w = np.zeros((rows, len(self.new_classes)))
        self.head_b = np.zeros(len(self.new_classes))
        if self.new_classes:
            self.head_w_idx = head_coords(spec, self.new_classes)[: rows * len(self.new_classes)]
            self.head_b_idx = head_coords(spec, self.new_classes)[rows * len(self.new_classes):]
        else:
            self.head_w_idx = np.empty(0, dtype=np.int64)
            self.head_b_idx = np.empty(0, dtype=np.int64)

    def trainables(self, tcfg: TrainConfig):
        out = []
        if self.adapter is not None:
            out.append((self.adapter.a, tcfg.lr_adapter))
            out.append((self.adapter.b, tcfg.lr_adapter))
        if self.new_classes:
            out.append((self.head_w, tcfg.lr_head))
            out.append((self.head_b, tcfg.lr_head))
        return out

    def delta(self) -> np.ndarray:
        """Materialized flat task vector for the current factor values."""
        vec = np.zeros(self.lay.dim)
        if self.adapter is not None:
            vec[self.lay.slice_of(self.adapter.site)] = (
                self.adapter.a @ self.adapter.b
            ).ravel()
        if self.new_classes:
            # head_coords orders w-block indices row-major, matching ravel()
            vec[self.head_w_idx] = self.head_w.ravel()
            vec[self.head_b_idx] = self.head_b
        return vec

    def support_coords(self) -> np.ndarray:
        """Flat indices the task vector can occupy (fixed for the task)."""
        parts = []
        if self.adapter is not None:
            sl = self.lay.slice_of(self.adapter.site)
            parts.append(np.arange(sl.start, sl.stop))
        parts.append(self.head_w_idx)
        parts.append(self.head_b_idx)
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def lift(self, flat_grad: np.ndarray, scale: float):
        """Chain flat-space gradients onto the trainable factors."""
        out = []
        if self.adapter is not None:
            g_site = flat_grad[self.lay.slice_of(self.adapter.site)].reshape(
                self.lay.shape_of(self.adapter.site)
            )
            out.append(scale * (g_site @ self.adapter.b.T))
            out.append(scale * (self.adapter.a.T @ g_site))
        if self.new_classes:
            out.append(scale * flat_grad[self.head_w_idx].reshape(self.head_w.shape))
            out.append(scale * flat_grad[self.head_b_idx])
        return out


def train_task(
    spec: ModelSpec,
    theta_hat_prev: np.ndarray,
    task: TaskDataset,
    tcfg: TrainConfig,
    pcfg: PerturbConfig,
    classes=None,
    new_classes=None,
) -> tuple[np.ndarray, TrainLog]:
    """Train task ``task`` on top of the frozen running model.

    ``classes`` is the active softmax set (defaults to the task's own);
    ``new_classes`` are the head columns this task introduces (defaults to
    all task classes).  Only adapter factors and new head columns move;
    every other coordinate of theta_hat_prev is untouched, exactly.
    """
    classes = tuple(sorted(task.classes)) if classes is None else tuple(sorted(classes))
    new_classes = task.classes if new_classes is None else new_classes
    params = _TaskParams(spec, new_classes, tcfg.seed, task.task_id)
    trainables = params.trainables(tcfg)
    opt = AdamW(trainables, tcfg.weight_decay) if trainables else None

    inputs, labels = task.train.inputs, task.train.labels
    n = inputs.shape[0]
    steps = math.ceil(n / tcfg.batch_size)
    log = TrainLog(task_id=task.task_id)

    for epoch in range(1, tcfg.epochs + 1):
        order = stream_rng(tcfg.seed, task.task_id, epoch, _P_SHUFFLE).permutation(n)
        losses = []
        grad_norms = []
        counts = {-1: 0, 0: 0, 1: 0}
        for step in range(steps):
            idx = order[step * tcfg.batch_size : (step + 1) * tcfg.batch_size]
            batch = Batch(inputs[idx], labels[idx])
            delta = params.delta()

            if pcfg.mode == "off":
                eps_t = 0.0
            elif pcfg.mode in ("stochastic", "gauss_control"):
                eps_t = sample_perturbation(
                    stream_rng(tcfg.seed, task.task_id, epoch, step, _P_BRANCH), pcfg
                )
            else:  # exact3 evaluates all branches below
                eps_t = None

            if pcfg.mode == "exact3":
                loss = 0.0
                grads = None
                for weight, branch in (
                    (pcfg.p0, 0.0),
                    (pcfg.p_plus, pcfg.eps),
                    (pcfg.p_minus, -pcfg.eps),
                ):
                    if weight == 0.0:
                        continue
                    point = theta_hat_prev + (1.0 + branch) * delta
                    l_b, g_b = loss_and_grad(spec, point, batch, classes)
                    loss += weight * l_b
                    lifted = params.lift(g_b, (1.0 + branch) * weight)
                    grads = lifted if grads is None else [a + b for a, b in zip(grads, lifted)]
                counts[0] += 1
            elif pcfg.mode == "gauss_control" and eps_t != 0.0:
                # noise lives on the task-vector support, norm-matched to
                # the perturbation this step would have applied
                noise_rng = stream_rng(tcfg.seed, task.task_id, epoch, step, _P_NOISE)
                support = params.support_coords()
                raw = noise_rng.standard_normal(support.size)
                target = pcfg.eps * float(np.linalg.norm(delta))
                nrm = float(np.linalg.norm(raw))
                noise = np.zeros(spec.dim)
                if nrm > 0 and target > 0:
                    noise[support] = raw * (target / nrm)
                point = theta_hat_prev + delta + noise
                loss, g = loss_and_grad(spec, point, batch, classes)
                grads = params.lift(g, 1.0)
                counts[int(np.sign(eps_t))] += 1
            else:
                eps_t = float(eps_t)
                point = theta_hat_prev + (1.0 + eps_t) * delta
                loss, g = loss_and_grad(spec, point, batch, classes)
                grads = params.lift(g, 1.0 + eps_t)
                counts[int(np.sign(eps_t))] += 1

            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"task {task.task_id} epoch {epoch} step {step}: loss {loss!r}"
                )
            losses.append(loss)
            if opt is not None and grads:
                grad_norms.append(
                    math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                )
                opt.step(grads)
            else:
                grad_norms.append(0.0)

        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                n_minus=counts[-1],
                n_zero=counts[0],
                n_plus=counts[1],
                grad_norm=float(np.mean(grad_norms)),
            )
        )

    theta_star = theta_hat_prev + params.delta()
    return theta_star, log
