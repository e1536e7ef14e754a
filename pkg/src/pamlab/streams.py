"""Deterministic synthetic task streams for class-incremental experiments.

Every task is regenerable in isolation: the RNG for task t is seeded from
(master_seed, t, purpose) so random access and full-sequence generation
agree bit for bit.  Train and test splits come from disjoint purpose
streams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .models import Batch

GENERATORS = ("gauss_split", "rot_moons", "perm_features")

MEAN_RADIUS = 3.0
ANGLE_JITTER = 0.15  # radians, applied to the equally spaced class angles

# purpose tags for counter-based seeding
_P_TRAIN = 1
_P_TEST = 2
_P_ANGLES = 3
_P_PERM = 4
_P_PRETRAIN = 5


def stream_rng(*keys: int) -> np.random.Generator:
    """Generator seeded from an integer key tuple (order-sensitive)."""
    return np.random.default_rng([int(k) for k in keys])


def task_seed(master_seed: int, task_id: int) -> int:
    """Stable per-task seed derived from the master seed."""
    return int(np.random.SeedSequence([int(master_seed), int(task_id)]).generate_state(1)[0])


@dataclass(frozen=True)
class StreamSpec:
    """Description of a task stream."""

    generator: str
    num_tasks: int
    classes_per_task: int
    samples_per_class: int
    input_dim: int
    noise_scale: float
    master_seed: int

    def __post_init__(self) -> None:
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.num_tasks < 2:
            raise ConfigError("num_tasks must be >= 2")
        if self.classes_per_task < 1:
            raise ConfigError("classes_per_task must be >= 1")
        if self.samples_per_class < 20:
            raise ConfigError("samples_per_class must be >= 20")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")
        if self.generator == "rot_moons":
            if self.classes_per_task != 2 or self.input_dim != 2:
                raise ConfigError("rot_moons requires classes_per_task=2, input_dim=2")
        elif self.input_dim < 2:
            raise ConfigError("input_dim must be >= 2")

    @property
    def total_classes(self) -> int:
        if self.generator == "gauss_split":
            return self.num_tasks * self.classes_per_task
        return self.classes_per_task


@dataclass
class TaskDataset:
    """One task's data: disjoint train/test batches plus its class ids."""

    task_id: int
    train: Batch
    test: Batch
    classes: tuple[int, ...]
    seed: int


def class_angles(master_seed: int, total_classes: int) -> np.ndarray:
    """Angle per class id: a seeded permutation of equally spaced spokes."""
    rng = stream_rng(master_seed, _P_ANGLES)
    perm = rng.permutation(total_classes)
    jitter = rng.uniform(-ANGLE_JITTER, ANGLE_JITTER, total_classes)
    return 2.0 * np.pi * perm / total_classes + jitter


def circle_means(angles: np.ndarray, input_dim: int) -> np.ndarray:
    """Class means on a radius-3 circle embedded in the first two dims."""
    means = np.zeros((angles.size, input_dim))
    means[:, 0] = MEAN_RADIUS * np.cos(angles)
    means[:, 1] = MEAN_RADIUS * np.sin(angles)
    return means


def _mixture_batch(
    rng: np.random.Generator,
    means: np.ndarray,
    class_ids: np.ndarray,
    samples_per_class: int,
    noise_scale: float,
) -> Batch:
    blocks, labels = [], []
    for mean, cid in zip(means, class_ids):
        blocks.append(mean + noise_scale * rng.standard_normal((samples_per_class, mean.size)))
        labels.append(np.full(samples_per_class, cid, dtype=np.int64))
    return Batch(np.vstack(blocks), np.concatenate(labels))


def _gauss_split_task(spec: StreamSpec, task_id: int) -> TaskDataset:
    classes = np.arange((task_id - 1) * spec.classes_per_task, task_id * spec.classes_per_task)
    means = circle_means(class_angles(spec.master_seed, spec.total_classes), spec.input_dim)[classes]
    train = _mixture_batch(
        stream_rng(spec.master_seed, task_id, _P_TRAIN),
        means, classes, spec.samples_per_class, spec.noise_scale,
    )
    test = _mixture_batch(
        stream_rng(spec.master_seed, task_id, _P_TEST),
        means, classes, spec.samples_per_class, spec.noise_scale,
    )
    return TaskDataset(task_id, train, test, tuple(int(c) for c in classes),
                       task_seed(spec.master_seed, task_id))


def _moons_batch(rng: np.random.Generator, spec: StreamSpec) -> Batch:
    n = spec.samples_per_class
    t_outer = rng.uniform(0.0, np.pi, n)
    t_inner = rng.uniform(0.0, np.pi, n)
    outer = np.column_stack([np.cos(t_outer), np.sin(t_outer)])
    inner = np.column_stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)])
    pts = np.vstack([outer, inner]) + spec.noise_scale * rng.standard_normal((2 * n, 2))
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return Batch(pts, labels)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _rot_moons_task(spec: StreamSpec, task_id: int) -> TaskDataset:
    # every task reuses the base (task 1) samples, rotated by (t-1) * step
    base_train = _moons_batch(stream_rng(spec.master_seed, 1, _P_TRAIN), spec)
    base_test = _moons_batch(stream_rng(spec.master_seed, 1, _P_TEST), spec)
    step = np.pi / spec.num_tasks
    rot = rotation_matrix((task_id - 1) * step)
    train = Batch(base_train.inputs @ rot.T, base_train.labels)
    test = Batch(base_test.inputs @ rot.T, base_test.labels)
    return TaskDataset(task_id, train, test, (0, 1), task_seed(spec.master_seed, task_id))


def _perm_features_task(spec: StreamSpec, task_id: int) -> TaskDataset:
    classes = np.arange(spec.classes_per_task)
    means = circle_means(class_angles(spec.master_seed, spec.classes_per_task), spec.input_dim)
    base_train = _mixture_batch(
        stream_rng(spec.master_seed, 1, _P_TRAIN),
        means, classes, spec.samples_per_class, spec.noise_scale,
    )
    base_test = _mixture_batch(
        stream_rng(spec.master_seed, 1, _P_TEST),
        means, classes, spec.samples_per_class, spec.noise_scale,
    )
    if task_id == 1:
        perm = np.arange(spec.input_dim)
    else:
        perm = stream_rng(spec.master_seed, task_id, _P_PERM).permutation(spec.input_dim)
    train = Batch(base_train.inputs[:, perm], base_train.labels)
    test = Batch(base_test.inputs[:, perm], base_test.labels)
    return TaskDataset(task_id, train, test, tuple(int(c) for c in classes),
                       task_seed(spec.master_seed, task_id))


_TASK_BUILDERS = {
    "gauss_split": _gauss_split_task,
    "rot_moons": _rot_moons_task,
    "perm_features": _perm_features_task,
}


def generate_task(spec: StreamSpec, task_id: int) -> TaskDataset:
    """Build task ``task_id`` (1-based) independently of the others."""
    if not 1 <= task_id <= spec.num_tasks:
        raise ConfigError(f"task_id {task_id} outside 1..{spec.num_tasks}")
    return _TASK_BUILDERS[spec.generator](spec, task_id)


def generate(spec: StreamSpec) -> list[TaskDataset]:
    """The full task sequence, identical to per-task random access."""
    return [generate_task(spec, t) for t in range(1, spec.num_tasks + 1)]


def generic_mixture(
    seed: int, n_classes: int, samples_per_class: int, input_dim: int, noise_scale: float
) -> Batch:
    """A held-out Gaussian mixture used only for producing the frozen base."""
    rng = stream_rng(seed, _P_PRETRAIN)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes + rng.uniform(
        -ANGLE_JITTER, ANGLE_JITTER, n_classes
    )
    means = circle_means(angles, input_dim)
    return _mixture_batch(rng, means, np.arange(n_classes), samples_per_class, noise_scale)


def dump_task_csv(task: TaskDataset, out_dir: str | Path) -> list[Path]:
    """Write ``task_<t>_train.csv`` and ``task_<t>_test.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for split, batch in (("train", task.train), ("test", task.test)):
        path = out / f"task_{task.task_id}_{split}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"f{j}" for j in range(batch.inputs.shape[1])] + ["label"])
            for row, label in zip(batch.inputs, batch.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])
        paths.append(path)
    return paths


def load_batch_csv(path: str | Path) -> Batch:
    """Read a batch written by dump_task_csv; exact float round-trip."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or len(header) < 2:
            raise FormatError(f"{path}: expected feature columns plus a label column")
        width = len(header) - 1
        inputs, labels = [], []
        for line, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise FormatError(f"{path}:{line}: expected {width + 1} fields")
            try:
                inputs.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
    if not inputs:
        raise FormatError(f"{path}: no data rows")
    return Batch(np.array(inputs), np.array(labels, dtype=np.int64))
