"""Datasets, phase schedules, the unlabeled stream and local environments.

Labels are 0-based and phases are 0-based: phase ``i`` owns the labels in
``[class_counts[i-1], class_counts[i])`` with ``class_counts[-1]`` read as 0.
Stream samples live in their own id namespace starting at
``STREAM_ID_OFFSET`` and carry the label ``UNLABELED``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNLABELED = -1
STREAM_ID_OFFSET = 1_000_000_000


class ConfigError(ValueError):
    """Invalid configuration or data that violates a documented precondition."""


class StreamExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2:
            x = x.reshape(len(ids), -1)
        if not (len(ids) == len(x) == len(y)):
            raise ValueError("ids, features and labels must have equal length")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def labeled(self) -> bool:
        return bool(len(self) == 0 or (self.y >= 0).all())

    def classes(self) -> np.ndarray:
        return np.unique(self.y[self.y >= 0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp, copy=False)
        return Dataset(self.ids[idx], self.x[idx], self.y[idx])

    def of_class(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.y == label))

    def of_classes(self, labels) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.y, np.asarray(list(labels)))))

    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return {int(l): int(c) for l, c in zip(labels, counts)}

    def without_ids(self, ids) -> "Dataset":
        return self.subset(np.flatnonzero(~np.isin(self.ids, np.asarray(ids))))

    @staticmethod
    def empty(dim: int) -> "Dataset":
        return Dataset(np.zeros(0, np.int64), np.zeros((0, dim)), np.zeros(0, np.int64))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.ids for p in parts]),
            np.vstack([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
        )


# ---------------------------------------------------------------- CSV files


def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f{j}" for j in range(ds.dim)])
        for i in range(len(ds)):
            label = "" if ds.y[i] < 0 else str(int(ds.y[i]))
            w.writerow([int(ds.ids[i]), label] + [repr(float(v)) for v in ds.x[i]])


def read_dataset_csv(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = rows[0]
    dim = len(header) - 2
    expected = ["id", "label"] + [f"f{j}" for j in range(dim)]
    if dim < 1 or header != expected:
        raise ConfigError(f"{path}: header must be id,label,f0,...,f{{d-1}}")
    ids = np.empty(len(rows) - 1, np.int64)
    ys = np.empty(len(rows) - 1, np.int64)
    xs = np.empty((len(rows) - 1, dim))
    for r, row in enumerate(rows[1:]):
        if len(row) != dim + 2:
            raise ConfigError(f"{path}: row {r + 2} has {len(row)} fields, expected {dim + 2}")
        ids[r] = int(row[0])
        ys[r] = UNLABELED if row[1] == "" else int(row[1])
        xs[r] = [float(v) for v in row[2:]]
    return Dataset(ids, xs, ys)


# ---------------------------------------------------------------- synthetic task


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    feature_dim: int = 16
    train_per_class: int = 1000
    test_per_class: int = 200
    class_sep: float = 4.0
    cluster_scale: float = 1.0
    stream_clusters: int = 60
    stream_pool_size: int = 20000
    stream_radius: float = 4.0
    stream_min_distance: float = 2.0
    overlap_fraction: float = 0.0

    def validate(self) -> list[str]:
        errs = []
        if self.feature_dim < 2:
            errs.append("feature_dim: must be at least 2")
        if self.num_classes < 1:
            errs.append("num_classes: must be positive")
        if self.train_per_class < 2:
            errs.append("train_per_class: must be at least 2")
        if self.test_per_class < 1:
            errs.append("test_per_class: must be positive")
        if not self.cluster_scale > 0:
            errs.append("cluster_scale: covariance scale must be positive")
        if not self.class_sep > 0:
            errs.append("class_sep: must be positive")
        if self.stream_clusters < 1:
            errs.append("stream_clusters: must be positive")
        if self.stream_pool_size < 1:
            errs.append("stream_pool_size: must be positive")
        if not self.stream_radius > 0:
            errs.append("stream_radius: must be positive")
        if self.stream_min_distance < 0:
            errs.append("stream_min_distance: must be nonnegative")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            errs.append("overlap_fraction: must lie in [0, 1]")
        return errs


@dataclass
class SyntheticTask:
    train: Dataset
    test: Dataset
    stream: Dataset
    class_means: np.ndarray
    stream_means: np.ndarray
    spec: SyntheticSpec = field(repr=False, default_factory=SyntheticSpec)


def _random_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_synthetic_task(spec: SyntheticSpec, seed: int = 0) -> SyntheticTask:
    """Gaussian class clusters plus a pool of unlabeled stream samples.

    Class means sit at distance ``class_sep`` from the origin in random
    directions; each class has its own random axis scales (mean 1) times
    ``cluster_scale``. Stream samples come from ``stream_clusters`` Gaussian
    clusters whose means are at least ``stream_min_distance`` away from every
    class mean. A fraction ``overlap_fraction`` of the pool is instead drawn
    from the task's own class distributions (unlabeled).
    """
    errs = spec.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    rng = np.random.default_rng(seed)
    d, c = spec.feature_dim, spec.num_classes
    means = spec.class_sep * _random_directions(rng, c, d)
    axis_scales = spec.cluster_scale * rng.uniform(0.5, 1.5, size=(c, d))

    def sample_class(label: int, count: int) -> np.ndarray:
        return means[label] + axis_scales[label] * rng.normal(size=(count, d))

    train_x = np.vstack([sample_class(k, spec.train_per_class) for k in range(c)])
    train_y = np.repeat(np.arange(c), spec.train_per_class)
    test_x = np.vstack([sample_class(k, spec.test_per_class) for k in range(c)])
    test_y = np.repeat(np.arange(c), spec.test_per_class)

    stream_means = []
    attempts = 0
    while len(stream_means) < spec.stream_clusters:
        attempts += 1
        if attempts > 10000 * spec.stream_clusters:
            raise ConfigError(
                "stream_min_distance: cannot place stream clusters that far from the class means"
            )
        radius = spec.stream_radius * rng.uniform(0.5, 1.5)
        cand = radius * _random_directions(rng, 1, d)[0]
        if np.linalg.norm(means - cand, axis=1).min() >= spec.stream_min_distance:
            stream_means.append(cand)
    stream_means = np.asarray(stream_means)
    stream_scales = spec.cluster_scale * rng.uniform(0.5, 1.5, size=(spec.stream_clusters, d))

    n_overlap = int(round(spec.overlap_fraction * spec.stream_pool_size))
    n_free = spec.stream_pool_size - n_overlap
    which = rng.integers(0, spec.stream_clusters, size=n_free)
    free_x = stream_means[which] + stream_scales[which] * rng.normal(size=(n_free, d))
    parts = [free_x]
    if n_overlap:
        labels = rng.integers(0, c, size=n_overlap)
        parts.append(means[labels] + axis_scales[labels] * rng.normal(size=(n_overlap, d)))
    stream_x = np.vstack(parts)
    stream_x = stream_x[rng.permutation(len(stream_x))]

    n_train = len(train_y)
    train = Dataset(np.arange(n_train), train_x, train_y)
    test = Dataset(np.arange(n_train, n_train + len(test_y)), test_x, test_y)
    stream = Dataset(
        STREAM_ID_OFFSET + np.arange(len(stream_x)),
        stream_x,
        np.full(len(stream_x), UNLABELED),
    )
    return SyntheticTask(train, test, stream, means, stream_means, spec)


# ---------------------------------------------------------------- phases


@dataclass(frozen=True)
class PhaseSchedule:
    class_counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.class_counts)
        object.__setattr__(self, "class_counts", counts)
        if not counts or counts[0] < 1:
            raise ConfigError("class_counts: must be a nonempty list starting at >= 1")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ConfigError("class_counts: must be strictly increasing")

    @classmethod
    def uniform(cls, total: int, phases: int) -> "PhaseSchedule":
        if phases < 1 or total % phases:
            raise ConfigError(f"cannot split {total} classes into {phases} equal phases")
        step = total // phases
        return cls(tuple(step * (i + 1) for i in range(phases)))

    @property
    def num_phases(self) -> int:
        return len(self.class_counts)

    @property
    def total_classes(self) -> int:
        return self.class_counts[-1]

    def seen(self, i: int) -> int:
        """Number of classes seen up to and including phase ``i`` (0 for i < 0)."""
        return 0 if i < 0 else self.class_counts[i]

    def classes_of(self, i: int) -> range:
        return range(self.seen(i - 1), self.seen(i))


def split_phases(dataset: Dataset, schedule: PhaseSchedule) -> list[Dataset]:
    present = set(int(c) for c in dataset.classes())
    wanted = set(range(schedule.total_classes))
    missing = sorted(wanted - present)
    if missing:
        raise ConfigError(f"classes missing from dataset: {missing}")
    extra = sorted(present - wanted)
    if extra:
        raise ConfigError(f"dataset has classes outside the schedule: {extra}")
    return [dataset.of_classes(schedule.classes_of(i)) for i in range(schedule.num_phases)]


# ---------------------------------------------------------------- local environment


@dataclass(frozen=True)
class Environment:
    train: Dataset
    test: Dataset


def rebuild_local_env(train: Dataset, per_class: int, rng: np.random.Generator) -> Environment:
    """Hold out ``per_class`` samples of every class as a validation split."""
    if per_class < 1:
        raise ConfigError("local subset size must be at least 1")
    held = []
    for label, count in sorted(train.class_counts().items()):
        if count < per_class + 1:
            raise ConfigError(
                f"class {label} has {count} samples; need {per_class + 1} to hold out {per_class}"
            )
        idx = np.flatnonzero(train.y == label)
        held.append(rng.choice(idx, size=per_class, replace=False))
    held_idx = np.sort(np.concatenate(held))
    mask = np.ones(len(train), dtype=bool)
    mask[held_idx] = False
    return Environment(train.subset(np.flatnonzero(mask)), train.subset(held_idx))


def default_local_size(min_exemplars: int, cap: int = 5) -> int:
    return min(cap, min_exemplars - 1)


# ---------------------------------------------------------------- stream


class FreeStream:
    """Cursor over a finite pool of unlabeled samples.

    Each phase sees the pool in a fresh seeded order; when the pool runs out
    mid-phase it is reshuffled and reading continues. ``calls`` counts draws.
    """

    def __init__(self, pool: Dataset, seed: int, capacity: int | None = None):
        if len(pool) and (pool.y != UNLABELED).any():
            pool = Dataset(pool.ids, pool.x, np.full(len(pool), UNLABELED))
        self.pool = pool
        self.seed = int(seed)
        self.capacity = capacity
        self.calls = 0
        self.drawn = 0
        self._phase = 0
        self._epoch = 0
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self.start_phase(0)

    def _shuffle(self) -> None:
        rng = np.random.default_rng([self.seed, self._phase, self._epoch])
        self._order = rng.permutation(len(self.pool))
        self._cursor = 0

    def start_phase(self, phase: int) -> None:
        self._phase = int(phase)
        self._epoch = 0
        self._shuffle()

    def fork(self, tag: int) -> "FreeStream":
        """Independent cursor over the same pool (e.g. for policy probes)."""
        other = FreeStream(self.pool, seed=self.seed * 1_000_003 + 7919 * (tag + 1), capacity=self.capacity)
        other.start_phase(self._phase)
        return other

    @property
    def dim(self) -> int:
        return self.pool.dim

    def draw(self, count: int) -> Dataset:
        if count < 0:
            raise ValueError("count must be nonnegative")
        if self.capacity is not None and count > self.capacity:
            raise ValueError(f"requested {count} candidates, buffer capacity is {self.capacity}")
        self.calls += 1
        if count == 0:
            return Dataset.empty(self.dim)
        if len(self.pool) == 0:
            raise StreamExhausted("the free stream pool is empty")
        picks = []
        need = count
        while need:
            if self._cursor >= len(self._order):
                self._epoch += 1
                self._shuffle()
            take = min(need, len(self._order) - self._cursor)
            picks.append(self._order[self._cursor : self._cursor + take])
            self._cursor += take
            need -= take
        self.drawn += count
        return self.pool.subset(np.concatenate(picks))


def draw_candidates(stream: FreeStream, count: int) -> Dataset:
    return stream.draw(count)
