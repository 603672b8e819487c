"""Prototypes, the per-class placebo score, and placebo buffer handling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import Dataset
from .memory import ExemplarStore
from .nn import Model, features, forward, softmax


class RefillUnderflow(RuntimeError):
    pass


@dataclass(frozen=True)
class Action:
    beta: float
    gamma: float

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")

    def as_tuple(self) -> tuple[float, float]:
        return (self.beta, self.gamma)


@dataclass(frozen=True)
class PrototypeSet:
    old_classes: tuple[int, ...]
    old: np.ndarray  # (c_old, f)
    new_classes: tuple[int, ...]
    new: np.ndarray  # (c_new, f)
    tag: int = 0

    @property
    def dim(self) -> int:
        return self.old.shape[1]


def compute_prototypes(
    snapshot: Model,
    exemplars: ExemplarStore | dict[int, Dataset],
    new_data: dict[int, Dataset],
    tag: int = 0,
) -> PrototypeSet:
    """Mean extractor feature per class: exemplars for old classes, new-class
    training data for new classes."""
    by_old = exemplars.by_class if isinstance(exemplars, ExemplarStore) else exemplars

    def means(groups: dict[int, Dataset], kind: str):
        labels = sorted(groups)
        rows = []
        for label in labels:
            ds = groups[label]
            if len(ds) == 0:
                raise ValueError(f"{kind} class {label} has no samples for its prototype")
            rows.append(features(snapshot, ds.x).mean(axis=0))
        f = snapshot.feature_dim
        return tuple(labels), (np.vstack(rows) if rows else np.zeros((0, f)))

    old_labels, old = means(by_old, "old")
    new_labels, new = means(new_data, "new")
    return PrototypeSet(old_labels, old, new_labels, new, tag)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def evaluate_feature(feat: np.ndarray, m: int, protos: PrototypeSet, action: Action) -> float:
    """Score one extracted feature as a placebo for old class ``m`` (lower is better)."""
    idx = protos.old_classes.index(m)
    sims = [_cos(feat, p) for p in protos.old]
    score = -sims[idx]
    if len(sims) > 1:
        score += action.beta * (sum(sims) - sims[idx]) / (len(sims) - 1)
    if len(protos.new):
        score += action.gamma * float(np.mean([_cos(feat, p) for p in protos.new]))
    return score


def evaluate(x: np.ndarray, m: int, protos: PrototypeSet, action: Action, snapshot: Model) -> float:
    feat = features(snapshot, np.atleast_2d(x))[0]
    return evaluate_feature(feat, m, protos, action)


def score_candidates(
    candidates: Dataset, protos: PrototypeSet, action: Action, snapshot: Model
) -> np.ndarray:
    """``(len(candidates), c_old)`` score matrix."""
    feats = features(snapshot, candidates.x)
    return kernels.score_matrix(feats, protos.old, protos.new, action.beta, action.gamma)


@dataclass
class PlaceboBuffer:
    capacity: int
    x: np.ndarray
    ids: np.ndarray
    source: np.ndarray  # old class each placebo was chosen for
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def empty(cls, capacity: int, dim: int) -> "PlaceboBuffer":
        return cls(capacity, np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.ids)

    def __post_init__(self):
        if len(self.ids) > self.capacity:
            raise ValueError(f"{len(self.ids)} placebos exceed capacity {self.capacity}")


def refill_placebos(
    candidates: Dataset,
    protos: PrototypeSet,
    action: Action,
    k: int,
    snapshot: Model,
    capacity: int | None = None,
    maximize: bool = False,
) -> PlaceboBuffer:
    """Select ``k`` placebos per old class from the candidate batch.

    Classes go in ascending label order and a candidate serves at most one
    class. Within a class the lowest scores win; ``maximize=True`` flips the
    direction.
    """
    c_old = len(protos.old_classes)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(candidates) < c_old * k:
        raise RefillUnderflow(
            f"{len(candidates)} candidates cannot supply {k} placebos for {c_old} classes"
        )
    scores = score_candidates(candidates, protos, action, snapshot)
    ranked = -scores if maximize else scores
    picks = kernels.greedy_select(ranked, k, candidates.ids)
    rows = picks.reshape(-1)
    source = np.repeat(np.asarray(protos.old_classes, dtype=np.int64), k)
    chosen_scores = scores[rows, np.repeat(np.arange(c_old), k)]
    cap = c_old * k if capacity is None else capacity
    return PlaceboBuffer(cap, candidates.x[rows], candidates.ids[rows], source, chosen_scores)


def consume(buffer: PlaceboBuffer, batch_size: int) -> tuple[PlaceboBuffer, PlaceboBuffer]:
    """Take up to ``batch_size`` placebos off the front of the buffer.

    Returns ``(batch, remaining)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = min(batch_size, len(buffer))
    take = PlaceboBuffer(
        n, buffer.x[:n], buffer.ids[:n], buffer.source[:n], buffer.scores[:n]
    )
    rest = PlaceboBuffer(
        buffer.capacity, buffer.x[n:], buffer.ids[n:], buffer.source[n:], buffer.scores[n:]
    )
    return take, rest


def baseline_select(
    candidates: Dataset,
    mode: str,
    snapshot: Model,
    count: int,
    old_classes: int,
    rng: np.random.Generator | None = None,
    capacity: int | None = None,
) -> PlaceboBuffer:
    """Comparator selectors: uniform ``random`` or max old-class softmax ``confidence``."""
    if count > len(candidates):
        raise RefillUnderflow(f"asked for {count} of {len(candidates)} candidates")
    if mode == "random":
        if rng is None:
            raise ValueError("random selection needs an rng")
        rows = rng.choice(len(candidates), size=count, replace=False)
        score = np.zeros(count)
        source = np.full(count, -1, dtype=np.int64)
    elif mode == "confidence":
        _, logits = forward(snapshot, candidates.x)
        probs = softmax(logits[:, :old_classes])
        conf = probs.max(axis=1)
        order = np.lexsort((candidates.ids, -conf))
        rows = order[:count]
        score = conf[rows]
        source = probs.argmax(axis=1)[rows].astype(np.int64)
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    cap = count if capacity is None else capacity
    return PlaceboBuffer(cap, candidates.x[rows], candidates.ids[rows], source, score)


PLACEBO_LOG_COLUMNS = ["phase", "refill_index", "class", "candidate_id", "score"]
