"""Exemplar storage and the strict memory-budget ledger."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import ConfigError, Dataset
from .nn import Model, features

STRATEGIES = ("herding", "random")


class BudgetError(ConfigError):
    pass


def select_exemplars(
    model: Model,
    class_data: Dataset,
    cap: int,
    strategy: str = "herding",
    rng: np.random.Generator | None = None,
) -> Dataset:
    """Pick up to ``cap`` exemplars from a single class.

    Herding returns them in selection order, so a smaller cap is always a
    prefix of a larger one.
    """
    if len(class_data) == 0:
        raise ValueError("class_data is empty")
    if len(class_data.classes()) > 1:
        raise ValueError("class_data must hold a single class")
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    k = min(cap, len(class_data))
    if strategy == "herding":
        order = kernels.herding_order(features(model, class_data.x), k)
    else:
        if rng is None:
            raise ValueError("random selection needs an rng")
        order = rng.choice(len(class_data), size=k, replace=False)
    return class_data.subset(order)


@dataclass
class ExemplarStore:
    per_class_cap: int
    by_class: dict[int, Dataset] = field(default_factory=dict)

    def add(self, label: int, exemplars: Dataset) -> None:
        if len(exemplars) > self.per_class_cap:
            raise ValueError(f"class {label}: {len(exemplars)} exemplars exceed cap {self.per_class_cap}")
        self.by_class[int(label)] = exemplars

    def classes(self) -> list[int]:
        return sorted(self.by_class)

    def __len__(self) -> int:
        return sum(len(d) for d in self.by_class.values())

    def capacity(self, num_classes: int | None = None) -> int:
        n = len(self.by_class) if num_classes is None else num_classes
        return self.per_class_cap * n

    def min_count(self) -> int:
        return min(len(d) for d in self.by_class.values()) if self.by_class else 0

    def as_dataset(self) -> Dataset:
        return Dataset.concat([self.by_class[k] for k in self.classes()])

    def ids(self) -> dict[int, list[int]]:
        return {k: self.by_class[k].ids.tolist() for k in self.classes()}


@dataclass(frozen=True)
class Counts:
    new_data: int
    exemplars: int
    candidates: int = 0
    placebos: int = 0

    @property
    def total(self) -> int:
        return self.new_data + self.exemplars + self.candidates + self.placebos


@dataclass
class AuditResult:
    ok: bool
    total: int
    budget: int
    failures: list[str]


@dataclass
class BudgetLedger:
    base_budget: int
    u_cap: int
    p_cap: int
    new_data: int
    exemplars: int
    removed_ids: list[int] = field(default_factory=list)
    trail: list[dict] = field(default_factory=list)
    checks: int = 0
    failures: int = 0

    def counts(self, candidates: int = 0, placebos: int = 0) -> Counts:
        return Counts(self.new_data, self.exemplars, candidates, placebos)

    def record(self, phase: int, iteration: int, counts: Counts, keep_trail: bool = True) -> AuditResult:
        result = audit(self, counts)
        self.checks += 1
        if not result.ok:
            self.failures += 1
        if keep_trail or not result.ok:
            self.trail.append(
                {
                    "phase": phase,
                    "iteration": iteration,
                    "new_data": counts.new_data,
                    "exemplars": counts.exemplars,
                    "candidates": counts.candidates,
                    "placebos": counts.placebos,
                    "budget": self.base_budget,
                    "ok": int(result.ok),
                }
            )
        return result


def audit(ledger: BudgetLedger, counts: Counts) -> AuditResult:
    """Check held sample counts against the ledger's budget and caps."""
    failures = []
    if counts.candidates > ledger.u_cap:
        failures.append(f"candidates: {counts.candidates} > u_cap {ledger.u_cap}")
    if counts.placebos > ledger.p_cap:
        failures.append(f"placebos: {counts.placebos} > p_cap {ledger.p_cap}")
    if counts.total > ledger.base_budget:
        failures.append(f"total: {counts.total} > budget {ledger.base_budget}")
    return AuditResult(not failures, counts.total, ledger.base_budget, failures)


def apply_strict_budget(
    new_data: Dataset,
    u_cap: int,
    p_cap: int,
    rng: np.random.Generator,
    exemplar_capacity: int = 0,
    exemplars_held: int = 0,
) -> tuple[Dataset, BudgetLedger]:
    """Drop ``u_cap + p_cap`` new-class samples uniformly at random.

    The freed slots pay for the candidate and placebo buffers, so the total
    never exceeds what a buffer-free run would hold.
    """
    if u_cap < 0 or p_cap < 0:
        raise BudgetError("u_cap and p_cap must be nonnegative")
    drop = u_cap + p_cap
    if drop and len(new_data) <= drop:
        raise BudgetError(
            f"budget infeasible: {len(new_data)} new samples cannot fund "
            f"u_cap + p_cap = {drop}"
        )
    if drop:
        removed = np.sort(rng.choice(len(new_data), size=drop, replace=False))
        keep = np.ones(len(new_data), dtype=bool)
        keep[removed] = False
        reduced = new_data.subset(np.flatnonzero(keep))
        removed_ids = new_data.ids[removed].tolist()
    else:
        reduced = new_data
        removed_ids = []
    ledger = BudgetLedger(
        base_budget=len(new_data) + exemplar_capacity,
        u_cap=u_cap,
        p_cap=p_cap,
        new_data=len(reduced),
        exemplars=exemplars_held,
        removed_ids=removed_ids,
    )
    return reduced, ledger


BUDGET_COLUMNS = ["phase", "iteration", "new_data", "exemplars", "candidates", "placebos", "budget", "ok"]
