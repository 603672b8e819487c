"""Exp3 policy over a discrete (beta, gamma) grid."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .placebo import Action

# weights are rescaled by their max once any of them passes this
RENORM_THRESHOLD = 1e100


@dataclass(frozen=True)
class ActionSpace:
    actions: tuple[Action, ...]

    def __post_init__(self):
        if not self.actions:
            raise ValueError("action space is empty")
        if len(set(self.actions)) != len(self.actions):
            raise ValueError("action space has duplicate actions")

    @classmethod
    def grid(cls, betas: Sequence[float], gammas: Sequence[float]) -> "ActionSpace":
        return cls(tuple(Action(float(b), float(g)) for b, g in itertools.product(betas, gammas)))

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Action:
        return self.actions[i]

    def index(self, action: Action) -> int:
        return self.actions.index(action)


@dataclass
class PolicyState:
    space: ActionSpace
    xi: float = 0.3
    floor: float = 0.05
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.space))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.space),):
            raise ValueError("one weight per action is required")
        if not (np.all(self.weights > 0) and np.all(np.isfinite(self.weights))):
            raise ValueError("weights must be positive and finite")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if not 0.0 <= self.floor < 1.0:
            raise ValueError("floor must lie in [0, 1)")

    def copy(self) -> "PolicyState":
        return PolicyState(self.space, self.xi, self.floor, self.weights.copy())


def policy_distribution(state: PolicyState) -> np.ndarray:
    w = state.weights
    k = len(w)
    if k == 1:
        return np.ones(1)
    return (1.0 - state.floor) * w / w.sum() + state.floor / k


def sample_action(state: PolicyState, rng: np.random.Generator) -> tuple[int, Action, float]:
    """Draw an action; returns ``(index, action, probability)``."""
    probs = policy_distribution(state)
    i = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    i = min(i, len(probs) - 1)
    return i, state.space[i], float(probs[i])


def decoupled_reward(rollout: Sequence[float]) -> float:
    """Sum of per-virtual-phase accuracies (the historical offset is dropped)."""
    values = [float(r) for r in rollout]
    if not values:
        raise ValueError("rollout is empty")
    bad = [r for r in values if not 0.0 <= r <= 1.0]
    if bad:
        raise ValueError(f"rewards must be accuracies in [0, 1], got {bad}")
    return math.fsum(values)


def exp3_update(state: PolicyState, index: int, reward: float, prob: float, lookahead: int = 0,
                normalize: bool = True) -> PolicyState:
    """Multiply the chosen weight by ``exp(xi * r / p)``.

    With ``normalize`` the reward is divided by ``lookahead + 1`` so it lies
    in [0, 1]. Returns a new state.
    """
    if not prob > 0:
        raise ValueError("probability must be positive")
    r = reward / (lookahead + 1) if normalize else reward
    step = state.xi * r / prob
    new = state.copy()
    if math.log(new.weights[index]) + step <= math.log(RENORM_THRESHOLD):
        new.weights[index] = new.weights[index] * math.exp(step)
    else:
        logw = np.log(new.weights)
        logw[index] += step
        new.weights = np.exp(logw - logw.max())
        np.maximum(new.weights, np.finfo(np.float64).tiny, out=new.weights)
    return new


@dataclass
class HarnessResult:
    actions: np.ndarray
    rewards: np.ndarray
    best_prob: np.ndarray  # probability on the best arm after each round
    final: np.ndarray

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())


def regret_harness(
    arm_rewards: Sequence[float] | Callable[[int, int, np.random.Generator], float],
    rounds: int,
    xi: float = 0.2,
    floor: float = 0.05,
    seed: int = 0,
    num_arms: int | None = None,
    best_arm: int | None = None,
) -> HarnessResult:
    """Run Exp3 against a bandit and track the mass on the best arm.

    ``arm_rewards`` is either a fixed reward per arm or a callable
    ``(arm, round, rng) -> reward``; rewards must lie in [0, 1].
    """
    if callable(arm_rewards):
        if num_arms is None or best_arm is None:
            raise ValueError("callable rewards need num_arms and best_arm")
        reward_fn = arm_rewards
        k = num_arms
        best = best_arm
    else:
        fixed = [float(r) for r in arm_rewards]
        if not fixed:
            raise ValueError("need at least one arm")
        if any(not 0.0 <= r <= 1.0 for r in fixed):
            raise ValueError("arm rewards must lie in [0, 1]")
        k = len(fixed)
        best = int(np.argmax(fixed)) if best_arm is None else best_arm
        reward_fn = lambda arm, t, rng: fixed[arm]  # noqa: E731
    space = ActionSpace(tuple(Action(float(i), 0.0) for i in range(k)))
    state = PolicyState(space, xi=xi, floor=floor)
    rng = np.random.default_rng(seed)
    actions = np.zeros(rounds, dtype=np.int64)
    rewards = np.zeros(rounds)
    best_prob = np.zeros(rounds)
    for t in range(rounds):
        i, _, p = sample_action(state, rng)
        r = float(reward_fn(i, t, rng))
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"reward {r} outside [0, 1]")
        state = exp3_update(state, i, r, p, lookahead=0)
        actions[t] = i
        rewards[t] = r
        best_prob[t] = policy_distribution(state)[best]
    return HarnessResult(actions, rewards, best_prob, policy_distribution(state))
