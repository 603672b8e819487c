"""Phase-by-phase class-incremental training with placebo distillation.

``run_experiment`` drives the phases. Phase 0 is plain cross-entropy.
Every later phase removes ``u_cap + p_cap`` new-class samples to pay for
the stream buffers, tunes the placebo score weights with Exp3 on a held-out
slice of its own training data, trains the real model with the sampled
weights, and refreshes exemplars.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .config import ExperimentConfig
from .data import (
    ConfigError,
    Dataset,
    FreeStream,
    PhaseSchedule,
    default_local_size,
    make_synthetic_task,
    read_dataset_csv,
    rebuild_local_env,
    split_phases,
)
from .memory import BudgetLedger, ExemplarStore, apply_strict_budget, select_exemplars
from .nn import (
    SGD,
    LossConfig,
    Model,
    OptimizerConfig,
    add_grads,
    ce_loss_grad,
    forward,
    init_model,
    kd_loss_grad,
)
from .placebo import (
    Action,
    PlaceboBuffer,
    baseline_select,
    compute_prototypes,
    consume,
    refill_placebos,
)
from .policy import (
    ActionSpace,
    PolicyState,
    decoupled_reward,
    exp3_update,
    policy_distribution,
    sample_action,
)

log = logging.getLogger(__name__)

POLICY_TRACE_COLUMNS = ["phase", "iter", "beta", "gamma", "p_action", "R", "R_norm"]
POLICY_WEIGHT_COLUMNS = ["phase", "action", "beta", "gamma", "weight", "prob"]
PHASE_COLUMNS = [
    "phase", "classes", "acc", "acc_old", "acc_new", "n_old", "n_new",
    "beta", "gamma", "audit_checks", "audit_failures",
]


# ---------------------------------------------------------------- data bundle


@dataclass
class TaskData:
    train: Dataset
    test: Dataset
    stream: Dataset


def load_task(cfg: ExperimentConfig) -> TaskData:
    if cfg.data.used:
        train = read_dataset_csv(cfg.data.train_csv)
        test = read_dataset_csv(cfg.data.test_csv)
        stream = read_dataset_csv(cfg.data.stream_csv)
        if not (train.dim == test.dim == stream.dim):
            raise ConfigError("data: train, test and stream files must share a feature dimension")
        if not train.labeled or not test.labeled:
            raise ConfigError("data: train and test files need a label on every row")
        overlap = np.intersect1d(stream.ids, np.concatenate([train.ids, test.ids]))
        if len(overlap):
            raise ConfigError(f"data: stream ids collide with task ids, e.g. {overlap[:3].tolist()}")
        return TaskData(train, test, stream)
    task = make_synthetic_task(cfg.task, seed=cfg.component_seed("task"))
    return TaskData(task.train, task.test, task.stream)


# ---------------------------------------------------------------- evaluation


@dataclass
class Accuracy:
    overall: float
    old: float | None
    new: float | None
    n_old: int
    n_new: int
    correct_old: int
    correct_new: int


def evaluate_accuracy(model: Model, test: Dataset, old_classes: int) -> Accuracy:
    _, z = forward(model, test.x)
    pred = z.argmax(axis=1)
    hit = pred == test.y
    is_old = test.y < old_classes
    n_old, n_new = int(is_old.sum()), int((~is_old).sum())
    c_old, c_new = int(hit[is_old].sum()), int(hit[~is_old].sum())
    return Accuracy(
        overall=(c_old + c_new) / len(test),
        old=c_old / n_old if n_old else None,
        new=c_new / n_new if n_new else None,
        n_old=n_old,
        n_new=n_new,
        correct_old=c_old,
        correct_new=c_new,
    )


# ---------------------------------------------------------------- one training run


@dataclass
class PhaseContext:
    """Everything a training run needs besides the model and the action."""

    phase: int
    old_classes: int
    total_classes: int
    new_data: Dataset
    exemplars: Dataset
    test: Dataset
    ledger: BudgetLedger
    audit_every_iteration: bool = True
    placebo_log: list | None = None


@dataclass
class RunStats:
    steps: int = 0
    refills: int = 0
    placebos_selected: int = 0
    placebos_consumed: int = 0
    stream_draws: int = 0


def _optimizer_config(cfg: ExperimentConfig, epochs: int) -> OptimizerConfig:
    schedule = [(int(e), float(f)) for e, f in cfg.lr_schedule if int(e) < epochs]
    return OptimizerConfig(cfg.learning_rate, cfg.momentum, epochs, schedule)


def _loss_config(cfg: ExperimentConfig) -> LossConfig:
    return LossConfig(cfg.lam, cfg.kd_kind, cfg.temperature)


# modes that fill the placebo buffer from a stream; the oracle swaps the free
# stream for the discarded old-class training data and takes it unscored
STREAM_MODES = ("placebo", "old_data_oracle")


def effective_kd_mode(cfg: ExperimentConfig) -> str:
    """A streamed mode without any candidate memory is the new-data baseline."""
    if cfg.kd_mode in STREAM_MODES and cfg.u_cap == 0:
        return "new_data"
    return cfg.kd_mode


def uses_stream(cfg: ExperimentConfig) -> bool:
    return effective_kd_mode(cfg) in STREAM_MODES


def selection_mode(cfg: ExperimentConfig) -> str:
    if effective_kd_mode(cfg) == "old_data_oracle":
        return "random"
    return cfg.selection


def action_matters(cfg: ExperimentConfig) -> bool:
    """The (beta, gamma) action only shapes scored placebo selection."""
    return uses_stream(cfg) and selection_mode(cfg) == "scored"


def placebos_per_class(cfg: ExperimentConfig, old_classes: int) -> int:
    if cfg.k is not None:
        return cfg.k
    return max(1, cfg.p_cap // old_classes)


def train_with_action(
    teacher: Model,
    action: Action,
    ctx: PhaseContext,
    cfg: ExperimentConfig,
    epochs: int,
    stream: FreeStream | None,
    seed,
    kd_mode: str | None = None,
    stats: RunStats | None = None,
) -> tuple[Model, float]:
    """Train a student initialised from ``teacher`` and return it with its
    accuracy on ``ctx.test``.

    Each step draws a new-data batch ``d`` and an exemplar batch ``e``
    (with replacement) and minimises ``CE(d + e) + lam * KD(p + e)``. What
    ``p`` is depends on the KD mode: placebos selected from ``stream`` (the
    free stream, or true old-class data for the oracle), the new-data batch
    itself, or nothing. The teacher is not modified.
    """
    mode = effective_kd_mode(cfg) if kd_mode is None else kd_mode
    stats = stats if stats is not None else RunStats()
    c_old, c_all = ctx.old_classes, ctx.total_classes
    if c_old < 1:
        raise ConfigError("train_with_action needs at least one old class")
    if len(ctx.exemplars) == 0:
        raise ConfigError(f"phase {ctx.phase}: exemplar store is empty")
    streamed = mode in STREAM_MODES
    selection = "random" if mode == "old_data_oracle" else cfg.selection
    if streamed and stream is None:
        raise ConfigError(f"{mode} mode needs a stream")

    # separate generators keep the d/e schedule independent of the KD mode
    batch_rng, select_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    )

    student = teacher.expand_head(c_all)
    snapshot = student.copy()
    loss_cfg = _loss_config(cfg)
    opt = SGD(student, _optimizer_config(cfg, epochs))

    protos = None
    k = 0
    if streamed and selection == "scored":
        k = placebos_per_class(cfg, c_old)
        old_groups = {m: ctx.exemplars.of_class(m) for m in range(c_old)}
        new_groups = {l: ctx.new_data.of_class(l) for l in range(c_old, c_all)}
        protos = compute_prototypes(snapshot, old_groups, new_groups, tag=ctx.phase)

    n_new = len(ctx.new_data)
    bd, be, bp = cfg.batch_new, cfg.batch_exemplar, cfg.batch_placebo
    new_x, new_y = ctx.new_data.x, ctx.new_data.y
    ex_x, ex_y = ctx.exemplars.x, ctx.exemplars.y
    refill_index = 0

    for epoch in range(epochs):
        buffer = PlaceboBuffer.empty(cfg.p_cap, teacher.input_dim)
        held_candidates = 0
        perm = batch_rng.permutation(n_new)
        for start in range(0, n_new, bd):
            d_idx = perm[start : start + bd]
            e_idx = batch_rng.integers(0, len(ex_y), size=be)
            ce_x = np.vstack([new_x[d_idx], ex_x[e_idx]])
            ce_y = np.concatenate([new_y[d_idx], ex_y[e_idx]])

            held_placebos = 0
            kd_x = None
            if streamed:
                if len(buffer) == 0:
                    cand = stream.draw(cfg.u_cap)
                    stats.stream_draws += 1
                    held_candidates = len(cand)
                    scorer = student if cfg.score_with_live_model else snapshot
                    if selection == "scored":
                        buffer = refill_placebos(
                            cand, protos, action, k, scorer, capacity=cfg.p_cap,
                            maximize=cfg.maximize_score,
                        )
                    else:
                        count = min(cfg.p_cap, len(cand))
                        buffer = baseline_select(
                            cand, selection, scorer, count, c_old, rng=select_rng, capacity=cfg.p_cap
                        )
                    if ctx.placebo_log is not None:
                        for cls, cid, sc in zip(buffer.source, buffer.ids, buffer.scores):
                            ctx.placebo_log.append(
                                {"phase": ctx.phase, "refill_index": refill_index, "class": int(cls),
                                 "candidate_id": int(cid), "score": float(sc)}
                            )
                    refill_index += 1
                    stats.refills += 1
                    stats.placebos_selected += len(buffer)
                held_placebos = len(buffer)
                p, buffer = consume(buffer, bp)
                stats.placebos_consumed += len(p)
                kd_x = np.vstack([p.x, ex_x[e_idx]])
            elif mode == "new_data":
                kd_x = ce_x

            if ctx.audit_every_iteration:
                ctx.ledger.record(
                    ctx.phase, stats.steps, ctx.ledger.counts(held_candidates, held_placebos),
                )

            _, grads = ce_loss_grad(student, ce_x, ce_y)
            if kd_x is not None:
                _, kd_grads = kd_loss_grad(teacher, student, kd_x, loss_cfg, old_classes=c_old)
                grads = add_grads(grads, kd_grads, cfg.lam)
            opt.step(grads, epoch)
            stats.steps += 1

    if not ctx.audit_every_iteration:
        ctx.ledger.record(ctx.phase, stats.steps, ctx.ledger.counts(cfg.u_cap if streamed else 0,
                                                                    cfg.p_cap if streamed else 0))
    acc = evaluate_accuracy(student, ctx.test, c_old).overall
    return student, acc


def train_plain(model: Model, data: Dataset, cfg: ExperimentConfig, epochs: int, rng: np.random.Generator) -> Model:
    """Cross-entropy only (phase 0). Trains ``model`` in place."""
    opt = SGD(model, _optimizer_config(cfg, epochs))
    bs = cfg.batch_new + cfg.batch_exemplar
    for epoch in range(epochs):
        perm = rng.permutation(len(data))
        for start in range(0, len(data), bs):
            idx = perm[start : start + bs]
            _, grads = ce_loss_grad(model, data.x[idx], data.y[idx])
            opt.step(grads, epoch)
    return model


# ---------------------------------------------------------------- policy learning


@dataclass
class RewardRecord:
    phase: int
    iteration: int
    action: Action
    p_action: float
    rewards: list[float]
    R: float
    R_norm: float


RolloutFn = Callable[[int, Action, np.random.Generator], list[float]]


def learn_policy_for_phase(
    policy: PolicyState,
    phase: int,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    rollout: RolloutFn,
) -> tuple[PolicyState, list[RewardRecord]]:
    """Run ``cfg.policy_iters`` Exp3 rounds; ``rollout(t, action, rng)``
    returns the per-virtual-phase accuracies for iteration ``t``."""
    records = []
    for t in range(cfg.policy_iters):
        idx, action, p = sample_action(policy, rng)
        rewards = rollout(t, action, rng)
        R = decoupled_reward(rewards)
        R_norm = R / (cfg.lookahead + 1) if cfg.normalize_reward else R
        policy = exp3_update(policy, idx, R, p, lookahead=cfg.lookahead, normalize=cfg.normalize_reward)
        records.append(RewardRecord(phase, t, action, p, list(rewards), R, R_norm))
        log.debug("phase %d iter %d action %s R=%.4f", phase, t, action, R)
    return policy, records


def local_rollout(
    teacher: Model,
    train_all: Dataset,
    ctx: PhaseContext,
    cfg: ExperimentConfig,
    stream: FreeStream | None,
    local_size: int,
    seed: int,
) -> RolloutFn:
    """Rollout that rebuilds the local environment each iteration and chains
    ``lookahead + 1`` virtual phases on it. The real model is never touched."""

    def run(t: int, action: Action, rng: np.random.Generator) -> list[float]:
        env_rng = np.random.default_rng([seed, ctx.phase, t])
        env = rebuild_local_env(train_all, local_size, env_rng)
        local_ctx = PhaseContext(
            phase=ctx.phase,
            old_classes=ctx.old_classes,
            total_classes=ctx.total_classes,
            new_data=env.train.subset(np.flatnonzero(env.train.y >= ctx.old_classes)),
            exemplars=env.train.subset(np.flatnonzero(env.train.y < ctx.old_classes)),
            test=env.test,
            ledger=ctx.ledger,
            audit_every_iteration=ctx.audit_every_iteration,
        )
        probe_stream = stream.fork(1000 * ctx.phase + t) if stream is not None else None
        model = teacher
        rewards = []
        for j in range(cfg.lookahead + 1):
            model, acc = train_with_action(
                model, action, local_ctx, cfg, cfg.policy_epochs, probe_stream,
                [seed, ctx.phase, t, j],
            )
            rewards.append(acc)
        return rewards

    return run


# ---------------------------------------------------------------- phases


@dataclass
class PhaseReport:
    phase: int
    classes: int
    acc: float
    acc_old: float | None
    acc_new: float | None
    n_old: int
    n_new: int
    action: tuple[float, float] | None
    audit_checks: int
    audit_failures: int
    policy_iters: int
    stream_draws: int
    wall_clock: float

    def row(self) -> dict:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return {
            "phase": self.phase,
            "classes": self.classes,
            "acc": fmt(self.acc),
            "acc_old": fmt(self.acc_old),
            "acc_new": fmt(self.acc_new),
            "n_old": self.n_old,
            "n_new": self.n_new,
            "beta": "" if self.action is None else repr(self.action[0]),
            "gamma": "" if self.action is None else repr(self.action[1]),
            "audit_checks": self.audit_checks,
            "audit_failures": self.audit_failures,
        }


@dataclass
class RunState:
    model: Model | None = None
    exemplars: ExemplarStore | None = None
    policy: PolicyState | None = None


@dataclass
class Traces:
    policy: list[dict] = field(default_factory=list)
    weights: list[dict] = field(default_factory=list)
    budget: list[dict] = field(default_factory=list)
    placebos: list[dict] = field(default_factory=list)


def _phase_rng(cfg: ExperimentConfig, name: str, phase: int) -> np.random.Generator:
    return np.random.default_rng([cfg.component_seed(name), phase])


def action_space(cfg: ExperimentConfig) -> ActionSpace:
    return ActionSpace.grid(cfg.betas, cfg.gammas)


def run_phase(
    i: int,
    state: RunState,
    new_data: Dataset,
    old_train: Dataset | None,
    test: Dataset,
    schedule: PhaseSchedule,
    stream: FreeStream | None,
    cfg: ExperimentConfig,
    traces: Traces,
    rollout_override: RolloutFn | None = None,
) -> tuple[RunState, PhaseReport]:
    t0 = time.perf_counter()
    c_old, c_all = schedule.seen(i - 1), schedule.seen(i)
    labels = set(int(c) for c in new_data.classes())
    if labels != set(schedule.classes_of(i)):
        raise ConfigError(f"phase {i}: new data classes {sorted(labels)} do not match the schedule")
    test_seen = test.subset(np.flatnonzero(test.y < c_all))

    if i == 0:
        model = init_model(new_data.dim, cfg.hidden, c_all, _phase_rng(cfg, "model", 0))
        train_plain(model, new_data, cfg, cfg.epochs, _phase_rng(cfg, "batches", 0))
        exemplars = ExemplarStore(cfg.exemplars_per_class)
        policy = None
        action = None
        ledger_checks = ledger_failures = 0
        policy_iters = 0
        draws = 0
        kept_new = new_data
    else:
        if state.model is None or state.exemplars is None or len(state.exemplars) == 0:
            raise ConfigError(f"phase {i}: needs a trained model and exemplars from earlier phases")
        teacher = state.model
        exemplars = state.exemplars
        ex_data = exemplars.as_dataset()
        stream_on = uses_stream(cfg)
        u_cap = cfg.u_cap if stream_on else 0
        p_cap = cfg.p_cap if stream_on else 0
        kept_new, ledger = apply_strict_budget(
            new_data, u_cap, p_cap, _phase_rng(cfg, "budget", i),
            exemplar_capacity=exemplars.capacity(c_old), exemplars_held=len(exemplars),
        )
        if stream_on and effective_kd_mode(cfg) == "old_data_oracle":
            if old_train is None or len(old_train) == 0:
                raise ConfigError(f"phase {i}: old_data_oracle needs old-class training data")
            stream = FreeStream(old_train, seed=cfg.component_seed("oracle") + i, capacity=cfg.u_cap)
        if stream is not None:
            stream.start_phase(i)
            draws_before = stream.calls
        ctx = PhaseContext(
            phase=i,
            old_classes=c_old,
            total_classes=c_all,
            new_data=kept_new,
            exemplars=ex_data,
            test=test_seen,
            ledger=ledger,
            audit_every_iteration=cfg.audit == "iteration",
            placebo_log=traces.placebos if cfg.placebo_log else None,
        )

        policy = state.policy
        policy_iters = 0
        if not action_matters(cfg):
            action = None
        elif cfg.policy == "fixed":
            action = Action(cfg.fixed_beta, cfg.fixed_gamma)
        else:
            if policy is None:
                policy = PolicyState(action_space(cfg), xi=cfg.xi, floor=cfg.floor)
            policy_rng = _phase_rng(cfg, "policy", i)
            if rollout_override is not None:
                rollout = rollout_override
            else:
                local_size = cfg.local_per_class or default_local_size(exemplars.min_count())
                if local_size < 1:
                    raise ConfigError("exemplars_per_class too small to hold out a local validation set")
                train_all = Dataset.concat([ex_data, kept_new])
                rollout = local_rollout(
                    teacher, train_all, ctx, cfg, stream if stream_on else None,
                    local_size, cfg.component_seed("local_env"),
                )
            policy, records = learn_policy_for_phase(policy, i, cfg, policy_rng, rollout)
            for r in records:
                traces.policy.append(
                    {"phase": i, "iter": r.iteration, "beta": r.action.beta, "gamma": r.action.gamma,
                     "p_action": r.p_action, "R": r.R, "R_norm": r.R_norm}
                )
            _, action, _ = sample_action(policy, policy_rng)
            policy_iters = len(records)
            probs = policy_distribution(policy)
            for a_idx, (a, w, pr) in enumerate(zip(policy.space.actions, policy.weights, probs)):
                traces.weights.append(
                    {"phase": i, "action": a_idx, "beta": a.beta, "gamma": a.gamma,
                     "weight": float(w), "prob": float(pr)}
                )

        stats = RunStats()
        model, _ = train_with_action(
            teacher, action, ctx, cfg, cfg.epochs, stream if stream_on else None,
            [cfg.component_seed("batches"), i], stats=stats,
        )
        if not teacher.same_parameters(state.model):
            raise RuntimeError("teacher parameters changed during training")
        traces.budget.extend(ledger.trail)
        ledger_checks, ledger_failures = ledger.checks, ledger.failures
        draws = (stream.calls - draws_before) if stream is not None else 0

    ex_rng = _phase_rng(cfg, "exemplars", i)
    exemplars = ExemplarStore(cfg.exemplars_per_class, dict(exemplars.by_class))
    for label in schedule.classes_of(i):
        chosen = select_exemplars(
            model, kept_new.of_class(label), cfg.exemplars_per_class, cfg.exemplar_strategy, ex_rng
        )
        exemplars.add(label, chosen)

    acc = evaluate_accuracy(model, test_seen, c_old)
    report = PhaseReport(
        phase=i,
        classes=c_all,
        acc=acc.overall,
        acc_old=acc.old,
        acc_new=acc.new,
        n_old=acc.n_old,
        n_new=acc.n_new,
        action=None if action is None else action.as_tuple(),
        audit_checks=ledger_checks,
        audit_failures=ledger_failures,
        policy_iters=policy_iters,
        stream_draws=draws,
        wall_clock=time.perf_counter() - t0,
    )
    log.info("phase %d: acc %.4f (old %s, new %s) action %s", i, acc.overall, acc.old, acc.new, report.action)
    return RunState(model, exemplars, policy), report


# ---------------------------------------------------------------- experiment


@dataclass
class RunReport:
    phases: list[PhaseReport]
    average: float | None
    last: float | None
    complete: bool
    error: str | None
    seed: int
    seeds: dict[str, int]
    config: dict
    backend: str
    traces: Traces = field(default_factory=Traces, repr=False)
    final_model: Model | None = field(default=None, repr=False)

    def to_dict(self, timing: bool = True) -> dict:
        phases = []
        for p in self.phases:
            d = {
                "phase": p.phase, "classes": p.classes, "acc": p.acc, "acc_old": p.acc_old,
                "acc_new": p.acc_new, "n_old": p.n_old, "n_new": p.n_new,
                "action": None if p.action is None else list(p.action),
                "audit_checks": p.audit_checks, "audit_failures": p.audit_failures,
                "policy_iters": p.policy_iters, "stream_draws": p.stream_draws,
            }
            if timing:
                d["wall_clock"] = p.wall_clock
            phases.append(d)
        return {
            "complete": self.complete,
            "error": self.error,
            "average": self.average,
            "last": self.last,
            "phases": phases,
            "seed": self.seed,
            "seeds": self.seeds,
            "kernel_backend": self.backend,
            "config": self.config,
        }

    @property
    def audit_failures(self) -> int:
        return sum(p.audit_failures for p in self.phases)


def run_experiment(
    cfg: ExperimentConfig,
    task: TaskData | None = None,
    rollout_factory: Callable[[int], RolloutFn] | None = None,
    stream_hook: Callable[[FreeStream], None] | None = None,
) -> RunReport:
    """Run every phase; on failure the partial report is returned with
    ``complete=False`` and the error message."""
    cfg.check(check_files=task is None)
    schedule = PhaseSchedule(tuple(cfg.class_counts))
    seeds = {name: cfg.component_seed(name) for name in
             ("task", "model", "stream", "batches", "budget", "policy", "local_env", "exemplars",
              "placebo_random", "oracle")}
    reports: list[PhaseReport] = []
    traces = Traces()
    state = RunState()
    error = None
    try:
        task = task if task is not None else load_task(cfg)
        per_phase = split_phases(task.train, schedule)
        test_classes = set(int(c) for c in task.test.classes())
        if not set(range(schedule.total_classes)) <= test_classes:
            raise ConfigError("test set does not cover every scheduled class")
        stream = FreeStream(task.stream, seed=cfg.component_seed("stream"), capacity=cfg.u_cap or None)
        if stream_hook is not None:
            stream_hook(stream)
        for i in range(schedule.num_phases):
            old_train = task.train.subset(np.flatnonzero(task.train.y < schedule.seen(i - 1))) if i else None
            override = rollout_factory(i) if rollout_factory is not None else None
            state, report = run_phase(
                i, state, per_phase[i], old_train, task.test, schedule, stream, cfg, traces, override
            )
            reports.append(report)
    except Exception as exc:  # partial report keeps what finished
        error = f"{type(exc).__name__}: {exc}"
        log.error("run aborted: %s", error)
    accs = [r.acc for r in reports]
    return RunReport(
        phases=reports,
        average=float(np.mean(accs)) if accs else None,
        last=accs[-1] if accs else None,
        complete=error is None,
        error=error,
        seed=cfg.seed,
        seeds=seeds,
        config=cfg.to_dict(),
        backend=kernels.BACKEND,
        traces=traces,
        final_model=state.model,
    )
