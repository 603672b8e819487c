import numpy as np
import pytest

from conftest import tiny_config
from placebocil.data import STREAM_ID_OFFSET, Dataset, FreeStream, PhaseSchedule, make_synthetic_task, split_phases
from placebocil.memory import apply_strict_budget, select_exemplars
from placebocil.nn import LossConfig, OptimizerConfig, init_model, kd_loss_grad, sgd_step
from placebocil.placebo import Action
from placebocil.policy import ActionSpace, PolicyState, policy_distribution
from placebocil.trainer import (
    PhaseContext,
    RunStats,
    effective_kd_mode,
    evaluate_accuracy,
    learn_policy_for_phase,
    run_experiment,
    train_plain,
    train_with_action,
)


def phase_one(cfg):
    """Phase-0 model, exemplars and a phase-1 context built by hand."""
    task = make_synthetic_task(cfg.task, cfg.component_seed("task"))
    parts = split_phases(task.train, PhaseSchedule(tuple(cfg.class_counts)))
    teacher = init_model(task.train.dim, cfg.hidden, cfg.class_counts[0], np.random.default_rng(0))
    train_plain(teacher, parts[0], cfg, cfg.epochs, np.random.default_rng(1))
    ex = Dataset.concat([
        select_exemplars(teacher, parts[0].of_class(k), cfg.exemplars_per_class) for k in range(cfg.class_counts[0])
    ])
    kept, ledger = apply_strict_budget(parts[1], cfg.u_cap, cfg.p_cap, np.random.default_rng(2),
                                       exemplar_capacity=len(ex), exemplars_held=len(ex))
    c_all = cfg.class_counts[1]
    ctx = PhaseContext(1, cfg.class_counts[0], c_all, kept, ex,
                       task.test.subset(np.flatnonzero(task.test.y < c_all)), ledger)
    stream = FreeStream(task.stream, seed=5, capacity=cfg.u_cap)
    return teacher, ctx, stream


def test_zero_lambda_matches_no_kd():
    cfg = tiny_config(lam=0.0)
    teacher, ctx, stream = phase_one(cfg)
    a, _ = train_with_action(teacher, Action(1, 1), ctx, cfg, 2, stream, 42)
    b, _ = train_with_action(teacher, Action(1, 1), ctx, cfg, 2, None, 42, kd_mode="none")
    for (la, lb) in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)


def test_kd_only_step_at_equality_changes_nothing():
    cfg = tiny_config()
    teacher, ctx, stream = phase_one(cfg)
    student = teacher.expand_head(ctx.total_classes)
    placebos = stream.draw(20).x
    _, grads = kd_loss_grad(teacher, student, placebos, LossConfig(), old_classes=ctx.old_classes)
    stepped = sgd_step(student, grads, OptimizerConfig(learning_rate=0.5, momentum=0.0), 0)
    assert stepped.same_parameters(student)


def test_teacher_untouched_and_stats():
    cfg = tiny_config()
    teacher, ctx, stream = phase_one(cfg)
    before = teacher.copy()
    stats = RunStats()
    student, acc = train_with_action(teacher, Action(1, 1), ctx, cfg, 2, stream, 0, stats=stats)
    assert teacher.same_parameters(before)
    assert student.class_count == ctx.total_classes
    assert 0.0 <= acc <= 1.0
    assert stats.refills == stats.stream_draws >= 2  # buffer emptied at each epoch start
    assert stats.placebos_consumed <= stats.placebos_selected
    assert ctx.ledger.failures == 0 and ctx.ledger.checks == stats.steps


def test_phase_zero_separable_task_learns():
    cfg = tiny_config()
    task = make_synthetic_task(cfg.task, 0)
    data = task.train.of_classes([0, 1])
    model = init_model(data.dim, cfg.hidden, 2, np.random.default_rng(0))
    train_plain(model, data, cfg, cfg.epochs, np.random.default_rng(0))
    assert evaluate_accuracy(model, task.test.of_classes([0, 1]), 0).overall >= 0.99


def rigged_rollout(good):
    def rollout(t, action, rng):
        return [0.9, 0.9] if action == good else [0.1, 0.1]

    return rollout


def test_rigged_policy_learns_best_action():
    cfg = tiny_config(policy_iters=30)
    space = ActionSpace.grid([0.0, 1.0, 2.0], [0.0, 1.0])
    good = Action(2.0, 0.0)
    policy, records = learn_policy_for_phase(PolicyState(space, xi=cfg.xi, floor=cfg.floor), 1, cfg,
                                             np.random.default_rng(0), rigged_rollout(good))
    assert len(records) == 30
    assert policy_distribution(policy)[space.index(good)] > 0.8


def test_zero_iterations_leave_policy():
    cfg = tiny_config(policy_iters=0)
    start = PolicyState(ActionSpace.grid([0.0, 1.0], [0.0]))
    policy, records = learn_policy_for_phase(start, 1, cfg, np.random.default_rng(0), rigged_rollout(None))
    assert records == [] and np.array_equal(policy.weights, start.weights)


def test_single_action_grid_records_rewards():
    cfg = tiny_config(policy_iters=3)
    start = PolicyState(ActionSpace.grid([1.0], [1.0]))
    policy, records = learn_policy_for_phase(start, 1, cfg, np.random.default_rng(0), rigged_rollout(Action(1, 1)))
    assert len(records) == 3 and all(r.R == pytest.approx(1.8) for r in records)
    np.testing.assert_allclose(policy_distribution(policy), [1.0])


def counting_hook(store):
    return lambda stream: store.append(stream)


def test_finetune_baseline_never_touches_stream():
    streams = []
    cfg = tiny_config(kd_mode="none", u_cap=0, p_cap=0)
    report = run_experiment(cfg, stream_hook=counting_hook(streams))
    assert report.complete
    assert streams[0].calls == 0
    assert all(p.policy_iters == 0 and p.action is None for p in report.phases)


def test_placebo_run_uses_stream_and_passes_audit():
    streams = []
    report = run_experiment(tiny_config(), stream_hook=counting_hook(streams))
    assert report.complete, report.error
    assert streams[0].calls > 0
    assert report.audit_failures == 0
    assert report.phases[1].audit_checks > 0
    assert report.phases[1].policy_iters == 2


def test_run_is_deterministic():
    a = run_experiment(tiny_config(seed=3)).to_dict(timing=False)
    b = run_experiment(tiny_config(seed=3)).to_dict(timing=False)
    assert a == b
    c = run_experiment(tiny_config(seed=4)).to_dict(timing=False)
    assert c != a


def test_report_arithmetic_and_decomposition():
    report = run_experiment(tiny_config(class_counts=[2, 3, 4]))
    accs = [p.acc for p in report.phases]
    assert report.average == pytest.approx(sum(accs) / 3)
    assert report.last == accs[-1]
    for p in report.phases[1:]:
        assert p.acc == pytest.approx((p.n_old * p.acc_old + p.n_new * p.acc_new) / (p.n_old + p.n_new))
    assert report.phases[0].acc_old is None


def test_single_phase_run():
    cfg = tiny_config(class_counts=[4])
    report = run_experiment(cfg)
    assert len(report.phases) == 1
    assert report.phases[0].policy_iters == 0 and report.phases[0].audit_checks == 0


def test_fixed_policy_skips_policy_learning():
    report = run_experiment(tiny_config(policy="fixed"))
    assert report.phases[1].policy_iters == 0
    assert report.phases[1].action == (1.0, 1.0)
    assert report.traces.policy == []


def test_random_selection_skips_policy_learning():
    report = run_experiment(tiny_config(selection="random"))
    assert report.phases[1].policy_iters == 0 and report.phases[1].action is None


def test_oracle_draws_old_training_data():
    report = run_experiment(tiny_config(kd_mode="old_data_oracle", placebo_log=True))
    assert report.complete, report.error
    ids = [row["candidate_id"] for row in report.traces.placebos]
    assert ids and max(ids) < STREAM_ID_OFFSET
    train_old = set(range(0, 2 * 200))  # phase-0 classes hold the first training ids
    assert set(ids) <= train_old


def test_placebo_log_rows_come_from_stream():
    report = run_experiment(tiny_config(placebo_log=True))
    rows = report.traces.placebos
    assert rows and min(r["candidate_id"] for r in rows) >= STREAM_ID_OFFSET
    assert {r["class"] for r in rows} == {0, 1}


def test_zero_u_cap_is_new_data_baseline():
    assert effective_kd_mode(tiny_config(u_cap=0)) == "new_data"
    assert effective_kd_mode(tiny_config(kd_mode="old_data_oracle", u_cap=0)) == "new_data"


def test_infeasible_budget_reports_partial_run():
    report = run_experiment(tiny_config(u_cap=500, p_cap=100))
    assert not report.complete
    assert "budget" in report.error
    assert len(report.phases) == 1
