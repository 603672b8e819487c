import numpy as np
import pytest

from conftest import labeled
from placebocil.config import ExperimentConfig
from placebocil.data import (
    STREAM_ID_OFFSET,
    UNLABELED,
    ConfigError,
    Dataset,
    FreeStream,
    PhaseSchedule,
    StreamExhausted,
    SyntheticSpec,
    draw_candidates,
    make_synthetic_task,
    read_dataset_csv,
    rebuild_local_env,
    split_phases,
    write_dataset_csv,
)
from placebocil.nn import forward, init_model
from placebocil.trainer import train_plain

SMALL = SyntheticSpec(num_classes=4, feature_dim=6, train_per_class=50, test_per_class=10,
                      stream_clusters=8, stream_pool_size=500)


def test_synthetic_is_deterministic():
    a = make_synthetic_task(SMALL, seed=3)
    b = make_synthetic_task(SMALL, seed=3)
    for x, y in [(a.train, b.train), (a.test, b.test), (a.stream, b.stream)]:
        assert np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y) and np.array_equal(x.ids, y.ids)
    c = make_synthetic_task(SMALL, seed=4)
    assert not np.array_equal(a.train.x, c.train.x)


def test_synthetic_shapes_and_ids():
    t = make_synthetic_task(SMALL, seed=0)
    assert len(t.train) == 200 and len(t.test) == 40 and len(t.stream) == 500
    assert t.train.class_counts() == {k: 50 for k in range(4)}
    assert (t.stream.y == UNLABELED).all()
    assert t.stream.ids.min() >= STREAM_ID_OFFSET
    all_ids = np.concatenate([t.train.ids, t.test.ids, t.stream.ids])
    assert len(np.unique(all_ids)) == len(all_ids)


def test_stream_means_respect_min_distance():
    spec = SyntheticSpec(stream_min_distance=3.0, stream_pool_size=100)
    t = make_synthetic_task(spec, seed=1)
    dist = np.linalg.norm(t.stream_means[:, None, :] - t.class_means[None, :, :], axis=2)
    assert dist.min() >= 3.0


def test_impossible_stream_distance_errors():
    spec = SyntheticSpec(num_classes=2, feature_dim=2, stream_clusters=2, stream_radius=1.0,
                         stream_min_distance=50.0, stream_pool_size=10)
    with pytest.raises(ConfigError, match="stream_min_distance"):
        make_synthetic_task(spec, seed=0)


def test_separated_two_class_task_is_learnable():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(size=(100, 2)) + [5, 0], rng.normal(size=(100, 2)) + [-5, 0]])
    y = np.repeat([0, 1], 100)
    model = init_model(2, [8], 2, np.random.default_rng(1))
    cfg = ExperimentConfig(epochs=5)
    train_plain(model, labeled(x, y), cfg, cfg.epochs, np.random.default_rng(2))
    acc = (forward(model, x)[1].argmax(axis=1) == y).mean()
    assert acc >= 0.99


def test_phase_schedule_arithmetic():
    s = PhaseSchedule.uniform(10, 5)
    assert s.class_counts == (2, 4, 6, 8, 10)
    # 0-based labels and phases: the third phase holds labels 4 and 5
    assert list(s.classes_of(2)) == [4, 5]
    assert list(s.classes_of(0)) == [0, 1]
    assert s.seen(-1) == 0
    single = PhaseSchedule((10,))
    assert list(single.classes_of(0)) == list(range(10))


@pytest.mark.parametrize("counts", [(), (0, 2), (2, 2), (4, 2)])
def test_phase_schedule_rejects_bad_counts(counts):
    with pytest.raises(ConfigError):
        PhaseSchedule(counts)


def test_split_phases():
    t = make_synthetic_task(SMALL, seed=0)
    parts = split_phases(t.train, PhaseSchedule((2, 4)))
    assert [sorted(p.class_counts()) for p in parts] == [[0, 1], [2, 3]]
    with pytest.raises(ConfigError, match="missing"):
        split_phases(t.train, PhaseSchedule((2, 6)))
    with pytest.raises(ConfigError, match="outside"):
        split_phases(t.train, PhaseSchedule((2,)))


def test_local_env_counts():
    x = np.zeros((30, 2))
    y = np.repeat([0, 1, 2], 10)
    env = rebuild_local_env(labeled(x, y), 2, np.random.default_rng(0))
    assert len(env.test) == 6 and len(env.train) == 24
    assert env.test.class_counts() == {0: 2, 1: 2, 2: 2}
    assert not set(env.test.ids) & set(env.train.ids)


def test_local_env_needs_remainder():
    ds = labeled(np.zeros((8, 2)), [0, 0, 0, 1, 1, 1, 1, 1])
    with pytest.raises(ConfigError, match="class 0"):
        rebuild_local_env(ds, 3, np.random.default_rng(0))


def pool(n=10, dim=2):
    return Dataset(STREAM_ID_OFFSET + np.arange(n), np.arange(n * dim, dtype=float).reshape(n, dim),
                   np.full(n, UNLABELED))


def test_stream_draws_and_counts():
    s = FreeStream(pool(), seed=0)
    out = draw_candidates(s, 4)
    assert len(out) == 4 and (out.y == UNLABELED).all()
    assert len(draw_candidates(s, 0)) == 0
    assert s.calls == 2 and s.drawn == 4


def test_stream_reshuffles_when_exhausted():
    s = FreeStream(pool(10), seed=0)
    first = s.draw(10)
    assert sorted(first.ids) == sorted(pool(10).ids)
    again = s.draw(15)
    assert len(again) == 15


def test_stream_is_reproducible_and_fork_independent():
    a, b = FreeStream(pool(50), seed=7), FreeStream(pool(50), seed=7)
    assert np.array_equal(a.draw(20).ids, b.draw(20).ids)
    f = a.fork(1)
    before = a.draw(5).ids
    c = FreeStream(pool(50), seed=7)
    c.draw(20)
    f.draw(30)
    assert np.array_equal(before, c.draw(5).ids)


def test_stream_phase_order_changes():
    s = FreeStream(pool(50), seed=1)
    s.start_phase(1)
    one = s.draw(50).ids
    s.start_phase(2)
    two = s.draw(50).ids
    assert not np.array_equal(one, two)


def test_stream_capacity_and_empty_pool():
    s = FreeStream(pool(10), seed=0, capacity=3)
    with pytest.raises(ValueError, match="capacity"):
        s.draw(4)
    with pytest.raises(StreamExhausted):
        FreeStream(Dataset.empty(2), seed=0).draw(1)


def test_csv_round_trip(tmp_path):
    t = make_synthetic_task(SMALL, seed=0)
    write_dataset_csv(t.train, tmp_path / "train.csv")
    back = read_dataset_csv(tmp_path / "train.csv")
    assert np.array_equal(back.ids, t.train.ids) and np.array_equal(back.y, t.train.y)
    np.testing.assert_array_equal(back.x, t.train.x)


def test_missing_csv_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.csv"):
        read_dataset_csv(tmp_path / "nope.csv")


def test_dataset_helpers():
    ds = labeled(np.eye(4), [0, 1, 1, 2])
    assert len(ds.of_classes([1, 2])) == 3
    assert list(ds.without_ids([1]).ids) == [0, 2, 3]
    both = Dataset.concat([ds.of_class(0), ds.of_class(2)])
    assert list(both.y) == [0, 2]
