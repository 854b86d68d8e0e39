import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from permfilter.benchmarks import (
    SPLITMNIST_PAIRS,
    ContinualConfig,
    LogisticModel,
    MetricsTable,
    TaskSequence,
    average_accuracy,
    build_splitmnist,
    build_synthetic,
    forgetting,
    initial_ensemble,
    mean_forgetting,
    normalized_variance,
    per_particle_accuracy,
    permutations,
    run_benchmark,
    run_continual,
)
from permfilter.errors import InvalidConfigError, InvalidInputError
from permfilter.filter import normalize_weights, wpf_run
from permfilter.io import load_mnist

from conftest import requires_mnist


def train_logistic(task, epochs=20, lr=0.5):
    from permfilter.filter import Ensemble

    e = Ensemble(np.zeros((1, task.model.dim)), [0.0], lr)
    losses = [task.loss_builder(task.train_x, task.train_y)] * epochs
    return wpf_run(e, losses)


# ------------------------------------------------------------- tasks


def test_synthetic_deterministic():
    a = build_synthetic(3, 2, 4.0, seed=3)
    b = build_synthetic(3, 2, 4.0, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.train_x, y.train_x) and np.array_equal(x.test_y, y.test_y)
    assert a[0].train_x.shape == (500, 2) and a[0].test_x.shape == (200, 2)
    assert np.mean(a[0].train_y) == 0.5


def test_synthetic_far_apart_is_separable():
    task = build_synthetic(1, 2, 60.0, seed=1)[0]
    e = train_logistic(task, epochs=30, lr=0.1)
    assert per_particle_accuracy(task.model, e, task.test_x, task.test_y)[0] == 1.0


def test_synthetic_bayes_accuracy():
    # equal isotropic unit-variance clusters at distance s: Bayes accuracy is Phi(s / 2)
    bayes = norm.cdf(2.0)
    assert bayes == pytest.approx(0.977, abs=1e-3)
    task = build_synthetic(1, 2, 4.0, seed=3)[0]
    e = train_logistic(task, epochs=200, lr=2.0)
    acc = per_particle_accuracy(task.model, e, task.test_x, task.test_y)[0]
    assert 0.93 <= acc <= 1.0


def test_synthetic_rejects_bad_separation():
    with pytest.raises(InvalidInputError):
        build_synthetic(1, 2, 0.0)


def test_sequence_validates_permutation():
    tasks = build_synthetic(3, 2, 4.0)
    with pytest.raises(InvalidInputError):
        TaskSequence(tasks, [0, 0, 1])
    with pytest.raises(InvalidInputError):
        TaskSequence(tasks, [0, 1])


def test_minibatches_independent_of_order():
    tasks = build_synthetic(3, 2, 4.0)
    a = TaskSequence(tasks, [0, 1, 2], 1, 64, 5)
    b = TaskSequence(tasks, [2, 0, 1], 1, 64, 5)
    for k in range(3):
        for x, y in zip(a.minibatches(k, 0), b.minibatches(k, 0)):
            assert np.array_equal(x, y)
    sizes = [len(ix) for ix in a.minibatches(0, 0)]
    assert sum(sizes) == 500 and max(sizes) == 64


def test_permutations_are_bijections():
    ps = permutations(5, 6, 0)
    assert ps[0].tolist() == list(range(5))
    assert all(sorted(p.tolist()) == list(range(5)) for p in ps)


# --------------------------------------------------------- training


def test_zero_epochs_is_untrained():
    tasks = build_synthetic(1, 2, 4.0, seed=2)
    cfg = ContinualConfig(n_particles=4)
    res = run_continual("wpf", TaskSequence(tasks, [0], 0), cfg)
    e0 = initial_ensemble("wpf", tasks[0].model, cfg)
    accs = per_particle_accuracy(tasks[0].model, e0, tasks[0].test_x, tasks[0].test_y)
    assert res.accuracies[0] == pytest.approx(np.mean(accs))


def test_wpf_single_particle_equals_gd():
    tasks = build_synthetic(3, 2, 4.0, seed=4)
    seq = TaskSequence(tasks, [2, 0, 1], 2, 32, 1)
    a = run_continual("wpf", seq, ContinualConfig(n_particles=1, sigma_sq=0.05))
    b = run_continual("gd", seq, ContinualConfig(n_particles=7, sigma_sq=0.05))
    assert np.array_equal(a.accuracies, b.accuracies)
    assert np.array_equal(a.history, b.history)
    assert a.ensemble == b.ensemble


@pytest.mark.parametrize("method", ["wpf", "gd", "averaging", "resampling"])
def test_run_is_deterministic(method):
    tasks = build_synthetic(2, 2, 4.0, seed=5)
    seq = TaskSequence(tasks, [1, 0], 1, 50, 2)
    cfg = ContinualConfig(n_particles=5, sigma_sq=0.05)
    a, b = run_continual(method, seq, cfg), run_continual(method, seq, cfg)
    assert np.array_equal(a.accuracies, b.accuracies) and a.ensemble == b.ensemble
    assert np.all((a.accuracies >= 0) & (a.accuracies <= 1))
    assert a.history.shape == (2, 2)


def test_resampling_task_cadence_differs():
    tasks = build_synthetic(2, 2, 4.0, seed=5)
    seq = TaskSequence(tasks, [0, 1], 1, 50, 2)
    a = run_continual("resampling", seq, ContinualConfig(n_particles=5, resample_every="task"))
    b = run_continual("resampling", seq, ContinualConfig(n_particles=5))
    assert not np.array_equal(a.ensemble.positions, b.ensemble.positions)


def test_vote_prediction_runs():
    tasks = build_synthetic(2, 2, 4.0, seed=5)
    seq = TaskSequence(tasks, [0, 1], 1, 50, 2)
    res = run_continual("wpf", seq, ContinualConfig(n_particles=5, prediction="vote"))
    assert np.all((res.accuracies >= 0) & (res.accuracies <= 1))


def test_unknown_method():
    tasks = build_synthetic(1, 2, 4.0)
    with pytest.raises(InvalidConfigError):
        run_continual("adam", TaskSequence(tasks, [0]), ContinualConfig())
    with pytest.raises(InvalidConfigError):
        ContinualConfig(prediction="median")


def test_metrics_keyed_by_canonical_task():
    tasks = build_synthetic(3, 2, 4.0, seed=6)
    m = run_benchmark("gd", tasks, ContinualConfig(sigma_sq=0.05), n_permutations=3, batch_size=50)
    assert m.scores.shape == (3, 3)
    assert m.task_names == ["syn0", "syn1", "syn2"]
    # the task trained last in each run is the best-remembered one for GD
    for r, perm in enumerate(m.metadata["permutations"]):
        assert m.histories[r][perm[-1], -1] == m.scores[perm[-1], r]


# ---------------------------------------------------------- metrics


def test_average_accuracy_examples():
    assert average_accuracy(MetricsTable([[1, 0], [0, 1]])) == 0.5
    assert average_accuracy(MetricsTable(np.full((3, 4), 0.37))) == pytest.approx(0.37)
    assert average_accuracy(MetricsTable([[0.8, 0.6], [0.4, 0.2]])) == pytest.approx(0.5)


def test_normalized_variance_examples():
    assert normalized_variance(MetricsTable(np.full((2, 3), 0.6))) == 0.0
    assert normalized_variance(MetricsTable([[0.0, 1.0]])) == 0.5
    assert normalized_variance(MetricsTable([[0.5, 0.7], [0.2, 0.2]])) == pytest.approx(0.01)
    with pytest.raises(InvalidInputError):
        normalized_variance(MetricsTable([[0.5], [0.2]]))


def test_metrics_table_range():
    with pytest.raises(InvalidInputError):
        MetricsTable([[1.2]])


def test_forgetting_examples():
    assert forgetting([[0.5, 0.6, 0.6, 0.9]]).tolist() == [0.0]
    assert forgetting([[0.9, 0.4]])[0] == pytest.approx(0.5)
    m = MetricsTable([[0.4], [0.6]], histories=[np.array([[0.9, 0.4], [0.6, 0.6]]),
                                                 np.array([[0.7, 0.7], [0.8, 0.6]])])
    np.testing.assert_allclose(mean_forgetting(m), [0.25, 0.1])


@given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=6))
def test_forgetting_nonnegative(h):
    assert np.all(forgetting(h) >= 0)


# -------------------------------------------------------- SplitMNIST


@requires_mnist
def test_splitmnist_tasks():
    data = load_mnist()
    tasks = build_splitmnist(data)
    assert [t.name for t in tasks] == ["0v1", "2v3", "4v5", "6v7", "8v9"]
    counts = np.bincount(data.train_labels, minlength=10)
    assert tasks[0].train_x.shape[0] == counts[0] + counts[1] == 12665
    for t, (lo, hi) in zip(tasks, SPLITMNIST_PAIRS):
        assert set(np.unique(t.train_y)) == {0, 1} and set(np.unique(t.test_y)) == {0, 1}
        assert t.train_x.shape[1] == 784
        assert t.train_x.min() >= 0.0 and t.train_x.max() <= 1.0


@requires_mnist
def test_splitmnist_class_head_and_caps():
    tasks = build_splitmnist(load_mnist(), head="class", max_train_per_task=100, max_test_per_task=50)
    assert tasks[2].train_x.shape[0] == 100 and tasks[2].test_x.shape[0] == 50
    assert set(np.unique(tasks[2].train_y)) <= {4, 5}
    assert tasks[0].model.spec.n_classes == 10


def test_splitmnist_missing_digits():
    class Fake:
        train_images = np.zeros((4, 4))
        train_labels = np.array([0, 1, 2, 2])
        test_images = np.zeros((4, 4))
        test_labels = np.array([0, 1, 2, 3])

    with pytest.raises(InvalidInputError):
        build_splitmnist(Fake())


@requires_mnist
def test_splitmnist_smoke_run():
    tasks = build_splitmnist(load_mnist(), max_train_per_task=256, max_test_per_task=200)
    seq = TaskSequence(tasks, [4, 3, 2, 1, 0], 1, 64, 0)
    res = run_continual("wpf", seq, ContinualConfig(n_particles=3))
    assert res.history.shape == (5, 5)
    assert normalize_weights(res.ensemble).is_normalized()
