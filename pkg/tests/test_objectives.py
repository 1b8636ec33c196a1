import math

import numpy as np
import pytest

from dpconsensus.errors import DimensionMismatchError, SingularError
from dpconsensus.objectives import (
    LabeledDataset,
    LogisticObjective,
    MLPObjective,
    QuadraticDataset,
    QuadraticObjective,
    random_quadratic_dataset,
)
from oracles import central_difference


def toy_classification(n=12, f=4, k=3, seed=0):
    gen = np.random.default_rng(seed)
    return LabeledDataset(gen.standard_normal((n, f)), np.arange(n) % k, k)


def test_quadratic_loss_zero_at_minimum():
    b = np.array([1.0, -2.0])
    data = QuadraticDataset(np.stack([np.eye(2)] * 3), np.stack([b] * 3))
    obj = QuadraticObjective(2)
    assert obj.loss(b, data) == 0.0
    assert np.array_equal(obj.closed_form_optimum(data), b)


def test_quadratic_two_sample_optimum():
    data = QuadraticDataset(
        np.array([np.diag([1.0, 2.0]), np.diag([3.0, 2.0])]), np.array([[0.0, 0.0], [4.0, 2.0]])
    )
    obj = QuadraticObjective(2)
    theta = obj.closed_form_optimum(data)
    assert np.allclose(theta, [3.0, 1.0], atol=1e-12)
    assert np.linalg.norm(obj.gradient(theta, data)) <= 1e-9


def test_quadratic_per_sample_gradient():
    gen = np.random.default_rng(0)
    data = random_quadratic_dataset(5, 3, 1.0, gen)
    obj = QuadraticObjective(3)
    for s in range(5):
        g = obj.per_sample_gradients(data.b[s], data, [s])[0]
        assert np.allclose(g, 0)


def test_singular_rejected():
    data = QuadraticDataset(np.zeros((2, 2, 2)), np.zeros((2, 2)))
    with pytest.raises(SingularError):
        QuadraticObjective(2).closed_form_optimum(data)


def test_quadratic_secant_inequalities():
    gen = np.random.default_rng(1)
    data = random_quadratic_dataset(20, 4, 0.5, gen)
    obj = QuadraticObjective(4, mu=0.5)
    L = obj.smoothness(data)
    for _ in range(50):
        u, v = gen.standard_normal(4) * 3, gen.standard_normal(4) * 3
        inner = (obj.gradient(u, data) - obj.gradient(v, data)) @ (u - v)
        d2 = np.sum((u - v) ** 2)
        assert 0.5 * d2 - 1e-9 <= inner <= L * d2 + 1e-9


def test_logistic_zero_weights_gives_log2():
    data = LabeledDataset(np.random.default_rng(0).standard_normal((7, 3)), np.array([0, 1] * 3 + [0]), 2)
    obj = LogisticObjective(3, 2)
    assert obj.loss(np.zeros(obj.dim), data) == pytest.approx(math.log(2), abs=1e-15)


def test_mlp_zero_last_layer_gives_log_k():
    obj = MLPObjective((4, 5, 3))
    theta = obj.init_params(np.random.default_rng(0))
    Ws = obj._unpack(theta)
    Ws[-1][0][...] = 0
    Ws[-1][1][...] = 0
    assert obj.loss(theta, toy_classification()) == pytest.approx(math.log(3), abs=1e-12)


@pytest.mark.parametrize("obj", [LogisticObjective(4, 3, l2=0.1), MLPObjective((4, 6, 3))])
def test_mean_of_per_sample_gradients_is_gradient(obj):
    data = toy_classification()
    theta = obj.init_params(np.random.default_rng(2)) + np.random.default_rng(3).standard_normal(obj.dim) * 0.1
    per = obj.per_sample_gradients(theta, data)
    assert np.allclose(per.mean(axis=0), obj.gradient(theta, data), atol=1e-10)
    fd = central_difference(lambda t: obj.loss(t, data), theta)
    assert np.allclose(obj.gradient(theta, data), fd, rtol=1e-4, atol=1e-7)


def test_mlp_finite_differences_per_sample():
    obj = MLPObjective((2, 8, 3))
    gen = np.random.default_rng(4)
    data = LabeledDataset(gen.standard_normal((5, 2)), np.array([0, 1, 2, 1, 0]), 3)
    theta = gen.standard_normal(obj.dim) * 0.5
    per = obj.per_sample_gradients(theta, data)
    for s in range(5):
        one = data.subset([s])
        fd = central_difference(lambda t: obj.loss(t, one), theta, h=1e-5)
        assert np.allclose(per[s], fd, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("obj", [QuadraticObjective(3), LogisticObjective(4, 3), MLPObjective((4, 6, 3))])
def test_clipped_sum_matches_explicit_clipping(obj):
    gen = np.random.default_rng(5)
    data = random_quadratic_dataset(8, 3, 1.0, gen) if obj.kind == "quadratic" else toy_classification(8)
    theta = gen.standard_normal(obj.dim)
    idx = np.array([0, 2, 3, 7])
    per = obj.per_sample_gradients(theta, data, idx)
    norms = np.linalg.norm(per, axis=1)
    c = float(np.median(norms))
    expected = sum(g * min(1.0, c / n) for g, n in zip(per, norms))
    got, got_norms = obj.clipped_gradient_sum(theta, data, idx, c)
    assert np.allclose(got_norms, norms, rtol=1e-10)
    assert np.allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_accuracy_tie_break_and_perfect():
    obj = MLPObjective((4, 5, 3))
    data = toy_classification(30)
    zero = np.zeros(obj.dim)
    assert obj.accuracy(zero, data) == pytest.approx(np.mean(data.labels == 0))
    lin = LogisticObjective(2, 2)
    sep = LabeledDataset(np.array([[1.0, 0], [2, 0], [-1, 0], [-3, 0]]), np.array([1, 1, 0, 0]), 2)
    theta = np.array([-1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    assert lin.accuracy(theta, sep) == 1.0


def test_random_labels_accuracy_near_chance():
    gen = np.random.default_rng(6)
    data = LabeledDataset(gen.standard_normal((10_000, 4)), gen.integers(0, 10, 10_000), 10)
    obj = LogisticObjective(4, 10)
    assert 0.08 <= obj.accuracy(gen.standard_normal(obj.dim), data) <= 0.13


def test_dimension_mismatch():
    obj = QuadraticObjective(3)
    data = random_quadratic_dataset(2, 3, 1.0, np.random.default_rng(0))
    with pytest.raises(DimensionMismatchError):
        obj.loss(np.zeros(4), data)
