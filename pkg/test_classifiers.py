"""
Test the exact noisy-class posterior and the MLP classifier to verify
correctness
"""

import numpy as np
import pytest
from scipy.special import logsumexp

from mixdiff.classifiers import (
    AnalyticClassifier,
    MlpClassifier,
    analytic_class_posterior,
    classifier_spec,
    grad_log_prob,
    mlp_classifier_forward,
    scale_gradient,
)
from mixdiff.mixture import GaussianMixture, benchmark_mixture
from mixdiff.process import q_step
from mixdiff.schedules import NoiseSchedule, make_linear_schedule


@pytest.fixture
def symmetric():
    return GaussianMixture(weights=[0.5, 0.5], means=[[-1.0], [1.0]], variances=[0.5, 0.5])


@pytest.fixture
def sched():
    return NoiseSchedule.from_betas([0.1, 0.2, 0.3])


def test_symmetric_posterior_at_origin(symmetric, sched):
    out = analytic_class_posterior(symmetric, np.array([0.0]), 2, sched)
    np.testing.assert_allclose(np.exp(out.log_probs), [0.5, 0.5], atol=1e-15)


def test_posterior_saturates_far_from_origin(symmetric, sched):
    out = analytic_class_posterior(symmetric, np.array([50.0]), 2, sched)
    assert out.log_probs[1] == pytest.approx(0.0, abs=1e-12)
    assert out.log_probs[0] < -50


def test_posterior_on_clean_data(symmetric, sched):
    out = analytic_class_posterior(symmetric, np.array([[0.0], [3.0]]), 0, sched)
    assert out.log_probs.shape == (2, 2)
    np.testing.assert_allclose(logsumexp(out.log_probs, axis=1), 0.0, atol=1e-12)


def test_posterior_gradient_matches_finite_differences():
    mix = benchmark_mixture()
    sched = make_linear_schedule(1000)
    rng = np.random.default_rng(4)
    x = 2.0 * rng.standard_normal((100, 2))
    t = rng.integers(1, 1001, size=100)
    y = rng.integers(0, 4, size=100)
    grad = analytic_class_posterior(mix, x, t, sched, y).grad_log_prob_selected

    h = 1e-5
    numeric = np.zeros_like(x)
    rows = np.arange(100)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        up = analytic_class_posterior(mix, x + step, t, sched).log_probs[rows, y]
        down = analytic_class_posterior(mix, x - step, t, sched).log_probs[rows, y]
        numeric[:, j] = (up - down) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


def test_tempered_gradient_is_scaled_gradient():
    mix = benchmark_mixture()
    sched = make_linear_schedule(1000)
    clf = AnalyticClassifier(mix, sched)
    x = np.array([[0.4, -0.9]])
    g = clf.grad_log_prob(x, 300, np.array([1]))

    h = 1e-5
    numeric = np.zeros(2)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        numeric[j] = 3.0 * (clf.log_probs(x + step, 300)[0, 1] - clf.log_probs(x - step, 300)[0, 1]) / (2 * h)
    np.testing.assert_allclose(scale_gradient(g, 3.0)[0], numeric, rtol=1e-4)


def test_posterior_depends_only_on_current_state():
    mix = benchmark_mixture()
    sched = make_linear_schedule(1000)
    clf = AnalyticClassifier(mix, sched)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 2))
    before = clf.log_probs(x, 200)
    # advancing the chain to x_{t+1} must not change p(y | x_t)
    for seed in (1, 2):
        q_step(x, 201, np.random.default_rng(seed).standard_normal((10, 2)), sched)
        np.testing.assert_array_equal(clf.log_probs(x, 200), before)


def test_label_range_is_checked(symmetric, sched):
    with pytest.raises(ValueError):
        analytic_class_posterior(symmetric, np.array([0.0]), 1, sched, y=2)


def test_zero_weight_classifier_is_uniform():
    model = MlpClassifier(classifier_spec(2, 4, hidden_widths=(8, 8), embedding_dim=4, group_size=4))
    for param in model.params.values():
        param[:] = 0.0
    log_probs = mlp_classifier_forward(model, np.array([[1.0, -1.0], [3.0, 2.0]]), np.array([1, 500]))
    np.testing.assert_allclose(log_probs, np.log(0.25), rtol=1e-15)


def test_classifier_probabilities_sum_to_one():
    model = MlpClassifier(classifier_spec(2, 4, hidden_widths=(8, 8), embedding_dim=4, group_size=4), seed=5)
    rng = np.random.default_rng(1)
    log_probs = model.log_probs(rng.standard_normal((20, 2)), rng.integers(1, 1000, size=20))
    np.testing.assert_allclose(np.exp(log_probs).sum(axis=1), 1.0, atol=1e-12)


def test_classifier_input_gradient_matches_finite_differences():
    model = MlpClassifier(classifier_spec(2, 4, hidden_widths=(8, 8), embedding_dim=4, group_size=4), seed=7)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 2))
    t = rng.integers(1, 1000, size=6)
    y = np.array([0, 1, 2, 3, 0, 1])
    grad = grad_log_prob(model, x, t, y)

    h = 1e-6
    numeric = np.zeros_like(x)
    rows = np.arange(6)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        up = model.log_probs(x + step, t)[rows, y]
        down = model.log_probs(x - step, t)[rows, y]
        numeric[:, j] = (up - down) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-7)


def test_classifier_call_bundles_gradient():
    model = MlpClassifier(classifier_spec(2, 4, hidden_widths=(8,), embedding_dim=4, group_size=4), seed=1)
    x = np.array([[0.1, 0.2]])
    out = model(x, 10, np.array([2]))
    np.testing.assert_array_equal(out.grad_log_prob_selected, model.grad_log_prob(x, 10, np.array([2])))
    assert model(x, 10).grad_log_prob_selected is None


def test_scale_gradient():
    g = np.array([1.0, -2.0])
    np.testing.assert_array_equal(scale_gradient(g, 0.0), [0.0, -0.0])
    np.testing.assert_array_equal(scale_gradient(g, 2.5), [2.5, -5.0])
    with pytest.raises(ValueError):
        scale_gradient(g, -1.0)
