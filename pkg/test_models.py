"""
Test the analytic oracle and the MLP denoiser (forward, AdaGN and the
reverse-mode pass) to verify correctness
"""

import math

import numpy as np
import pytest
from scipy import stats

from mixdiff.mixture import GaussianMixture, analytic_marginal_logdensity, benchmark_mixture
from mixdiff.models import (
    AnalyticDenoiser,
    CountingDenoiser,
    MlpDenoiser,
    MlpSpec,
    adagn,
    analytic_eps,
    mlp_backward,
    mlp_forward,
    timestep_embedding,
)
from mixdiff.schedules import NoiseSchedule, make_linear_schedule


def small_spec(**overrides):
    settings = dict(kind="denoiser", data_dim=2, hidden_widths=(8, 8), embedding_dim=4,
                    group_size=4, num_classes=3, conditional=True, learn_variance=True)
    settings.update(overrides)
    return MlpSpec(**settings)


def numeric_param_grads(model, loss_fn, h=1e-6):
    grads = {}
    for name, param in model.params.items():
        grad = np.zeros_like(param)
        flat = param.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn()
            flat[i] = saved - h
            down = loss_fn()
            flat[i] = saved
            grad.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = grad
    return grads


# ---------------------------------------------------------------------------
# Analytic oracle
# ---------------------------------------------------------------------------

def test_single_gaussian_oracle():
    mix = GaussianMixture(weights=[1.0], means=[[0.0]], variances=[[1.0]])
    sched = NoiseSchedule.from_betas([0.5])
    x = np.array([[0.7], [-1.3], [2.0]])
    out = analytic_eps(mix, x, 1, sched)
    np.testing.assert_allclose(out.eps, math.sqrt(0.5) * x, rtol=1e-12)
    assert out.v is None


def test_symmetric_mixture_oracle():
    mix = GaussianMixture(weights=[0.5, 0.5], means=[[-1.0], [1.0]], variances=[0.5, 0.5])
    sched = NoiseSchedule.from_betas([0.1, 0.2, 0.3])
    assert analytic_eps(mix, np.array([0.0]), 2, sched).eps[0] == 0.0
    left = analytic_marginal_logdensity(mix, np.array([0.8]), 2, sched)
    right = analytic_marginal_logdensity(mix, np.array([-0.8]), 2, sched)
    assert left == pytest.approx(right, abs=1e-14)


def test_marginal_log_density_matches_direct_formula():
    mix = GaussianMixture(weights=[0.3, 0.7], means=[[-2.0], [1.0]], variances=[0.5, 0.5])
    sched = NoiseSchedule.from_betas([0.1, 0.2, 0.3])
    ab = 0.72
    scale = math.sqrt(ab * 0.5 + 1 - ab)
    expected = math.log(0.3 * stats.norm.pdf(0.0, -2.0 * math.sqrt(ab), scale)
                        + 0.7 * stats.norm.pdf(0.0, 1.0 * math.sqrt(ab), scale))
    assert analytic_marginal_logdensity(mix, np.array([0.0]), 2, sched) == pytest.approx(expected, rel=1e-12)


def test_oracle_matches_finite_difference_score():
    mix = benchmark_mixture()
    sched = make_linear_schedule(1000)
    rng = np.random.default_rng(2)
    x = 3.0 * rng.standard_normal((100, 2))
    t = rng.integers(1, 1001, size=100)
    ab = sched.alpha_bar_at(t)
    eps = analytic_eps(mix, x, t, sched).eps

    h = 1e-5
    score = np.zeros_like(x)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        score[:, j] = (mix.log_density(x + step, ab) - mix.log_density(x - step, ab)) / (2 * h)
    expected = -np.sqrt(1.0 - ab)[:, None] * score
    np.testing.assert_allclose(eps, expected, rtol=1e-4, atol=1e-8)


def test_conditional_oracle_uses_class_score():
    mix = benchmark_mixture()
    sched = make_linear_schedule(100)
    model = AnalyticDenoiser(mix, sched, conditional=True)
    x = np.array([[0.5, -0.5]])
    ab = sched.alpha_bar_at(10)
    expected = -math.sqrt(1.0 - ab) * mix.score(x, ab, np.array([3]))
    np.testing.assert_allclose(model(x, 10, np.array([3])).eps, expected, rtol=1e-12)
    with pytest.raises(ValueError):
        model(x, 10)


def test_counting_denoiser():
    mix = benchmark_mixture()
    sched = make_linear_schedule(100)
    counter = CountingDenoiser(AnalyticDenoiser(mix, sched))
    for t in (1, 2, 3):
        counter(np.zeros((4, 2)), t)
    assert counter.calls == 3
    assert counter.learns_variance is False
    assert counter.data_dim == 2


def test_flat_variances_of_single_component_are_per_dimension():
    mix = GaussianMixture(weights=[1.0], means=[[0.0, 1.0]], variances=[0.3, 0.5])
    np.testing.assert_array_equal(mix.variances, [[0.3, 0.5]])
    x = np.array([0.2, -0.4])
    expected = stats.norm.logpdf(0.2, 0.0, math.sqrt(0.3)) + stats.norm.logpdf(-0.4, 1.0, math.sqrt(0.5))
    assert mix.log_density(x) == pytest.approx(expected, rel=1e-12)


def test_flat_variances_per_component():
    mix = GaussianMixture(weights=[0.5, 0.5], means=[[0.0, 0.0], [1.0, 1.0]], variances=[0.3, 0.5])
    np.testing.assert_array_equal(mix.variances, [[0.3, 0.3], [0.5, 0.5]])


def test_flat_variances_of_wrong_length_are_rejected():
    with pytest.raises(ValueError, match="flat variances"):
        GaussianMixture(weights=[0.5, 0.5], means=[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
                        variances=[0.3, 0.5, 0.7])


# ---------------------------------------------------------------------------
# Embeddings and AdaGN
# ---------------------------------------------------------------------------

def test_timestep_embedding_at_zero():
    emb = timestep_embedding(0, 8)
    np.testing.assert_array_equal(emb[0::2], np.zeros(4))
    np.testing.assert_array_equal(emb[1::2], np.ones(4))


def test_timestep_embeddings_are_distinct():
    emb = timestep_embedding(np.arange(1, 1001), 64)
    assert emb.shape == (1000, 64)
    assert len(np.unique(emb, axis=0)) == 1000


def test_timestep_embedding_rejects_odd_dimension():
    with pytest.raises(ValueError):
        timestep_embedding(3, 7)


def test_adagn_unit_modulation_normalizes_groups():
    rng = np.random.default_rng(0)
    h = 5.0 + 3.0 * rng.standard_normal((2, 64))
    out = adagn(h, np.ones_like(h), np.zeros_like(h), group_size=32)
    groups = out.reshape(2, 2, 32)
    np.testing.assert_allclose(groups.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(groups.var(axis=-1), 1.0, atol=1e-6)


def test_adagn_zero_scale_returns_shift():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((3, 64))
    y_b = rng.standard_normal((3, 64))
    np.testing.assert_array_equal(adagn(h, np.zeros_like(h), y_b), y_b)


def test_adagn_constant_group():
    h = np.full((1, 32), 3.0)
    y_b = np.linspace(-1, 1, 32)[None, :]
    out = adagn(h, np.ones_like(h), y_b)
    np.testing.assert_array_equal(out, y_b)


def test_adagn_rejects_bad_shapes():
    h = np.zeros((2, 30))
    with pytest.raises(ValueError):
        adagn(h, np.ones_like(h), np.zeros_like(h), group_size=32)
    with pytest.raises(ValueError):
        adagn(np.zeros((2, 32)), np.ones((2, 16)), np.zeros((2, 32)))


# ---------------------------------------------------------------------------
# MLP denoiser
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(hidden_widths=(30,), group_size=32)
    with pytest.raises(ValueError):
        MlpSpec(conditional=True, num_classes=0)
    with pytest.raises(ValueError):
        MlpSpec(embedding_dim=7)
    spec = small_spec()
    assert MlpSpec.from_dict(spec.to_dict()) == spec


def test_zero_weights_give_head_bias():
    model = MlpDenoiser(small_spec(conditional=False, num_classes=0))
    for name, param in model.params.items():
        if name.endswith("proj.bias"):
            param[:] = np.concatenate([np.ones(8), np.zeros(8)])
        else:
            param[:] = 0.0
    model.params["head.bias"][:] = [0.1, -0.2, 0.3, -0.4]
    out = mlp_forward(model, np.array([[1.0, 2.0], [-3.0, 0.5]]), np.array([5, 50]))
    np.testing.assert_array_equal(out.eps, [[0.1, -0.2], [0.1, -0.2]])
    np.testing.assert_array_equal(out.v, [[0.3, -0.4], [0.3, -0.4]])


def test_forward_is_deterministic_and_label_sensitive():
    model = MlpDenoiser(small_spec(), seed=4)
    x = np.array([[0.3, -0.2]])
    first = model(x, 7, np.array([0])).eps
    again = model(x, 7, np.array([0])).eps
    other = model(x, 7, np.array([2])).eps
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other)


def test_label_validation():
    conditional = MlpDenoiser(small_spec())
    unconditional = MlpDenoiser(small_spec(conditional=False, num_classes=0))
    x = np.zeros((1, 2))
    with pytest.raises(ValueError):
        conditional(x, 1)
    with pytest.raises(ValueError):
        conditional(x, 1, np.array([3]))
    with pytest.raises(ValueError):
        unconditional(x, 1, np.array([0]))


def test_single_point_is_squeezed():
    model = MlpDenoiser(small_spec(conditional=False, num_classes=0), seed=1)
    out = model(np.array([0.5, -0.5]), 3)
    assert out.eps.shape == (2,)
    assert out.v.shape == (2,)


def test_parameter_gradients_match_finite_differences():
    model = MlpDenoiser(small_spec(), seed=3)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 2))
    t = rng.integers(1, 100, size=5)
    y = np.array([0, 1, 2, 1, 0])
    g_eps = rng.standard_normal((5, 2))
    g_v = rng.standard_normal((5, 2))

    def loss():
        out = model(x, t, y)
        return float(np.sum(g_eps * out.eps) + np.sum(g_v * out.v))

    analytic, _ = mlp_backward(model, x, t, y, g_eps, g_v)
    numeric = numeric_param_grads(model, loss)
    assert list(analytic) == list(model.params)
    for name in analytic:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-5, atol=1e-7,
                                   err_msg=name)


def test_input_gradient_matches_finite_differences():
    model = MlpDenoiser(small_spec(), seed=6)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 2))
    t = np.array([3, 30, 60, 90])
    y = np.array([2, 0, 1, 2])
    g_eps = rng.standard_normal((4, 2))
    g_v = rng.standard_normal((4, 2))
    _, grad_x = mlp_backward(model, x, t, y, g_eps, g_v)

    def loss(points):
        out = model(points, t, y)
        return float(np.sum(g_eps * out.eps) + np.sum(g_v * out.v))

    h = 1e-6
    numeric = np.zeros_like(x)
    for i in range(4):
        for j in range(2):
            up, down = x.copy(), x.copy()
            up[i, j] += h
            down[i, j] -= h
            numeric[i, j] = (loss(up) - loss(down)) / (2 * h)
    np.testing.assert_allclose(grad_x, numeric, rtol=1e-5, atol=1e-7)


def test_linear_network_input_gradient():
    spec = small_spec(conditional=False, num_classes=0, learn_variance=False,
                      activation="identity", use_norm=False)
    model = MlpDenoiser(spec, seed=2)
    g_eps = np.array([[1.0, -2.0], [0.5, 0.25]])
    _, grad_x = mlp_backward(model, np.zeros((2, 2)), 1, None, g_eps)
    p = model.params
    expected = g_eps @ (p["layers.0.weight"] @ p["layers.1.weight"] @ p["head.weight"]).T
    np.testing.assert_allclose(grad_x, expected, rtol=1e-12, atol=1e-14)


def test_zero_upstream_gives_zero_gradients():
    model = MlpDenoiser(small_spec(), seed=0)
    grads, grad_x = mlp_backward(model, np.ones((3, 2)), 4, np.array([0, 1, 2]),
                                 np.zeros((3, 2)), np.zeros((3, 2)))
    assert all(not np.any(g) for g in grads.values())
    assert not np.any(grad_x)


def test_backward_rejects_mismatched_upstream():
    model = MlpDenoiser(small_spec(conditional=False, num_classes=0, learn_variance=False))
    with pytest.raises(ValueError):
        mlp_backward(model, np.zeros((3, 2)), 1, None, np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mlp_backward(model, np.zeros((3, 2)), 1, None, np.zeros((2, 2)))
