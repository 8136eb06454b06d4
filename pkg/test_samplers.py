"""
Test ancestral, DDIM and guided sampling, temperature, respacing and
reverse-ODE encoding to verify correctness
"""

import math

import numpy as np
import pytest

from mixdiff.classifiers import AnalyticClassifier
from mixdiff.mixture import GaussianMixture, benchmark_mixture
from mixdiff.models import AnalyticDenoiser, CountingDenoiser, DenoiserOutput
from mixdiff.samplers import (
    ChainStreams,
    SamplerConfig,
    ancestral_step,
    apply_temperature,
    ddim_decode,
    ddim_encode,
    ddim_step,
    guided_ancestral_step,
    guided_eps,
    guided_mean,
    latent_interpolate,
    resolve_temperature_mode,
    sample,
    step_variance,
)
from mixdiff.schedules import NoiseSchedule, make_linear_schedule


class ConstantDenoiser:
    """Predicts the same eps everywhere"""

    learns_variance = False
    conditional = False

    def __init__(self, value=0.0, data_dim=1):
        self.value = value
        self.data_dim = data_dim

    def __call__(self, xt, t, y=None):
        return DenoiserOutput(eps=np.full(np.shape(xt), self.value))


class ZeroClassifier:
    def grad_log_prob(self, xt, t, y):
        return np.zeros(np.shape(xt))


@pytest.fixture
def small():
    return NoiseSchedule.from_betas([0.1, 0.2, 0.3])


@pytest.fixture
def oracle():
    mix = benchmark_mixture()
    sched = make_linear_schedule(1000)
    return mix, sched, AnalyticDenoiser(mix, sched), AnalyticClassifier(mix, sched)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="euler")
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=-1.0)
    with pytest.raises(ValueError):
        SamplerConfig(temperature_mode="eps-scale", tau=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(seed=-1)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_scale=1.0, temperature_mode="noise-scale", tau=0.9)
    assert SamplerConfig(temperature_mode="noise-scale", tau=0.0).tau == 0.0
    assert SamplerConfig(guidance_scale=1.0, temperature_mode="noise-scale", tau=0.9,
                         allow_experimental=True).guided


def test_resolve_temperature_mode():
    assert resolve_temperature_mode(None) == "none"
    assert resolve_temperature_mode(["noise-scale", "noise-scale"]) == "noise-scale"
    with pytest.raises(ValueError):
        resolve_temperature_mode(["noise-scale", "eps-scale"])


def test_apply_temperature_touches_only_its_target():
    noise_cfg = SamplerConfig(temperature_mode="noise-scale", tau=0.5)
    eps_cfg = SamplerConfig(temperature_mode="eps-scale", tau=0.5)
    value = np.array([1.0, -2.0])
    np.testing.assert_array_equal(apply_temperature(noise_cfg, value, "noise"), [0.5, -1.0])
    np.testing.assert_array_equal(apply_temperature(noise_cfg, value, "eps"), value)
    np.testing.assert_array_equal(apply_temperature(eps_cfg, value, "eps"), [2.0, -4.0])
    np.testing.assert_array_equal(apply_temperature(eps_cfg, value, "noise"), value)
    with pytest.raises(ValueError):
        apply_temperature(eps_cfg, value, "mean")


def test_chain_streams_depend_only_on_chain_index():
    few = ChainStreams(7, 10).standard_normal((10, 2))
    many = ChainStreams(7, 300).standard_normal((300, 2))
    np.testing.assert_array_equal(few, many[:10])
    with pytest.raises(ValueError):
        ChainStreams(7, 10).standard_normal((11, 2))


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def test_guided_eps_example():
    assert guided_eps(0.3, 0.5, 0.72, 1.0) == pytest.approx(0.035425, abs=1e-6)


def test_guided_mean_shift():
    shifted = guided_mean(np.zeros(2), np.full(2, 0.2), np.array([1.0, -1.0]), 2.0)
    np.testing.assert_allclose(shifted, [0.4, -0.4])


def test_ddim_step_example(small):
    eps = 0.3 - math.sqrt(0.28) * 0.5
    model = ConstantDenoiser(eps)
    out = ddim_step(model, np.array([1.0]), 2, 1, SamplerConfig(kind="ddim"), small)
    assert out[0] == pytest.approx(1.108278, abs=1e-6)


def test_ddim_step_with_zero_eps_rescales(small):
    out = ddim_step(ConstantDenoiser(0.0), np.array([0.7]), 3, 1, SamplerConfig(kind="ddim"), small)
    assert out[0] == pytest.approx(0.7 * math.sqrt(0.9 / 0.504), rel=1e-12)
    with pytest.raises(ValueError):
        ddim_step(ConstantDenoiser(0.0), np.array([0.7]), 1, 1, SamplerConfig(kind="ddim"), small)


def test_zero_noise_ancestral_step_returns_mean(small):
    config = SamplerConfig(temperature_mode="noise-scale", tau=0.0)
    x = np.array([[0.4], [-1.1]])
    out = ancestral_step(ConstantDenoiser(0.0), x, 3, np.random.default_rng(0), config, small)
    np.testing.assert_allclose(out, x / math.sqrt(0.7), rtol=1e-12)


def test_final_ancestral_step_is_noiseless(small):
    x = np.array([[0.4], [-1.1]])
    first = ancestral_step(ConstantDenoiser(0.1), x, 1, np.random.default_rng(0), SamplerConfig(), small)
    second = ancestral_step(ConstantDenoiser(0.1), x, 1, np.random.default_rng(99), SamplerConfig(), small)
    np.testing.assert_array_equal(first, second)


def test_zero_classifier_gradient_leaves_step_unchanged(small):
    x = np.array([[0.3], [0.9]])
    config = SamplerConfig(guidance_scale=2.0)
    plain = ancestral_step(ConstantDenoiser(0.2), x, 3, np.random.default_rng(5), config, small)
    guided = guided_ancestral_step(ConstantDenoiser(0.2), ZeroClassifier(), np.array([0, 1]), x, 3,
                                   np.random.default_rng(5), config, small)
    np.testing.assert_array_equal(plain, guided)


def test_guided_step_needs_classifier(small):
    with pytest.raises(ValueError):
        guided_ancestral_step(ConstantDenoiser(0.0), None, None, np.zeros((1, 1)), 2,
                              np.random.default_rng(0), SamplerConfig(guidance_scale=1.0), small)


def test_learned_variance_needs_variance_head(small):
    out = DenoiserOutput(eps=np.zeros((1, 1)))
    with pytest.raises(ValueError):
        step_variance(out, 2, SamplerConfig(variance_mode="learned-v"), small, np.zeros((1, 1)))
    fixed = step_variance(out, 2, SamplerConfig(variance_mode="fixed-beta"), small, np.zeros((1, 1)))
    np.testing.assert_array_equal(fixed, [[0.2]])


# ---------------------------------------------------------------------------
# Full chains
# ---------------------------------------------------------------------------

def test_sampling_is_deterministic(oracle):
    _, sched, model, _ = oracle
    for kind in ("ancestral", "ddim"):
        config = SamplerConfig(kind=kind, seed=3, respacing={"kind": "uniform", "count": 50})
        first = sample(model, sched, config, 40).samples
        second = sample(model, sched, config, 40).samples
        np.testing.assert_array_equal(first, second)


def test_chain_outputs_do_not_depend_on_batch_size(oracle):
    _, sched, model, _ = oracle
    config = SamplerConfig(seed=9, respacing={"kind": "uniform", "count": 50})
    small_run = sample(model, sched, config, 5).samples
    large_run = sample(model, sched, config, 300).samples
    np.testing.assert_allclose(small_run, large_run[:5], rtol=1e-13, atol=1e-13)


def test_zero_guidance_is_bit_identical(oracle):
    _, sched, model, clf = oracle
    labels = np.arange(32) % 4
    for kind in ("ancestral", "ddim"):
        config = SamplerConfig(kind=kind, seed=1, respacing={"kind": "uniform", "count": 40})
        plain = sample(model, sched, config, 32).samples
        zero = sample(model, sched, config, 32, classifier=clf, y=labels).samples
        np.testing.assert_array_equal(plain, zero)


def test_unit_temperature_is_bit_identical(oracle):
    _, sched, model, _ = oracle
    base = SamplerConfig(seed=2, respacing={"kind": "uniform", "count": 40})
    plain = sample(model, sched, base, 32).samples
    for mode in ("noise-scale", "eps-scale"):
        config = SamplerConfig(seed=2, respacing={"kind": "uniform", "count": 40},
                               temperature_mode=mode, tau=1.0)
        np.testing.assert_array_equal(sample(model, sched, config, 32).samples, plain)


def test_guided_sampling_needs_classifier(oracle):
    _, sched, model, _ = oracle
    with pytest.raises(ValueError):
        sample(model, sched, SamplerConfig(guidance_scale=1.0), 4, y=0)


def test_empty_sample(oracle):
    _, sched, model, _ = oracle
    result = sample(model, sched, SamplerConfig(), 0)
    assert result.samples.shape == (0, 2)
    with pytest.raises(ValueError):
        sample(model, sched, SamplerConfig(), -1)


def test_respaced_chain_evaluation_count(oracle):
    _, sched, model, _ = oracle
    for kind in ("ddim", "ancestral"):
        counter = CountingDenoiser(model)
        sample(counter, sched, SamplerConfig(kind=kind, respacing={"kind": "uniform", "count": 25}), 8)
        assert counter.calls == 25


def test_uniform_segments_match_uniform_respacing(oracle):
    _, sched, model, _ = oracle
    segments = SamplerConfig(seed=4, respacing={"kind": "segments", "counts": [50] * 5})
    uniform = SamplerConfig(seed=4, respacing={"kind": "uniform", "count": 250})
    np.testing.assert_array_equal(sample(model, sched, segments, 16).samples,
                                  sample(model, sched, uniform, 16).samples)


def test_trajectory_records_every_state(oracle):
    _, sched, model, _ = oracle
    config = SamplerConfig(respacing={"kind": "uniform", "count": 10}, record_trajectory=True)
    result = sample(model, sched, config, 6)
    assert result.trajectory.states.shape == (11, 6, 2)
    assert list(result.trajectory.timesteps) == list(range(10, -1, -1))
    np.testing.assert_array_equal(result.trajectory.final, result.samples)


def test_exact_reverse_kernel_reproduces_data_moments():
    # unit-variance data makes the fixed-beta reverse kernel exact
    mix = GaussianMixture(weights=[1.0], means=[[1.0]], variances=[[1.0]])
    sched = make_linear_schedule(200)
    model = AnalyticDenoiser(mix, sched)
    n = 20_000
    x = sample(model, sched, SamplerConfig(seed=0, variance_mode="fixed-beta"), n).samples
    assert abs(x.mean() - 1.0) < 4 * math.sqrt(1.0 / n)
    assert x.var() == pytest.approx(1.0 - sched.betas[0], rel=0.05)


def test_low_temperature_shrinks_spread():
    mix = GaussianMixture(weights=[1.0], means=[[0.0]], variances=[[1.0]])
    sched = make_linear_schedule(200)
    model = AnalyticDenoiser(mix, sched)
    base = sample(model, sched, SamplerConfig(seed=0, variance_mode="fixed-beta"), 5000).samples
    for mode in ("noise-scale", "eps-scale"):
        config = SamplerConfig(seed=0, variance_mode="fixed-beta", temperature_mode=mode, tau=0.5)
        cold = sample(model, sched, config, 5000).samples
        assert cold.var() < 0.9 * base.var()


# ---------------------------------------------------------------------------
# Encoding and interpolation
# ---------------------------------------------------------------------------

def test_encode_with_zero_eps_rescales():
    sched = make_linear_schedule(100)
    x = np.array([[0.5], [-2.0]])
    latent = ddim_encode(ConstantDenoiser(0.0), x, sched)
    np.testing.assert_allclose(latent, x * math.sqrt(sched.alpha_bars[-1] / sched.alpha_bars[0]),
                               rtol=1e-12)


def test_encode_decode_round_trip(oracle):
    mix, sched, model, _ = oracle
    points, _ = mix.sample(100, np.random.default_rng(0))
    latent = ddim_encode(model, points, sched)
    decoded = ddim_decode(model, latent, sched)
    assert np.linalg.norm(decoded - points) / np.linalg.norm(points) < 0.05


def test_encode_rejects_non_finite_points(oracle):
    _, sched, model, _ = oracle
    with pytest.raises(ValueError):
        ddim_encode(model, np.array([[np.nan, 0.0]]), sched, 10)


def test_latent_interpolate():
    z0 = np.array([1.0, 2.0])
    z1 = np.array([-3.0, 0.5])
    np.testing.assert_array_equal(latent_interpolate(z0, z1, 0.0), z0)
    np.testing.assert_allclose(latent_interpolate(z0, z1, math.pi / 2), z1, atol=1e-15)
    np.testing.assert_allclose(latent_interpolate(z0, z0, math.pi / 4), math.sqrt(2) * z0)
    with pytest.raises(ValueError):
        latent_interpolate(z0, np.zeros(3), 0.3)
