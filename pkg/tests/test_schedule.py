"""Schedule construction, deterministic stepping, inversion, and the oracle.

Expected values come from independent re-derivations inside this file:
the cumulative-product loop for signal retention, integer arithmetic for
the sub-schedule, affine coefficient propagation for whole chains (the
oracle's noise estimate is affine in the latent, so an entire chain
collapses to one scale and one offset computable without running it),
and numerical quadrature for the posterior mean.
"""

import json
import math

import numpy as np
import pytest
from scipy import integrate

from psf4d import (
    DiffusionSchedule,
    FormatError,
    GaussianOracle,
    NotSupportedError,
    ParameterError,
    PredictorContractError,
    ShapeError,
    ddim_invert,
    ddim_sample,
    ddim_step,
    forward_diffuse,
    guided_predictor,
    oracle_predict,
    roundtrip_error,
    zero_predictor,
)


def cumulative_retention(betas):
    # independent of the library's cumprod: plain loop
    bars = [1.0]
    for b in betas:
        bars.append(bars[-1] * (1.0 - b))
    return bars


def oracle_slope(schedule, t, sigma2):
    ab = schedule.alpha_bar(t)
    v = ab * sigma2 + 1.0 - ab
    return math.sqrt(1.0 - ab) / v


def affine_chain(schedule, path, mu, sigma2):
    """Scale A and offset B with chain output A * z_start + B.

    Re-derives each hop from the update rule with the noise estimate
    taken at the hop's source (or its target when the source is 0),
    which for the Gaussian oracle is slope * (z - sqrt(ab) * mu).
    """
    A, B = 1.0, 0.0
    for t_from, t_to in zip(path, path[1:]):
        t_eval = t_from if t_from >= 1 else t_to
        k = oracle_slope(schedule, t_eval, sigma2)
        ab_eval = schedule.alpha_bar(t_eval)
        ab_from = schedule.alpha_bar(t_from)
        ab_to = schedule.alpha_bar(t_to)
        rescale = math.sqrt(ab_to / ab_from)
        weight = math.sqrt(1.0 - ab_to) - rescale * math.sqrt(1.0 - ab_from)
        scale = rescale + weight * k
        shift = -weight * k * math.sqrt(ab_eval) * mu
        A, B = scale * A, scale * B + shift
    return A, B


# ---------------------------------------------------------------------------
# schedule construction


def test_linear_betas_span_the_requested_range():
    sched = DiffusionSchedule()
    betas = sched.betas
    assert betas.shape == (1000,)
    assert betas[0] == pytest.approx(1e-4)
    assert betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(betas) > 0)


def test_scaled_linear_spaces_square_roots_evenly():
    sched = DiffusionSchedule(kind="scaled_linear")
    roots = np.sqrt(sched.betas)
    gaps = np.diff(roots)
    assert np.allclose(gaps, gaps[0], rtol=1e-10)
    assert roots[0] == pytest.approx(math.sqrt(1e-4))
    assert roots[-1] == pytest.approx(math.sqrt(0.02))


def test_retention_matches_the_cumulative_product_loop():
    sched = DiffusionSchedule(timesteps=64, ddim_steps=8)
    bars = cumulative_retention(sched.betas)
    for t in range(65):
        assert sched.alpha_bar(t) == pytest.approx(bars[t], rel=1e-14)


def test_retention_starts_at_one_and_strictly_decreases():
    sched = DiffusionSchedule()
    assert sched.alpha_bar(0) == 1.0
    values = [sched.alpha_bar(t) for t in range(0, 1001)]
    assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize(
    "timesteps,steps,expected",
    [
        (1000, 30, None),
        (10, 10, list(range(1, 11))),
        (7, 3, [2, 4, 7]),
        (1000, 1, [1000]),
    ],
)
def test_sub_schedule_uses_floored_even_spacing(timesteps, steps, expected):
    sched = DiffusionSchedule(timesteps=timesteps, ddim_steps=steps)
    manual = [k * timesteps // steps for k in range(1, steps + 1)]
    assert list(sched.ddim_timesteps) == manual
    if expected is not None:
        assert manual == expected


def test_sub_schedule_is_strictly_increasing_and_ends_at_t():
    rng = np.random.default_rng(3)
    for _ in range(50):
        T = int(rng.integers(2, 2000))
        S = int(rng.integers(1, T + 1))
        sched = DiffusionSchedule(timesteps=T, ddim_steps=S)
        ts = sched.ddim_timesteps
        assert len(ts) == S
        assert ts[-1] == T
        assert all(a < b for a, b in zip(ts, ts[1:]))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"timesteps": 0},
        {"ddim_steps": 0},
        {"ddim_steps": 1001},
        {"beta_start": 0.0},
        {"beta_start": 0.03},
        {"beta_end": 1.0},
        {"kind": "cosine"},
        {"timesteps": 10.5},
    ],
)
def test_bad_schedule_parameters_are_rejected(kwargs):
    with pytest.raises(ParameterError):
        DiffusionSchedule(**kwargs)


def test_time_indices_outside_the_range_are_rejected():
    sched = DiffusionSchedule(timesteps=100, ddim_steps=10)
    with pytest.raises(ParameterError):
        sched.alpha_bar(101)
    with pytest.raises(ParameterError):
        sched.alpha_bar(-1)
    with pytest.raises(ParameterError):
        sched.alpha_bar(True)
    with pytest.raises(ParameterError):
        sched.alpha_bar(3.0)


def test_descent_path_walks_the_sub_schedule_down_to_zero():
    sched = DiffusionSchedule()
    path = sched.descent_path()
    assert path[0] == 1000
    assert path[-1] == 0
    assert len(path) == 31  # 30 hops
    assert all(a > b for a, b in zip(path, path[1:]))
    mid = sched.descent_path(500)
    assert mid[0] == 500 and mid[-1] == 0
    assert all(t in (500, 0) or t in sched.ddim_timesteps for t in mid)
    # starting exactly on a member does not duplicate it
    member = sched.ddim_timesteps[13]
    from_member = sched.descent_path(member)
    assert from_member.count(member) == 1


def test_ascent_path_mirrors_descent():
    sched = DiffusionSchedule()
    up = sched.ascent_path()
    down = sched.descent_path()
    assert up == list(reversed(down))
    with pytest.raises(ParameterError):
        sched.ascent_path(0)
    with pytest.raises(ParameterError):
        sched.descent_path(0)


def test_schedule_json_round_trip(tmp_path):
    sched = DiffusionSchedule(timesteps=640, kind="scaled_linear", ddim_steps=16)
    path = tmp_path / "schedule.json"
    sched.save(path)
    loaded = DiffusionSchedule.load(path)
    assert loaded == sched
    assert loaded.to_record() == sched.to_record()


def test_tampered_sub_schedule_is_detected(tmp_path):
    sched = DiffusionSchedule(timesteps=100, ddim_steps=5)
    record = sched.to_record()
    record["ddim_timesteps"][-1] += 1
    with pytest.raises(FormatError):
        DiffusionSchedule.from_record(record)


def test_missing_record_key_is_a_format_error():
    record = DiffusionSchedule().to_record()
    del record["kind"]
    with pytest.raises(FormatError):
        DiffusionSchedule.from_record(record)


# ---------------------------------------------------------------------------
# forward diffusion


def test_forward_diffuse_at_time_zero_is_identity():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(11)
    z0 = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 5))
    out = forward_diffuse(sched, z0, 0, eps)
    np.testing.assert_array_equal(out, z0)


def test_forward_diffuse_matches_the_closed_form():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(12)
    z0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    for t in (1, 137, 500, 1000):
        ab = sched.alpha_bar(t)
        expected = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
        np.testing.assert_allclose(forward_diffuse(sched, z0, t, eps), expected)


def test_forward_diffuse_moments_at_mid_schedule():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(13)
    n = 200_000
    z0 = np.full(n, 0.7)
    eps = rng.standard_normal(n)
    out = forward_diffuse(sched, z0, 500, eps)
    ab = sched.alpha_bar(500)
    assert out.mean() == pytest.approx(math.sqrt(ab) * 0.7, abs=0.01)
    assert out.var() == pytest.approx(1.0 - ab, abs=0.01)


def test_forward_diffuse_shape_mismatch_is_rejected():
    sched = DiffusionSchedule()
    with pytest.raises(ShapeError):
        forward_diffuse(sched, np.zeros((2, 2)), 10, np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# single hops


def test_hop_to_the_same_time_is_identity_for_any_predictor():
    sched = DiffusionSchedule()
    oracle = GaussianOracle(sched, mu=0.3, sigma2=0.25)
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 1001))
        z = rng.standard_normal((2, 8))
        out = ddim_step(sched, z, t, t, oracle)
        worst = max(worst, float(np.max(np.abs(out - z))))
    assert worst <= 1e-12


def test_hop_matches_manual_update_algebra():
    sched = DiffusionSchedule()
    oracle = GaussianOracle(sched, mu=0.3, sigma2=0.25)
    rng = np.random.default_rng(22)
    z = rng.standard_normal((3, 3))
    for t_from, t_to in [(1000, 966), (500, 33), (33, 500), (66, 0)]:
        eps = oracle(z, t_from)
        ab_f = sched.alpha_bar(t_from)
        ab_t = sched.alpha_bar(t_to)
        clean = (z - math.sqrt(1.0 - ab_f) * eps) / math.sqrt(ab_f)
        expected = math.sqrt(ab_t) * clean + math.sqrt(1.0 - ab_t) * eps
        np.testing.assert_allclose(
            ddim_step(sched, z, t_from, t_to, oracle), expected, atol=1e-14
        )


def test_hop_from_time_zero_estimates_noise_at_the_target():
    sched = DiffusionSchedule()
    seen = []

    def probe(z, t, conditioning=None):
        seen.append(t)
        return np.zeros_like(z)

    z = np.ones((2, 2))
    out = ddim_step(sched, z, 0, 66, probe)
    assert seen == [66]
    np.testing.assert_allclose(out, math.sqrt(sched.alpha_bar(66)) * z)
    with pytest.raises(ParameterError):
        ddim_step(sched, z, 0, 0, probe)


def test_conditioning_is_passed_through_untouched():
    sched = DiffusionSchedule(timesteps=100, ddim_steps=4)
    token = object()
    seen = []

    def probe(z, t, conditioning=None):
        seen.append(conditioning)
        return np.zeros_like(z)

    ddim_sample(sched, np.ones(4), probe, conditioning=token)
    assert seen and all(c is token for c in seen)


# ---------------------------------------------------------------------------
# whole chains against affine propagation


def test_zero_predictor_chains_are_pure_rescaling():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(31)
    z = rng.standard_normal((4, 8))
    down = ddim_sample(sched, z, zero_predictor)
    np.testing.assert_allclose(down, z / math.sqrt(sched.alpha_bar(1000)), rtol=1e-12)
    up = ddim_invert(sched, z, zero_predictor)
    np.testing.assert_allclose(up, z * math.sqrt(sched.alpha_bar(1000)), rtol=1e-12)


def test_zero_predictor_round_trip_is_exact():
    sched = DiffusionSchedule(ddim_steps=50)
    rng = np.random.default_rng(32)
    z0 = rng.standard_normal((4, 64))
    assert roundtrip_error(sched, z0, zero_predictor) <= 1e-12


def test_sampling_chain_matches_affine_propagation():
    sched = DiffusionSchedule()
    mu, sigma2 = 0.3, 0.25
    oracle = GaussianOracle(sched, mu=mu, sigma2=sigma2)
    rng = np.random.default_rng(33)
    z_start = rng.standard_normal((64, 64))
    out = ddim_sample(sched, z_start, oracle)
    A, B = affine_chain(sched, sched.descent_path(), mu, sigma2)
    np.testing.assert_allclose(out, A * z_start + B, atol=1e-12)


def test_partial_chain_from_mid_schedule_matches_affine_propagation():
    sched = DiffusionSchedule()
    mu, sigma2 = -0.4, 0.49
    oracle = GaussianOracle(sched, mu=mu, sigma2=sigma2)
    rng = np.random.default_rng(34)
    z_start = rng.standard_normal((16, 16))
    out = ddim_sample(sched, z_start, oracle, from_t=600)
    A, B = affine_chain(sched, sched.descent_path(600), mu, sigma2)
    np.testing.assert_allclose(out, A * z_start + B, atol=1e-12)


def test_oracle_chain_statistics_match_the_exact_transport():
    # 10^4 element chains from pure noise; the implementation must land
    # where coefficient propagation says this discretization lands.
    sched = DiffusionSchedule()
    oracle = GaussianOracle(sched, mu=0.3, sigma2=0.25)
    rng = np.random.default_rng(35)
    z_T = rng.standard_normal(10_000)
    out = ddim_sample(sched, z_T, oracle)
    A, B = affine_chain(sched, sched.descent_path(), 0.3, 0.25)
    assert out.mean() == pytest.approx(B, abs=3.0 * abs(A) / 100.0)
    assert out.std() == pytest.approx(abs(A), rel=0.03)
    assert out.mean() == pytest.approx(0.3, abs=0.02)


def test_chain_marginal_converges_to_the_target_as_steps_grow():
    # the 30-step discretization undershoots the target spread; the bias
    # must vanish as the sub-schedule refines
    target = 0.5
    scales = []
    for steps in (30, 100, 300, 1000):
        sched = DiffusionSchedule(ddim_steps=steps)
        A, _ = affine_chain(sched, sched.descent_path(), 0.3, 0.25)
        scales.append(abs(A))
    gaps = [abs(s - target) for s in scales]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.005
    fine = DiffusionSchedule(ddim_steps=1000)
    _, B = affine_chain(fine, fine.descent_path(), 0.3, 0.25)
    assert B == pytest.approx(0.3, abs=0.005)


# ---------------------------------------------------------------------------
# inversion round trips


def test_round_trip_error_is_small_and_shrinks_with_more_steps():
    rng = np.random.default_rng(41)
    z0 = 0.3 + 0.5 * rng.standard_normal((4, 64))
    errors = {}
    for steps in (10, 25, 50):
        sched = DiffusionSchedule(ddim_steps=steps)
        oracle = GaussianOracle(sched, mu=0.3, sigma2=0.25)
        errors[steps] = roundtrip_error(sched, z0, oracle)
    assert errors[10] > errors[25] > errors[50]
    # measured on this configuration and frozen with ~3x headroom
    assert errors[10] <= 3e-2
    assert errors[25] <= 5e-4
    assert errors[50] <= 2e-5


def test_round_trip_to_a_partial_depth():
    sched = DiffusionSchedule(ddim_steps=50)
    oracle = GaussianOracle(sched, mu=0.3, sigma2=0.25)
    rng = np.random.default_rng(42)
    z0 = 0.3 + 0.5 * rng.standard_normal((4, 16))
    assert roundtrip_error(sched, z0, oracle, to_t=600) <= 2e-5


def test_more_refinement_sweeps_reduce_the_residual():
    sched = DiffusionSchedule(ddim_steps=25)
    oracle = GaussianOracle(sched, mu=0.3, sigma2=0.25)
    rng = np.random.default_rng(43)
    z0 = 0.3 + 0.5 * rng.standard_normal((4, 16))

    def err(sweeps):
        up = ddim_invert(sched, z0, oracle, refine_sweeps=sweeps)
        back = ddim_sample(sched, up, oracle)
        return float(np.max(np.abs(back - z0)))

    e1, e3, e5 = err(1), err(3), err(5)
    assert e1 > e3 > e5
    with pytest.raises(ParameterError):
        ddim_invert(sched, z0, oracle, refine_sweeps=0)


# ---------------------------------------------------------------------------
# the Gaussian oracle


def test_oracle_posterior_mean_matches_quadrature():
    sched = DiffusionSchedule()
    mu, sigma2 = 0.3, 0.25
    for t, z_value in [(5, 0.8), (137, -0.4), (500, 1.3), (999, 0.1)]:
        ab = sched.alpha_bar(t)

        def weight(z0):
            lik = math.exp(-((z_value - math.sqrt(ab) * z0) ** 2) / (2 * (1 - ab)))
            prior = math.exp(-((z0 - mu) ** 2) / (2 * sigma2))
            return lik * prior

        lo, hi = mu - 12 * math.sqrt(sigma2), mu + 12 * math.sqrt(sigma2)
        norm, _ = integrate.quad(weight, lo, hi)
        first, _ = integrate.quad(lambda z0: z0 * weight(z0), lo, hi)
        posterior_mean = first / norm
        expected_eps = (z_value - math.sqrt(ab) * posterior_mean) / math.sqrt(1 - ab)
        got = oracle_predict(sched, np.array([z_value]), t, mu, sigma2)
        assert got[0] == pytest.approx(expected_eps, rel=1e-6, abs=1e-9)


def test_oracle_with_unit_prior_reduces_to_a_pure_scaling():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(51)
    z = rng.standard_normal((3, 7))
    for t in (1, 500, 1000):
        expected = math.sqrt(1.0 - sched.alpha_bar(t)) * z
        np.testing.assert_allclose(
            oracle_predict(sched, z, t, 0.0, 1.0), expected, atol=1e-13
        )


def test_oracle_tight_prior_approaches_the_point_target_estimate():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(52)
    z = rng.standard_normal((2, 5))
    mu = 0.3
    for t in (100, 700):
        ab = sched.alpha_bar(t)
        expected = (z - math.sqrt(ab) * mu) / math.sqrt(1.0 - ab)
        got = oracle_predict(sched, z, t, mu, 1e-12)
        np.testing.assert_allclose(got, expected, rtol=1e-9)


def test_oracle_estimate_is_antisymmetric_about_the_scaled_mean():
    sched = DiffusionSchedule()
    mu, sigma2, t = 0.7, 0.5, 300
    center = math.sqrt(sched.alpha_bar(t)) * mu
    d = np.linspace(0.1, 2.0, 8)
    plus = oracle_predict(sched, center + d, t, mu, sigma2)
    minus = oracle_predict(sched, center - d, t, mu, sigma2)
    np.testing.assert_allclose(plus, -minus, atol=1e-12)


def test_oracle_accepts_a_tensor_mean():
    sched = DiffusionSchedule()
    rng = np.random.default_rng(53)
    z = rng.standard_normal((4, 6))
    mu = rng.standard_normal((4, 6))
    got = oracle_predict(sched, z, 400, mu, 0.25)
    element_wise = np.empty_like(z)
    for idx in np.ndindex(z.shape):
        element_wise[idx] = oracle_predict(
            sched, np.array([z[idx]]), 400, float(mu[idx]), 0.25
        )[0]
    np.testing.assert_allclose(got, element_wise, atol=1e-14)
    with pytest.raises(ParameterError):
        oracle_predict(sched, z, 400, np.zeros((2, 2)), 0.25)


def test_oracle_is_undefined_at_time_zero():
    sched = DiffusionSchedule()
    with pytest.raises(NotSupportedError):
        oracle_predict(sched, np.zeros(3), 0, 0.0, 1.0)


@pytest.mark.parametrize("sigma2", [0.0, -1.0, math.nan])
def test_oracle_variance_must_be_positive(sigma2):
    sched = DiffusionSchedule()
    with pytest.raises(ParameterError):
        oracle_predict(sched, np.zeros(3), 10, 0.0, sigma2)
    with pytest.raises(ParameterError):
        GaussianOracle(sched, mu=0.0, sigma2=sigma2)


def test_oracle_object_matches_the_function():
    sched = DiffusionSchedule()
    oracle = GaussianOracle(sched, mu=0.2, sigma2=0.5)
    rng = np.random.default_rng(54)
    z = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(oracle(z, 250), oracle_predict(sched, z, 250, 0.2, 0.5))


# ---------------------------------------------------------------------------
# guided blending


def test_guidance_scale_zero_returns_the_unconditional_estimate():
    sched = DiffusionSchedule()
    uncond = GaussianOracle(sched, mu=0.0, sigma2=1.0)
    cond = GaussianOracle(sched, mu=0.5, sigma2=0.25)
    blended = guided_predictor(uncond, cond, scale=0.0)
    rng = np.random.default_rng(61)
    z = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(blended(z, 500), uncond(z, 500))


def test_guidance_scale_one_returns_the_conditional_estimate():
    sched = DiffusionSchedule()
    uncond = GaussianOracle(sched, mu=0.0, sigma2=1.0)
    cond = GaussianOracle(sched, mu=0.5, sigma2=0.25)
    blended = guided_predictor(uncond, cond, scale=1.0)
    rng = np.random.default_rng(62)
    z = rng.standard_normal((3, 4))
    np.testing.assert_allclose(blended(z, 500), cond(z, 500), atol=1e-14)


def test_guidance_extrapolates_along_the_conditioning_direction():
    sched = DiffusionSchedule()
    uncond = GaussianOracle(sched, mu=0.0, sigma2=1.0)
    cond = GaussianOracle(sched, mu=0.5, sigma2=0.25)
    rng = np.random.default_rng(63)
    z = rng.standard_normal((2, 6))
    for scale in (7.5, 2.0, -1.0):
        blended = guided_predictor(uncond, cond, scale=scale)
        eu, ec = uncond(z, 300), cond(z, 300)
        np.testing.assert_allclose(blended(z, 300), eu + scale * (ec - eu), atol=1e-13)


def test_guidance_scale_must_be_finite():
    with pytest.raises(ParameterError):
        guided_predictor(zero_predictor, zero_predictor, scale=math.inf)


# ---------------------------------------------------------------------------
# predictor contract enforcement


def test_predictor_exceptions_are_wrapped_with_step_context():
    sched = DiffusionSchedule(timesteps=100, ddim_steps=4)

    def broken(z, t, conditioning=None):
        raise RuntimeError("boom")

    with pytest.raises(PredictorContractError, match="boom"):
        ddim_sample(sched, np.ones(4), broken)


def test_predictor_shape_mismatch_is_a_contract_error():
    sched = DiffusionSchedule(timesteps=100, ddim_steps=4)

    def wrong_shape(z, t, conditioning=None):
        return np.zeros(z.size + 1)

    with pytest.raises(PredictorContractError, match="shape"):
        ddim_sample(sched, np.ones(4), wrong_shape)


def test_predictor_non_finite_output_is_a_contract_error():
    sched = DiffusionSchedule(timesteps=100, ddim_steps=4)

    def poisoned(z, t, conditioning=None):
        out = np.zeros_like(z)
        out.flat[0] = math.nan
        return out

    with pytest.raises(PredictorContractError, match="finite"):
        ddim_sample(sched, np.ones(4), poisoned)


def test_diverging_chain_is_reported():
    sched = DiffusionSchedule(timesteps=1000, ddim_steps=30)

    def explosive(z, t, conditioning=None):
        with np.errstate(over="ignore"):
            return z * 1e12

    with pytest.raises(PredictorContractError):
        ddim_sample(sched, np.ones(8), explosive)
