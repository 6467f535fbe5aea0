import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moee import tensor as T
from moee.diffusion import (BETA_MAX, BETA_MIN, LossConfig, PerceptualExtractor, continuous_beta, ddim_sample,
                            ddim_timesteps, latent_loss, loss_weight, make_schedule, predict_x0, q_sample,
                            spatial_loss, spatial_loss_batch, total_loss)
from moee.tensor import ContractError, DimensionError, Tensor


def test_rate_endpoints_are_the_stated_values():
    # [PAPER] beta_min = 0.05 and beta_max = 20 before discretisation
    assert continuous_beta(0.0) == pytest.approx(0.05, abs=1e-15)
    assert continuous_beta(1.0) == pytest.approx(20.0, abs=1e-12)
    assert (BETA_MIN, BETA_MAX) == (0.05, 20.0)
    sched = make_schedule(1000)
    assert sched.rate(0.0) == pytest.approx(0.05) and sched.rate(1.0) == pytest.approx(20.0)


def test_rate_is_quadratic_in_u():
    # sqrt of the rate is affine in u
    u = np.linspace(0, 1, 11)
    r = np.sqrt(continuous_beta(u))
    np.testing.assert_allclose(np.diff(r, 2), 0.0, atol=1e-12)


@pytest.mark.parametrize("T_total", [25, 150, 1000, 4000])
def test_alpha_bar_strictly_decreasing(T_total):
    sched = make_schedule(T_total)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    np.testing.assert_allclose(sched.alpha_bars, np.cumprod(1 - sched.betas), rtol=1e-15)


def test_terminal_signal_is_small():
    # the integrated rate over [0, 1] is (0.05 + sqrt(0.05*20) + 20) / 3 = 7.0167
    sched = make_schedule(1000)
    integral = (0.05 + math.sqrt(0.05 * 20.0) + 20.0) / 3.0
    assert sched.betas.sum() == pytest.approx(integral, rel=0.01)
    assert sched.alpha_bars[-1] < 1e-3


def test_schedule_contract():
    with pytest.raises(ContractError):
        make_schedule(1)
    with pytest.raises(ContractError):
        make_schedule(10, beta_min=2.0, beta_max=1.0)
    with pytest.raises(ContractError):
        make_schedule(10)  # per-step beta = 20 / 10 > 1


def test_q_sample_and_predict_x0_invert():
    sched = make_schedule(100)
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    t = np.array([0, 10, 50, 99])
    z = q_sample(x0, t, eps, sched)
    np.testing.assert_allclose(predict_x0(z, eps, t, sched), x0, atol=1e-10)
    z_t = predict_x0(Tensor(z), Tensor(eps), t, sched)
    np.testing.assert_allclose(z_t.data, x0, atol=1e-10)
    with pytest.raises(ContractError):
        q_sample(x0, 100, eps, sched)
    with pytest.raises(DimensionError):
        q_sample(x0, 1, eps[:2], sched)


def test_loss_weight_endpoints_and_monotone():
    # [PAPER] w(t) = cos(t pi / 2T)
    T_total = 1000
    grid = np.linspace(0, T_total, 1000)
    w = loss_weight(grid, T_total)
    assert loss_weight(0, T_total) == 1.0
    assert loss_weight(T_total, T_total) == 0.0
    assert np.all(np.diff(w) < 0)
    np.testing.assert_allclose(loss_weight(500, 1000), math.cos(math.pi / 4), rtol=1e-15)


def test_spatial_loss_vanishes_at_T_and_at_equality():
    rng = np.random.default_rng(1)
    cfg = LossConfig(lam=0.5, T=1000)
    a, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(2, 8, 8))
    assert spatial_loss(Tensor(a), b, 1000, cfg).item() == 0.0
    assert spatial_loss(Tensor(a), a, 17, cfg).item() == 0.0
    assert spatial_loss(Tensor(a), b, 17, cfg).item() > 0.0
    t_idx = np.array([999, 999])
    assert spatial_loss_batch(Tensor(a), b, t_idx, cfg).item() == 0.0


def test_spatial_loss_l1_term_oracle():
    # oracle: w(t) * (mean |a - b| + mean over levels of the feature MSE)
    rng = np.random.default_rng(2)
    cfg = LossConfig(lam=1.0, T=1000)
    a, b = rng.normal(size=(1, 8, 8)), rng.normal(size=(1, 8, 8))
    t = 300
    feats_a, feats_b = cfg.extractor(Tensor(a)), cfg.extractor(Tensor(b))
    perc = np.mean([np.mean((fa.data - fb.data) ** 2) for fa, fb in zip(feats_a, feats_b)])
    expected = math.cos(t * math.pi / 2000) * (np.abs(a - b).mean() + perc)
    assert spatial_loss(Tensor(a), b, t, cfg).item() == pytest.approx(expected, rel=1e-12)


def test_batch_spatial_loss_is_mean_of_per_sample_losses():
    rng = np.random.default_rng(3)
    cfg = LossConfig(lam=1.0, T=1000)
    a, b = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    t_idx = np.array([5, 400, 900])
    per = [spatial_loss(Tensor(a[i:i + 1]), b[i:i + 1], float(t_idx[i] + 1), cfg).item() for i in range(3)]
    assert spatial_loss_batch(Tensor(a), b, t_idx, cfg).item() == pytest.approx(np.mean(per), rel=1e-12)


def test_total_loss_reduces_to_latent_loss_at_lambda_zero():
    rng = np.random.default_rng(4)
    sched = make_schedule(100)
    x0 = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(1,))

    def denoise(z, t):
        return T.mul(Tensor(z), Tensor(w))

    cfg0 = LossConfig(lam=0.0, T=100)
    terms = total_loss(x0, denoise, cfg0, sched, np.random.default_rng(9))
    # replay the same draws to build the oracle
    r = np.random.default_rng(9)
    t = r.integers(0, 100, size=2)
    eps = r.standard_normal(x0.shape)
    z = q_sample(x0, t, eps, sched)
    assert terms.total.item() == pytest.approx(np.mean((z * w - eps) ** 2), rel=1e-12)
    assert terms.spatial == 0.0
    cfg1 = LossConfig(lam=0.3, T=100)
    t1 = total_loss(x0, denoise, cfg1, sched, np.random.default_rng(9))
    assert t1.latent == pytest.approx(terms.latent, rel=1e-12)
    assert t1.total.item() == pytest.approx(t1.latent + 0.3 * t1.spatial, rel=1e-12)


def test_latent_loss_mask_restricts_average():
    pred = Tensor(np.array([[1.0, 3.0]]))
    assert latent_loss(np.zeros((1, 2)), pred, np.array([[1.0, 0.0]])).item() == 1.0


def test_perceptual_extractor_shapes_and_determinism():
    a = PerceptualExtractor(seed=7)
    b = PerceptualExtractor(seed=7)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 16, 16)))
    fa, fb = a(x), b(x)
    assert [f.shape for f in fa] == [(2, 8, 8, 8), (2, 4, 4, 16), (2, 2, 2, 32)]
    assert all(np.array_equal(p.data, q.data) for p, q in zip(fa, fb))


# -- DDIM ------------------------------------------------------------------

def test_ddim_timesteps():
    ts = ddim_timesteps(1000, 150)
    assert len(ts) == 150 and ts[0] == 0 and ts[-1] == 999
    assert np.all(np.diff(ts) > 0)
    with pytest.raises(ContractError):
        ddim_timesteps(10, 11)


@pytest.mark.parametrize("steps", [10, 50, 150])
def test_planted_noise_reconstruction(steps):
    # [DERIVED] oracle denoiser returns the exact noise of a known x0; DDIM must land on x0
    sched = make_schedule(1000)
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, (3, 4, 4))
    eps = rng.normal(size=x0.shape)
    x_T = q_sample(x0, 999, eps, sched)

    def oracle(x, t):
        ab = sched.alpha_bars[t[0]]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    out = ddim_sample(oracle, x0.shape, sched, steps, x_T=x_T, dtype=np.float64)
    assert np.abs(out - x0).max() < 1e-6


def test_sampling_is_bit_deterministic_and_seed_sensitive():
    sched = make_schedule(1000)

    def den(x, t):
        return 0.3 * x + 0.01 * t[:, None, None]

    a = ddim_sample(den, (2, 4, 4), sched, 150, eta=0.5, seed=3)
    b = ddim_sample(den, (2, 4, 4), sched, 150, eta=0.5, seed=3)
    c = ddim_sample(den, (2, 4, 4), sched, 150, eta=0.5, seed=4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_clip_bounds_the_estimate():
    sched = make_schedule(100)
    out = ddim_sample(lambda x, t: -5.0 * np.ones_like(x), (1, 4, 4), sched, 10, clip=1.0, dtype=np.float64)
    assert np.abs(out).max() <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 1000), st.integers(1, 200))
def test_timestep_subsequence_properties(T_total, steps):
    if steps > T_total:
        with pytest.raises(ContractError):
            ddim_timesteps(T_total, steps)
        return
    ts = ddim_timesteps(T_total, steps)
    assert ts[-1] == T_total - 1
    assert steps == 1 or ts[0] == 0
    assert len(set(ts.tolist())) == len(ts) <= steps
