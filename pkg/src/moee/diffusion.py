"""Noise schedule, forward noising, the two training losses and the DDIM sampler.

Timesteps are integer indices ``k = 0 .. T-1``; index ``k`` corresponds to
the 1-based diffusion time ``t = k + 1`` that the loss weighting uses.
Images live directly in the diffusion space (no autoencoder), scaled to
[-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

BETA_MIN = 0.05
BETA_MAX = 20.0


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def rate(self, u):
        """Continuous-time rate before discretisation, ``u`` in [0, 1]."""
        return continuous_beta(u, self.beta_min, self.beta_max)


def continuous_beta(u, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX):
    """Quadratic rate: linear in sqrt(beta), squared."""
    u = np.asarray(u, float)
    return (math.sqrt(beta_min) + u * (math.sqrt(beta_max) - math.sqrt(beta_min))) ** 2


def make_schedule(T: int, beta_min: float = BETA_MIN, beta_max: float = BETA_MAX) -> DiffusionSchedule:
    """Per-step ``beta_k = rate(k / (T - 1)) / T``; ``alpha_bar`` is the running product of ``1 - beta``."""
    if T < 2:
        raise ContractError("schedule needs T >= 2")
    if not 0 < beta_min < beta_max:
        raise ContractError("need 0 < beta_min < beta_max")
    betas = continuous_beta(np.arange(T) / (T - 1), beta_min, beta_max) / T
    if betas.max() >= 1.0:
        raise ContractError(f"T={T} too small: a per-step beta reaches {betas.max():.3f}")
    alphas = 1.0 - betas
    return DiffusionSchedule(T, beta_min, beta_max, betas, alphas, np.cumprod(alphas))


def _check_t(t, sched: DiffusionSchedule) -> np.ndarray:
    t = np.asarray(t)
    if t.dtype.kind not in "iu" or (t < 0).any() or (t >= sched.T).any():
        raise ContractError(f"timestep index must be an integer in [0, {sched.T})")
    return t


def _per_sample(v: np.ndarray, ndim: int, dtype) -> np.ndarray:
    return np.asarray(v, dtype=dtype).reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one index per sample."""
    if eps.shape != x0.shape:
        raise DimensionError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t = _check_t(t, sched)
    ab = sched.alpha_bars[t]
    if t.ndim:
        ab = _per_sample(ab, x0.ndim, x0.dtype)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def predict_x0(z_t, eps_pred, t, sched: DiffusionSchedule):
    """Invert the forward process given a noise estimate. Works on arrays or tensors."""
    t = _check_t(t, sched)
    ab = sched.alpha_bars[t]
    if isinstance(eps_pred, Tensor):
        ndim = eps_pred.ndim
        dtype = eps_pred.dtype
        a = _per_sample(np.sqrt(1.0 - ab), ndim, dtype) if t.ndim else np.sqrt(1.0 - ab).astype(dtype)
        c = _per_sample(1.0 / np.sqrt(ab), ndim, dtype) if t.ndim else (1.0 / np.sqrt(ab)).astype(dtype)
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype))
        return T.mul(T.sub(z, T.mul(eps_pred, a)), c)
    z_t = np.asarray(z_t)
    if t.ndim:
        ab = _per_sample(ab, z_t.ndim, z_t.dtype)
    return (z_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


# -- losses ----------------------------------------------------------------

def loss_weight(t, T_total: int):
    """``cos(t * pi / (2 T))`` for 1-based time ``t`` in [0, T]; exactly 0 at ``t = T``."""
    t = np.asarray(t, float)
    return np.where(t >= T_total, 0.0, np.cos(t * math.pi / (2 * T_total)))


def latent_loss(eps: np.ndarray | Tensor, eps_pred: Tensor, weight: np.ndarray | None = None) -> Tensor:
    return T.mse_loss(eps_pred, eps, weight)


class PerceptualExtractor:
    """Frozen three-level feature pyramid: 2x2 patch mixing + tanh, halving resolution each level.

    Parameters are seeded and never trained; channels go 1 -> 8 -> 16 -> 32.
    """

    def __init__(self, seed: int = 7, channels=(8, 16, 32), dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c_out in channels:
            fan_in = 4 * c_in
            self.weights.append(Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, c_out)).astype(dtype)))
            c_in = c_out
        self.channels = tuple(channels)

    def astype(self, dtype) -> "PerceptualExtractor":
        for w in self.weights:
            w.data = w.data.astype(dtype)
        return self

    def __call__(self, images: Tensor) -> list[Tensor]:
        """``images`` (b, H, W) -> one feature map (b, H/2^k, W/2^k, c_k) per level."""
        if images.ndim != 3:
            raise DimensionError(f"expected (b, H, W) images, got {images.shape}")
        b, h, w = images.shape
        x = T.reshape(images, (b, h, w, 1))
        feats = []
        for wt in self.weights:
            b, h, w, c = x.shape
            if h % 2 or w % 2:
                raise DimensionError(f"feature map {h}x{w} is not divisible by 2")
            x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
            x = T.transpose(x, (0, 1, 3, 2, 4, 5))
            x = T.reshape(x, (b, h // 2, w // 2, 4 * c))
            x = T.tanh(T.matmul(x, wt))
            feats.append(x)
        return feats


def perceptual_distance(extractor: PerceptualExtractor, a: Tensor, b) -> Tensor:
    """Mean over levels of the feature MSE."""
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, a.dtype))
    fa, fb = extractor(a), extractor(b)
    total = None
    for x, y in zip(fa, fb):
        term = T.mse_loss(x, y)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(fa))


@dataclass
class LossConfig:
    lam: float = 0.1
    T: int = 1000
    extractor: PerceptualExtractor | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.extractor is None:
            self.extractor = PerceptualExtractor()

    def w(self, t):
        return loss_weight(t, self.T)


def spatial_loss(i_pred: Tensor, i_gt, t: float, cfg: LossConfig, pixel_weight: np.ndarray | None = None) -> Tensor:
    """``w(t) * (L1(I_p, I_gt) + perceptual_mse(I_p, I_gt))`` with ``t`` the 1-based time.

    ``pixel_weight`` (0/1) restricts the L1 average and is also applied to
    both images before feature extraction.
    """
    i_gt = i_gt if isinstance(i_gt, Tensor) else Tensor(np.asarray(i_gt, i_pred.dtype))
    wt = float(cfg.w(t))
    if pixel_weight is not None:
        m = Tensor(np.broadcast_to(pixel_weight, i_pred.shape).astype(i_pred.dtype))
        l1 = T.l1_loss(i_pred, i_gt, pixel_weight)
        perc = perceptual_distance(cfg.extractor, T.mul(i_pred, m), T.mul(i_gt, m))
    else:
        l1 = T.l1_loss(i_pred, i_gt)
        perc = perceptual_distance(cfg.extractor, i_pred, i_gt)
    return T.scale(T.add(l1, perc), wt)


def spatial_loss_batch(i_pred: Tensor, i_gt: np.ndarray, t_idx: np.ndarray, cfg: LossConfig,
                       pixel_weight: np.ndarray | None = None) -> Tensor:
    """Per-sample spatial losses (each with its own ``w(t)``) averaged over the batch."""
    b = i_pred.shape[0]
    wt = cfg.w(np.asarray(t_idx) + 1).astype(i_pred.dtype)
    wt_img = wt.reshape((b,) + (1,) * (i_pred.ndim - 1))
    gt = Tensor(np.asarray(i_gt, i_pred.dtype))
    diff = T.abs(T.sub(i_pred, gt))
    if pixel_weight is None:
        pw = np.ones(i_pred.shape, i_pred.dtype)
    else:
        pw = np.broadcast_to(pixel_weight, i_pred.shape).astype(i_pred.dtype)
    per_pixel = pw / np.maximum(pw.reshape(b, -1).sum(axis=1), 1.0).reshape(wt_img.shape)
    l1 = T.scale(T.sum(T.mul(diff, Tensor(per_pixel * wt_img))), 1.0 / b)
    m = Tensor(pw)
    fa = cfg.extractor(T.mul(i_pred, m))
    fb = cfg.extractor(T.mul(gt, m))
    perc = None
    for x, y in zip(fa, fb):
        d = T.sub(x, y)
        per_elem = x.size // b
        wmap = (wt / per_elem / len(fa)).reshape((b,) + (1,) * (x.ndim - 1)).astype(x.dtype)
        term = T.sum(T.mul(T.mul(d, d), Tensor(np.broadcast_to(wmap, x.shape).copy())))
        perc = term if perc is None else T.add(perc, term)
    return T.add(l1, T.scale(perc, 1.0 / b))


@dataclass
class LossTerms:
    total: Tensor
    latent: float
    spatial: float


def total_loss(x0: np.ndarray, denoise: Callable[[np.ndarray, np.ndarray], Tensor], cfg: LossConfig,
               sched: DiffusionSchedule, rng: np.random.Generator,
               pixel_weight: np.ndarray | None = None) -> LossTerms:
    """``L_latent + lambda * L_spatial`` for one batch.

    Draws ``t`` uniformly from the ``T`` steps and a fresh Gaussian ``eps``
    from ``rng``. ``denoise(z_t, t)`` returns the noise estimate.
    """
    b = x0.shape[0]
    t = rng.integers(0, sched.T, size=b)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    z_t = q_sample(x0, t, eps, sched)
    eps_pred = denoise(z_t, t)
    l_lat = latent_loss(eps, eps_pred, pixel_weight)
    if cfg.lam == 0:
        return LossTerms(l_lat, l_lat.item(), 0.0)
    i_p = predict_x0(z_t, eps_pred, t, sched)
    l_sp = spatial_loss_batch(i_p, x0, t, cfg, pixel_weight)
    return LossTerms(T.add(l_lat, T.scale(l_sp, cfg.lam)), l_lat.item(), l_sp.item())


# -- sampling --------------------------------------------------------------

def ddim_timesteps(T_total: int, steps: int) -> np.ndarray:
    if steps > T_total:
        raise ContractError(f"steps ({steps}) exceeds T ({T_total})")
    if steps < 1:
        raise ContractError("need at least one sampling step")
    if steps == 1:
        return np.array([T_total - 1], np.int64)
    return np.unique(np.round(np.linspace(0, T_total - 1, steps)).astype(np.int64))


def ddim_sample(denoise: Callable[[np.ndarray, np.ndarray], np.ndarray], shape, sched: DiffusionSchedule,
                steps: int, eta: float = 0.0, seed: int = 0, clip: float | None = None,
                x_T: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
    """DDIM from pure noise to an ``x0`` estimate over evenly spaced timesteps.

    ``denoise(x_t, t)`` takes the batch and an int array of per-sample indices
    and returns the noise estimate as an array. ``eta = 0`` is deterministic
    given ``x_T``; ``eta > 0`` draws extra noise from the same seeded stream.
    """
    rng = np.random.default_rng(seed)
    ts = ddim_timesteps(sched.T, steps)[::-1]
    x = rng.standard_normal(shape).astype(dtype) if x_T is None else np.asarray(x_T, dtype).copy()
    b = shape[0]
    x0 = x
    for i, t in enumerate(ts):
        ab = sched.alpha_bars[t]
        ab_prev = sched.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = np.asarray(denoise(x, np.full(b, t, dtype=np.int64)), dtype)
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
            eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        if i + 1 == len(ts):
            break
        sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        dir_coef = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
        x = math.sqrt(ab_prev) * x0 + dir_coef * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(shape).astype(dtype)
        x = x.astype(dtype)
    return x0.astype(dtype)
