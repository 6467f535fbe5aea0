"""Finite-difference checks over every parameterised block at tiny widths.

Each block is rebuilt per seed in float64 with every parameter redrawn at
random (zero-initialised output projections would make the upstream
gradients trivially zero), reduced to a scalar through a fixed random
projection, and compared against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionParams, CrossAttnBlock, cross_attention
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import LossConfig, PerceptualExtractor, latent_loss, spatial_loss, spatial_loss_batch
from .emotion_latents import EmotionToLatents, LatentConfig, raw_dim
from .gradcheck import check_gradients
from .mixture import ExpertSet, Frozen, GlobalGate, Hard, LocalGate, Soft, global_weights, local_scores, moee_forward
from .nn import Module
from .tensor import Tensor


@dataclass
class BlockReport:
    block: str
    seeds: int
    max_rel_error: float
    coords: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def _randomise(module: Module, rng: np.random.Generator, scale: float = 0.5) -> dict[str, Tensor]:
    params = dict(module.named_parameters())
    for p in params.values():
        p.data = rng.normal(0, scale, p.shape)
        p.requires_grad = True
    return params


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _project(out: Tensor, r: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(r)))


def _attention(rng):
    p = AttentionParams(rng, 5, 4, 3)
    params = _randomise(p, rng)
    z, c = _leaf(rng, (2, 3, 5)), _leaf(rng, (2, 4, 4))
    r = rng.normal(size=(2, 3, 5))
    return (lambda: _project(cross_attention(z, c, p), r)), {**params, "z": z, "c": c}


def _cross_attn_block(rng):
    blk = CrossAttnBlock(rng, 6, 4, 5, zero_out=False)
    params = _randomise(blk, rng)
    h, c = _leaf(rng, (2, 3, 6)), _leaf(rng, (2, 4, 4))
    r = rng.normal(size=(2, 3, 6))
    return (lambda: _project(blk(h, c), r)), {**params, "hidden": h, "c": c}


def _local_gate(rng):
    g = LocalGate(rng, 6, 4, bias=True)
    params = _randomise(g, rng)
    x = _leaf(rng, (2, 5, 6))
    r = rng.normal(size=(2, 5, 4))
    return (lambda: _project(local_scores(x, g), r)), {**params, "x": x}


def _global_gate(rng):
    g = GlobalGate(rng, 6, 4, bias=True)
    params = _randomise(g, rng)
    x = _leaf(rng, (3, 5, 6))
    r = rng.normal(size=(3, 4))
    return (lambda: _project(global_weights(x, g), r)), {**params, "x": x}


def _experts(rng):
    d, e = 6, 3
    ex, lg, gg = ExpertSet(rng, d, 4, e, 5), LocalGate(rng, d, e), GlobalGate(rng, d, e)
    params = {}
    for name, m in (("experts", ex), ("local", lg), ("global", gg)):
        params.update({f"{name}.{k}": p for k, p in _randomise(m, rng).items()})
    x, c = _leaf(rng, (2, 4, d)), _leaf(rng, (2, 3, 4))
    r = rng.normal(size=(2, 4, d))
    w = rng.dirichlet(np.ones(e), size=2)

    def loss():
        soft = _project(moee_forward(x, c, ex, lg, gg, Soft()), r)
        hard = _project(moee_forward(x, c, ex, lg, gg, Hard(1)), r)
        frozen = _project(moee_forward(x, c, ex, lg, gg, Frozen(w)), r)
        return T.add(T.add(soft, hard), frozen)

    return loss, {**params, "x": x, "c": c}


def _emotion_to_latents(rng):
    cfg = LatentConfig(t_emotion=3, c_emotion=4, c_bank=5, bank_size=6, d_feat=4, label_hidden=5)
    e2l = EmotionToLatents(rng, cfg)
    params = _randomise(e2l, rng)
    label = rng.dirichlet(np.ones(6), size=2)
    text = rng.poisson(0.5, (2, raw_dim("text"))).astype(float)
    audio = rng.normal(size=(2, raw_dim("audio")))
    r = rng.normal(size=(3, 2, 3, 4))

    def loss():
        total = None
        for k, (m, raw) in enumerate((("label", label), ("text", text), ("audio", audio))):
            term = _project(e2l(m, raw), r[k])
            total = term if total is None else T.add(total, term)
        return total

    return loss, params


def _denoiser(rng):
    cfg = DenoiserConfig(image_size=8, patch=4, d_model=8, d_attn=6, mlp_hidden=8, n_blocks=2,
                         cond_after=(1, 2), n_experts=3, c_emotion=5, d_time=4)
    net = Denoiser(rng, cfg, dtype=np.float64)
    params = _randomise(net, rng, 0.4)
    z = rng.normal(size=(2, 8, 8))
    t = np.array([3, 700])
    ident = rng.uniform(0.3, 0.7, (2, 4))
    lat = _leaf(rng, (2, 3, 5))
    r = rng.normal(size=(2, 8, 8))

    def loss():
        a = _project(net(z, t, ident, lat, Soft()), r)
        b = _project(net(z, t, ident, lat, Soft(), conditioning="plain"), r)
        return T.add(a, b)

    return loss, {**params, "latent": lat}


def _latent_loss(rng):
    pred = _leaf(rng, (3, 4, 4))
    eps = rng.normal(size=(3, 4, 4))
    w = (rng.random((3, 4, 4)) > 0.3).astype(float)
    return (lambda: T.add(latent_loss(eps, pred), latent_loss(eps, pred, w))), {"eps_pred": pred}


def _spatial_loss(rng):
    cfg = LossConfig(lam=0.1, T=1000, extractor=PerceptualExtractor(seed=int(rng.integers(1 << 30))))
    pred = _leaf(rng, (2, 8, 8))
    gt = rng.normal(size=(2, 8, 8))
    w = np.ones((2, 8, 8))
    w[0, 5:7, 2:6] = 0.0
    t_idx = rng.integers(0, 999, 2)

    def loss():
        one = spatial_loss(pred, gt, float(t_idx[0] + 1), cfg)
        batch = spatial_loss_batch(pred, gt, t_idx, cfg, w)
        return T.add(one, batch)

    return loss, {"i_pred": pred}


BLOCKS: dict[str, Callable] = {
    "attention": _attention,
    "cross_attn_block": _cross_attn_block,
    "local_gate": _local_gate,
    "global_gate": _global_gate,
    "experts": _experts,
    "emotion_to_latents": _emotion_to_latents,
    "denoiser": _denoiser,
    "latent_loss": _latent_loss,
    "spatial_loss": _spatial_loss,
}
# per-tensor coordinate budget; the small blocks are checked exhaustively
_COORDS = {"denoiser": 4, "emotion_to_latents": 8, "experts": 10}


def grad_check(scope: str | list[str] = "all", seeds: int = 10, eps: float = 1e-5) -> list[BlockReport]:
    """Max relative error per block over ``seeds`` seeds."""
    names = list(BLOCKS) if scope == "all" else ([scope] if isinstance(scope, str) else list(scope))
    out = []
    for name in names:
        build = BLOCKS[name]
        worst, coords = 0.0, 0
        t0 = time.perf_counter()
        for seed in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
            loss, params = build(rng)
            res = check_gradients(loss, params, eps=eps, max_coords=_COORDS.get(name), rng=rng)
            worst = max(worst, max(r.max_rel_error for r in res))
            coords += sum(r.checked for r in res)
        out.append(BlockReport(name, seeds, worst, coords, time.perf_counter() - t0))
    return out
