"""Patch-token noise predictor with interleaved emotion conditioning.

Layout: patch embedding + learned positions + sinusoidal time embedding,
then ``n_blocks`` trunk blocks (self-attention, identity cross-attention,
MLP; all pre-norm residual). After the trunk blocks listed in
``cond_after`` the emotion latent is injected, either through a mixture of
emotion experts or, for the ablation, a single plain cross-attention block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, CrossAttnBlock, cross_attention
from .mixture import ExpertSet, GlobalGate, LocalGate, RoutingMode, Soft, moee_forward
from .nn import MLP, LayerNorm, Linear, Module, param
from .tensor import DimensionError, Tensor


@dataclass
class DenoiserConfig:
    image_size: int = 16
    patch: int = 4
    d_model: int = 64
    d_attn: int = 64
    mlp_hidden: int = 128
    n_blocks: int = 4
    cond_after: tuple[int, ...] = (2, 4)
    n_experts: int = 6
    c_emotion: int = 64
    d_time: int = 32
    identity_dims: int = 4
    conditioning: str = "moee"   # "moee" | "plain" | "none"

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cond_after"] = list(self.cond_after)
        return d


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, float)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def patchify(x: Tensor, p: int) -> Tensor:
    """(b, H, W) -> (b, (H/p)(W/p), p*p), row-major over patches."""
    b, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch {p}")
    x = T.reshape(x, (b, h // p, p, w // p, p))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, (h // p) * (w // p), p * p))


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    b = tokens.shape[0]
    x = T.reshape(tokens, (b, h // p, w // p, p, p))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, h, w))


class TrunkBlock(Module):
    def __init__(self, rng, cfg: DenoiserConfig, dtype):
        d = cfg.d_model
        self.norm_self = LayerNorm(d, dtype=dtype)
        self.self_attn = AttentionParams(rng, d, d, cfg.d_attn, dtype=dtype)
        self.identity = CrossAttnBlock(rng, d, d, cfg.d_attn, zero_out=False, dtype=dtype)
        self.norm_mlp = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(rng, d, cfg.mlp_hidden, d, activation="silu", dtype=dtype)

    def __call__(self, h: Tensor, id_tokens: Tensor) -> Tensor:
        n = self.norm_self(h)
        h = T.add(h, cross_attention(n, n, self.self_attn))
        h = self.identity(h, id_tokens)
        return T.add(h, self.mlp(self.norm_mlp(h)))


class MoEESlot(Module):
    """One conditioning location: experts plus their local and global gates."""

    def __init__(self, rng, cfg: DenoiserConfig, dtype):
        self.experts = ExpertSet(rng, cfg.d_model, cfg.c_emotion, cfg.n_experts, cfg.d_attn, dtype=dtype)
        self.local_gate = LocalGate(rng, cfg.d_model, cfg.n_experts, dtype=dtype)
        self.global_gate = GlobalGate(rng, cfg.d_model, cfg.n_experts, dtype=dtype)

    def __call__(self, h, latent, mode, record=None):
        out = moee_forward(h, latent, self.experts, self.local_gate, self.global_gate, mode,
                           return_gates=record is not None)
        if record is not None:
            record.append(out)
            return out.hidden
        return out


class Denoiser(Module):
    def __init__(self, rng: np.random.Generator, cfg: DenoiserConfig | None = None, dtype=np.float32):
        cfg = cfg or DenoiserConfig()
        self._cfg = cfg
        d = cfg.d_model
        p2 = cfg.patch * cfg.patch
        self.patch_embed = Linear(rng, p2, d, dtype=dtype)
        self.pos = param((0.02 * rng.standard_normal((cfg.n_tokens, d))).astype(dtype))
        self.time_mlp = MLP(rng, cfg.d_time, d, d, activation="silu", dtype=dtype)
        self.id_weight = param((rng.standard_normal((cfg.identity_dims, d))).astype(dtype))
        self.id_bias = param((rng.standard_normal((cfg.identity_dims, d))).astype(dtype))
        self.blocks = [TrunkBlock(rng, cfg, dtype) for _ in range(cfg.n_blocks)]
        self.moee = {str(k): MoEESlot(rng, cfg, dtype) for k in cfg.cond_after}
        self.plain = {str(k): CrossAttnBlock(rng, d, cfg.c_emotion, cfg.d_attn, zero_out=True, dtype=dtype)
                      for k in cfg.cond_after}
        self.out_norm = LayerNorm(d, dtype=dtype)
        self.out = Linear(rng, d, p2, zero_init=True, dtype=dtype)

    @property
    def cfg(self) -> DenoiserConfig:
        return self._cfg

    def identity_tokens(self, identity: np.ndarray) -> Tensor:
        """(b, 4) identity parameters -> (b, 4, d): one token per parameter."""
        ident = np.asarray(identity, self.pos.dtype)
        centred = Tensor(((ident - 0.5) * 4.0)[:, :, None])
        return T.add(T.mul(centred, self.id_weight), self.id_bias)

    def __call__(self, z_t: np.ndarray | Tensor, t: np.ndarray, identity: np.ndarray,
                 latent: Tensor | None = None, mode: RoutingMode = Soft(), conditioning: str | None = None,
                 record: list | None = None) -> Tensor:
        cfg = self._cfg
        conditioning = conditioning or cfg.conditioning
        x = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, self.pos.dtype))
        b = x.shape[0]
        h = patchify(x, cfg.patch)
        h = T.add(self.patch_embed(h), self.pos)
        temb = Tensor(timestep_embedding(t, cfg.d_time).astype(self.pos.dtype))
        h = T.add(h, T.reshape(self.time_mlp(temb), (b, 1, cfg.d_model)))
        id_tokens = self.identity_tokens(identity)
        for k, blk in enumerate(self.blocks, start=1):
            h = blk(h, id_tokens)
            if k in cfg.cond_after and conditioning != "none" and latent is not None:
                if conditioning == "moee":
                    h = self.moee[str(k)](h, latent, mode, record)
                elif conditioning == "plain":
                    h = self.plain[str(k)](h, latent)
                else:
                    raise ValueError(f"unknown conditioning {conditioning!r}")
        tokens = self.out(self.out_norm(h))
        return unpatchify(tokens, cfg.patch, cfg.image_size, cfg.image_size)

    # -- parameter groups used by the staged training --------------------
    def trunk_parameters(self) -> dict[str, Tensor]:
        skip = ("moee.", "plain.")
        return {k: p for k, p in self.named_parameters() if not k.startswith(skip)}

    def expert_parameters(self, i: int) -> dict[str, Tensor]:
        out = {}
        for slot, m in self.moee.items():
            for k, p in m.experts[i].named_parameters():
                out[f"moee.{slot}.experts.experts.{i}.{k}"] = p
        return out

    def gate_parameters(self) -> dict[str, Tensor]:
        out = {}
        for slot, m in self.moee.items():
            for k, p in m.local_gate.named_parameters(prefix=f"moee.{slot}.local_gate."):
                out[k] = p
            for k, p in m.global_gate.named_parameters(prefix=f"moee.{slot}.global_gate."):
                out[k] = p
        return out

    def plain_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if k.startswith("plain.")}
