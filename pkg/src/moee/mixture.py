"""Mixture of emotion experts: local sigmoid scores, global softmax weights, residual mixture.

For hidden tokens ``X`` (b, n, d) and an emotion latent ``C``::

    s  = sigmoid(X @ phi)                     (b, n, e)   per-token, per-expert
    g  = softmax(mean_tokens(X) @ omega)      (b, e)      per-sample
    X' = X + sum_i g_i * E_i(X * s_i, C)

``E_i`` is the residual branch of expert ``i``'s cross-attention block. The
expert's LayerNorm is applied to ``X`` before the per-token scale ``s_i``;
LayerNorm is invariant to a positive per-token scale, so scaling first would
make the local scores vanish from the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .attention import CrossAttnBlock
from .nn import Module, glorot, param
from .tensor import ContractError, DimensionError, Tensor

EMOTIONS = ("angry", "disgusted", "fear", "happy", "sad", "surprised")


class LocalGate(Module):
    def __init__(self, rng: np.random.Generator, d: int, e: int, bias: bool = False,
                 zero_init: bool = False, dtype=np.float64):
        self.phi = param(np.zeros((d, e), dtype) if zero_init else glorot(rng, d, e, dtype))
        self.bias = param(np.zeros(e, dtype)) if bias else None


class GlobalGate(Module):
    def __init__(self, rng: np.random.Generator, d: int, e: int, bias: bool = False,
                 zero_init: bool = False, dtype=np.float64):
        self.omega = param(np.zeros((d, e), dtype) if zero_init else glorot(rng, d, e, dtype))
        self.bias = param(np.zeros(e, dtype)) if bias else None


class ExpertSet(Module):
    """``e`` cross-attention blocks; index ``i`` serves ``EMOTIONS[i]`` when ``e == 6``."""

    def __init__(self, rng: np.random.Generator, d: int, d_cond: int, e: int = 6,
                 d_attn: int | None = None, dtype=np.float64):
        self.experts = [CrossAttnBlock(rng, d, d_cond, d_attn, zero_out=True, dtype=dtype) for _ in range(e)]

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i: int) -> CrossAttnBlock:
        return self.experts[i]


# -- routing modes ---------------------------------------------------------

@dataclass(frozen=True)
class Soft:
    pass


@dataclass(frozen=True)
class Hard:
    index: int


@dataclass(frozen=True)
class Frozen:
    weights: tuple[float, ...] | np.ndarray

    def __hash__(self):
        return hash(tuple(np.asarray(self.weights).ravel().tolist()))


RoutingMode = Union[Soft, Hard, Frozen]


def uniform(e: int) -> Frozen:
    """Constant ``g = 1/e`` (the no-global-softmax ablation)."""
    return Frozen(np.full(e, 1.0 / e))


# -- gating ----------------------------------------------------------------

def local_scores(x: Tensor, gate: LocalGate) -> Tensor:
    if x.ndim != 3 or x.shape[-1] != gate.phi.shape[0]:
        raise DimensionError(f"local gate expects (b, n, {gate.phi.shape[0]}), got {x.shape}")
    logits = T.matmul(x, gate.phi)
    if gate.bias is not None:
        logits = logits + gate.bias
    return T.sigmoid(logits)


def global_weights(x: Tensor, gate: GlobalGate) -> Tensor:
    if x.ndim != 3 or x.shape[-1] != gate.omega.shape[0]:
        raise DimensionError(f"global gate expects (b, n, {gate.omega.shape[0]}), got {x.shape}")
    logits = T.matmul(T.mean_pool(x), gate.omega)
    if gate.bias is not None:
        logits = logits + gate.bias
    return T.softmax(logits, axis=-1)


def _frozen_weights(mode: Frozen, b: int, e: int, dtype) -> np.ndarray:
    w = np.asarray(mode.weights, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w, (b, w.shape[0]))
    if w.shape != (b, e):
        raise DimensionError(f"frozen gate weights of shape {w.shape}, expected ({b}, {e})")
    if (w < -1e-12).any() or np.abs(w.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ContractError("frozen gate weights must lie on the probability simplex")
    return w.astype(dtype)


@dataclass
class MoEEOutput:
    hidden: Tensor
    g: np.ndarray        # (b, e) weights actually used
    s: np.ndarray        # (b, n, e) local scores


def moee_forward(x: Tensor, emotion_latent: Tensor, experts: ExpertSet, lg: LocalGate,
                 gg: GlobalGate, mode: RoutingMode = Soft(), return_gates: bool = False):
    """Residual mixture of expert cross-attention branches; see module docstring."""
    if x.ndim != 3:
        raise DimensionError(f"moee_forward expects (b, n, d), got {x.shape}")
    b, n, _ = x.shape
    e = len(experts)
    if lg.phi.shape[1] != e or gg.omega.shape[1] != e:
        raise DimensionError("gate width does not match the number of experts")
    s = local_scores(x, lg)

    if isinstance(mode, Hard):
        if not 0 <= mode.index < e:
            raise ContractError(f"hard routing index {mode.index} not in [0, {e})")
        i = mode.index
        out = T.add(x, experts[i].branch(x, emotion_latent, s[:, :, i:i + 1]))
        g = np.zeros((b, e), x.dtype)
        g[:, i] = 1.0
    else:
        if isinstance(mode, Soft):
            g_t = global_weights(x, gg)
        elif isinstance(mode, Frozen):
            g_t = Tensor(_frozen_weights(mode, b, e, x.dtype))
        else:
            raise ContractError(f"unknown routing mode {mode!r}")
        out = x
        # fixed summation order keeps results bit-reproducible
        for i in range(e):
            branch = experts[i].branch(x, emotion_latent, s[:, :, i:i + 1])
            out = T.add(out, T.mul(branch, T.reshape(g_t[:, i], (b, 1, 1))))
        g = g_t.data
    if return_gates:
        return MoEEOutput(out, np.array(g), np.array(s.data))
    return out


@dataclass(frozen=True)
class Ablation:
    """Conditioning layout for one experiment arm."""

    name: str = "full"
    use_moee: bool = True           # False: a single plain cross-attention block instead
    global_softmax: bool = True     # False: g fixed to 1/e
    masked_noisy_sampling: bool = True
    compound_data: bool = True
    p_noise: float | None = None    # overrides the configured substitution probability


def ablate(name: str) -> Ablation:
    """Named experiment arms: full, wo_moee, wo_gs, wo_mns, wo_compound, and
    ``mns_p<p>`` (the full model with expert training at substitution probability ``p``)."""
    if name.startswith("mns_p"):
        try:
            p = float(name[5:])
        except ValueError:
            p = -1.0
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"{name!r}: expected mns_p<probability in [0, 1]>")
        return Ablation(name, p_noise=p)
    table = {
        "full": Ablation("full"),
        "wo_moee": Ablation("wo_moee", use_moee=False),
        "wo_gs": Ablation("wo_gs", global_softmax=False),
        "wo_mns": Ablation("wo_mns", masked_noisy_sampling=False),
        "wo_compound": Ablation("wo_compound", compound_data=False),
    }
    if name not in table:
        raise ContractError(f"unknown ablation {name!r}; choose from {sorted(table)}")
    return table[name]
