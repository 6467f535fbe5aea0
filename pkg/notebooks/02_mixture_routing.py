"""
Cross-attention experts and their routing
=========================================

Six cross-attention experts read an emotion latent. A per-token sigmoid
score scales each expert's input, a per-sample softmax mixes their outputs.
"""

# %%
import numpy as np

from moee.attention import AttentionParams, cross_attention
from moee.mixture import EMOTIONS, ExpertSet, Frozen, GlobalGate, Hard, LocalGate, Soft, moee_forward, uniform
from moee.tensor import Tensor

rng = np.random.default_rng(1)
b, n, m, d, dc = 2, 5, 8, 12, 10
x = Tensor(rng.normal(size=(b, n, d)))
latent = Tensor(rng.normal(size=(b, m, dc)))

# %% [markdown]
# Plain cross-attention: queries from the hidden tokens, keys and values
# from the latent. Attention rows sum to one.

# %%
p = AttentionParams(rng, d, dc, 16)
out, a = cross_attention(x, latent, p, return_weights=True)
print("output", out.shape, " attention rows sum to", a.data.sum(-1).round(12).ravel()[:4])

# %% [markdown]
# Expert output projections start at zero, so a fresh mixture passes its
# input through unchanged in every routing mode.

# %%
experts = ExpertSet(rng, d, dc, 6, 16)
lg, gg = LocalGate(rng, d, 6), GlobalGate(rng, d, 6)
for mode in (Soft(), Hard(3), uniform(6)):
    y = moee_forward(x, latent, experts, lg, gg, mode).data
    print(f"{type(mode).__name__:7s} max |y - x| = {np.abs(y - x.data).max():.1e}")

# %% [markdown]
# Give the experts some weight and inspect the gates.

# %%
for blk in experts.experts:
    blk.attn.w_o.data = rng.normal(0, 0.3, blk.attn.w_o.shape)
res = moee_forward(x, latent, experts, lg, gg, Soft(), return_gates=True)
print("global weights g (per sample):")
for row in res.g:
    print("  " + "  ".join(f"{e[:3]} {w:.2f}" for e, w in zip(EMOTIONS, row)))
print("local scores s: min %.3f max %.3f" % (res.s.min(), res.s.max()))

# %% [markdown]
# Hard routing is the soft mixture with a forced one-hot weight vector.

# %%
hard = moee_forward(x, latent, experts, lg, gg, Hard(4)).data
forced = moee_forward(x, latent, experts, lg, gg, Frozen(np.eye(6)[4])).data
print("Hard(4) vs forced one-hot:", np.abs(hard - forced).max())
