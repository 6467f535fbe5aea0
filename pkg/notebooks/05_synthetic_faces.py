"""
Parametric faces, inversion and masked noisy sampling
=====================================================

Faces have four identity and four emotion parameters. The renderer is
cheap enough that an image can be inverted back to its parameters.
"""

# %%
import numpy as np

from moee.dataset import DatasetConfig, SamplerConfig, build_dataset, sample_batch
from moee.faces import (ANCHORS, COMPOUND_PAIRS, EMOTION_PARAM_NAMES, FaceParams, anchor, compound, infer_params,
                        project_on_segment, render_face)

SHADES = " .:-=+*#%@"


def show(img):
    for row in img:
        print("".join(SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)] * 2 for v in row))


ident = (0.5, 0.5, 0.5, 0.5)

# %% [markdown]
# The anchors: one emotion-parameter vector per basic emotion.

# %%
print(" " * 10 + "  ".join(f"{n:>11s}" for n in EMOTION_PARAM_NAMES))
for name, v in ANCHORS.items():
    print(f"{name:10s}" + "  ".join(f"{x:11.2f}" for x in v))
for name in ("happy", "sad"):
    print(name)
    show(render_face(FaceParams(ident, tuple(ANCHORS[name])), 16, 16))

# %% [markdown]
# Inversion: a grid start followed by bounded Nelder-Mead.

# %%
truth = compound("sad", "surprised", 0.4)
img = render_face(FaceParams.from_arrays(ident, truth))
fit = infer_params(img, ident)
print("true  ", truth.round(3))
print("fitted", fit.emotion.round(3), " mse %.1e" % fit.mse)
for a, b in COMPOUND_PAIRS:
    c, r = project_on_segment(compound(a, b, 0.5), anchor(a), anchor(b))
    print(f"{a}+{b}: coefficient {c:.2f}, off-segment {r:.1e}")

# %% [markdown]
# Masked noisy sampling: part of each "happy" batch is drawn from other
# emotions or neutral faces, with the mouth zeroed.

# %%
ds = build_dataset(DatasetConfig(n_identities=4, samples_per_condition=1))
batch = sample_batch(ds, SamplerConfig(p_noise=0.3), "happy", 8, np.random.default_rng(4))
print("kinds  ", [str(k) for k in batch.kinds])
print("masked ", batch.mask_applied.astype(int).tolist())
j = int(np.argmax(batch.mask_applied))
show(batch.images[j])
