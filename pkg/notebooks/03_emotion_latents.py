"""
Emotion conditions to a shared latent
=====================================

Labels, text and audio are encoded to a feature vector and mapped to a
fixed set of latent tokens by attending over a learned embedding bank.
"""

# %%
import numpy as np

from moee import tensor as T
from moee.emotion_latents import (EmotionCondition, EmotionToLatents, LatentConfig, audio_features,
                                  latent_separation, text_features)
from moee.faces import label_weights
from moee.mixture import EMOTIONS

rng = np.random.default_rng(2)
cfg = LatentConfig()
e2l = EmotionToLatents(rng, cfg)
print(cfg)

# %% [markdown]
# One condition per modality, all for "sad". Text and audio come from
# seeded stubs; every modality ends up with the same latent shape.
# A batch shares one modality.

# %%
w = label_weights("sad")
conds = [EmotionCondition.label(w),
         EmotionCondition.text(text_features(w, rng)),
         EmotionCondition.audio(audio_features(w, rng))]
with T.no_grad():
    for c in conds:
        print(f"{c.modality:6s} raw {c.vector().shape} -> latent {e2l.from_conditions([c]).shape}")

# %% [markdown]
# Compounds are label vectors with two nonzero weights.

# %%
print("sadly surprised:", {e: float(v) for e, v in zip(EMOTIONS, label_weights(("sad", "surprised")))})

# %% [markdown]
# Separation ratio (between-class over within-class spread) of the audio
# latents, before any training.

# %%
raw, labels = [], []
for i, e in enumerate(EMOTIONS):
    for _ in range(16):
        raw.append(audio_features(label_weights(e), rng))
        labels.append(i)
with T.no_grad():
    z = e2l("audio", np.array(raw)).data
print("audio latent separation at init: %.3f" % latent_separation(z, labels))
