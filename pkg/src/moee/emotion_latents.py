"""Emotion-to-latents: label / text / audio conditions mapped to a fixed-shape token set.

Each modality is encoded to a feature vector (a trainable two-layer MLP for
labels, frozen seeded projections standing in for the pretrained text and
audio encoders), projected by a per-modality linear layer into
``t_emotion`` query tokens, and attends over a learnable embedding bank that
supplies keys and values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionParams, cross_attention
from .faces import ANCHORS, NEUTRAL
from .mixture import EMOTIONS
from .nn import MLP, Linear, Module, param
from .tensor import ContractError, DimensionError, Tensor

MODALITIES = ("label", "text", "audio")

# synthetic text vocabulary: four cue words per basic emotion, then filler words
KEYWORDS = {
    "angry": ("furious", "scowl", "glare", "rage"),
    "disgusted": ("repulsed", "sneer", "gross", "revolted"),
    "fear": ("afraid", "trembling", "panic", "scared"),
    "happy": ("joyful", "smile", "cheerful", "delighted"),
    "sad": ("tearful", "gloomy", "sorrow", "downcast"),
    "surprised": ("astonished", "gasp", "amazed", "startled"),
}
FILLER = ("person", "face", "talking", "looks", "slightly", "very", "video", "frame")
VOCAB = tuple(w for e in EMOTIONS for w in KEYWORDS[e]) + FILLER
AUDIO_NUISANCE = 12


@dataclass(frozen=True)
class EmotionCondition:
    """One condition: ``modality`` in {label, text, audio} plus its raw payload vector."""

    modality: str
    payload: tuple[float, ...]

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")
        v = np.asarray(self.payload, float)
        if not np.isfinite(v).all():
            raise ContractError("condition payload must be finite")
        if self.modality == "label":
            if v.shape != (len(EMOTIONS),):
                raise ContractError(f"label weights need {len(EMOTIONS)} entries, got {v.shape}")
            if (v < 0).any() or abs(v.sum() - 1.0) > 1e-6:
                raise ContractError("label weights must be nonnegative and sum to 1")

    @classmethod
    def label(cls, weights) -> "EmotionCondition":
        return cls("label", tuple(float(x) for x in weights))

    @classmethod
    def text(cls, vec) -> "EmotionCondition":
        return cls("text", tuple(float(x) for x in vec))

    @classmethod
    def audio(cls, vec) -> "EmotionCondition":
        return cls("audio", tuple(float(x) for x in vec))

    def vector(self) -> np.ndarray:
        return np.asarray(self.payload, float)

    def to_record(self) -> dict:
        return {"modality": self.modality, "payload": list(self.payload)}

    @classmethod
    def from_record(cls, rec: dict) -> "EmotionCondition":
        return cls(rec["modality"], tuple(float(x) for x in rec["payload"]))


# -- synthetic raw modality features --------------------------------------

def text_features(weights: np.ndarray, rng: np.random.Generator, n_words: int = 6) -> np.ndarray:
    """Bag-of-words counts: cue words drawn in proportion to ``weights`` plus filler words."""
    weights = np.asarray(weights, float)
    counts = np.zeros(len(VOCAB))
    n_cue = n_words - 2
    picks = rng.choice(len(EMOTIONS), size=n_cue, p=weights / weights.sum())
    for e in picks:
        word = rng.integers(4)
        counts[e * 4 + word] += 1
    for f in rng.integers(len(FILLER), size=2):
        counts[len(EMOTIONS) * 4 + f] += 1
    return counts


def audio_features(weights: np.ndarray, rng: np.random.Generator, noise: float = 0.15) -> np.ndarray:
    """Emotion-parameter anchor blend with jitter, followed by speech-like nuisance dimensions."""
    weights = np.asarray(weights, float)
    emo = NEUTRAL if weights.sum() == 0 else sum(w * ANCHORS[n] for w, n in zip(weights, EMOTIONS))
    return np.concatenate([emo + rng.normal(0, noise, 4), rng.normal(0, 1.0, AUDIO_NUISANCE)])


def raw_dim(modality: str) -> int:
    return {"label": len(EMOTIONS), "text": len(VOCAB), "audio": 4 + AUDIO_NUISANCE}[modality]


# -- parameters ------------------------------------------------------------

@dataclass
class LatentConfig:
    t_emotion: int = 8
    c_emotion: int = 64
    c_bank: int = 96
    bank_size: int = 64
    d_feat: int = 32
    label_hidden: int = 32
    d_attn: int | None = None

    @classmethod
    def full_scale(cls) -> "LatentConfig":
        return cls(t_emotion=8, c_emotion=512, c_bank=768, bank_size=64, d_feat=512, label_hidden=512)


class ModalityEncoders(Module):
    def __init__(self, rng: np.random.Generator, cfg: LatentConfig, stub_seed: int = 1234, dtype=np.float64):
        self.label_mlp = MLP(rng, len(EMOTIONS), cfg.label_hidden, cfg.d_feat, activation="tanh", dtype=dtype)
        stub = np.random.default_rng(stub_seed)
        # frozen: requires_grad stays False, so optimisers never see them
        self._text_stub = Tensor(stub.normal(0, 1 / np.sqrt(len(VOCAB)), (len(VOCAB), cfg.d_feat)).astype(dtype))
        self._audio_stub = Tensor(stub.normal(0, 1 / np.sqrt(raw_dim("audio")),
                                              (raw_dim("audio"), cfg.d_feat)).astype(dtype))

    @property
    def text_stub(self) -> Tensor:
        return self._text_stub

    @property
    def audio_stub(self) -> Tensor:
        return self._audio_stub

    def stub_state(self) -> dict[str, np.ndarray]:
        return {"text_stub": self._text_stub.data, "audio_stub": self._audio_stub.data}


class EmotionToLatents(Module):
    def __init__(self, rng: np.random.Generator, cfg: LatentConfig | None = None, dtype=np.float64):
        cfg = cfg or LatentConfig()
        if cfg.bank_size < cfg.t_emotion:
            raise ContractError("embedding bank must have at least t_emotion rows")
        self._cfg = cfg
        self.encoders = ModalityEncoders(rng, cfg, dtype=dtype)
        self.fc = {m: Linear(rng, cfg.d_feat, cfg.t_emotion * cfg.c_emotion, dtype=dtype) for m in MODALITIES}
        self.bank = param(rng.normal(0, 1.0, (cfg.bank_size, cfg.c_bank)).astype(dtype))
        self.attn = AttentionParams(rng, cfg.c_emotion, cfg.c_bank, cfg.d_attn or cfg.c_emotion,
                                    d_out=cfg.c_emotion, dtype=dtype)

    @property
    def cfg(self) -> LatentConfig:
        return self._cfg

    def __call__(self, modality: str, raw: np.ndarray | Tensor) -> Tensor:
        feat = encode(modality, raw, self.encoders)
        query = to_query(feat, self.fc[modality], self._cfg.t_emotion)
        return to_emotion_latent(query, self.bank, self.attn)

    def from_conditions(self, conds: list[EmotionCondition]) -> Tensor:
        """Latents for a batch of conditions that share a modality."""
        mods = {c.modality for c in conds}
        if len(mods) != 1:
            raise ContractError("a batch must use a single modality")
        raw = np.stack([c.vector() for c in conds]).astype(self.bank.dtype)
        return self(mods.pop(), raw)


def encode(modality: str, raw, enc: ModalityEncoders) -> Tensor:
    """Feature vector per sample, shape (b, d_feat)."""
    x = raw if isinstance(raw, Tensor) else Tensor(np.atleast_2d(np.asarray(raw)))
    if x.ndim != 2 or x.shape[1] != raw_dim(modality):
        raise DimensionError(f"{modality} input must be (b, {raw_dim(modality)}), got {x.shape}")
    if modality == "label":
        w = x.data
        if (w < 0).any() or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise ContractError("label weights must be nonnegative and sum to 1")
        return enc.label_mlp(x)
    stub = enc.text_stub if modality == "text" else enc.audio_stub
    return T.matmul(x, stub)


def to_query(feature: Tensor, fc: Linear, t_emotion: int) -> Tensor:
    """Project to ``t_emotion * c`` values and split into ``t_emotion`` distinct query tokens."""
    if feature.shape[-1] != fc.weight.shape[0]:
        raise DimensionError(f"feature width {feature.shape[-1]} != fc input {fc.weight.shape[0]}")
    flat = fc(feature)
    b = feature.shape[0]
    return T.reshape(flat, (b, t_emotion, flat.shape[-1] // t_emotion))


def to_emotion_latent(query: Tensor, bank: Tensor, p: AttentionParams) -> Tensor:
    """Queries attend over the bank (broadcast across the batch); output (b, t_emotion, c_emotion)."""
    cond = T.reshape(bank, (1,) + bank.shape)
    return cross_attention(query, cond, p)


# -- diagnostics -----------------------------------------------------------

def latent_separation(latents: np.ndarray, labels) -> float:
    """Mean pairwise centroid distance over mean distance of samples to their own centroid.

    Latents are flattened per sample. Zero intra-class spread returns ``inf``.
    """
    x = np.asarray(latents, float).reshape(len(latents), -1)
    labels = np.asarray(labels)
    classes = list(dict.fromkeys(labels.tolist()))
    if len(classes) < 2:
        raise ContractError("latent_separation needs at least two classes")
    cents, intra = [], []
    for c in classes:
        members = x[labels == c]
        if len(members) < 2:
            raise ContractError(f"class {c!r} needs at least two samples")
        mu = members.mean(axis=0)
        cents.append(mu)
        intra.extend(np.linalg.norm(members - mu, axis=1))
    cents = np.array(cents)
    inter = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(cents)) for j in range(i + 1, len(cents))]
    intra_mean = float(np.mean(intra))
    if intra_mean == 0.0:
        return float("inf")
    return float(np.mean(inter) / intra_mean)


# -- condition files -------------------------------------------------------

def write_conditions(path, conds: list[EmotionCondition]) -> None:
    """One JSON object per line: ``{"modality": ..., "payload": [...]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in conds:
            fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")


def read_conditions(path) -> list[EmotionCondition]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(EmotionCondition.from_record(json.loads(line)))
    return out
