"""Synthetic face dataset, its on-disk format, and the training-time samplers.

On disk a dataset is a directory with ``manifest.jsonl`` (one JSON object per
sample, keys sorted) and ``images/NNNNNN.pgm`` (binary P5, 8-bit, maxval 255).
Manifest records hold::

    index, identity_id, kind, weights[6], identity[4], emotion[4], mask[4], image

``kind`` is ``"neutral"``, an emotion name, or ``"a+b"`` for a compound;
``mask`` is the half-open mouth rectangle ``[row0, row1, col0, col1]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .faces import (COMPOUND_PAIRS, EMOTION_BOUNDS, IDENTITY_BOUNDS, emotion_from_weights, label_weights,
                    mouth_box, render_arrays)
from .mixture import EMOTIONS
from .tensor import ContractError

NEUTRAL_KIND = "neutral"


def compound_kind(a: str, b: str) -> str:
    return f"{a}+{b}"


@dataclass
class DatasetConfig:
    n_identities: int = 48
    image_size: int = 16
    samples_per_condition: int = 3
    emotion_jitter: float = 0.04
    compound_alpha: float = 0.5
    include_compounds: bool = True
    seed: int = 0


@dataclass
class FaceSample:
    image: np.ndarray
    identity: np.ndarray
    emotion: np.ndarray
    weights: np.ndarray
    kind: str
    mouth_mask: tuple[int, int, int, int]
    identity_id: int


@dataclass
class FaceDataset:
    """Column arrays; row ``k`` is one sample."""

    images: np.ndarray          # (N, H, W) in [0, 1]
    identity: np.ndarray        # (N, 4)
    emotion: np.ndarray         # (N, 4)
    weights: np.ndarray         # (N, 6), all zero for neutral
    kinds: np.ndarray           # (N,) str
    identity_ids: np.ndarray    # (N,) int
    masks: np.ndarray           # (N, 4) int
    config: DatasetConfig = field(default_factory=DatasetConfig)
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {}
        for k, (ident, kind) in enumerate(zip(self.identity_ids.tolist(), self.kinds.tolist())):
            self._index.setdefault((ident, kind), []).append(k)
        self.validate()

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, k: int) -> FaceSample:
        return FaceSample(self.images[k], self.identity[k], self.emotion[k], self.weights[k],
                          str(self.kinds[k]), tuple(int(v) for v in self.masks[k]), int(self.identity_ids[k]))

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.identity_ids)

    def identity_params(self, identity_id: int) -> np.ndarray:
        return self.identity[self.rows(identity_id, NEUTRAL_KIND)[0]]

    def rows(self, identity_id: int, kind: str) -> list[int]:
        return self._index.get((int(identity_id), kind), [])

    def rows_of_kind(self, kinds) -> np.ndarray:
        kinds = [kinds] if isinstance(kinds, str) else list(kinds)
        return np.flatnonzero(np.isin(self.kinds, kinds))

    def validate(self) -> None:
        """Every identity needs a neutral sample and all six basic emotions."""
        for ident in self.identities.tolist():
            for kind in (NEUTRAL_KIND,) + EMOTIONS:
                if not self.rows(ident, kind):
                    raise ContractError(f"identity {ident} has no {kind!r} sample")


def _conditions(cfg: DatasetConfig) -> list[tuple[str, np.ndarray]]:
    conds = [(NEUTRAL_KIND, np.zeros(len(EMOTIONS)))]
    conds += [(e, label_weights(e)) for e in EMOTIONS]
    if cfg.include_compounds:
        conds += [(compound_kind(a, b), label_weights((a, b), cfg.compound_alpha)) for a, b in COMPOUND_PAIRS]
    return conds


def build_dataset(cfg: DatasetConfig | None = None) -> FaceDataset:
    """Render ``samples_per_condition`` jittered faces per identity and condition.

    Identity parameters are uniform over their box; emotion parameters are the
    condition's anchor blend plus Gaussian jitter clipped to the box.
    """
    cfg = cfg or DatasetConfig()
    if cfg.n_identities < 1 or cfg.samples_per_condition < 1:
        raise ContractError("need at least one identity and one sample per condition")
    rng = np.random.default_rng(cfg.seed)
    conds = _conditions(cfg)
    idents = rng.uniform(IDENTITY_BOUNDS[:, 0], IDENTITY_BOUNDS[:, 1], (cfg.n_identities, 4))
    rows_ident, rows_emo, rows_w, rows_kind, rows_id = [], [], [], [], []
    for i in range(cfg.n_identities):
        for kind, w in conds:
            base = emotion_from_weights(w)
            for _ in range(cfg.samples_per_condition):
                emo = base + cfg.emotion_jitter * rng.standard_normal(4)
                rows_emo.append(np.clip(emo, EMOTION_BOUNDS[:, 0], EMOTION_BOUNDS[:, 1]))
                rows_ident.append(idents[i])
                rows_w.append(w)
                rows_kind.append(kind)
                rows_id.append(i)
    identity = np.array(rows_ident)
    emotion = np.array(rows_emo)
    h = cfg.image_size
    images = render_arrays(identity, emotion, h, h)
    masks = np.tile(np.array(mouth_box(h, h)), (len(images), 1))
    return FaceDataset(images, identity, emotion, np.array(rows_w), np.array(rows_kind),
                       np.array(rows_id), masks, cfg)


# -- persistence -----------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM of an image in [0, 1] (rounded to the nearest level)."""
    img = np.asarray(image, float)
    if img.ndim != 2:
        raise ContractError("PGM images must be 2-D")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ContractError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][: w * h], np.uint8)
    return data.reshape(h, w).astype(float) / 255.0


def save_dataset(ds: FaceDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for k in range(len(ds)):
        name = f"images/{k:06d}.pgm"
        write_pgm(out / name, ds.images[k])
        rec = {
            "index": k,
            "identity_id": int(ds.identity_ids[k]),
            "kind": str(ds.kinds[k]),
            "weights": [float(v) for v in ds.weights[k]],
            "identity": [float(v) for v in ds.identity[k]],
            "emotion": [float(v) for v in ds.emotion[k]],
            "mask": [int(v) for v in ds.masks[k]],
            "image": name,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "dataset_config.json").write_text(json.dumps(asdict(ds.config), sort_keys=True, indent=1) + "\n")
    return out


def load_dataset(in_dir, rerender: bool = True) -> FaceDataset:
    """Read a saved dataset. With ``rerender`` the float images are rebuilt from
    the stored parameters (exact); otherwise the quantised PGM pixels are used."""
    src = Path(in_dir)
    recs = [json.loads(line) for line in (src / "manifest.jsonl").read_text().splitlines() if line.strip()]
    cfg_path = src / "dataset_config.json"
    cfg = DatasetConfig(**json.loads(cfg_path.read_text())) if cfg_path.exists() else DatasetConfig()
    identity = np.array([r["identity"] for r in recs])
    emotion = np.array([r["emotion"] for r in recs])
    if rerender:
        h = cfg.image_size
        images = render_arrays(identity, emotion, h, h)
    else:
        images = np.stack([read_pgm(src / r["image"]) for r in recs])
    return FaceDataset(images, identity, emotion, np.array([r["weights"] for r in recs]),
                       np.array([r["kind"] for r in recs]), np.array([r["identity_id"] for r in recs]),
                       np.array([r["mask"] for r in recs]), cfg)


# -- masked noisy emotion sampling ------------------------------------------

@dataclass
class SamplerConfig:
    p_noise: float = 0.3
    neutral_fraction: float = 0.5
    # "target": a substituted sample keeps the target condition;
    # "substitute": it is conditioned on its own emotion instead
    condition: str = "target"
    # zero the loss inside the mask of substituted samples
    mask_loss: bool = True
    # share of identities with recordings of each basic emotion (1.0: all of them);
    # the subsets are disjoint-ish seeded draws, so a single emotion sees few people
    emotion_id_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_noise <= 1.0:
            raise ContractError(f"p_noise must lie in [0, 1], got {self.p_noise}")
        if not 0.0 <= self.neutral_fraction <= 1.0:
            raise ContractError(f"neutral_fraction must lie in [0, 1], got {self.neutral_fraction}")
        if not 0.0 < self.emotion_id_fraction <= 1.0:
            raise ContractError(f"emotion_id_fraction must lie in (0, 1], got {self.emotion_id_fraction}")
        if self.condition not in ("target", "substitute"):
            raise ContractError(f"unknown condition mode {self.condition!r}")


@dataclass
class Batch:
    images: np.ndarray          # (b, H, W) in [0, 1], mouth zeroed where masked
    identity: np.ndarray        # (b, 4)
    weights: np.ndarray         # (b, 6) conditioning label weights
    mask_applied: np.ndarray    # (b,) bool
    pixel_weight: np.ndarray    # (b, H, W) 0/1 loss weights
    rows: np.ndarray            # (b,) dataset rows drawn
    kinds: np.ndarray           # (b,) kind of the drawn sample


def apply_mouth_mask(image: np.ndarray, mask) -> np.ndarray:
    r0, r1, c0, c1 = (int(v) for v in mask)
    out = np.array(image, copy=True)
    out[..., r0:r1, c0:c1] = 0.0
    return out


def emotion_identities(ds: FaceDataset, fraction: float, seed: int = 0) -> dict[str, np.ndarray]:
    """Identities whose ``emotion`` recordings the expert sampler may draw.

    Each basic emotion gets ``ceil(fraction * n)`` identities from its own
    seeded permutation; neutral recordings exist for everyone.
    """
    idents = ds.identities
    k = max(1, int(np.ceil(fraction * len(idents))))
    out = {NEUTRAL_KIND: idents}
    for i, e in enumerate(EMOTIONS):
        perm = np.random.default_rng(np.random.SeedSequence([seed, 17, i])).permutation(idents)
        out[e] = idents if k == len(idents) else np.sort(perm[:k])
    return out


def sample_batch(ds: FaceDataset, cfg: SamplerConfig, target: str, batch_size: int,
                 rng: np.random.Generator) -> Batch:
    """Masked noisy sampling for one target emotion.

    Each element independently: with probability ``1 - p_noise`` a ``target``
    sample of a random identity conditioned on ``target``; otherwise a neutral
    (share ``neutral_fraction``) or other basic-emotion sample of a random
    identity with its mouth rectangle zeroed, still conditioned on ``target``
    (or on its own label when ``cfg.condition == "substitute"``).
    With ``emotion_id_fraction < 1`` each emotion is drawn only from its
    identity subset (see :func:`emotion_identities`).
    """
    if target not in EMOTIONS:
        raise ContractError(f"masked noisy sampling needs a basic emotion, got {target!r}")
    owners = emotion_identities(ds, cfg.emotion_id_fraction, cfg.seed)
    others = [e for e in EMOTIONS if e != target]
    target_w = label_weights(target)
    h, w = ds.images.shape[1:]
    images = np.empty((batch_size, h, w))
    ident = np.empty((batch_size, 4))
    weights = np.empty((batch_size, len(EMOTIONS)))
    applied = np.zeros(batch_size, bool)
    pix = np.ones((batch_size, h, w))
    rows = np.empty(batch_size, np.int64)
    for j in range(batch_size):
        noisy = rng.random() < cfg.p_noise
        if noisy:
            # a neutral face has no label encoding, so substitute-conditioning draws basic emotions only
            use_neutral = cfg.condition == "target" and rng.random() < cfg.neutral_fraction
            kind = NEUTRAL_KIND if use_neutral else others[rng.integers(len(others))]
        else:
            kind = target
        pool = owners[kind]
        person = int(pool[rng.integers(len(pool))])
        cand = ds.rows(person, kind)
        k = cand[rng.integers(len(cand))]
        rows[j] = k
        ident[j] = ds.identity[k]
        if noisy:
            images[j] = apply_mouth_mask(ds.images[k], ds.masks[k])
            applied[j] = True
            weights[j] = ds.weights[k] if cfg.condition == "substitute" else target_w
            if cfg.mask_loss:
                pix[j] = apply_mouth_mask(pix[j], ds.masks[k])
        else:
            images[j] = ds.images[k]
            weights[j] = target_w
    return Batch(images, ident, weights, applied, pix, rows, ds.kinds[rows])


def sample_rows(ds: FaceDataset, rows: np.ndarray, batch_size: int, rng: np.random.Generator) -> Batch:
    """Plain uniform draw from ``rows`` conditioned on each sample's own label."""
    k = rows[rng.integers(len(rows), size=batch_size)]
    return Batch(ds.images[k].copy(), ds.identity[k].copy(), ds.weights[k].copy(),
                 np.zeros(batch_size, bool), np.ones_like(ds.images[k]), k, ds.kinds[k])
