"""Two-stage training, the ablation battery, and experiment persistence.

A run directory looks like::

    config.json                resolved configuration (every key, see CONFIG_DOCS)
    data/                      dataset manifest + PGM images
    stage1/{model.ckpt,metrics.csv}
    stage2a-<key>/{model.ckpt,metrics.csv}     expert training, shared between arms
    arms/<arm>/{model.ckpt,metrics.csv,grid.pgm}
    timings.json               wall-clock seconds per stage, merged across resumed runs
    report.json

Metrics CSVs have the columns ``step,loss_latent,loss_spatial,loss_total,g_entropy``
with floats written by ``repr`` so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .dataset import (Batch, DatasetConfig, FaceDataset, SamplerConfig, build_dataset, compound_kind,
                      sample_batch, sample_rows, save_dataset, write_pgm)
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import LossConfig, PerceptualExtractor, ddim_sample, make_schedule, total_loss
from .emotion_latents import (EmotionToLatents, LatentConfig, audio_features, latent_separation,
                              text_features)
from .faces import (ANCHORS, COMPOUND_PAIRS, InferConfig, anchor, infer_params, label_weights,
                    project_on_segment)
from .mixture import EMOTIONS, Ablation, Frozen, Hard, Soft, ablate, uniform
from .optim import OptimizerState, adamw_step
from .tensor import ContractError, NonFiniteError, Tensor

log = logging.getLogger("moee")

STAGES = ("stage1", "stage2_experts", "stage2_gating", "all")
METRIC_COLUMNS = ("step", "loss_latent", "loss_spatial", "loss_total", "g_entropy")
DEFAULT_ARMS = ("full", "wo_moee", "wo_gs", "wo_mns", "mns_p0.1")


class FrozenParameterError(ContractError):
    """A parameter outside the trainable set changed during a stage."""


# -- configuration ---------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    stage: str = "all"
    # data
    n_identities: int = 48
    samples_per_condition: int = 3
    emotion_jitter: float = 0.04
    image_size: int = 16
    # denoiser
    patch: int = 4
    d_model: int = 64
    d_attn: int = 64
    mlp_hidden: int = 128
    n_blocks: int = 4
    cond_after: tuple[int, ...] = (2, 4)
    n_experts: int = 6
    d_time: int = 32
    # emotion-to-latents
    t_emotion: int = 8
    c_emotion: int = 64
    c_bank: int = 96
    bank_size: int = 64
    d_feat: int = 32
    label_hidden: int = 32
    # schedule and loss
    T: int = 1000
    beta_min: float = 0.05
    beta_max: float = 20.0
    lam: float = 0.1
    # optimisation
    batch_size: int = 32
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    steps_stage1: int = 6000
    steps_expert: int = 2400
    expert_rounds: int = 4
    steps_gating: int = 600
    # masked noisy sampling
    p_noise: float = 0.3
    neutral_fraction: float = 0.5
    noisy_condition: str = "target"
    mask_loss: bool = True
    emotion_id_fraction: float = 1.0
    # what trains in stage 2
    e2l_train_experts: bool = True
    e2l_train_gating: bool = False
    label_mlp_train_gating: bool = False
    # evaluation
    ablations: tuple[str, ...] = DEFAULT_ARMS
    eval_per_condition: int = 64
    ddim_steps: int = 50
    ddim_eta: float = 1.0
    eval_routing: str = "label"
    eval_seed: int = 1234
    identity_eval_samples: int = 24
    infer_max_iter: int = 400
    infer_restarts: int = 1

    def __post_init__(self):
        self.cond_after = tuple(self.cond_after)
        self.ablations = tuple(self.ablations)
        if self.stage not in STAGES:
            raise ContractError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.eval_routing not in ("label", "soft"):
            raise ContractError(f"eval_routing must be 'label' or 'soft', got {self.eval_routing!r}")
        for name in self.ablations:
            ablate(name)
        if self.steps_expert % self.expert_rounds:
            raise ContractError("steps_expert must be a multiple of expert_rounds")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Values stated for the original training run, at the original latent widths."""
        base = dict(batch_size=4, lr_stage1=1e-5, lr_stage2=1e-5, steps_stage1=30000,
                    steps_expert=5000, expert_rounds=1, steps_gating=30000, ddim_steps=150, ddim_eta=0.0,
                    c_emotion=512, c_bank=768, d_feat=512, label_hidden=512, t_emotion=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cond_after"] = list(self.cond_after)
        d["ablations"] = list(self.ablations)
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def hash(self) -> str:
        """Digest of every key that affects results (``out_dir`` and ``stage`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("stage")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(n_identities=self.n_identities, image_size=self.image_size,
                             samples_per_condition=self.samples_per_condition,
                             emotion_jitter=self.emotion_jitter, seed=self.seed)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(image_size=self.image_size, patch=self.patch, d_model=self.d_model,
                              d_attn=self.d_attn, mlp_hidden=self.mlp_hidden, n_blocks=self.n_blocks,
                              cond_after=self.cond_after, n_experts=self.n_experts,
                              c_emotion=self.c_emotion, d_time=self.d_time)

    def latent_config(self) -> LatentConfig:
        return LatentConfig(t_emotion=self.t_emotion, c_emotion=self.c_emotion, c_bank=self.c_bank,
                            bank_size=self.bank_size, d_feat=self.d_feat, label_hidden=self.label_hidden)

    def sampler_config(self, mns: bool = True, p_noise: float | None = None) -> SamplerConfig:
        p = self.p_noise if p_noise is None else p_noise
        return SamplerConfig(p_noise=p if mns else 0.0, neutral_fraction=self.neutral_fraction,
                             condition=self.noisy_condition, mask_loss=self.mask_loss,
                             emotion_id_fraction=self.emotion_id_fraction, seed=self.seed)


CONFIG_DOCS = {
    "seed": "master seed; every random stream is derived from it",
    "out_dir": "run directory",
    "stage": "stage1 | stage2_experts | stage2_gating | all (used by `train`)",
    "n_identities": "synthetic identities in the dataset",
    "samples_per_condition": "jittered renders per identity and condition",
    "emotion_jitter": "std of the Gaussian jitter added to anchor parameters",
    "image_size": "square image side in pixels",
    "patch": "patch side; tokens = (image_size / patch)^2",
    "d_model": "token width of the denoiser",
    "d_attn": "attention width",
    "mlp_hidden": "hidden width of the trunk MLPs",
    "n_blocks": "trunk blocks",
    "cond_after": "trunk blocks (1-based) followed by an emotion-conditioning slot",
    "n_experts": "experts per slot (one per basic emotion)",
    "d_time": "sinusoidal timestep embedding width",
    "t_emotion": "emotion-latent tokens",
    "c_emotion": "emotion-latent channels",
    "c_bank": "embedding-bank channels",
    "bank_size": "embedding-bank rows",
    "d_feat": "modality feature width",
    "label_hidden": "hidden width of the label MLP",
    "T": "diffusion steps",
    "beta_min": "continuous-time rate at u = 0",
    "beta_max": "continuous-time rate at u = 1",
    "lam": "weight of the spatial loss",
    "batch_size": "training batch size",
    "lr_stage1": "AdamW learning rate, stage 1",
    "lr_stage2": "AdamW learning rate, stage 2 and the plain-conditioning arm",
    "weight_decay": "decoupled weight decay",
    "grad_clip": "global gradient-norm clip (0 disables)",
    "steps_stage1": "stage-1 steps",
    "steps_expert": "stage-2 steps per expert",
    "expert_rounds": "round-robin passes over the experts in stage 2 (steps split evenly)",
    "steps_gating": "gating steps",
    "p_noise": "probability of a substituted, mouth-masked sample",
    "neutral_fraction": "share of substitutions drawn from neutral faces",
    "noisy_condition": "target | substitute: condition of substituted samples",
    "mask_loss": "drop the loss inside the mouth mask of substituted samples",
    "emotion_id_fraction": "share of identities recorded in each basic emotion during expert training",
    "e2l_train_experts": "emotion-to-latents trains during expert training",
    "e2l_train_gating": "emotion-to-latents (all of it) trains during gating",
    "label_mlp_train_gating": "the label MLP alone trains during gating",
    "ablations": "arms to train and evaluate: full, wo_moee, wo_gs, wo_mns, wo_compound",
    "eval_per_condition": "generated samples per condition",
    "ddim_steps": "DDIM steps for evaluation",
    "ddim_eta": "DDIM eta for evaluation and `sample` (0: deterministic given the start noise)",
    "eval_routing": "label: global weights taken from the condition's label weights; soft: learned gate",
    "eval_seed": "seed for evaluation identities and sampling noise",
    "identity_eval_samples": "samples per arm refit with free identity for identity consistency",
    "infer_max_iter": "Nelder-Mead iterations per inversion run",
    "infer_restarts": "Nelder-Mead restarts per inversion",
}


# -- model bundle ----------------------------------------------------------

class Model:
    """Denoiser plus emotion-to-latents, addressed with ``den.`` / ``e2l.`` prefixes."""

    def __init__(self, cfg: TrainConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.den = Denoiser(rng, cfg.denoiser_config(), dtype=np.float32)
        self.e2l = EmotionToLatents(rng, cfg.latent_config(), dtype=np.float32)

    def named(self) -> dict[str, Tensor]:
        out = {f"den.{k}": p for k, p in self.den.named_parameters()}
        out.update({f"e2l.{k}": p for k, p in self.e2l.named_parameters()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named().items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        named = self.named()
        if set(named) != set(state):
            raise checkpoint.CheckpointError("checkpoint does not match the model layout")
        for k, p in named.items():
            p.data = np.array(state[k], dtype=p.dtype)

    def latent(self, weights: np.ndarray) -> Tensor:
        return self.e2l("label", np.asarray(weights, np.float32))

    def expert_params(self, i: int) -> dict[str, Tensor]:
        return {f"den.{k}": p for k, p in self.den.expert_parameters(i).items()}

    def gate_params(self) -> dict[str, Tensor]:
        return {f"den.{k}": p for k, p in self.den.gate_parameters().items()}

    def trunk_params(self) -> dict[str, Tensor]:
        return {f"den.{k}": p for k, p in self.den.trunk_parameters().items()}

    def plain_params(self) -> dict[str, Tensor]:
        return {f"den.{k}": p for k, p in self.den.plain_parameters().items()}

    def e2l_params(self, label_only: bool = False) -> dict[str, Tensor]:
        pre = "e2l.encoders.label_mlp." if label_only else "e2l."
        return {k: p for k, p in self.named().items() if k.startswith(pre)}


def checksums(params: dict[str, Tensor]) -> dict[str, str]:
    return {k: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest() for k, p in params.items()}


def assert_unchanged(before: dict[str, str], params: dict[str, Tensor], what: str) -> None:
    after = checksums({k: params[k] for k in before})
    changed = sorted(k for k in before if before[k] != after[k])
    if changed:
        raise FrozenParameterError(f"{what}: frozen parameters changed: {changed[:5]}")


def save_model(path, model: Model, meta: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model.state(), meta)


def load_model(path, cfg: TrainConfig | None = None) -> tuple[Model, dict]:
    tensors, meta = checkpoint.load(path)
    cfg = cfg or TrainConfig.from_dict(meta["config"])
    model = Model(cfg)
    model.load(tensors)
    return model, meta


# -- metrics log -----------------------------------------------------------

class MetricsLog:
    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, step: int, latent: float, spatial: float, total: float, g_entropy: float) -> None:
        self.rows.append((int(step), float(latent), float(spatial), float(total), float(g_entropy)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [repr(v) for v in r[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


def g_entropy(record: list) -> float:
    if not record:
        return 0.0
    ents = []
    for out in record:
        g = np.clip(np.asarray(out.g, float), 1e-12, 1.0)
        ents.append(float(np.mean(-(g * np.log(g)).sum(axis=-1))))
    return float(np.mean(ents))


# -- training --------------------------------------------------------------

@dataclass
class StepContext:
    model: Model
    cfg: TrainConfig
    sched: object
    loss_cfg: LossConfig
    rng: np.random.Generator
    log: MetricsLog
    stage: str
    g_log: list = field(default_factory=list)


def _loss_config(cfg: TrainConfig) -> LossConfig:
    return LossConfig(lam=cfg.lam, T=cfg.T, extractor=PerceptualExtractor(dtype=np.float32))


def _context(model: Model, cfg: TrainConfig, stage: str, stream: int) -> StepContext:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 100 + stream]))
    sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    return StepContext(model, cfg, sched, _loss_config(cfg), rng, MetricsLog(), stage)


def _set_trainable(model: Model, trainable: dict[str, Tensor]) -> None:
    for k, p in model.named().items():
        p.requires_grad = k in trainable
        p.grad = None


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total <= max_norm:
        return grads
    s = np.float32(max_norm / total)
    return {k: g * s for k, g in grads.items()}


def train_step(ctx: StepContext, step: int, batch: Batch, mode, conditioning: str,
               groups: list[tuple[dict[str, Tensor], OptimizerState]]) -> float:
    """One optimisation step; ``groups`` pairs parameter sets with their optimiser states."""
    model = ctx.model
    x0 = (2.0 * batch.images - 1.0).astype(np.float32)
    latent = model.latent(batch.weights) if conditioning != "none" else None
    record: list = []

    def denoise(z_t, t):
        record.clear()
        return model.den(z_t, t, batch.identity, latent, mode, conditioning, record)

    pw = batch.pixel_weight.astype(np.float32) if not np.all(batch.pixel_weight == 1) else None
    terms = total_loss(x0, denoise, ctx.loss_cfg, ctx.sched, ctx.rng, pw)
    if not np.isfinite(terms.total.data).all():
        raise NonFiniteError(f"{ctx.stage}, step {step}: non-finite loss "
                             f"(latent={terms.latent!r}, spatial={terms.spatial!r}); aborting")
    for params, _ in groups:
        for p in params.values():
            p.grad = None
    terms.total.backward()
    every = {}
    for params, _ in groups:
        every.update({k: p.grad for k, p in params.items() if p.grad is not None})
    clipped = _clip(every, ctx.cfg.grad_clip)
    for params, state in groups:
        adamw_step(params, {k: clipped[k] for k in params if k in clipped}, state)
    ent = g_entropy(record)
    if record:
        ctx.g_log.append(np.concatenate([np.asarray(r.g) for r in record]))
    ctx.log.add(step, terms.latent, terms.spatial, terms.total.item(), ent)
    return terms.total.item()


def _opt(cfg: TrainConfig, lr: float) -> OptimizerState:
    return OptimizerState(lr=lr, weight_decay=cfg.weight_decay)


def train_stage1(model: Model, ds: FaceDataset, cfg: TrainConfig) -> MetricsLog:
    """Trunk and identity conditioning on every sample, emotion conditioning off."""
    ctx = _context(model, cfg, "stage1", 1)
    trainable = model.trunk_params()
    _set_trainable(model, trainable)
    frozen = checksums({k: p for k, p in model.named().items() if k not in trainable})
    rows = np.arange(len(ds))
    state = _opt(cfg, cfg.lr_stage1)
    for step in range(cfg.steps_stage1):
        batch = sample_rows(ds, rows, cfg.batch_size, ctx.rng)
        train_step(ctx, step, batch, Soft(), "none", [(trainable, state)])
        if step % 500 == 0:
            log.info("stage1 step %d loss %.4f", step, ctx.log.rows[-1][3])
    assert_unchanged(frozen, model.named(), "stage1")
    return ctx.log


def train_stage2_experts(model: Model, ds: FaceDataset, cfg: TrainConfig, mns: bool = True,
                         p_noise: float | None = None) -> MetricsLog:
    """Expert ``i`` trains under Hard(i) on masked-noisy samples of emotion ``i``.

    Experts are visited round-robin (``expert_rounds`` passes); during expert
    ``i``'s block every other expert, the trunk and the gates are checked
    bit-unchanged.
    """
    ctx = _context(model, cfg, "stage2_experts", 2 if mns else 3)
    scfg = cfg.sampler_config(mns, p_noise)
    e2l = model.e2l_params() if cfg.e2l_train_experts else {}
    states = [_opt(cfg, cfg.lr_stage2) for _ in range(cfg.n_experts)]
    e2l_state = _opt(cfg, cfg.lr_stage2)
    per_block = cfg.steps_expert // cfg.expert_rounds
    step = 0
    for _ in range(cfg.expert_rounds):
        for i in range(cfg.n_experts):
            params = model.expert_params(i)
            trainable = {**params, **e2l}
            _set_trainable(model, trainable)
            frozen = checksums({k: p for k, p in model.named().items() if k not in trainable})
            groups = [(params, states[i])] + ([(e2l, e2l_state)] if e2l else [])
            for _ in range(per_block):
                batch = sample_batch(ds, scfg, EMOTIONS[i], cfg.batch_size, ctx.rng)
                train_step(ctx, step, batch, Hard(i), "moee", groups)
                step += 1
            assert_unchanged(frozen, model.named(), f"stage2 expert {EMOTIONS[i]}")
        log.info("stage2 experts step %d loss %.4f", step, ctx.log.rows[-1][3])
    return ctx.log


def _gating_rows(ds: FaceDataset, compounds: bool) -> np.ndarray:
    kinds = list(EMOTIONS)
    if compounds:
        kinds += [compound_kind(a, b) for a, b in COMPOUND_PAIRS]
    return ds.rows_of_kind(kinds)


def train_stage2_gating(model: Model, ds: FaceDataset, cfg: TrainConfig, arm: Ablation) -> StepContext:
    """Local and global gates on pure plus compound samples, experts and trunk frozen."""
    ctx = _context(model, cfg, "stage2_gating", 4)
    trainable = model.gate_params()
    if cfg.e2l_train_gating:
        trainable.update(model.e2l_params())
    elif cfg.label_mlp_train_gating:
        trainable.update(model.e2l_params(label_only=True))
    _set_trainable(model, trainable)
    frozen = checksums({k: p for k, p in model.named().items() if k not in trainable})
    mode = Soft() if arm.global_softmax else uniform(cfg.n_experts)
    rows = _gating_rows(ds, arm.compound_data)
    state = _opt(cfg, cfg.lr_stage2)
    for step in range(cfg.steps_gating):
        batch = sample_rows(ds, rows, cfg.batch_size, ctx.rng)
        train_step(ctx, step, batch, mode, "moee", [(trainable, state)])
    assert_unchanged(frozen, model.named(), "stage2 gating")
    return ctx


def train_plain(model: Model, ds: FaceDataset, cfg: TrainConfig, arm: Ablation) -> MetricsLog:
    """The no-experts arm: one plain cross-attention block per slot plus
    emotion-to-latents, trained for the same number of steps and on the same
    data schedule as the two stage-2 phases together."""
    ctx = _context(model, cfg, "stage2_plain", 5)
    trainable = {**model.plain_params(), **model.e2l_params()}
    _set_trainable(model, trainable)
    frozen = checksums({k: p for k, p in model.named().items() if k not in trainable})
    scfg = cfg.sampler_config(arm.masked_noisy_sampling, arm.p_noise)
    state = _opt(cfg, cfg.lr_stage2)
    per_block = cfg.steps_expert // cfg.expert_rounds
    step = 0
    for _ in range(cfg.expert_rounds):
        for i in range(cfg.n_experts):
            for _ in range(per_block):
                batch = sample_batch(ds, scfg, EMOTIONS[i], cfg.batch_size, ctx.rng)
                train_step(ctx, step, batch, Soft(), "plain", [(trainable, state)])
                step += 1
    rows = _gating_rows(ds, arm.compound_data)
    for _ in range(cfg.steps_gating):
        batch = sample_rows(ds, rows, cfg.batch_size, ctx.rng)
        train_step(ctx, step, batch, Soft(), "plain", [(trainable, state)])
        step += 1
    assert_unchanged(frozen, model.named(), "plain conditioning")
    return ctx.log


# -- sampling --------------------------------------------------------------

def routing_for(arm: Ablation, weights: np.ndarray, cfg: TrainConfig):
    if not arm.global_softmax:
        return uniform(cfg.n_experts)
    if cfg.eval_routing == "soft":
        return Soft()
    w = np.asarray(weights, float)
    if w.ndim == 1:
        return Hard(int(np.argmax(w))) if np.count_nonzero(w) == 1 else Frozen(w)
    return Frozen(w)


def generate(model: Model, arm: Ablation, weights: np.ndarray, identity: np.ndarray, cfg: TrainConfig,
             seed: int, steps: int | None = None, eta: float | None = None) -> np.ndarray:
    """DDIM samples in [0, 1] for per-sample label ``weights`` (b, 6) and ``identity`` (b, 4)."""
    weights = np.asarray(weights, float)
    identity = np.asarray(identity, float)
    b = len(weights)
    conditioning = "moee" if arm.use_moee else "plain"
    mode = routing_for(arm, weights, cfg)
    sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    with T.no_grad():
        latent = model.latent(weights)

        def eps_fn(x, t):
            with T.no_grad():
                return model.den(x, t, identity, latent, mode, conditioning).data

        x0 = ddim_sample(eps_fn, (b, cfg.image_size, cfg.image_size), sched, steps or cfg.ddim_steps,
                         eta=cfg.ddim_eta if eta is None else eta, seed=seed, clip=1.0)
    return np.clip((x0.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)


def image_grid(images: np.ndarray, cols: int, gap: int = 1) -> np.ndarray:
    n, h, w = images.shape
    rows = -(-n // cols)
    grid = np.ones((rows * (h + gap) - gap, cols * (w + gap) - gap))
    for k in range(n):
        r, c = divmod(k, cols)
        grid[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = images[k]
    return grid


# -- evaluation ------------------------------------------------------------

def eval_conditions() -> list[tuple[str, np.ndarray]]:
    conds = [(e, label_weights(e)) for e in EMOTIONS]
    conds += [(compound_kind(a, b), label_weights((a, b))) for a, b in COMPOUND_PAIRS]
    return conds


def _eval_identities(ds: FaceDataset, cfg: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.eval_seed, 7]))
    ids = ds.identities[rng.integers(len(ds.identities), size=cfg.eval_per_condition)]
    return np.stack([ds.identity_params(i) for i in ids])


def evaluate_arm(model: Model, ds: FaceDataset, cfg: TrainConfig, arm: Ablation) -> tuple[dict, dict]:
    """Generate, invert and score every condition for one arm; returns (metrics, images)."""
    ident = _eval_identities(ds, cfg)
    n = cfg.eval_per_condition
    icfg = InferConfig(max_iter=cfg.infer_max_iter, restarts=cfg.infer_restarts)
    images, inferred = {}, {}
    for c, (name, w) in enumerate(eval_conditions()):
        imgs = generate(model, arm, np.tile(w, (n, 1)), ident, cfg, seed=cfg.eval_seed + c)
        images[name] = imgs
        inferred[name] = [infer_params(im, ident[j], icfg) for j, im in enumerate(imgs)]

    # (a) pure accuracy and confusion
    confusion = np.zeros((len(EMOTIONS), len(EMOTIONS)), int)
    pure_resid = []
    for i, e in enumerate(EMOTIONS):
        for r in inferred[e]:
            d = [np.linalg.norm(r.emotion - ANCHORS[k]) for k in EMOTIONS]
            confusion[i, int(np.argmin(d))] += 1
            pure_resid.append(float(np.linalg.norm(r.emotion - ANCHORS[e])))
    accuracy = float(np.trace(confusion) / confusion.sum())
    baseline = float(np.percentile(pure_resid, 90))

    # (b) compound mixing coefficients
    compounds = {}
    passed = total = 0
    for a, b in COMPOUND_PAIRS:
        name = compound_kind(a, b)
        cs, rs = [], []
        for r in inferred[name]:
            coef, resid = project_on_segment(r.emotion, anchor(a), anchor(b))
            cs.append(coef)
            rs.append(resid)
        cs, rs = np.array(cs), np.array(rs)
        ok = (cs > 0) & (cs < 1) & (rs < baseline)
        passed += int(ok.sum())
        total += len(ok)
        compounds[name] = {
            "coef_mean": float(cs.mean()), "coef_median": float(np.median(cs)),
            "coef_in_open_unit": float(np.mean((cs > 0) & (cs < 1))),
            "residual_mean": float(rs.mean()), "pass_fraction": float(ok.mean()),
        }

    # (c) separation of generated diffusion latents (identity codec: the images) by condition
    lat = np.concatenate([2.0 * images[e] - 1.0 for e in EMOTIONS])
    labels = np.repeat(np.arange(len(EMOTIONS)), n)
    sep_generated = latent_separation(lat, labels)
    sep_emotion = _emotion_latent_separation(model, cfg)

    # (d) identity consistency on a subset refit with free identity
    k = min(cfg.identity_eval_samples, n)
    icfg_id = InferConfig(max_iter=cfg.infer_max_iter, restarts=cfg.infer_restarts, fit_identity=True)
    errs = []
    for j in range(k):
        e = EMOTIONS[j % len(EMOTIONS)]
        col = j // len(EMOTIONS)
        r = infer_params(images[e][col], ident[col], icfg_id)
        errs.append(float(np.abs(r.identity - ident[col]).max()))

    all_inf = [r for rs in inferred.values() for r in rs]
    metrics = {
        "arm": arm.name,
        "accuracy": accuracy,
        "per_emotion_accuracy": {e: float(confusion[i, i] / confusion[i].sum()) for i, e in enumerate(EMOTIONS)},
        "confusion": confusion.tolist(),
        "pure_residual_mean": float(np.mean(pure_resid)),
        "pure_residual_baseline_p90": baseline,
        "compound": compounds,
        "compound_pass_fraction": passed / total,
        "latent_separation": sep_generated,
        "emotion_latent_separation": sep_emotion,
        "identity_error_mean": float(np.mean(errs)),
        "identity_error_max": float(np.max(errs)),
        "inversion_confident_fraction": float(np.mean([r.confident for r in all_inf])),
        "samples_per_condition": n,
    }
    return metrics, images


def _emotion_latent_separation(model: Model, cfg: TrainConfig, per_class: int = 32) -> dict:
    """Separation of emotion latents for the stochastic text and audio stubs."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.eval_seed, 11]))
    out = {}
    for modality, feat in (("text", text_features), ("audio", audio_features)):
        raw, labels = [], []
        for i, e in enumerate(EMOTIONS):
            for _ in range(per_class):
                raw.append(feat(label_weights(e), rng))
                labels.append(i)
        with T.no_grad():
            lat = model.e2l(modality, np.array(raw, np.float32)).data
        out[modality] = latent_separation(lat, labels)
    return out


# -- experiment orchestration ---------------------------------------------

@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    seed: int
    arms: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=_json_default)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        return cls(**json.loads(Path(path).read_text()))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


class Experiment:
    """Runs and caches the stages for a set of arms inside one run directory."""

    def __init__(self, cfg: TrainConfig, resume: bool = True):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self.resume = resume
        self.root.mkdir(parents=True, exist_ok=True)
        cfg.dump(self.root / "config.json")
        if not resume:
            (self.root / "timings.json").unlink(missing_ok=True)
        self.ds = build_dataset(cfg.dataset_config())
        self.timings: dict[str, float] = {}
        self._written: set[Path] = set()

    def _meta(self, stage: str, arm: str | None = None) -> dict:
        return {"stage": stage, "arm": arm, "config": self.cfg.to_dict(), "config_hash": self.cfg.hash()}

    def _cached(self, path: Path) -> Model | None:
        if (self.resume or path in self._written) and path.exists():
            model, meta = load_model(path, self.cfg)
            if meta.get("config_hash") != self.cfg.hash():
                raise ContractError(f"{path} was written by a different configuration")
            return model
        return None

    def _save(self, path: Path, model: Model, metrics: MetricsLog, stage: str, arm: str | None = None) -> None:
        save_model(path, model, self._meta(stage, arm))
        metrics.write(path.parent / "metrics.csv")
        self._written.add(path)

    def _timed(self, key: str, fn: Callable):
        t0 = time.perf_counter()
        out = fn()
        self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t0
        # kept on disk so a resumed run still knows what its cached stages cost
        path = self.root / "timings.json"
        saved = json.loads(path.read_text()) if path.exists() else {}
        saved[key] = self.timings[key]
        path.write_text(json.dumps(saved, indent=1, sort_keys=True) + "\n")
        return out

    def write_data(self) -> Path:
        return save_dataset(self.ds, self.root / "data")

    def stage1(self) -> Model:
        path = self.root / "stage1" / "model.ckpt"
        model = self._cached(path)
        if model is None:
            model = Model(self.cfg)
            metrics = self._timed("stage1", lambda: train_stage1(model, self.ds, self.cfg))
            self._save(path, model, metrics, "stage1")
        return model

    def stage2_experts(self, mns: bool, p_noise: float | None = None) -> Model:
        key = "nomns" if not mns else ("mns" if p_noise is None else f"mns-p{p_noise:g}")
        path = self.root / f"stage2a-{key}" / "model.ckpt"
        model = self._cached(path)
        if model is None:
            model = self.stage1()
            metrics = self._timed(f"stage2_experts-{key}",
                                  lambda: train_stage2_experts(model, self.ds, self.cfg, mns, p_noise))
            self._save(path, model, metrics, "stage2_experts")
        return model

    def arm(self, name: str) -> Model:
        arm = ablate(name)
        path = self.root / "arms" / name / "model.ckpt"
        model = self._cached(path)
        if model is not None:
            return model
        if not arm.use_moee:
            model = self.stage1()
            metrics = self._timed(f"stage2_plain-{name}", lambda: train_plain(model, self.ds, self.cfg, arm))
        else:
            model = self.stage2_experts(arm.masked_noisy_sampling, arm.p_noise)
            ctx = self._timed(f"stage2_gating-{name}", lambda: train_stage2_gating(model, self.ds, self.cfg, arm))
            metrics = ctx.log
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path.parent / "gating_g.npy", np.concatenate(ctx.g_log))
        self._save(path, model, metrics, "stage2_gating" if arm.use_moee else "stage2_plain", name)
        return model

    def evaluate(self, arms=None) -> ExperimentReport:
        cfg = self.cfg
        report = ExperimentReport(cfg.to_dict(), cfg.hash(), cfg.seed)
        for name in arms or cfg.ablations:
            path = self.root / "arms" / name / "model.ckpt"
            if not path.exists():
                report.skipped.append(name)
                continue
            model, _ = load_model(path, cfg)
            metrics, images = self._timed(f"eval_{name}", lambda: evaluate_arm(model, self.ds, cfg, ablate(name)))
            report.arms[name] = metrics
            grid = image_grid(np.concatenate([imgs[:8] for imgs in images.values()]), 8)
            write_pgm(path.parent / "grid.pgm", grid)
        report.losses = {p.parent.relative_to(self.root).as_posix(): (p.parent / "metrics.csv").as_posix()
                         for p in sorted(self.root.glob("**/model.ckpt")) if (p.parent / "metrics.csv").exists()}
        saved = self.root / "timings.json"
        report.wall_clock = json.loads(saved.read_text()) if saved.exists() else dict(self.timings)
        report.write(self.root / "report.json")
        return report


def run_experiment(config: TrainConfig | str | Path, resume: bool = True) -> ExperimentReport:
    """Data, stage 1, stage 2 for every configured arm, evaluation, report."""
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.load(config)
    exp = Experiment(cfg, resume=resume)
    t0 = time.perf_counter()
    exp.write_data()
    for name in cfg.ablations:
        exp.arm(name)
    report = exp.evaluate()
    report.wall_clock["total"] = time.perf_counter() - t0
    report.write(exp.root / "report.json")
    return report
