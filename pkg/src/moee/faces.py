"""Procedural parametric faces: renderer, parameter inverter and anchor classifier.

Coordinates are fractions of the image extent, ``x`` to the right and ``y``
downward, evaluated at pixel centres. Each shape is drawn with a smoothstep
of its signed distance, so pixel values are C1 in the parameters and every
shape has compact support (a feature change never leaks outside its box).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .mixture import EMOTIONS
from .tensor import ContractError

IDENTITY_NAMES = ("face_width", "face_height", "eye_spacing", "eye_height")
EMOTION_PARAM_NAMES = ("mouth_curve", "mouth_open", "brow_angle", "eye_open")
IDENTITY_BOUNDS = np.array([[0.3, 0.7]] * 4)
EMOTION_BOUNDS = np.array([[-1.0, 1.0], [0.0, 1.0], [-1.0, 1.0], [0.2, 1.0]])

# (mouth_curve, mouth_open, brow_angle, eye_open)
ANCHORS = {
    "angry": np.array([-0.4, 0.1, -0.9, 0.5]),
    "disgusted": np.array([-0.7, 0.0, -0.3, 0.3]),
    "fear": np.array([-0.3, 0.5, 0.7, 1.0]),
    "happy": np.array([0.9, 0.2, 0.2, 0.5]),
    "sad": np.array([-0.9, 0.0, 0.8, 0.35]),
    "surprised": np.array([0.0, 1.0, 0.9, 1.0]),
}
NEUTRAL = np.array([0.0, 0.0, 0.0, 0.6])
COMPOUND_PAIRS = (("angry", "disgusted"), ("sad", "surprised"), ("sad", "fear"), ("happy", "surprised"))

# geometry constants (fractions of image extent)
_SOFT = 0.045          # half-width of the anti-aliasing band
_MOUTH_Y = 0.71875   # on a pixel centre at 16 px and a pixel boundary at 32 px
_MOUTH_HALF_W = 0.17
_MOUTH_BEND = 0.13
_MOUTH_THICK = (0.02, 0.07)
_EYE_RX = 0.08
_EYE_RY = 0.085
_BROW_LEN = 0.10
_BROW_RISE = 0.10
_BROW_GAP = 0.13
_BROW_THICK = 0.022
_FACE_FILL = 0.55


@dataclass(frozen=True)
class FaceParams:
    identity: tuple[float, float, float, float]
    emotion: tuple[float, float, float, float]

    def __post_init__(self):
        ident = np.asarray(self.identity, float)
        emo = np.asarray(self.emotion, float)
        if ident.shape != (4,) or emo.shape != (4,):
            raise ContractError("identity and emotion need 4 values each")
        if (ident < IDENTITY_BOUNDS[:, 0] - 1e-9).any() or (ident > IDENTITY_BOUNDS[:, 1] + 1e-9).any():
            raise ContractError(f"identity parameters out of range: {ident}")
        if (emo < EMOTION_BOUNDS[:, 0] - 1e-9).any() or (emo > EMOTION_BOUNDS[:, 1] + 1e-9).any():
            raise ContractError(f"emotion parameters out of range: {emo}")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.identity, self.emotion]).astype(float)

    @classmethod
    def from_arrays(cls, identity, emotion) -> "FaceParams":
        return cls(tuple(float(v) for v in identity), tuple(float(v) for v in emotion))


def _smoothstep(d: np.ndarray) -> np.ndarray:
    """1 inside (d << 0), 0 outside (d >> 0), C1 blend over |d| < _SOFT."""
    u = np.clip(0.5 - d / (2 * _SOFT), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _grid(h: int, w: int):
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return np.meshgrid(ys, xs, indexing="ij")


def _lerp(v, lo, hi):
    return lo + (hi - lo) * (v - 0.3) / 0.4


def _layout(identity: np.ndarray) -> dict:
    fw, fh, es, eh = (identity[..., k, None, None] for k in range(4))
    return {
        "face_a": _lerp(fw, 0.30, 0.44),
        "face_b": _lerp(fh, 0.34, 0.46),
        "eye_dx": _lerp(es, 0.13, 0.21),
        "eye_y": _lerp(eh, 0.36, 0.44),
    }


def mouth_box(h: int, w: int) -> tuple[int, int, int, int]:
    """Pixel rectangle ``(row0, row1, col0, col1)`` (half-open) that contains every possible mouth.

    The mouth geometry does not depend on identity, so the box is a constant
    of the image size.
    """
    reach_y = 0.5 * _MOUTH_BEND + _MOUTH_THICK[1] + _SOFT
    reach_x = _MOUTH_HALF_W + _SOFT
    r0 = int(np.floor((_MOUTH_Y - reach_y) * h - 0.5))
    r1 = int(np.ceil((_MOUTH_Y + reach_y) * h + 0.5))
    c0 = int(np.floor((0.5 - reach_x) * w - 0.5))
    c1 = int(np.ceil((0.5 + reach_x) * w + 0.5))
    return max(r0, 0), min(r1, h), max(c0, 0), min(c1, w)


def mouth_coverage(emotion: np.ndarray, h: int = 16, w: int = 16) -> np.ndarray:
    """Ink coverage of the mouth stroke alone, in [0, 1]."""
    emotion = np.asarray(emotion, float)
    y, x = _grid(h, w)
    return _mouth(y, x, emotion[..., 0, None, None], emotion[..., 1, None, None])


def _mouth(y, x, curve, opening):
    dx = (x - 0.5) / _MOUTH_HALF_W
    centre = _MOUTH_Y - curve * _MOUTH_BEND * (dx * dx - 0.5)
    half = _MOUTH_THICK[0] + (_MOUTH_THICK[1] - _MOUTH_THICK[0]) * opening
    vert = _smoothstep(np.abs(y - centre) - half)
    horiz = _smoothstep(np.abs(x - 0.5) - _MOUTH_HALF_W)
    return vert * horiz


def _segment_dist(y, x, p0, p1):
    (y0, x0), (y1, x1) = p0, p1
    vy, vx = y1 - y0, x1 - x0
    t = np.clip(((y - y0) * vy + (x - x0) * vx) / (vy * vy + vx * vx), 0.0, 1.0)
    return np.hypot(y - (y0 + t * vy), x - (x0 + t * vx))


def render_face(params: FaceParams, h: int = 16, w: int = 16) -> np.ndarray:
    """Grayscale image in [0, 1]: filled face, bright outline, dark eyes, brows and mouth."""
    return render_arrays(np.asarray(params.identity, float), np.asarray(params.emotion, float), h, w)


def render_arrays(identity: np.ndarray, emotion: np.ndarray, h: int = 16, w: int = 16) -> np.ndarray:
    """Vectorised renderer: leading axes of ``identity``/``emotion`` (..., 4) broadcast to (..., h, w).

    No range validation; :func:`render_face` is the checked entry point.
    """
    identity = np.asarray(identity, float)
    emotion = np.asarray(emotion, float)
    curve, opening, brow, eye_open = (emotion[..., k, None, None] for k in range(4))
    lay = _layout(identity)
    y, x = _grid(h, w)
    cy = 0.52
    r = np.sqrt(((x - 0.5) / lay["face_a"]) ** 2 + ((y - cy) / lay["face_b"]) ** 2)
    sd_face = (r - 1.0) * np.minimum(lay["face_a"], lay["face_b"])
    fill = _smoothstep(sd_face)
    outline = _smoothstep(np.abs(sd_face) - 0.02)
    base = _FACE_FILL * fill + (1.0 - _FACE_FILL) * outline

    ry = _EYE_RY * eye_open
    ink = 1.0 - _mouth(y, x, curve, opening)
    for side in (-1.0, 1.0):
        ex = 0.5 + side * lay["eye_dx"]
        ey = lay["eye_y"]
        re = np.sqrt(((x - ex) / _EYE_RX) ** 2 + ((y - ey) / ry) ** 2)
        eye = _smoothstep((re - 1.0) * ry)
        # brow: inner end raised by brow_angle > 0
        inner = (ey - _BROW_GAP - _BROW_RISE * brow, ex - side * _BROW_LEN)
        outer = (ey - _BROW_GAP, ex + side * _BROW_LEN)
        browm = _smoothstep(_segment_dist(y, x, inner, outer) - _BROW_THICK)
        ink = ink * (1.0 - eye) * (1.0 - browm)
    return np.clip(base * ink, 0.0, 1.0)


# -- emotion space ---------------------------------------------------------

def anchor(name: str) -> np.ndarray:
    if name == "neutral":
        return NEUTRAL.copy()
    return ANCHORS[name].copy()


def compound(a: str, b: str, alpha: float = 0.5) -> np.ndarray:
    return alpha * anchor(a) + (1.0 - alpha) * anchor(b)


def label_weights(name: str | tuple[str, str], alpha: float = 0.5) -> np.ndarray:
    """Weight vector over the six basic emotions (one-hot or two-way blend)."""
    w = np.zeros(len(EMOTIONS))
    if isinstance(name, tuple):
        w[EMOTIONS.index(name[0])] = alpha
        w[EMOTIONS.index(name[1])] += 1.0 - alpha
    else:
        w[EMOTIONS.index(name)] = 1.0
    return w


def emotion_from_weights(weights: np.ndarray) -> np.ndarray:
    """Emotion parameters for a weight vector; all-zero weights give the neutral face."""
    weights = np.asarray(weights, float)
    if weights.sum() == 0:
        return NEUTRAL.copy()
    return sum(wi * ANCHORS[name] for wi, name in zip(weights, EMOTIONS))


def min_anchor_separation() -> float:
    vals = list(ANCHORS.values())
    return min(np.linalg.norm(a - b) for i, a in enumerate(vals) for b in vals[i + 1:])


# -- inversion -------------------------------------------------------------

@dataclass
class InferResult:
    emotion: np.ndarray
    identity: np.ndarray
    mse: float
    iterations: int
    confident: bool
    message: str = ""

    def params(self) -> FaceParams:
        return FaceParams.from_arrays(self.identity, self.emotion)


@dataclass
class InferConfig:
    max_iter: int = 400
    xatol: float = 1e-4
    fatol: float = 1e-10
    restarts: int = 1
    # fits whose residual MSE exceeds this are flagged low-confidence
    confidence_mse: float = 0.01
    fit_identity: bool = False
    grid: tuple[int, int, int, int] = (9, 6, 9, 5)
    # also refine from the mirrored mouth curve when the first fit is this flat
    flip_below: float = 0.3
    identity_rounds: int = 2


@functools.lru_cache(maxsize=64)
def _grid_bank(identity: tuple, h: int, w: int, grid: tuple) -> tuple[np.ndarray, np.ndarray]:
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(EMOTION_BOUNDS, grid)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 4)
    ims = render_arrays(np.asarray(identity), pts, h, w).reshape(len(pts), -1)
    return pts, ims


def _bounded_nm(fun, x0, bounds, opts, restarts):
    """Nelder-Mead on ``x = mid + half * sin(u)``, which keeps iterates inside the box
    without collapsing the simplex onto a face the way clipping does."""
    mid = bounds.mean(axis=1)
    half = 0.5 * (bounds[:, 1] - bounds[:, 0])
    to_x = lambda u: mid + half * np.sin(u)  # noqa: E731
    u = np.arcsin(np.clip((np.asarray(x0, float) - mid) / half, -0.98, 0.98))
    iters = 0
    for _ in range(1 + restarts):
        simplex = np.vstack([u, u + 0.15 * np.eye(u.size)])
        res = minimize(lambda uu: fun(to_x(uu)), u, method="Nelder-Mead",
                       options=dict(opts, initial_simplex=simplex))
        u, iters = res.x, iters + int(res.nit)
    return to_x(u), iters


def _fit_emotion(image, identity, cfg, opts):
    h, w = image.shape
    pts, bank = _grid_bank(tuple(np.round(identity, 12)), h, w, tuple(cfg.grid))
    start = pts[int(np.argmin(((bank - image.reshape(1, -1)) ** 2).mean(axis=1)))]

    def loss(e):
        return float(np.mean((render_arrays(identity, e, h, w) - image) ** 2))

    emotion, iters = _bounded_nm(loss, start, EMOTION_BOUNDS, opts, cfg.restarts)
    if abs(emotion[0]) < cfg.flip_below:
        # a nearly flat mouth bends by less than a pixel either way; the other sign is a
        # separate basin, so refine from there as well and keep the better fit
        flipped = emotion.copy()
        flipped[0] = -flipped[0]
        other, more = _bounded_nm(loss, flipped, EMOTION_BOUNDS, opts, cfg.restarts)
        iters += more
        if loss(other) < loss(emotion):
            emotion = other
    return emotion, loss(emotion), iters


def infer_params(image: np.ndarray, identity_prior, cfg: InferConfig | None = None) -> InferResult:
    """Recover emotion (and optionally identity) parameters from an image.

    A fixed grid over the emotion box (``cfg.grid`` points per axis, renders
    cached per identity) picks the start; bounded Nelder-Mead then refines,
    restarting ``cfg.restarts`` times from its own optimum, with at most
    ``cfg.max_iter`` iterations per run. With ``fit_identity`` the emotion fit
    and a joint fit alternate ``cfg.identity_rounds`` times, since eye height
    and brow angle trade off against each other from a poor identity prior.
    """
    cfg = cfg or InferConfig()
    image = np.asarray(image, float)
    h, w = image.shape
    identity = np.asarray(identity_prior, float).copy()
    opts = {"maxiter": cfg.max_iter, "xatol": cfg.xatol, "fatol": cfg.fatol}

    emotion, mse, iters = _fit_emotion(image, identity, cfg, opts)
    if cfg.fit_identity:
        def loss_all(v):
            return float(np.mean((render_arrays(v[:4], v[4:], h, w) - image) ** 2))

        bounds = np.concatenate([IDENTITY_BOUNDS, EMOTION_BOUNDS])
        best = (np.inf, identity, emotion)
        for _ in range(cfg.identity_rounds):
            v, more = _bounded_nm(loss_all, np.concatenate([identity, emotion]), bounds,
                                  dict(opts, maxiter=2 * cfg.max_iter), cfg.restarts)
            iters += more
            if loss_all(v) < best[0]:
                best = (loss_all(v), v[:4], v[4:])
            identity = v[:4]
            emotion, _, more = _fit_emotion(image, identity, cfg, opts)
            iters += more
        mse, identity, emotion = best
    finite = np.isfinite(mse) and np.isfinite(emotion).all()
    confident = bool(finite and mse <= cfg.confidence_mse)
    msg = "" if confident else f"residual mse {mse:.4g} above {cfg.confidence_mse}"
    return InferResult(emotion, identity, mse, iters, confident, msg)


@dataclass
class Classification:
    label: str
    confidence: float
    distances: dict
    inferred: InferResult


def emotion_classify(image: np.ndarray, identity_prior, anchors: dict | None = None,
                     cfg: InferConfig | None = None) -> Classification:
    """Nearest anchor to the inferred emotion parameters; confidence is the distance margin."""
    anchors = anchors or ANCHORS
    inf = infer_params(image, identity_prior, cfg)
    dists = {k: float(np.linalg.norm(inf.emotion - v)) for k, v in anchors.items()}
    ranked = sorted(dists, key=dists.get)
    margin = dists[ranked[1]] - dists[ranked[0]] if len(ranked) > 1 else float("inf")
    return Classification(ranked[0], margin, dists, inf)


def project_on_segment(point: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Coefficient ``c`` of the projection onto the line ``a + c (b - a)`` and the distance to the segment.

    ``c`` is unclamped; the residual is measured to the closed segment.
    """
    d = b - a
    c = float(np.dot(point - a, d) / np.dot(d, d))
    closest = a + np.clip(c, 0.0, 1.0) * d
    return c, float(np.linalg.norm(point - closest))
