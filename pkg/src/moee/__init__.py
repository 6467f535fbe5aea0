"""Mixture-of-emotion-experts conditioning for a small numpy diffusion model on synthetic faces."""

from .faces import ANCHORS, COMPOUND_PAIRS, FaceParams, infer_params, render_face
from .harness import TrainConfig, run_experiment
from .mixture import EMOTIONS, Frozen, Hard, Soft, moee_forward, uniform

__all__ = ["ANCHORS", "COMPOUND_PAIRS", "EMOTIONS", "FaceParams", "Frozen", "Hard", "Soft", "TrainConfig",
           "infer_params", "moee_forward", "render_face", "run_experiment", "uniform"]
__version__ = "0.1.0"
