"""
Two-stage training and the ablation arms
========================================

A deliberately small run (a couple of minutes on one core) through the
full pipeline: unconditional stage 1, per-emotion expert training, gating,
then generation, inversion and scoring. At this budget the scores sit near
chance; the default configuration is the same code with budgets large
enough to separate the arms (about 45 minutes for all five).
"""

# %%
import tempfile

from moee.harness import TrainConfig, run_experiment

out = tempfile.mkdtemp(prefix="moee-")
cfg = TrainConfig(out_dir=out, n_identities=8, samples_per_condition=1, steps_stage1=300, steps_expert=120,
                  expert_rounds=2, steps_gating=60, eval_per_condition=6, ddim_steps=20,
                  identity_eval_samples=3, infer_max_iter=80, ablations=["full", "wo_moee"])
report = run_experiment(cfg)

# %%
for arm, m in report.arms.items():
    print(f"{arm:8s} accuracy {m['accuracy']:.2f}  compound {m['compound_pass_fraction']:.2f}  "
          f"separation {m['latent_separation']:.2f}")
print({k: round(v, 1) for k, v in report.wall_clock.items()})
print("artifacts in", out)
