"""Command-line front end: ``moee <subcommand> ...`` (also ``python3 -m moee``).

Every subcommand reads its settings from flags and an optional JSON config
file; no environment variables are consulted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .dataset import save_dataset, write_pgm
from .faces import COMPOUND_PAIRS, label_weights
from .gradsuite import BLOCKS, grad_check
from .harness import (CONFIG_DOCS, Experiment, ExperimentReport, TrainConfig, evaluate_arm,
                      generate, image_grid, load_model, run_experiment)
from .mixture import EMOTIONS, ablate
from .tensor import ContractError, NonFiniteError


def _config(args) -> TrainConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    for kv in getattr(args, "set", None) or []:
        key, _, raw = kv.partition("=")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    return TrainConfig.from_dict(d)


ARM_NAMES = ("full", "wo_moee", "wo_gs", "wo_mns", "wo_compound", "mns_p<p>")


def _arm(name: str) -> str:
    try:
        ablate(name)
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return name


def _parse_compound(text: str) -> tuple[str, str, float]:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ContractError(f"--compound expects a:b or a:b:alpha, got {text!r}")
    a, b = parts[0], parts[1]
    alpha = float(parts[2]) if len(parts) == 3 else 0.5
    for e in (a, b):
        if e not in EMOTIONS:
            raise ContractError(f"unknown emotion {e!r}; choose from {', '.join(EMOTIONS)}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("compound alpha must lie in [0, 1]")
    return a, b, alpha


def cmd_config(args) -> int:
    d = TrainConfig().to_dict()
    if args.json:
        print(json.dumps(d, indent=1, sort_keys=True))
        return 0
    for k, v in d.items():
        print(f"{k:24s} {json.dumps(v):24s} {CONFIG_DOCS[k]}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = Experiment(cfg, resume=True).ds
    out = save_dataset(ds, Path(cfg.out_dir) / "data")
    print(f"{len(ds)} samples -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    stage = args.stage or cfg.stage
    arms = args.arm or list(cfg.ablations)
    if stage == "all":
        report = run_experiment(TrainConfig.from_dict({**cfg.to_dict(), "ablations": arms}), resume=args.resume)
        _print_summary(report)
        return 0
    exp = Experiment(cfg, resume=args.resume)
    if stage == "stage1":
        exp.stage1()
    elif stage == "stage2_experts":
        keys = {(ablate(a).masked_noisy_sampling, ablate(a).p_noise) for a in arms if ablate(a).use_moee}
        for mns, p in sorted(keys, key=str):
            exp.stage2_experts(mns, p)
    else:
        for a in arms:
            exp.arm(a)
    print(f"{stage} done in {cfg.out_dir}")
    return 0


def cmd_sample(args) -> int:
    model, meta = load_model(args.ckpt)
    cfg = TrainConfig.from_dict(meta["config"])
    arm = ablate(meta.get("arm") or "full")
    if args.compound:
        a, b, alpha = _parse_compound(args.compound)
        w = label_weights((a, b), alpha)
    elif args.emotion in EMOTIONS:
        w = label_weights(args.emotion)
    else:
        raise ContractError(f"unknown emotion {args.emotion!r}; choose from {', '.join(EMOTIONS)}")
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
    ident = rng.uniform(0.3, 0.7, (args.n, 4)) if args.identity is None else np.tile(args.identity, (args.n, 1))
    imgs = generate(model, arm, np.tile(w, (args.n, 1)), ident, cfg, seed=args.seed, steps=args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, image_grid(imgs, min(args.n, 8)))
    np.save(out.with_suffix(".npy"), imgs)
    print(f"{args.n} samples -> {out}")
    return 0


def cmd_eval(args) -> int:
    path = Path(args.ckpt)
    if path.is_dir():
        cfg = TrainConfig.load(path / "config.json")
        report = Experiment(cfg, resume=True).evaluate(args.ablations or list(cfg.ablations))
        _print_summary(report)
        return 0
    model, meta = load_model(path)
    cfg = TrainConfig.from_dict(meta["config"])
    arm = args.ablations[0] if args.ablations else (meta.get("arm") or "full")
    metrics, _ = evaluate_arm(model, Experiment(cfg, resume=True).ds, cfg, ablate(arm))
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    reports = grad_check(args.scope or "all", seeds=args.seeds)
    ok = True
    for r in reports:
        ok &= r.ok
        print(f"{r.block:20s} seeds {r.seeds:3d} coords {r.coords:6d} max_rel_err {r.max_rel_error:.2e} "
              f"{r.seconds:6.1f}s {'ok' if r.ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_report(args) -> int:
    path = Path(args.run)
    report = ExperimentReport.read(path / "report.json" if path.is_dir() else path)
    if args.json:
        print(report.to_json())
    else:
        _print_summary(report)
    return 0


def _print_summary(report: ExperimentReport) -> None:
    print(f"config {report.config_hash}  seed {report.seed}")
    for name, m in report.arms.items():
        print(f"{name:12s} acc {m['accuracy']:.3f}  compound {m['compound_pass_fraction']:.3f}  "
              f"sep {m['latent_separation']:.3f}  identity_err {m['identity_error_mean']:.3f}")
    for name in report.skipped:
        print(f"{name:12s} skipped (no checkpoint)")
    if "total" in report.wall_clock:
        print(f"wall clock {report.wall_clock['total']:.0f}s")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moee", description="Mixture-of-emotion-experts diffusion on synthetic faces.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (keys: see `moee config`)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", help="run directory (overrides out_dir)")

    sp = sub.add_parser("config", help="print every config key with its default")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_config)

    sp = sub.add_parser("gen-data", help="render the synthetic dataset into <out_dir>/data")
    with_config(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train one stage, or everything")
    with_config(sp)
    sp.add_argument("--stage", choices=["stage1", "stage2_experts", "stage2_gating", "all"])
    sp.add_argument("--arm", action="append", type=_arm,
                    help=f"ablation arm ({', '.join(ARM_NAMES)}); repeatable; default: the config's list")
    sp.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                    help="reuse checkpoints already in the run directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="generate faces from a checkpoint")
    sp.add_argument("--ckpt", required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--emotion", help="|".join(EMOTIONS))
    g.add_argument("--compound", help="a:b[:alpha], e.g. " + ", ".join(f"{a}:{b}:0.5" for a, b in COMPOUND_PAIRS[:2]))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--steps", type=int, help="DDIM steps (default: config)")
    sp.add_argument("--identity", type=float, nargs=4, metavar="P", help="fixed identity parameters")
    sp.add_argument("--out", required=True, help="PGM grid path; raw samples go next to it as .npy")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="evaluate a run directory or a single checkpoint")
    sp.add_argument("--ckpt", required=True, help="run directory or arms/<arm>/model.ckpt")
    sp.add_argument("--ablations", nargs="+", type=_arm, help=", ".join(ARM_NAMES))
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("grad-check", help="finite-difference suite over every parameterised block")
    sp.add_argument("--scope", nargs="+", choices=list(BLOCKS))
    sp.add_argument("--seeds", type=int, default=10)
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("report", help="summarise a run's report.json")
    sp.add_argument("run", help="run directory or report.json")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (ContractError, CheckpointError, NonFiniteError, FileNotFoundError) as exc:
        print(f"moee: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
