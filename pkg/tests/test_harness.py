import json

import numpy as np
import pytest

from moee import harness
from moee.dataset import build_dataset
from moee.harness import (CONFIG_DOCS, Experiment, FrozenParameterError, MetricsLog, Model, TrainConfig,
                          assert_unchanged, checksums, load_model, run_experiment, save_model, train_stage1,
                          train_stage2_experts)
from moee.mixture import ablate
from moee.tensor import ContractError

TINY = dict(n_identities=3, samples_per_condition=1, patch=4, d_model=16, d_attn=16, mlp_hidden=16, n_blocks=2,
            cond_after=[1, 2], d_time=8, t_emotion=2, c_emotion=8, c_bank=8, bank_size=4, d_feat=8,
            label_hidden=8, T=100, batch_size=4, steps_stage1=6, steps_expert=2, expert_rounds=1, steps_gating=4,
            eval_per_condition=2, ddim_steps=4, identity_eval_samples=2, infer_max_iter=40)


def _cfg(tmp_path, **kw):
    return TrainConfig(out_dir=str(tmp_path), **{**TINY, **kw})


def test_config_json_round_trip(tmp_path):
    cfg = _cfg(tmp_path / "r", lam=0.25, ablations=["full", "wo_gs"])
    cfg.dump(tmp_path / "c.json")
    back = TrainConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()
    assert back.cond_after == (1, 2) and back.ablations == ("full", "wo_gs")
    moved = TrainConfig.from_dict({**cfg.to_dict(), "out_dir": "elsewhere", "stage": "stage1"})
    assert moved.hash() == cfg.hash()
    assert TrainConfig.from_dict({**cfg.to_dict(), "lam": 0.3}).hash() != cfg.hash()


def test_config_rejects_bad_input():
    with pytest.raises(ContractError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ContractError):
        TrainConfig(stage="stage3")
    with pytest.raises(ContractError):
        TrainConfig(ablations=("full", "nope"))
    with pytest.raises(ContractError):
        TrainConfig(steps_expert=10, expert_rounds=3)


def test_every_config_key_is_documented():
    assert set(CONFIG_DOCS) == set(TrainConfig().to_dict())


def test_full_scale_config_values():
    # [PAPER] batch 4, learning rate 1e-5, 30000 steps, 150 sampling steps, widths 512 and 768
    p = TrainConfig.full_scale()
    assert (p.batch_size, p.lr_stage1, p.steps_stage1, p.ddim_steps) == (4, 1e-5, 30000, 150)
    assert (p.c_emotion, p.c_bank, p.t_emotion) == (512, 768, 8)
    assert (p.beta_min, p.beta_max) == (0.05, 20.0)


def test_metrics_csv_layout():
    m = MetricsLog()
    m.add(0, 0.5, 0.25, 0.525, 1.0986)
    lines = m.to_csv().splitlines()
    assert lines[0] == "step,loss_latent,loss_spatial,loss_total,g_entropy"
    assert lines[1] == "0,0.5,0.25,0.525,1.0986"


def test_frozen_parameter_change_is_detected(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)
    ds = build_dataset(cfg.dataset_config())
    real = harness.adamw_step
    for stage, train in (("stage1", train_stage1), ("expert", train_stage2_experts)):
        model = Model(cfg)
        victim = next(iter(model.gate_params().values()))

        def leaky(params, grads, state, victim=victim):
            real(params, grads, state)
            victim.data = victim.data + np.float32(1e-3)

        monkeypatch.setattr(harness, "adamw_step", leaky)
        with pytest.raises(FrozenParameterError, match=stage):
            train(model, ds, cfg)


def test_checksum_helpers():
    cfg = TrainConfig(**TINY)
    model = Model(cfg)
    before = checksums(model.trunk_params())
    assert_unchanged(before, model.named(), "noop")
    next(iter(model.trunk_params().values())).data[...] += 1
    with pytest.raises(FrozenParameterError):
        assert_unchanged(before, model.named(), "edit")


def test_stage_two_experts_touch_only_their_own_parameters(tmp_path):
    cfg = _cfg(tmp_path, steps_expert=6, e2l_train_experts=False)
    ds = build_dataset(cfg.dataset_config())
    model = Model(cfg)
    train_stage1(model, ds, cfg)
    trunk = checksums(model.trunk_params())
    gates = checksums(model.gate_params())
    experts = [checksums(model.expert_params(i)) for i in range(6)]
    e2l = checksums(model.e2l_params())
    train_stage2_experts(model, ds, cfg)
    assert checksums(model.trunk_params()) == trunk and checksums(model.gate_params()) == gates
    assert checksums(model.e2l_params()) == e2l
    assert all(checksums(model.expert_params(i)) != experts[i] for i in range(6))


def test_checkpoint_round_trip_through_model(tmp_path):
    cfg = _cfg(tmp_path)
    model = Model(cfg)
    save_model(tmp_path / "m.ckpt", model, {"config": cfg.to_dict(), "tag": 1})
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["tag"] == 1
    for k, v in model.state().items():
        assert back.state()[k].tobytes() == v.tobytes()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(out_dir=str(root / "a"), **TINY)
    return cfg, run_experiment(cfg, resume=False)


def test_run_writes_every_artifact(tiny_run):
    cfg, report = tiny_run
    root = cfg.out_dir
    for arm in cfg.ablations:
        assert arm in report.arms
        for f in ("model.ckpt", "metrics.csv", "grid.pgm"):
            assert (harness.Path(root) / "arms" / arm / f).exists()
    rep = json.loads((harness.Path(root) / "report.json").read_text())
    assert rep["config_hash"] == cfg.hash() and rep["seed"] == cfg.seed
    m = report.arms["full"]
    assert 0 <= m["accuracy"] <= 1
    assert set(m["per_emotion_accuracy"]) == set(harness.EMOTIONS)
    assert (harness.Path(root) / "data" / "manifest.jsonl").exists()


def test_without_global_softmax_weights_are_exactly_uniform(tiny_run):
    cfg, _ = tiny_run
    g = np.load(harness.Path(cfg.out_dir) / "arms" / "wo_gs" / "gating_g.npy")
    assert g.size and np.all(g == np.float32(1 / 6))
    full = np.load(harness.Path(cfg.out_dir) / "arms" / "full" / "gating_g.npy")
    assert not np.all(full == np.float32(1 / 6))


def test_short_runs_are_byte_reproducible(tiny_run, tmp_path):
    cfg, _ = tiny_run
    again = TrainConfig.from_dict({**cfg.to_dict(), "out_dir": str(tmp_path / "b")})
    exp = Experiment(again, resume=False)
    for arm in ("full", "wo_moee"):
        exp.arm(arm)
    for sub in ("stage1", "stage2a-mns", "arms/full", "arms/wo_moee"):
        a = (harness.Path(cfg.out_dir) / sub / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / sub / "metrics.csv").read_bytes()
        assert a == b, sub
    # checkpoint meta echoes out_dir, so compare the tensors
    a, _ = load_model(harness.Path(cfg.out_dir) / "arms/full/model.ckpt")
    b, _ = load_model(tmp_path / "b" / "arms/full/model.ckpt")
    sa, sb = a.state(), b.state()
    assert sa.keys() == sb.keys() and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_resume_reuses_checkpoints_and_rejects_other_configs(tiny_run):
    cfg, _ = tiny_run
    exp = Experiment(cfg, resume=True)
    exp.arm("full")
    assert exp.timings == {}
    other = TrainConfig.from_dict({**cfg.to_dict(), "lam": 0.7})
    with pytest.raises(ContractError, match="different configuration"):
        Experiment(other, resume=True).stage1()


def test_missing_arm_is_reported_as_skipped(tmp_path):
    cfg = _cfg(tmp_path, ablations=["full"])
    report = Experiment(cfg, resume=False).evaluate(["full"])
    assert report.skipped == ["full"] and report.arms == {}


def test_noise_sweep_arm_uses_its_own_expert_stage(tiny_run):
    cfg, report = tiny_run
    root = harness.Path(cfg.out_dir)
    assert "mns_p0.1" in report.arms
    assert (root / "stage2a-mns-p0.1" / "model.ckpt").exists()
    a = (root / "stage2a-mns-p0.1" / "metrics.csv").read_bytes()
    assert a != (root / "stage2a-mns" / "metrics.csv").read_bytes()
    assert cfg.sampler_config(True, 0.1).p_noise == 0.1 and cfg.sampler_config(False, 0.1).p_noise == 0.0


def test_ablation_arms_map_to_routing():
    cfg = TrainConfig(**TINY)
    w = np.eye(6)[2]
    assert harness.routing_for(ablate("full"), w, cfg).index == 2
    assert np.all(harness.routing_for(ablate("wo_gs"), w, cfg).weights == 1 / 6)
