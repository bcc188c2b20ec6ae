import csv
import json
import math
import numpy as np
import pytest
import torch

from mossda.datapipe import DomainShift, SyntheticSpec, apply_unlabeled_ratio, generate_synthetic
from mossda.errors import ConfigError, TrainingAborted
from mossda.trainer import (
    DIAGNOSTIC_COLUMNS,
    TrainConfig,
    TrainingData,
    build_model,
    train_joint,
    run_ablation,
    run_experiment,
    train,
    train_stage1,
    train_stage2,
    write_ablation_table,
)


def small_data(seed=0, **kw):
    spec = SyntheticSpec(n_per_class=12, seq_len=32, seed=seed, **kw)
    return generate_synthetic(spec)


def small_config(**kw):
    base = dict(feature_dim=16, proj_dim=8, B=16, epochs_stage1=2, epochs_stage2=2, u=0.75)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    src, trg = small_data()
    cfg = small_config()
    return TrainingData(src, trg, apply_unlabeled_ratio(trg, cfg.u, 0))


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.tau, cfg.m, cfg.alpha, cfg.lambda_mmd, cfg.lambda_ctr) == (0.5, 0.999, 1.0, 0.5, 0.5)
        assert (cfg.u, cfg.B, cfg.epochs_stage1, cfg.epochs_stage2) == (0.9, 32, 40, 40)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"temperature": 0.1})

    @pytest.mark.parametrize("bad", [{"u": 1.5}, {"u": 0.0}, {"tau": 0.0}, {"m": 1.0}, {"mode": "x"}, {"B": 1}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)

    def test_ablation_weights(self):
        assert TrainConfig(mode="no_mmd").weights.lambda_mmd == 0.0
        assert TrainConfig(mode="no_ctr").weights.lambda_ctr == 0.0
        assert not TrainConfig(mode="no_mixup").use_mixup
        assert TrainConfig().use_mixup

    def test_hash_changes_with_content(self):
        assert TrainConfig().config_hash() == TrainConfig().config_hash()
        assert TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()


class TestStages:
    def test_zero_epochs_is_noop(self, data):
        cfg = small_config(epochs_stage1=0)
        model = build_model(cfg, data.src)
        before = snapshot(model)
        train_stage1(model, data, cfg)
        assert same(before, snapshot(model)) and model.step == 0

    def test_stage1_leaves_classifier(self, data):
        cfg = small_config()
        model = build_model(cfg, data.src)
        clf, bb = snapshot(model.classifier), snapshot(model.backbone)
        history = []
        train_stage1(model, data, cfg, history)
        assert same(clf, snapshot(model.classifier))
        assert not same(bb, snapshot(model.backbone))
        assert all(r.stage == "stage1" and r.grad_classifier == 0.0 for r in history)

    def test_stage2_leaves_encoder(self, data):
        cfg = small_config()
        model = build_model(cfg, data.src)
        train_stage1(model, data, cfg)
        enc = [snapshot(model.backbone), snapshot(model.heads)]
        clf = snapshot(model.classifier)
        train_stage2(model, data, cfg)
        assert same(enc[0], snapshot(model.backbone)) and same(enc[1], snapshot(model.heads))
        assert not same(clf, snapshot(model.classifier))

    def test_momentum_head_frozen_without_ema(self, data):
        cfg = small_config(ema=False)
        model = build_model(cfg, data.src)
        before = snapshot(model.heads.momentum)
        train_stage1(model, data, cfg)
        assert same(before, snapshot(model.heads.momentum))

    def test_momentum_head_moves_with_ema(self, data):
        cfg = small_config(m=0.9)
        model = build_model(cfg, data.src)
        before = snapshot(model.heads.momentum)
        train_stage1(model, data, cfg)
        assert not same(before, snapshot(model.heads.momentum))

    def test_joint_updates_everything(self, data):
        cfg = small_config(mode="joint")
        model = build_model(cfg, data.src)
        bb, clf = snapshot(model.backbone), snapshot(model.classifier)
        history = []
        train_joint(model, data, cfg, history)
        assert not same(bb, snapshot(model.backbone)) and not same(clf, snapshot(model.classifier))
        row = history[-1]
        assert row.L_mmd > 0 and row.L_ctr > 0 and row.L_ce_s > 0 and row.L_ce_t > 0
        assert len({r.epoch for r in history}) == cfg.epochs_stage1 + cfg.epochs_stage2

    def test_joint_with_zero_lambdas_is_plain_ce(self, data):
        cfg = small_config(mode="joint", lambda_mmd=0.0, lambda_ctr=0.0)
        history = []
        train(cfg, data, history)
        for r in history:
            assert math.isclose(r.loss, r.L_ce_s + r.L_ce_t, rel_tol=1e-5, abs_tol=1e-6)

    def test_no_mmd_still_logs_mmd(self, data):
        history = []
        train(small_config(mode="no_mmd"), data, history)
        stage1 = [r for r in history if r.stage == "stage1"]
        assert all(r.L_mmd > 0 for r in stage1)
        assert all(math.isclose(r.loss, 0.5 * r.L_ctr, rel_tol=1e-5) for r in stage1)

    def test_stage2_loss_decreases(self, data):
        cfg = small_config(epochs_stage1=1, epochs_stage2=30, lr=1e-2)
        history = []
        train(cfg, data, history)
        ce = [r.loss for r in history if r.stage == "stage2"]
        assert np.mean(ce[-5:]) < np.mean(ce[:5])

    def test_mmd_trends_down_without_shift(self):
        same_shift = DomainShift(1.0, 0.0, 0.3)
        src, trg = small_data(source=same_shift, target=same_shift)
        cfg = small_config(epochs_stage1=8, epochs_stage2=0, lambda_ctr=0.0, mode="no_ctr")
        data = TrainingData(src, trg, apply_unlabeled_ratio(trg, cfg.u, 0))
        history = []
        train(cfg, data, history)
        mmd = np.array([r.L_mmd for r in history])
        k = len(mmd) // 4
        assert mmd[-k:].mean() < mmd[:k].mean()

    def test_nan_aborts_with_snapshot(self, data):
        cfg = small_config(lr=1e30, optimizer="sgd")
        with pytest.raises(TrainingAborted) as info:
            train(cfg, data)
        assert info.value.snapshot and "non-finite" in str(info.value)


class TestRunExperiment:
    def test_outputs_and_determinism(self, tmp_path):
        src, trg = small_data()
        cfg = small_config()
        r1 = run_experiment(cfg, src, trg, tmp_path / "a")
        run_experiment(cfg, src, trg, tmp_path / "b")
        a = (tmp_path / "a" / "metrics.json").read_bytes()
        assert a == (tmp_path / "b" / "metrics.json").read_bytes()
        for name in ("diagnostics.csv", "checkpoint", "features_test.f32", "features_manifest.json", "run_manifest.json"):
            assert (tmp_path / "a" / name).exists()
        metrics = json.loads(a)
        assert metrics["accuracy"] == r1.accuracy
        assert metrics["objective"].startswith("stage1")
        assert "source_only" in metrics and "margin_accuracy" in metrics
        assert "wall_time" not in a.decode()
        manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
        assert manifest["outcome"] == "success" and manifest["config"]["tau"] == 0.5
        with open(tmp_path / "a" / "diagnostics.csv") as fh:
            assert tuple(next(csv.reader(fh))) == DIAGNOSTIC_COLUMNS

    def test_failure_writes_manifest(self, tmp_path):
        src, trg = small_data()
        with pytest.raises(TrainingAborted):
            run_experiment(small_config(lr=1e30, optimizer="sgd"), src, trg, tmp_path)
        manifest = json.loads((tmp_path / "run_manifest.json").read_text())
        assert manifest["outcome"] == "failed" and manifest["diagnostics_snapshot"]
        assert not (tmp_path / "metrics.json").exists()

    def test_shape_mismatch(self, tmp_path):
        src, _ = small_data()
        _, trg = generate_synthetic(SyntheticSpec(n_per_class=12, seq_len=40))
        with pytest.raises(ConfigError, match="disagree"):
            run_experiment(small_config(), src, trg, tmp_path)


def test_ablation_table(tmp_path):
    src, trg = small_data()
    cfg = small_config(epochs_stage1=1, epochs_stage2=1)
    rows = run_ablation(cfg, src, trg, tmp_path, seeds=(0,))
    assert [r["label"] for r in rows] == [
        "Proposed", "w/o mmd loss", "w/o ctr loss", "w/o phase1 mix", "w/o 2-stage learning"
    ]
    assert rows[0]["diff_accuracy"] == 0.0 and rows[0]["diff_macro_f1"] == 0.0
    assert all(r["status"] == "ok" for r in rows)
    write_ablation_table(rows, tmp_path)
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5
