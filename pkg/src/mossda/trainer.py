"""Decoupled two-stage training, the joint ablation, the source-only control,
and the experiment runner that writes metrics, diagnostics and checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .datapipe import DomainDataset, TargetPartition, apply_unlabeled_ratio, load_dataset, make_batches
from .encoders import (
    BackboneSpec,
    MoSSDAModel,
    classify,
    ema_update,
    forward_features,
    project_momentum,
    project_online,
    save_checkpoint,
)
from .errors import ConfigError, ContractError, TrainingAborted
from .eval import ScenarioResult, export_features, extract_features, score
from .losses import (
    SOURCE,
    TARGET,
    KernelSpec,
    LatentBatch,
    LossDiagnostics,
    LossWeights,
    cross_entropy,
    sample_mixup_batch,
    stage1_loss,
    stage2_loss,
    total_loss,
)

log = logging.getLogger(__name__)

MODES = ("two_stage", "joint", "no_mmd", "no_ctr", "no_mixup", "source_only")
ABLATION_ORDER = ("two_stage", "no_mmd", "no_ctr", "no_mixup", "joint")
OBJECTIVES = {
    "two_stage": "stage1: lambda_mmd*L_mmd + lambda_ctr*L_ctr (with mixup keys); stage2: L_ce_s + L_ce_t",
    "no_mmd": "stage1: lambda_ctr*L_ctr (with mixup keys); stage2: L_ce_s + L_ce_t",
    "no_ctr": "stage1: lambda_mmd*L_mmd; stage2: L_ce_s + L_ce_t",
    "no_mixup": "stage1: lambda_mmd*L_mmd + lambda_ctr*L_ctr (no mixup keys); stage2: L_ce_s + L_ce_t",
    "joint": "joint: lambda_mmd*L_mmd + lambda_ctr*L_ctr + L_ce_s + L_ce_t",
    "source_only": "source only: L_ce_s",
}


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of one run. Loss hyperparameter names follow the usual
    notation: tau, m, alpha, lambda_mmd, lambda_ctr, u, B."""

    backbone: str = "cnn"
    feature_dim: int = 128
    proj_dim: int = 128
    tau: float = 0.5
    m: float = 0.999
    alpha: float = 1.0
    lambda_mmd: float = 0.5
    lambda_ctr: float = 0.5
    kernel: str = "linear"
    rbf_gamma: float | str = "median"
    u: float = 0.9
    B: int = 32
    epochs_stage1: int = 40
    epochs_stage2: int = 40
    lr: float = 1e-3
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    mode: str = "two_stage"
    seed: int = 0
    source_only_control: bool = True
    ema: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0 < self.u < 1:
            raise ConfigError(f"u must lie in (0, 1), got {self.u}")
        if self.B < 2:
            raise ConfigError(f"B must be >= 2, got {self.B}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        # surfaces invalid tau/m/alpha/kernel early
        self.weights
        self.kernel_spec

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def weights(self) -> LossWeights:
        lam_mmd = 0.0 if self.mode == "no_mmd" else self.lambda_mmd
        lam_ctr = 0.0 if self.mode == "no_ctr" else self.lambda_ctr
        try:
            return LossWeights(lam_mmd, lam_ctr, self.tau, self.alpha, self.m)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def kernel_spec(self) -> KernelSpec:
        try:
            return KernelSpec(self.kernel, self.rbf_gamma)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def use_mixup(self) -> bool:
        return self.mode not in ("no_mixup", "no_ctr")

    @property
    def objective(self) -> str:
        return OBJECTIVES[self.mode]

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StepDiagnostics:
    stage: str
    epoch: int
    step: int
    loss: float
    L_mmd: float = 0.0
    L_ctr: float = 0.0
    L_ce_s: float = 0.0
    L_ce_t: float = 0.0
    no_positive: int = 0
    grad_backbone: float = 0.0
    grad_head: float = 0.0
    grad_classifier: float = 0.0


DIAGNOSTIC_COLUMNS = tuple(f.name for f in fields(StepDiagnostics))


@dataclass
class TrainingData:
    src: DomainDataset
    trg: DomainDataset
    part: TargetPartition


def _make_optimizer(params, config: TrainConfig):
    params = list(params)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=0.9, weight_decay=config.weight_decay)
    return torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), weight_decay=config.weight_decay)


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def _seeds(config: TrainConfig, stage: str) -> tuple[int, np.random.Generator]:
    """Batch-order seed and mixup generator for one stage, derived from config.seed."""
    salt = {"stage1": 1, "stage2": 2, "joint": 3, "source_only": 4}[stage]
    ss = np.random.SeedSequence([config.seed, salt])
    batch_seed, mix_seed = ss.generate_state(2)
    return int(batch_seed), np.random.default_rng(int(mix_seed))


def _check_finite(row: StepDiagnostics, history: list):
    if not all(math.isfinite(getattr(row, k)) for k in ("loss", "L_mmd", "L_ctr", "L_ce_s", "L_ce_t")):
        raise TrainingAborted(f"non-finite loss at {row.stage} step {row.step}", history[-20:] + [row])


def _check_features(stage, step, history, *zs):
    if not all(bool(torch.isfinite(z).all()) for z in zs):
        raise TrainingAborted(f"non-finite features at {stage} step {step}", history[-20:])


def _contrastive_sets(model, z_src, z_trg_lab, y_src, y_trg, config, rng):
    """Online anchors and momentum keys (plus mixup keys) for the labeled rows."""
    z_lab = torch.cat([z_src, z_trg_lab])
    labels = torch.cat([y_src, y_trg])
    domain = torch.cat([torch.full_like(y_src, SOURCE), torch.full_like(y_trg, TARGET)])
    anchors = LatentBatch(project_online(model, z_lab), labels, domain)
    keys = LatentBatch(project_momentum(model, z_lab), labels, domain)
    if config.use_mixup:
        keys = LatentBatch.concat(keys, sample_mixup_batch(keys, config.alpha, rng))
    return anchors, keys


def _encode_batch(model, batch):
    # separate calls: each domain is batch-normalized with its own statistics
    z_s = forward_features(model, torch.from_numpy(batch.src_X))
    xt = np.concatenate([batch.trg_lab_X, batch.trg_unl_X])
    z_t = forward_features(model, torch.from_numpy(xt))
    return z_s, z_t, z_t[: len(batch.trg_lab_y)]


def train_stage1(model: MoSSDAModel, data: TrainingData, config: TrainConfig, history: list | None = None):
    """Shape the feature space with MMD + contrastive loss; classifier untouched."""
    history = [] if history is None else history
    if config.epochs_stage1 == 0:
        return model
    batch_seed, rng = _seeds(config, "stage1")
    batches = make_batches(data.src, data.trg, data.part, config.B, batch_seed)
    params = model.encoder_parameters()
    opt = _make_optimizer(params, config)
    weights, kernel = config.weights, config.kernel_spec
    model.train()
    for epoch in range(config.epochs_stage1):
        for batch in batches:
            diag = LossDiagnostics()
            z_s, z_t, z_tl = _encode_batch(model, batch)
            _check_features("stage1", model.step, history, z_s, z_t)
            y_s, y_t = torch.from_numpy(batch.src_y), torch.from_numpy(batch.trg_lab_y)
            anchors, keys = _contrastive_sets(model, z_s, z_tl, y_s, y_t, config, rng)
            terms = stage1_loss(z_s, z_t, anchors, keys, weights, kernel, diag=diag)
            row = StepDiagnostics(
                "stage1", epoch, model.step, terms.total.item(), terms.mmd.item(), terms.ctr.item(),
                no_positive=diag.anchors_without_positive,
            )
            _check_finite(row, history)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            row.grad_backbone = _grad_norm(model.backbone.parameters())
            row.grad_head = _grad_norm(model.heads.online.parameters())
            opt.step()
            if config.ema:
                ema_update(model.heads, weights.m)
            model.step += 1
            history.append(row)
    return model


def train_stage2(model: MoSSDAModel, data: TrainingData, config: TrainConfig, history: list | None = None):
    """Fit the linear classifier on frozen eval-mode backbone features."""
    history = [] if history is None else history
    if config.epochs_stage2 == 0:
        return model
    batch_seed, _ = _seeds(config, "stage2")
    batches = make_batches(data.src, data.trg, data.part, config.B, batch_seed)
    # the backbone is frozen, so every feature vector is fixed for the whole stage
    feats_src = torch.from_numpy(extract_features(model, data.src.train_norm))
    feats_trg = torch.from_numpy(extract_features(model, data.trg.train_norm))
    model.eval()
    opt = _make_optimizer(model.classifier.parameters(), config)
    for epoch in range(config.epochs_stage2):
        for batch in batches:
            diag = LossDiagnostics()
            y_s, y_t = torch.from_numpy(batch.src_y), torch.from_numpy(batch.trg_lab_y)
            logits_s = classify(model, feats_src[torch.from_numpy(batch.src_idx)])
            logits_t = classify(model, feats_trg[torch.from_numpy(batch.trg_lab_idx)])
            terms = stage2_loss(logits_s, y_s, logits_t, y_t, diag)
            row = StepDiagnostics("stage2", epoch, model.step, terms.total.item(),
                                  L_ce_s=terms.ce_src.item(), L_ce_t=terms.ce_trg.item())
            _check_finite(row, history)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            row.grad_classifier = _grad_norm(model.classifier.parameters())
            opt.step()
            model.step += 1
            history.append(row)
    return model


def train_joint(model: MoSSDAModel, data: TrainingData, config: TrainConfig, history: list | None = None):
    """Single loop on the full objective; backbone, online head and classifier
    all receive gradients. Runs ``epochs_stage1 + epochs_stage2`` epochs."""
    history = [] if history is None else history
    epochs = config.epochs_stage1 + config.epochs_stage2
    if epochs == 0:
        return model
    batch_seed, rng = _seeds(config, "joint")
    batches = make_batches(data.src, data.trg, data.part, config.B, batch_seed)
    params = [*model.encoder_parameters(), *model.classifier.parameters()]
    opt = _make_optimizer(params, config)
    weights, kernel = config.weights, config.kernel_spec
    model.train()
    for epoch in range(epochs):
        for batch in batches:
            diag = LossDiagnostics()
            z_s, z_t, z_tl = _encode_batch(model, batch)
            _check_features("joint", model.step, history, z_s, z_t)
            y_s, y_t = torch.from_numpy(batch.src_y), torch.from_numpy(batch.trg_lab_y)
            anchors, keys = _contrastive_sets(model, z_s, z_tl, y_s, y_t, config, rng)
            terms = total_loss(z_s, z_t, anchors, keys, classify(model, z_s), y_s,
                               classify(model, z_tl), y_t, weights, kernel, diag=diag)
            row = StepDiagnostics(
                "joint", epoch, model.step, terms.total.item(), terms.mmd.item(), terms.ctr.item(),
                terms.ce_src.item(), terms.ce_trg.item(), diag.anchors_without_positive,
            )
            _check_finite(row, history)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            row.grad_backbone = _grad_norm(model.backbone.parameters())
            row.grad_head = _grad_norm(model.heads.online.parameters())
            row.grad_classifier = _grad_norm(model.classifier.parameters())
            opt.step()
            if config.ema:
                ema_update(model.heads, weights.m)
            model.step += 1
            history.append(row)
    return model


def train_source_only(model: MoSSDAModel, data: TrainingData, config: TrainConfig, history: list | None = None):
    """Control: backbone + classifier trained on labeled source rows only."""
    history = [] if history is None else history
    epochs = config.epochs_stage1 + config.epochs_stage2
    batch_seed, _ = _seeds(config, "source_only")
    batches = make_batches(data.src, data.trg, data.part, config.B, batch_seed)
    params = [*model.backbone.parameters(), *model.classifier.parameters()]
    opt = _make_optimizer(params, config)
    model.train()
    for epoch in range(epochs):
        for batch in batches:
            y_s = torch.from_numpy(batch.src_y)
            loss = cross_entropy(classify(model, forward_features(model, torch.from_numpy(batch.src_X))), y_s)
            row = StepDiagnostics("source_only", epoch, model.step, loss.item(), L_ce_s=loss.item())
            _check_finite(row, history)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            row.grad_backbone = _grad_norm(model.backbone.parameters())
            row.grad_classifier = _grad_norm(model.classifier.parameters())
            opt.step()
            model.step += 1
            history.append(row)
    return model


def build_model(config: TrainConfig, ds: DomainDataset) -> MoSSDAModel:
    spec = BackboneSpec(config.backbone, ds.D, ds.T, config.feature_dim)
    return MoSSDAModel(spec, ds.C, config.proj_dim, config.seed)


def train(config: TrainConfig, data: TrainingData, history: list | None = None) -> MoSSDAModel:
    """Build a model and run the schedule selected by ``config.mode``."""
    model = build_model(config, data.src)
    if config.mode == "joint":
        return train_joint(model, data, config, history)
    if config.mode == "source_only":
        return train_source_only(model, data, config, history)
    train_stage1(model, data, config, history)
    return train_stage2(model, data, config, history)


@torch.no_grad()
def predict(model: MoSSDAModel, X: np.ndarray) -> np.ndarray:
    feats = torch.from_numpy(extract_features(model, X))
    return classify(model, feats).argmax(1).numpy()


def evaluate(model: MoSSDAModel, ds: DomainDataset) -> dict:
    return score(predict(model, ds.test_norm), ds.y_test, ds.C)


def _check_compatible(src: DomainDataset, trg: DomainDataset):
    if (src.D, src.T, src.C) != (trg.D, trg.T, trg.C):
        raise ConfigError(
            f"source (D={src.D}, T={src.T}, C={src.C}) and target (D={trg.D}, T={trg.T}, C={trg.C}) disagree"
        )


def _dataset_key(src: DomainDataset, trg: DomainDataset) -> str:
    a, b = src.name, trg.name
    prefix = a.split("-")[0]
    return prefix if b.startswith(prefix) else f"{a}|{b}"


def write_diagnostics(history, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIAGNOSTIC_COLUMNS)
        for row in history:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])
    return path


def _hash_inputs(*datasets: DomainDataset) -> str:
    h = hashlib.sha256()
    for ds in datasets:
        for arr in (ds.X_train, ds.y_train, ds.X_test, ds.y_test):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def run_experiment(config: TrainConfig, src, trg, out_dir, config_path=None) -> ScenarioResult:
    """Load, partition, train, evaluate on the target test split and write
    ``metrics.json``, ``diagnostics.csv``, ``checkpoint``, the feature export
    and ``run_manifest.json`` into ``out_dir``.

    ``src``/``trg`` are dataset directories or in-memory datasets.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    manifest = {
        "config_path": str(config_path) if config_path else None,
        "config": config.to_dict(),
        "objective": config.objective,
        "seed": config.seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "package_version": __version__,
        "torch_version": torch.__version__,
        "platform": platform.platform(),
    }
    history: list[StepDiagnostics] = []
    try:
        src_ds = src if isinstance(src, DomainDataset) else load_dataset(src)
        trg_ds = trg if isinstance(trg, DomainDataset) else load_dataset(trg)
        manifest["source"] = str(src) if not isinstance(src, DomainDataset) else src.name
        manifest["target"] = str(trg) if not isinstance(trg, DomainDataset) else trg.name
        manifest["input_hash"] = _hash_inputs(src_ds, trg_ds)
        _check_compatible(src_ds, trg_ds)
        part = apply_unlabeled_ratio(trg_ds, config.u, config.seed)
        data = TrainingData(src_ds, trg_ds, part)

        model = train(config, data, history)
        metrics = evaluate(model, trg_ds)
        result = ScenarioResult(
            scenario=f"{src_ds.name}->{trg_ds.name}",
            dataset=_dataset_key(src_ds, trg_ds),
            u=config.u,
            backbone=config.backbone,
            mode=config.mode,
            seed=config.seed,
            config_hash=config.config_hash(),
            **metrics,
        )
        payload = {
            **result.to_dict(),
            "config": config.to_dict(),
            "objective": config.objective,
            "n_labeled_target": part.n_labeled,
            "n_unlabeled_target": part.n_unlabeled,
            "steps": model.step,
        }
        if config.source_only_control and config.mode != "source_only":
            control_cfg = replace(config, mode="source_only")
            control = train(control_cfg, data)
            ctrl = evaluate(control, trg_ds)
            payload["source_only"] = {"accuracy": ctrl["accuracy"], "macro_f1": ctrl["macro_f1"]}
            payload["margin_accuracy"] = result.accuracy - ctrl["accuracy"]

        (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        write_diagnostics(history, out_dir / "diagnostics.csv")
        save_checkpoint(model, out_dir / "checkpoint")
        export_features(model, trg_ds, out_dir)
        manifest["outcome"] = "success"
        return result
    except Exception as exc:
        manifest["outcome"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        if history:
            write_diagnostics(history, out_dir / "diagnostics.csv")
        if isinstance(exc, TrainingAborted):
            manifest["diagnostics_snapshot"] = [asdict(r) for r in exc.snapshot]
        raise
    finally:
        manifest["wall_time_s"] = round(time.time() - started, 3)
        (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


ABLATION_ROWS = {
    # mode: (label, uses L_mmd, uses L_ctr, uses mixup, two-stage)
    "two_stage": ("Proposed", True, True, True, True),
    "no_mmd": ("w/o mmd loss", False, True, True, True),
    "no_ctr": ("w/o ctr loss", True, False, False, True),
    "no_mixup": ("w/o phase1 mix", True, True, False, True),
    "joint": ("w/o 2-stage learning", True, True, True, False),
}


def run_ablation(config: TrainConfig, src, trg, out_dir, seeds=(0,)) -> list[dict]:
    """Proposed method plus the four ablations, same data and seeds.

    Returns five rows in fixed order; ``diff_*`` is proposed minus row, so a
    positive value is a drop. A mode that fails keeps its row with
    ``status = "failed"``.
    """
    out_dir = Path(out_dir)
    src_ds = src if isinstance(src, DomainDataset) else load_dataset(src)
    trg_ds = trg if isinstance(trg, DomainDataset) else load_dataset(trg)
    rows = []
    for mode in ABLATION_ORDER:
        label, use_mmd, use_ctr, use_mix, two_step = ABLATION_ROWS[mode]
        row = {"mode": mode, "label": label, "mmd": use_mmd, "ctr": use_ctr, "mixup": use_mix, "two_step": two_step}
        try:
            results = [
                run_experiment(replace(config, mode=mode, seed=s, source_only_control=False), src_ds, trg_ds,
                               out_dir / mode / f"seed_{s}")
                for s in seeds
            ]
            row.update(
                status="ok",
                seeds=list(seeds),
                accuracy=math.fsum(r.accuracy for r in results) / len(results),
                macro_f1=math.fsum(r.macro_f1 for r in results) / len(results),
                per_seed_accuracy=[r.accuracy for r in results],
                per_seed_f1=[r.macro_f1 for r in results],
            )
        except Exception as exc:  # keep completed rows
            log.error("ablation mode %s failed: %s", mode, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}", accuracy=None, macro_f1=None)
        rows.append(row)
    base = rows[0]
    for row in rows:
        for key in ("accuracy", "macro_f1"):
            ok = base[key] is not None and row[key] is not None
            row[f"diff_{key}"] = base[key] - row[key] if ok else None
    return rows


def write_ablation_table(rows, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    cols = ("label", "mmd", "ctr", "mixup", "two_step", "accuracy", "diff_accuracy", "macro_f1", "diff_macro_f1", "status")
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path
