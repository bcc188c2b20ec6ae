"""Classification metrics, multi-scenario aggregation and feature export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import AggregationError, ContractError

FEATURES_FILE = "features_test.f32"
FEATURES_MANIFEST = "features_manifest.json"
SUMMARY_COLUMNS = ("dataset", "u", "backbone", "mode", "n", "mean_acc", "std_acc", "mean_f1", "std_f1")


def _as_labels(pred, truth):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ContractError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ContractError("need at least one prediction")
    return pred, truth


def accuracy(pred, truth) -> float:
    pred, truth = _as_labels(pred, truth)
    return float(np.count_nonzero(pred == truth)) / pred.size


def confusion_matrix(pred, truth, C: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    pred, truth = _as_labels(pred, truth)
    if min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= C:
        raise ContractError(f"labels must lie in [0, {C})")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def per_class_scores(cm: np.ndarray):
    """Precision, recall and F1 per class; 0 wherever a denominator vanishes."""
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(pred, truth, C: int) -> float:
    _, _, f1 = per_class_scores(confusion_matrix(pred, truth, C))
    return float(math.fsum(f1) / C)


@dataclass
class ScenarioResult:
    scenario: str
    dataset: str
    u: float
    backbone: str
    mode: str
    accuracy: float
    macro_f1: float
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    f1: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_dict(self):
        return asdict(self)


def score(pred, truth, C: int) -> dict:
    """All metric fields of a :class:`ScenarioResult` for one prediction vector."""
    cm = confusion_matrix(pred, truth, C)
    p, r, f1 = per_class_scores(cm)
    return {
        "accuracy": float(np.trace(cm)) / cm.sum(),
        "macro_f1": float(math.fsum(f1) / C),
        "precision": p.tolist(),
        "recall": r.tolist(),
        "f1": f1.tolist(),
        "confusion": cm.tolist(),
    }


def _mean_std(values):
    # fsum keeps the result independent of input order
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def aggregate_scenarios(results) -> list[dict]:
    """Mean/std of accuracy and macro-F1 per (dataset, u, backbone, mode)."""
    results = list(results)
    if not results:
        raise AggregationError("no results to aggregate")
    groups: dict[tuple, list] = {}
    for r in results:
        groups.setdefault((r.dataset, r.u, r.backbone, r.mode), []).append(r)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        mean_acc, std_acc = _mean_std([r.accuracy for r in members])
        mean_f1, std_f1 = _mean_std([r.macro_f1 for r in members])
        rows.append(dict(zip(SUMMARY_COLUMNS, (*key, len(members), mean_acc, std_acc, mean_f1, std_f1))))
    return rows


def write_summary_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def mean_rank(scores: dict[str, list[float]]) -> dict[str, float]:
    """Average rank per method over columns; rank 1 is best, ties share the mean rank."""
    methods = list(scores)
    table = np.array([scores[m] for m in methods], dtype=np.float64)
    ranks = np.zeros_like(table)
    for j in range(table.shape[1]):
        col = -table[:, j]
        order = col.argsort(kind="stable")
        r = np.empty(len(col))
        r[order] = np.arange(1, len(col) + 1)
        for v in np.unique(col):
            tied = col == v
            r[tied] = r[tied].mean()
        ranks[:, j] = r
    return {m: float(ranks[i].mean()) for i, m in enumerate(methods)}


@torch.no_grad()
def extract_features(model, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Backbone features of normalized inputs, eval mode, as float32."""
    from .encoders import forward_features

    was_training = model.training
    model.eval()
    out = [forward_features(model, torch.from_numpy(X[i : i + chunk])) for i in range(0, len(X), chunk)]
    model.train(was_training)
    if not out:
        return np.zeros((0, model.spec.feature_dim), dtype=np.float32)
    return torch.cat(out).numpy().astype(np.float32)


def export_features(model, dataset, out_dir) -> Path:
    """Write target-test features plus a JSON manifest holding shape and labels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats = extract_features(model, dataset.test_norm)
    feats.astype("<f4").tofile(out_dir / FEATURES_FILE)
    manifest = {
        "format_version": 1,
        "dataset": dataset.name,
        "n": int(feats.shape[0]),
        "feature_dim": int(feats.shape[1]),
        "dtype": "float32-le",
        "labels": dataset.y_test.tolist(),
    }
    (out_dir / FEATURES_MANIFEST).write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return out_dir / FEATURES_FILE


def load_features(out_dir):
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / FEATURES_MANIFEST).read_text())
    feats = np.fromfile(out_dir / FEATURES_FILE, dtype="<f4")
    feats = feats.reshape(manifest["n"], manifest["feature_dim"])
    return feats, np.asarray(manifest["labels"], dtype=np.int64)
