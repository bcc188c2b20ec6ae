"""Training objectives: kernel MMD, feature mixup, supervised contrastive and
cross-entropy losses, and their stage-wise combinations.

All functions take and return torch tensors and are differentiable with
respect to their embedding/logit inputs. Contrastive keys are always treated
as constants (they come from the momentum head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ContractError

SOURCE, TARGET = 0, 1
REAL, MIXED = 0, 1
UNLABELED = -1

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """Kernel used by :func:`mmd_loss`.

    ``rbf_gamma`` is either a positive float or ``"median"``, in which case
    gamma = 1 / (2 * median^2) over pairwise distances of the pooled batch.
    """

    kind: Literal["linear", "rbf"] = "linear"
    rbf_gamma: float | str = "median"

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ContractError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and self.rbf_gamma != "median":
            if isinstance(self.rbf_gamma, str) or not self.rbf_gamma > 0:
                raise ContractError(f"rbf_gamma must be > 0 or 'median', got {self.rbf_gamma!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_mmd: float = 0.5
    lambda_ctr: float = 0.5
    tau: float = 0.5
    alpha: float = 1.0
    m: float = 0.999

    def __post_init__(self):
        if self.lambda_mmd < 0 or self.lambda_ctr < 0:
            raise ContractError("loss weights must be nonnegative")
        if not self.tau > 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")
        if not 0 <= self.m < 1:
            raise ContractError(f"momentum m must lie in [0, 1), got {self.m}")


@dataclass
class LossDiagnostics:
    """Counters for degenerate batches that are handled without raising."""

    anchors_without_positive: int = 0
    empty_contrastive_batches: int = 0
    empty_target_ce: int = 0


@dataclass
class LatentBatch:
    embeddings: Tensor
    labels: Tensor
    domain: Tensor = None
    origin: Tensor = None

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ContractError(f"embeddings must be a non-empty N x d matrix, got {tuple(self.embeddings.shape)}")
        n = self.embeddings.shape[0]
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.domain is None:
            self.domain = torch.full((n,), SOURCE, dtype=torch.long)
        if self.origin is None:
            self.origin = torch.full((n,), REAL, dtype=torch.long)
        self.domain = torch.as_tensor(self.domain, dtype=torch.long)
        self.origin = torch.as_tensor(self.origin, dtype=torch.long)
        for name in ("labels", "domain", "origin"):
            if getattr(self, name).shape != (n,):
                raise ContractError(f"{name} must have length {n}")
        if bool(((self.origin == MIXED) & (self.labels < 0)).any()):
            raise ContractError("mixed entries must carry a label")
        if not bool(torch.isfinite(self.embeddings).all()):
            raise ContractError("embeddings contain non-finite values")

    def __len__(self):
        return self.embeddings.shape[0]

    def labeled(self) -> "LatentBatch":
        keep = self.labels >= 0
        return LatentBatch(self.embeddings[keep], self.labels[keep], self.domain[keep], self.origin[keep])

    @staticmethod
    def concat(*batches: "LatentBatch") -> "LatentBatch":
        return LatentBatch(
            torch.cat([b.embeddings for b in batches]),
            torch.cat([b.labels for b in batches]),
            torch.cat([b.domain for b in batches]),
            torch.cat([b.origin for b in batches]),
        )


def _check_pair(z_src: Tensor, z_trg: Tensor):
    if z_src.ndim != 2 or z_trg.ndim != 2:
        raise ContractError("mmd inputs must be 2-D")
    if z_src.shape[0] < 1 or z_trg.shape[0] < 1:
        raise ContractError("mmd requires non-empty batches")
    if z_src.shape[1] != z_trg.shape[1]:
        raise ContractError(f"dimension mismatch: {z_src.shape[1]} vs {z_trg.shape[1]}")


def median_heuristic_gamma(z_src: Tensor, z_trg: Tensor) -> float:
    with torch.no_grad():
        pooled = torch.cat([z_src, z_trg]).double()
        if pooled.shape[0] < 2:
            return 1.0
        med = torch.pdist(pooled).median().item()
    if not med > 0:
        return 1.0
    return 1.0 / (2.0 * med * med)


def rbf_kernel(x: Tensor, y: Tensor, gamma: float) -> Tensor:
    # explicit differences keep the gradient smooth at zero distance
    sq = (x[:, None, :] - y[None, :, :]).pow(2).sum(-1)
    return torch.exp(-gamma * sq)


def mmd_loss(z_src: Tensor, z_trg: Tensor, kernel: KernelSpec = KernelSpec()) -> Tensor:
    """Squared MMD (biased V-statistic) between two batches of embeddings.

    With the linear kernel this is exactly ``||mean(z_src) - mean(z_trg)||^2``.
    """
    _check_pair(z_src, z_trg)
    if kernel.kind == "linear":
        delta = z_src.mean(0) - z_trg.mean(0)
        return delta.dot(delta)
    gamma = median_heuristic_gamma(z_src, z_trg) if kernel.rbf_gamma == "median" else float(kernel.rbf_gamma)
    k_ss = rbf_kernel(z_src, z_src, gamma).mean()
    k_tt = rbf_kernel(z_trg, z_trg, gamma).mean()
    k_st = rbf_kernel(z_src, z_trg, gamma).mean()
    return (k_ss + k_tt - 2.0 * k_st).clamp_min(0.0)


def mixup_pair(z_i: Tensor, z_j: Tensor, lam) -> Tensor:
    """Convex combination ``lam * z_i + (1 - lam) * z_j``; exact at lam in {0, 1}."""
    lam_t = torch.as_tensor(lam, dtype=z_i.dtype)
    if bool(((lam_t < 0) | (lam_t > 1) | torch.isnan(lam_t)).any()):
        raise ContractError(f"mixup lambda must lie in [0, 1], got {lam}")
    if z_i.shape != z_j.shape:
        raise ContractError(f"shape mismatch: {tuple(z_i.shape)} vs {tuple(z_j.shape)}")
    return torch.lerp(z_j, z_i, lam_t)


def sample_mixup_batch(batch: LatentBatch, alpha: float, rng: np.random.Generator) -> LatentBatch:
    """One mixed entry per labeled anchor, partnered with a random same-class row.

    Partners may come from either domain. An anchor whose class has no other
    member in the batch is paired with itself.
    """
    if not alpha > 0:
        raise ContractError(f"alpha must be > 0, got {alpha}")
    lab = batch.labeled()
    labels = lab.labels.cpu().numpy()
    n = len(labels)
    partners = np.empty(n, dtype=np.int64)
    for i in range(n):
        same = np.flatnonzero(labels == labels[i])
        same = same[same != i]
        partners[i] = rng.choice(same) if same.size else i
    lam = torch.from_numpy(rng.beta(alpha, alpha, size=n)).to(lab.embeddings.dtype)
    z = lab.embeddings
    mixed = mixup_pair(z, z[torch.from_numpy(partners)], lam[:, None])
    return LatentBatch(mixed, lab.labels.clone(), lab.domain.clone(), torch.full((n,), MIXED, dtype=torch.long))


def supervised_contrastive_loss(
    anchors: LatentBatch,
    keys: LatentBatch,
    tau: float,
    exclude_self: bool = True,
    diag: LossDiagnostics | None = None,
) -> Tensor:
    """Positive-set contrastive loss over cosine similarities.

    For anchor i: ``-log(sum_pos exp(s_ij / tau) / sum_k exp(s_ik / tau))``,
    averaged over anchors with at least one positive key. With
    ``exclude_self`` the key in slot i is removed for anchor i from both sums
    (anchor i and key i are the same sample). Keys are detached.
    """
    if not tau > 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    if bool((anchors.labels < 0).any()) or bool((keys.labels < 0).any()):
        raise ContractError("contrastive anchors and keys must all be labeled")
    a = F.normalize(anchors.embeddings, dim=1, eps=COSINE_EPS)
    k = F.normalize(keys.embeddings.detach(), dim=1, eps=COSINE_EPS)
    sims = a @ k.T / tau

    n_a, n_k = sims.shape
    valid = torch.ones(n_a, n_k, dtype=torch.bool)
    if exclude_self:
        d = min(n_a, n_k)
        valid[torch.arange(d), torch.arange(d)] = False
    positive = (anchors.labels[:, None] == keys.labels[None, :]) & valid
    has_pos = positive.any(1)

    n_drop = int((~has_pos).sum())
    if diag is not None:
        diag.anchors_without_positive += n_drop
    if n_drop == n_a:
        if diag is not None:
            diag.empty_contrastive_batches += 1
        return anchors.embeddings.sum() * 0.0

    s = sims[has_pos]
    log_denom = torch.logsumexp(s.masked_fill(~valid[has_pos], -math.inf), dim=1)
    log_num = torch.logsumexp(s.masked_fill(~positive[has_pos], -math.inf), dim=1)
    return (log_denom - log_num).mean()


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = shifted.exp().sum(1).log()
    return (log_z - shifted.gather(1, labels[:, None]).squeeze(1)).mean()


class Stage1Terms(NamedTuple):
    total: Tensor
    mmd: Tensor
    ctr: Tensor


class Stage2Terms(NamedTuple):
    total: Tensor
    ce_src: Tensor
    ce_trg: Tensor


class TotalTerms(NamedTuple):
    total: Tensor
    mmd: Tensor
    ctr: Tensor
    ce_src: Tensor
    ce_trg: Tensor


def stage1_loss(
    z_src: Tensor,
    z_trg: Tensor,
    anchors: LatentBatch,
    keys: LatentBatch,
    weights: LossWeights = LossWeights(),
    kernel: KernelSpec = KernelSpec(),
    exclude_self: bool = True,
    diag: LossDiagnostics | None = None,
) -> Stage1Terms:
    """Representation objective: ``lambda_mmd * L_mmd + lambda_ctr * L_ctr``."""
    mmd = mmd_loss(z_src, z_trg, kernel)
    ctr = supervised_contrastive_loss(anchors, keys, weights.tau, exclude_self, diag)
    return Stage1Terms(weights.lambda_mmd * mmd + weights.lambda_ctr * ctr, mmd, ctr)


def stage2_loss(
    logits_src: Tensor,
    labels_src: Tensor,
    logits_trg: Tensor,
    labels_trg: Tensor,
    diag: LossDiagnostics | None = None,
) -> Stage2Terms:
    """Classification objective: CE on source plus CE on labeled target rows."""
    ce_s = cross_entropy(logits_src, labels_src)
    if logits_trg.shape[0] == 0:
        if diag is not None:
            diag.empty_target_ce += 1
        ce_t = logits_src.sum() * 0.0
    else:
        ce_t = cross_entropy(logits_trg, labels_trg)
    return Stage2Terms(ce_s + ce_t, ce_s, ce_t)


def total_loss(
    z_src: Tensor,
    z_trg: Tensor,
    anchors: LatentBatch,
    keys: LatentBatch,
    logits_src: Tensor,
    labels_src: Tensor,
    logits_trg: Tensor,
    labels_trg: Tensor,
    weights: LossWeights = LossWeights(),
    kernel: KernelSpec = KernelSpec(),
    exclude_self: bool = True,
    diag: LossDiagnostics | None = None,
) -> TotalTerms:
    """Joint objective used by the single-stage ablation."""
    s1 = stage1_loss(z_src, z_trg, anchors, keys, weights, kernel, exclude_self, diag)
    s2 = stage2_loss(logits_src, labels_src, logits_trg, labels_trg, diag)
    return TotalTerms(s1.total + s2.total, s1.mmd, s1.ctr, s2.ce_src, s2.ce_trg)
