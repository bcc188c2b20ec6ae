"""Backbones, online/momentum projection heads, linear classifier, checkpoints.

Input time series are batches shaped ``(B, D, T)``. Every backbone maps them
to ``(B, feature_dim)``.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ContractError

CHECKPOINT_MAGIC = b"MOSSDACK"
CHECKPOINT_VERSION = 1

CNN_KERNELS = (8, 5, 3)
RESNET_CHANNELS = (64, 128, 256, 512)
TCN_CHANNELS = 64
TCN_KERNEL = 3


@dataclass(frozen=True)
class BackboneSpec:
    kind: Literal["cnn", "resnet18", "tcn"] = "cnn"
    in_channels: int = 1
    seq_len: int = 64
    feature_dim: int = 128

    def __post_init__(self):
        if self.kind not in ("cnn", "resnet18", "tcn"):
            raise ConfigError(f"unknown backbone {self.kind!r}")
        for name in ("in_channels", "seq_len", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        reduction = {"cnn": 8, "resnet18": 32, "tcn": 1}[self.kind]
        if self.seq_len < reduction:
            raise ConfigError(
                f"{self.kind} downsamples time by {reduction}; seq_len={self.seq_len} is too short"
            )


class SameConv1d(nn.Conv1d):
    """Stride-1 convolution with 'same' output length, also for even kernels."""

    def __init__(self, in_channels, out_channels, kernel_size):
        super().__init__(in_channels, out_channels, kernel_size, padding=0)

    def forward(self, x):
        k = self.kernel_size[0]
        return super().forward(F.pad(x, ((k - 1) // 2, k // 2)))


class CausalConv1d(nn.Conv1d):
    """Left-padded dilated convolution: output at t sees inputs at <= t only."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation):
        super().__init__(in_channels, out_channels, kernel_size, dilation=dilation, padding=0)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class CNNBackbone(nn.Module):
    def __init__(self, in_channels: int, feature_dim: int):
        super().__init__()
        widths = (64, 128, feature_dim)
        blocks = []
        c_in = in_channels
        for k, c_out in zip(CNN_KERNELS, widths):
            blocks += [SameConv1d(c_in, c_out, k), nn.BatchNorm1d(c_out), nn.ReLU(), nn.MaxPool1d(2)]
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x).mean(-1)


class BasicBlock1d(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm1d(c_out)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv1d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm1d(c_out)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18Backbone(nn.Module):
    def __init__(self, in_channels: int, feature_dim: int):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv1d(in_channels, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm1d(64),
            nn.ReLU(),
            nn.MaxPool1d(3, stride=2, padding=1),
        )
        stages = []
        c_in = 64
        for i, c_out in enumerate(RESNET_CHANNELS):
            stride = 1 if i == 0 else 2
            stages += [BasicBlock1d(c_in, c_out, stride), BasicBlock1d(c_out, c_out, 1)]
            c_in = c_out
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(RESNET_CHANNELS[-1], feature_dim)

    def forward(self, x):
        return self.fc(self.stages(self.stem(x)).mean(-1))


def tcn_levels(seq_len: int, kernel_size: int = TCN_KERNEL) -> int:
    """Smallest number of residual blocks whose receptive field covers seq_len.

    Each block holds two causal convolutions with dilation 2**level, giving a
    receptive field of ``1 + 2 (k - 1) (2**L - 1)``.
    """
    levels = 1
    while 1 + 2 * (kernel_size - 1) * (2**levels - 1) < seq_len:
        levels += 1
    return levels


class TemporalBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, dilation):
        super().__init__()
        self.conv1 = CausalConv1d(c_in, c_out, kernel_size, dilation)
        self.conv2 = CausalConv1d(c_out, c_out, kernel_size, dilation)
        self.downsample = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        return F.relu(out + self.downsample(x))


class TCNBackbone(nn.Module):
    def __init__(self, in_channels: int, feature_dim: int, seq_len: int):
        super().__init__()
        self.levels = tcn_levels(seq_len)
        blocks = []
        c_in = in_channels
        for level in range(self.levels):
            blocks.append(TemporalBlock(c_in, TCN_CHANNELS, TCN_KERNEL, 2**level))
            c_in = TCN_CHANNELS
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(TCN_CHANNELS, feature_dim)

    def temporal_features(self, x):
        """Activations before pooling, shape ``(B, 64, T)``."""
        return self.blocks(x)

    def forward(self, x):
        return self.fc(self.temporal_features(x).mean(-1))

    @property
    def receptive_field(self):
        return 1 + 2 * (TCN_KERNEL - 1) * (2**self.levels - 1)


def build_backbone(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Construct backbone ``f``; parameters depend only on ``spec`` and ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.kind == "cnn":
            return CNNBackbone(spec.in_channels, spec.feature_dim)
        if spec.kind == "resnet18":
            return ResNet18Backbone(spec.in_channels, spec.feature_dim)
        return TCNBackbone(spec.in_channels, spec.feature_dim, spec.seq_len)


def _mlp_head(in_dim, hidden_dim, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))


class ProjectionHeads(nn.Module):
    """Online head (trained by backprop) and its momentum twin (EMA only)."""

    def __init__(self, feature_dim: int, proj_dim: int, hidden_dim: int | None = None):
        super().__init__()
        self.proj_dim = proj_dim
        self.online = _mlp_head(feature_dim, hidden_dim or feature_dim, proj_dim)
        self.momentum = copy.deepcopy(self.online)
        init_momentum(self)

    def online_parameters(self):
        return self.online.parameters()


def init_momentum(heads: ProjectionHeads):
    """Copy the online weights into the momentum head and freeze it."""
    with torch.no_grad():
        for p_m, p_q in zip(heads.momentum.parameters(), heads.online.parameters()):
            p_m.copy_(p_q)
            p_m.requires_grad_(False)


@torch.no_grad()
def ema_update(heads: ProjectionHeads, m: float) -> ProjectionHeads:
    """``theta_m <- m * theta_m + (1 - m) * theta_q`` on every momentum tensor."""
    if not 0 <= m < 1:
        raise ContractError(f"momentum m must lie in [0, 1), got {m}")
    for p_m, p_q in zip(heads.momentum.parameters(), heads.online.parameters()):
        if p_m.shape != p_q.shape:
            raise ContractError("online and momentum heads differ in shape")
        p_m.mul_(m).add_(p_q, alpha=1.0 - m)
    return heads


class MoSSDAModel(nn.Module):
    """All parameterized parts: backbone, projection heads, classifier.

    ``step`` and ``seed`` are bookkeeping persisted with checkpoints.
    """

    def __init__(self, spec: BackboneSpec, n_classes: int, proj_dim: int = 128, seed: int = 0):
        super().__init__()
        if n_classes < 2:
            raise ConfigError("need at least 2 classes")
        self.spec = spec
        self.n_classes = n_classes
        self.seed = seed
        self.step = 0
        self.backbone = build_backbone(spec, seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.heads = ProjectionHeads(spec.feature_dim, proj_dim)
            self.classifier = nn.Linear(spec.feature_dim, n_classes)

    @property
    def proj_dim(self):
        return self.heads.proj_dim

    def encoder_parameters(self):
        """Parameters updated in stage 1 (backbone and online head)."""
        return [*self.backbone.parameters(), *self.heads.online.parameters()]


def forward_features(model: MoSSDAModel, X: Tensor) -> Tensor:
    spec = model.spec
    if X.ndim != 3 or X.shape[1] != spec.in_channels or X.shape[2] != spec.seq_len:
        raise ContractError(
            f"expected input (B, {spec.in_channels}, {spec.seq_len}), got {tuple(X.shape)}"
        )
    return model.backbone(X)


def project_online(model: MoSSDAModel, Z: Tensor) -> Tensor:
    return model.heads.online(Z)


def project_momentum(model: MoSSDAModel, Z: Tensor) -> Tensor:
    with torch.no_grad():
        return model.heads.momentum(Z.detach())


def classify(model: MoSSDAModel, Z: Tensor) -> Tensor:
    return model.classifier(Z)


# -- checkpoint container --------------------------------------------------
# magic | u64 manifest length | manifest JSON | per tensor:
#   u32 name length | name | u32 ndim | ndim x u64 dims | float32 LE data


def save_checkpoint(model: MoSSDAModel, path) -> Path:
    path = Path(path)
    state = model.state_dict()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "backbone": asdict(model.spec),
        "n_classes": model.n_classes,
        "proj_dim": model.proj_dim,
        "step": int(model.step),
        "seed": int(model.seed),
        "tensors": list(state),
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    return path


def read_checkpoint_manifest(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> MoSSDAModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    manifest = json.loads(data[pos : pos + n])
    pos += n
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {manifest.get('format_version')}")

    model = MoSSDAModel(
        BackboneSpec(**manifest["backbone"]), manifest["n_classes"], manifest["proj_dim"], manifest["seed"]
    )
    model.step = manifest["step"]
    reference = model.state_dict()
    loaded = {}
    for _ in manifest["tensors"]:
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        ref = reference[name]
        if tuple(ref.shape) != tuple(shape):
            raise ContractError(f"tensor {name}: checkpoint shape {shape} != model shape {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(loaded)
    return model
