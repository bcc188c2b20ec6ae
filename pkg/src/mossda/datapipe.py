"""Datasets on disk, the labeled/unlabeled target split, paired minibatches,
and a synthetic two-domain sinusoid generator.

On-disk layout of one domain::

    manifest.json   {"format_version": 1, "name", "D", "T", "C", "n_train", "n_test"}
    X_train.f32     little-endian float32, row-major (n_train, D, T)
    y_train.i32     little-endian int32, (n_train,)
    X_test.f32, y_test.i32
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DatasetError, PartitionError

FORMAT_VERSION = 1
STD_FLOOR = 1e-8


@dataclass
class DomainDataset:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X_train = np.ascontiguousarray(self.X_train, dtype=np.float32)
        self.X_test = np.ascontiguousarray(self.X_test, dtype=np.float32)
        self.y_train = np.ascontiguousarray(self.y_train, dtype=np.int64)
        self.y_test = np.ascontiguousarray(self.y_test, dtype=np.int64)
        if self.X_train.ndim != 3 or self.X_test.ndim != 3:
            raise DatasetError("X arrays must be (N, D, T)")
        if self.X_train.shape[1:] != self.X_test.shape[1:]:
            raise DatasetError(f"train dims {self.X_train.shape[1:]} != test dims {self.X_test.shape[1:]}")
        for split, X, y in (("train", self.X_train, self.y_train), ("test", self.X_test, self.y_test)):
            if y.shape != (X.shape[0],):
                raise DatasetError(f"{split}: {X.shape[0]} samples but {y.shape[0]} labels")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DatasetError(f"{split} labels must lie in [0, {self.n_classes})")

    @property
    def D(self):
        return self.X_train.shape[1]

    @property
    def T(self):
        return self.X_train.shape[2]

    @property
    def C(self):
        return self.n_classes

    @cached_property
    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (mean, std) over the train split, in float64."""
        x = self.X_train.astype(np.float64)
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        return mean, np.where(std > STD_FLOOR, std, 1.0)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        mean, std = self.stats
        return ((X.astype(np.float64) - mean[:, None]) / std[:, None]).astype(np.float32)

    @cached_property
    def train_norm(self) -> np.ndarray:
        return self.normalize(self.X_train)

    @cached_property
    def test_norm(self) -> np.ndarray:
        return self.normalize(self.X_test)


def save_dataset(ds: DomainDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "D": ds.D,
        "T": ds.T,
        "C": ds.C,
        "n_train": int(ds.X_train.shape[0]),
        "n_test": int(ds.X_test.shape[0]),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for split in ("train", "test"):
        getattr(ds, f"X_{split}").astype("<f4").tofile(path / f"X_{split}.f32")
        getattr(ds, f"y_{split}").astype("<i4").tofile(path / f"y_{split}.i32")
    return path


def load_dataset(path) -> DomainDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from exc
    missing = {"format_version", "name", "D", "T", "C", "n_train", "n_test"} - set(manifest)
    if missing:
        raise DatasetError(f"{mpath}: missing keys {sorted(missing)}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: unsupported format_version {manifest['format_version']}")
    D, T = int(manifest["D"]), int(manifest["T"])

    arrays = {}
    for split in ("train", "test"):
        n = int(manifest[f"n_{split}"])
        xfile, yfile = path / f"X_{split}.f32", path / f"y_{split}.i32"
        for f in (xfile, yfile):
            if not f.is_file():
                raise DatasetError(f"missing {f}")
        X = np.fromfile(xfile, dtype="<f4")
        y = np.fromfile(yfile, dtype="<i4")
        if y.size != n:
            raise DatasetError(f"{yfile}: manifest says n_{split}={n} but file holds {y.size} labels")
        if X.size != n * D * T:
            if n and T and X.size % (n * T) == 0:
                raise DatasetError(
                    f"{xfile}: manifest says D={D} but blob implies D={X.size // (n * T)}"
                )
            raise DatasetError(f"{xfile}: {X.size} floats do not match (n={n}, D={D}, T={T})")
        arrays[f"X_{split}"] = X.reshape(n, D, T)
        arrays[f"y_{split}"] = y
    return DomainDataset(name=manifest["name"], n_classes=int(manifest["C"]), **arrays)


@dataclass(frozen=True)
class TargetPartition:
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    u: float
    seed: int

    @property
    def n_labeled(self):
        return len(self.labeled_idx)

    @property
    def n_unlabeled(self):
        return len(self.unlabeled_idx)


def _round(x: float) -> int:
    # absorb float noise such as 100 * (1 - 0.9) = 9.999999999999998
    return round(round(x, 9))


def labeled_count(n_c: int, u: float) -> int:
    return max(1, _round(n_c * (1.0 - u)))


def apply_unlabeled_ratio(ds: DomainDataset, u: float, seed: int = 0) -> TargetPartition:
    """Stratified hide-the-labels split of the target train set.

    Each class keeps ``round(n_c * (1 - u))`` labeled rows, at least one.
    """
    if not 0 < u < 1:
        raise PartitionError(f"unlabeled ratio u must lie in (0, 1), got {u}")
    rng = np.random.default_rng(seed)
    labeled, unlabeled = [], []
    for c in range(ds.C):
        idx = np.flatnonzero(ds.y_train == c)
        if idx.size == 0:
            raise PartitionError(f"class {c} has no training samples in {ds.name!r}")
        idx = rng.permutation(idx)
        k = labeled_count(idx.size, u)
        labeled.append(idx[:k])
        unlabeled.append(idx[k:])
    return TargetPartition(
        labeled_idx=np.sort(np.concatenate(labeled)),
        unlabeled_idx=np.sort(np.concatenate(unlabeled)),
        u=float(u),
        seed=int(seed),
    )


@dataclass
class PairedBatch:
    src_X: np.ndarray
    src_y: np.ndarray
    trg_lab_X: np.ndarray
    trg_lab_y: np.ndarray
    trg_unl_X: np.ndarray
    src_idx: np.ndarray = field(repr=False, default=None)
    trg_lab_idx: np.ndarray = field(repr=False, default=None)
    trg_unl_idx: np.ndarray = field(repr=False, default=None)

    @property
    def B(self):
        return len(self.src_y)


def labeled_per_batch(B: int, u: float) -> int:
    return max(1, math.ceil(round(B * (1.0 - u), 9)))


def _stream(pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws: one full shuffle of ``pool``, topped up from further shuffles."""
    if n == 0 or pool.size == 0:
        return pool[:0]
    parts, have = [], 0
    while have < n:
        parts.append(rng.permutation(pool))
        have += pool.size
    return np.concatenate(parts)[:n]


class PairedBatchIterator:
    """Seeded iterator over equal-size source/target minibatches.

    An epoch holds ``ceil(max(N_s, N_t) / B)`` batches. Source rows are a
    fresh permutation each epoch (topped up with extra shuffled rows to fill
    the last batch); each target batch carries ``B_l`` labeled rows drawn
    with replacement and ``B - B_l`` unlabeled rows.
    """

    def __init__(self, src: DomainDataset, trg: DomainDataset, part: TargetPartition, B: int, seed: int = 0):
        if B < 2:
            raise ConfigError(f"batch size must be >= 2, got {B}")
        self.B_l = labeled_per_batch(B, part.u)
        if self.B_l > B:
            raise ConfigError(f"labeled rows per batch {self.B_l} exceed B={B}")
        if part.n_labeled == 0:
            raise ConfigError("target partition has no labeled rows")
        self.src, self.trg, self.part, self.B = src, trg, part, B
        self.B_u = B - self.B_l
        self.rng = np.random.default_rng(seed)
        self.n_batches = math.ceil(max(len(src.y_train), len(trg.y_train)) / B)
        self.epoch = 0

    def __len__(self):
        return self.n_batches

    def epoch_indices(self):
        """Index plan (src, trg_lab, trg_unl) for the next epoch, each (n_batches, ...)."""
        nb, B = self.n_batches, self.B
        src = _stream(np.arange(len(self.src.y_train)), nb * B, self.rng).reshape(nb, B)
        lab = self.rng.choice(self.part.labeled_idx, size=(nb, self.B_l), replace=True)
        unl_pool = self.part.unlabeled_idx if self.part.n_unlabeled else self.part.labeled_idx
        unl = _stream(unl_pool, nb * self.B_u, self.rng).reshape(nb, self.B_u)
        self.epoch += 1
        return src, lab, unl

    def __iter__(self) -> Iterator[PairedBatch]:
        src_i, lab_i, unl_i = self.epoch_indices()
        xs, ys = self.src.train_norm, self.src.y_train
        xt, yt = self.trg.train_norm, self.trg.y_train
        for b in range(self.n_batches):
            yield PairedBatch(
                src_X=xs[src_i[b]],
                src_y=ys[src_i[b]],
                trg_lab_X=xt[lab_i[b]],
                trg_lab_y=yt[lab_i[b]],
                trg_unl_X=xt[unl_i[b]],
                src_idx=src_i[b],
                trg_lab_idx=lab_i[b],
                trg_unl_idx=unl_i[b],
            )


def make_batches(src, trg, part, B, seed=0) -> PairedBatchIterator:
    """Each ``iter()`` over the result yields one epoch of :class:`PairedBatch`."""
    return PairedBatchIterator(src, trg, part, B, seed)


@dataclass(frozen=True)
class DomainShift:
    amplitude: float | Sequence[float] = 1.0
    phase: float = 0.0
    noise: float = 0.5


@dataclass(frozen=True)
class SyntheticSpec:
    """Two-domain sinusoid benchmark.

    Class c on channel ch: ``A[ch] * sin(2 pi f_c t / T + phi_c + phi_dom) + eps``
    with ``eps ~ N(0, sigma_dom^2)``. Frequencies and class phases are shared
    by both domains; only the :class:`DomainShift` differs.
    """

    n_classes: int = 4
    n_channels: int = 3
    seq_len: int = 64
    n_per_class: int = 50
    # close frequencies plus a phase offset comparable to the class-phase
    # spacing: the shift moves classes toward each other, not just rescales them
    source: DomainShift = DomainShift(amplitude=1.0, phase=0.0, noise=0.15)
    target: DomainShift = DomainShift(amplitude=1.5, phase=0.8, noise=0.3)
    base_frequency: float = 2.0
    frequency_step: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"synthetic spec needs at least 2 classes, got {self.n_classes}")
        if self.n_channels < 1 or self.seq_len < 1 or self.n_per_class < 1:
            raise ConfigError("n_channels, seq_len and n_per_class must be positive")
        for shift in (self.source, self.target):
            if shift.noise < 0:
                raise ConfigError("noise sigma must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("source", "target"):
            if isinstance(d.get(key), dict):
                d[key] = DomainShift(**d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def frequencies(self) -> np.ndarray:
        return self.base_frequency + self.frequency_step * np.arange(self.n_classes)

    def class_phases(self) -> np.ndarray:
        return np.linspace(0.0, np.pi, self.n_classes, endpoint=False)


def _render_domain(spec: SyntheticSpec, shift: DomainShift, labels: np.ndarray, rng) -> np.ndarray:
    amp = np.broadcast_to(np.asarray(shift.amplitude, dtype=np.float64), (spec.n_channels,))
    t = np.arange(spec.seq_len)
    arg = 2 * np.pi * spec.frequencies()[labels][:, None] * t / spec.seq_len
    arg = arg + spec.class_phases()[labels][:, None] + shift.phase
    clean = amp[None, :, None] * np.sin(arg)[:, None, :]
    return (clean + rng.normal(0.0, shift.noise, size=clean.shape)).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> tuple[DomainDataset, DomainDataset]:
    """Deterministic (source, target) pair of sinusoid datasets."""
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4)]
    labels = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    out = []
    for d, (name, shift) in enumerate((("source", spec.source), ("target", spec.target))):
        X_train = _render_domain(spec, shift, labels, rngs[2 * d])
        X_test = _render_domain(spec, shift, labels, rngs[2 * d + 1])
        out.append(DomainDataset(f"synthetic-{name}", X_train, labels, X_test, labels, spec.n_classes))
    return out[0], out[1]
