"""Labeled datasets: synthetic desk-scale generator, IDX files and overlap splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import RandomStream, as_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Inputs in [0, 1] with integer labels.  ``index`` maps rows back to the source pool."""

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if not np.all(np.isfinite(x)) or (x.size and (x.min() < 0.0 or x.max() > 1.0)):
            raise ValueError("inputs must be finite and scaled to [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        idx = np.arange(y.size) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if idx.shape != y.shape:
            raise ValueError("index must have one entry per point")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "index", idx)

    def __len__(self):
        return self.labels.size

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, rows, name=None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            name or self.name, self.inputs[rows], self.labels[rows], self.n_classes, self.index[rows]
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# -------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    M: int = 64
    N: int = 10
    points_per_class: int = 500
    noise: float = 0.12
    structure: str = "blobs"
    separation: float = 0.04  # per-feature amplitude of the class offsets
    modes: int = 4  # sub-clusters per class (blobs only)
    mode_spread: float = 0.06  # amplitude of each sub-cluster's offset from its class template

    def validate(self):
        if self.M < 2 or self.N < 2:
            raise ValueError("synthetic data needs M >= 2 and N >= 2")
        if self.points_per_class < 10:
            raise ValueError("points_per_class must be >= 10")
        if self.noise < 0 or self.separation <= 0 or self.mode_spread < 0:
            raise ValueError("noise and mode_spread must be >= 0 and separation > 0")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.structure not in ("blobs", "rings"):
            raise ValueError(f"unknown structure {self.structure!r}")


def _smooth_pattern(M, rng):
    # Low-frequency "image" pattern so neighbouring features correlate.
    side = int(round(np.sqrt(M)))
    raw = 2.0 * rng.uniform(M) - 1.0
    if side * side != M:
        return raw
    img = raw.reshape(side, side)
    padded = np.pad(img, 1, mode="edge")
    smooth = sum(padded[i : i + side, j : j + side] for i in range(3) for j in range(3)) / 9.0
    smooth = smooth / (np.abs(smooth).max() + 1e-12)
    return smooth.ravel()


def class_centroids(spec: SynthSpec, rng) -> np.ndarray:
    rng = as_stream(rng)
    base = 0.5 + 0.15 * _smooth_pattern(spec.M, rng.spawn(10_000))
    cents = np.stack(
        [base + spec.separation * _smooth_pattern(spec.M, rng.spawn(c)) * 3.0 for c in range(spec.N)]
    )
    return np.clip(cents, 0.0, 1.0)


def mode_offsets(spec: SynthSpec, rng) -> np.ndarray:
    """(N, modes, M) offsets of each class's sub-clusters from the class template."""
    rng = as_stream(rng)
    if spec.modes == 1:
        return np.zeros((spec.N, 1, spec.M))
    return np.stack(
        [
            [spec.mode_spread * 3.0 * _smooth_pattern(spec.M, rng.spawn(20_000 + c * spec.modes + k)) for k in range(spec.modes)]
            for c in range(spec.N)
        ]
    )


def synth_generate(spec: SynthSpec, rng, name="synthetic", sample_rng=None) -> Dataset:
    """Deterministic labelled point cloud shaped like a miniature image dataset.

    ``blobs`` places Gaussian clouds around ``modes`` smooth sub-cluster
    templates per class;
    ``rings`` puts class ``c`` on a shell of radius proportional to ``c + 1``
    around a shared centre.  ``rng`` fixes the distribution (templates);
    ``sample_rng``, when given, draws a fresh sample from that same
    distribution.
    """
    spec.validate()
    rng = as_stream(rng)
    draw = rng if sample_rng is None else as_stream(sample_rng)
    ppc, M, N = spec.points_per_class, spec.M, spec.N
    labels = np.repeat(np.arange(N), ppc)
    if spec.structure == "blobs":
        cents = class_centroids(spec, rng.spawn(1))
        offsets = mode_offsets(spec, rng.spawn(1))
        mode = draw.spawn(5).integers(spec.modes, N * ppc)
        noise = spec.noise * draw.spawn(2).normal(N * ppc * M).reshape(N * ppc, M)
        x = cents[labels] + offsets[labels, mode] + noise
    else:
        centre = np.full(M, 0.5)
        dirs = draw.spawn(3).normal(N * ppc * M).reshape(N * ppc, M)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radius = spec.separation * 3.0 * (labels + 1.0)
        jitter = spec.noise * draw.spawn(4).normal(N * ppc * M).reshape(N * ppc, M)
        x = centre + dirs * radius[:, None] + jitter
    x = np.clip(x, 0.0, 1.0)
    return Dataset(name, x, labels, N)


def stratified_holdout(d: Dataset, fraction: float, rng) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of every class as a held-out set."""
    rng = as_stream(rng)
    keep, held = [], []
    for c in range(d.n_classes):
        rows = np.flatnonzero(d.labels == c)
        perm = rows[rng.spawn(c).permutation(rows.size)]
        k = int(round(fraction * rows.size))
        held.append(perm[:k])
        keep.append(perm[k:])
    keep = np.sort(np.concatenate(keep))
    held = np.sort(np.concatenate(held))
    return d.subset(keep, d.name + "-train"), d.subset(held, d.name + "-test")


# -------------------------------------------------------------------- IDX


def _read_header(buf, path, magic, ndim):
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(buf)}")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])


def load_idx(images_path, labels_path, n_classes=None, name=None) -> Dataset:
    """Read an IDX image/label pair (unsigned bytes), scaling pixels by 1/255."""
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    count, rows, cols = _read_header(ib, images_path, IDX_IMAGES_MAGIC, 3)
    (lcount,) = _read_header(lb, labels_path, IDX_LABELS_MAGIC, 1)
    if count != lcount:
        raise IdxFormatError(
            f"image count {count} (byte offset 4 of {images_path}) != label count {lcount} "
            f"(byte offset 4 of {labels_path})"
        )
    need = 16 + count * rows * cols
    if len(ib) < need:
        raise IdxFormatError(f"{images_path}: truncated payload at byte offset {len(ib)}, expected {need} bytes")
    if len(lb) < 8 + count:
        raise IdxFormatError(f"{labels_path}: truncated payload at byte offset {len(lb)}, expected {8 + count} bytes")
    pixels = np.frombuffer(ib, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(lb, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if count else 1
    return Dataset(name or Path(images_path).stem, inputs, labels, n_classes)


def write_idx(d: Dataset, images_path, labels_path, shape=None):
    """Write a dataset as an IDX pair; pixels are rounded to bytes."""
    n, m = d.inputs.shape
    if shape is None:
        side = int(round(np.sqrt(m)))
        shape = (side, m // side) if side * (m // side) == m else (1, m)
    rows, cols = shape
    if rows * cols != m:
        raise ValueError(f"shape {shape} does not hold {m} features")
    pixels = np.round(d.inputs * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + d.labels.astype(np.uint8).tobytes())


# ------------------------------------------------------- overlap splitting


@dataclass(frozen=True)
class SplitSpec:
    victim_fraction: float = 0.5
    overlap_rate: float = 0.0
    seed: int = 0
    # Seed for the homologous draw; defaults to ``seed``.  Keeping ``seed``
    # fixed while varying this gives fresh homologous sets against one victim set.
    homologous_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.overlap_rate <= 0.9:
            raise ValueError("overlap_rate must lie in [0, 0.9]")
        if not 0.0 < self.victim_fraction <= 0.5:
            raise ValueError("victim_fraction must lie in (0, 0.5]")


def _largest_remainder(quotas, total):
    base = np.floor(quotas).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:short]] += 1
    return base


def split_indices(labels, n_classes, spec: SplitSpec):
    """Row indices of the victim and homologous subsets (stratified)."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    size = int(np.floor(spec.victim_fraction * labels.size))
    per_class = _largest_remainder(spec.victim_fraction * counts.astype(float), size)
    shared_total = int(round(spec.overlap_rate * size))
    shared = _largest_remainder(spec.overlap_rate * per_class.astype(float), shared_total)
    shared = np.minimum(shared, per_class)
    vic_rng = RandomStream(spec.seed)
    homo_rng = RandomStream(spec.seed if spec.homologous_seed is None else spec.homologous_seed)
    victim, homo = [], []
    for c in range(n_classes):
        rows = np.flatnonzero(labels == c)
        v, o = int(per_class[c]), int(shared[c])
        if 2 * v - o > rows.size:
            raise ValueError(
                f"overlap_rate {spec.overlap_rate} infeasible for class {c}: "
                f"needs {2 * v - o} points, has {rows.size}"
            )
        perm = rows[vic_rng.spawn(c).permutation(rows.size)]
        vic, rest = perm[:v], perm[v:]
        hr = homo_rng.spawn(1_000_003 + c)
        keep = vic[hr.choice(v, o)] if o else vic[:0]
        fresh = rest[hr.choice(rest.size, v - o)] if v - o else rest[:0]
        victim.append(np.sort(vic))
        homo.append(np.sort(np.concatenate([keep, fresh])))
    return np.concatenate(victim), np.concatenate(homo)


def split_with_overlap(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Equal-size victim and homologous subsets sharing ``overlap_rate`` of their points."""
    victim, homo = split_indices(d.labels, d.n_classes, spec)
    return d.subset(victim, d.name + "-victim"), d.subset(homo, d.name + "-homologous")


def complement(d: Dataset, rows, name=None) -> Dataset:
    mask = np.ones(len(d), dtype=bool)
    mask[np.asarray(rows, dtype=np.int64)] = False
    return d.subset(np.flatnonzero(mask), name)
