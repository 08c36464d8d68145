"""Datasets: synthetic fire-like images, PGM directories, device partitions."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, IngestionError
from .pgm import read_pgm, write_pgm

NO_BOX = (-1, -1, -1, -1)


@dataclass
class Dataset:
    x: np.ndarray  # [N, C, H, W] in [0, 1]
    y: np.ndarray
    names: list
    boxes: np.ndarray  # [N, 4] row0, col0, row1, col1 (exclusive); -1 when absent

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], [self.names[i] for i in idx], self.boxes[idx])


@dataclass
class SynthSpec:
    image_size: int = 16
    counts: tuple = field(default=(200, 200), metadata={"kind": "intlist"})
    background_mean: float = 0.3
    background_std: float = 0.08
    blob_amplitude_min: float = 0.45
    blob_amplitude_max: float = 0.7
    blob_sigma_min: float = 1.2
    blob_sigma_max: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 6:
            raise ConfigError("image_size must be at least 6")
        if len(self.counts) != 2 or min(self.counts) < 0:
            raise ConfigError("counts must list two non-negative per-class counts")

    @classmethod
    def from_file(cls, path):
        return cfgmod.load(cls, path)

    def to_text(self):
        return cfgmod.dump(self)


def synthesize_fire_like(spec, seed=None):
    """Class 1: a bright Gaussian blob on a noisy background. Class 0: background only.

    Boxes cover the blob centre +- 2 sigma.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    s = spec.image_size
    n0, n1 = spec.counts
    labels = np.array([0] * n0 + [1] * n1, dtype=np.int64)
    labels = labels[rng.permutation(labels.size)]
    x = np.empty((labels.size, 1, s, s))
    boxes = np.full((labels.size, 4), -1, dtype=np.int64)
    rr, cc = np.mgrid[0:s, 0:s]
    for i, lab in enumerate(labels):
        img = rng.normal(spec.background_mean, spec.background_std, size=(s, s))
        if lab == 1:
            amp = rng.uniform(spec.blob_amplitude_min, spec.blob_amplitude_max)
            sigma = rng.uniform(spec.blob_sigma_min, spec.blob_sigma_max)
            r, c = rng.uniform(3.0, s - 4.0, size=2)
            img = img + amp * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2.0 * sigma**2))
            boxes[i] = (
                max(0, math.floor(r - 2 * sigma)), max(0, math.floor(c - 2 * sigma)),
                min(s, math.ceil(r + 2 * sigma) + 1), min(s, math.ceil(c + 2 * sigma) + 1),
            )
        x[i, 0] = np.clip(img, 0.0, 1.0)
    names = [f"synth_{i:05d}" for i in range(labels.size)]
    return Dataset(x, labels, names, boxes)


def write_dataset(ds, out_dir, binary=True):
    """One PGM per image under ``<out>/<label>/`` plus a ``boxes.csv`` index."""
    out = Path(out_dir)
    for lab in np.unique(ds.y):
        (out / str(lab)).mkdir(parents=True, exist_ok=True)
    with open(out / "boxes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "label", "row0", "col0", "row1", "col1"])
        for img, lab, name, box in zip(ds.x, ds.y, ds.names, ds.boxes):
            write_pgm(out / str(lab) / f"{name}.pgm", img[0], binary=binary)
            w.writerow([name, int(lab), *map(int, box)])


def load_images(path):
    """Read ``<path>/<class>/*.pgm``; classes are numbered in sorted name order."""
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels, names = [], [], []
    shape = None
    for ci, cname in enumerate(classes):
        for f in sorted((root / cname).iterdir()):
            if f.suffix.lower() not in (".pgm", ".pnm"):
                continue
            img = read_pgm(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise IngestionError(f"{f}: image shape {img.shape} differs from {shape}")
            images.append(img)
            labels.append(ci)
            names.append(f.stem)
    if not images:
        raise IngestionError(f"{root}: no PGM images found")
    boxes = np.full((len(images), 4), -1, dtype=np.int64)
    index = root / "boxes.csv"
    if index.exists():
        where = {n: i for i, n in enumerate(names)}
        with open(index, newline="") as fh:
            for row in csv.DictReader(fh):
                i = where.get(row["name"])
                if i is not None:
                    boxes[i] = [int(row[k]) for k in ("row0", "col0", "row1", "col1")]
    x = np.stack(images)[:, None]
    return Dataset(x, np.asarray(labels, dtype=np.int64), names, boxes)


def draw_volumes(n, vmin, vmax, seed):
    """Per-device sample counts, log-uniform on [vmin, vmax]."""
    rng = np.random.default_rng(seed)
    v = np.exp(rng.uniform(math.log(vmin), math.log(vmax), size=n))
    return tuple(int(np.clip(np.rint(x), vmin, vmax)) for x in v)


def fit_volumes(volumes, available):
    """Requested volumes if they fit, otherwise scaled down by largest remainder."""
    vols = np.asarray(volumes, dtype=np.int64)
    if vols.sum() <= available:
        return tuple(int(v) for v in vols)
    if available < vols.size:
        raise IngestionError(f"{available} training samples cannot cover {vols.size} devices")
    spare = available - vols.size
    share = (vols - 1) / (vols - 1).sum() * spare if (vols - 1).sum() else np.zeros(vols.size)
    base = np.floor(share).astype(np.int64)
    order = np.argsort(-(share - base), kind="stable")
    base[order[: spare - base.sum()]] += 1
    return tuple(int(v) for v in base + 1)


@dataclass
class FederatedData:
    devices: list
    test: Dataset
    volumes: tuple


def split_and_partition(ds, n_test, volumes, seed):
    """Seeded disjoint train/test split; train samples dealt out by volume."""
    n = len(ds)
    if not 0 < n_test < n:
        raise IngestionError(f"cannot hold out {n_test} of {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx, test_idx = perm[: n - n_test], perm[n - n_test:]
    vols = fit_volumes(volumes, train_idx.size)
    devices = []
    start = 0
    for v in vols:
        devices.append(ds.subset(train_idx[start:start + v]))
        start += v
    return FederatedData(devices, ds.subset(test_idx), vols)


def held_out(n, test_fraction):
    return n - int(math.floor((1.0 - test_fraction) * n + 0.5))


def load_dataset(cfg, seed_for):
    """Build per-device training sets and the test set for an experiment.

    ``cfg.dataset`` is ``synthetic``, a directory of class subdirectories of
    PGM images, or a synthetic-spec file. ``seed_for(tag)`` supplies seeds.
    """
    volumes = cfg.volumes or draw_volumes(cfg.num_devices, cfg.volume_min, cfg.volume_max, seed_for("volumes"))
    if cfg.dataset == "synthetic":
        n_train = sum(volumes)
        n_test = int(math.floor(n_train * cfg.test_fraction / (1.0 - cfg.test_fraction) + 0.5))
        total = n_train + n_test
        spec = SynthSpec(image_size=cfg.image_size, counts=(total // 2, total - total // 2))
        ds = synthesize_fire_like(spec, seed=seed_for("synth"))
    elif os.path.isdir(cfg.dataset):
        ds = load_images(cfg.dataset)
        n_test = held_out(len(ds), cfg.test_fraction)
    elif os.path.isfile(cfg.dataset):
        ds = synthesize_fire_like(SynthSpec.from_file(cfg.dataset))
        n_test = held_out(len(ds), cfg.test_fraction)
    else:
        raise IngestionError(f"{cfg.dataset}: no such dataset")
    return split_and_partition(ds, n_test, volumes, seed_for("split"))
