"""Datasets: synthetic generation, splitting, low-data subsampling, PGM ingest.

Synthetic classes are deterministic procedural patterns (oriented gratings,
Gaussian blobs, concentric rings, checkerboards) plus per-sample Gaussian
pixel noise. The ``pretext`` and ``task`` kinds draw from disjoint parameter
families of the same four pattern types, so a model pretrained on pretext
classes has genuinely transferable features for task classes without ever
seeing them.

Dataset archives reuse the NTA1 tensor format with entries ``images`` and
``labels`` plus a ``<stem>.classes.json`` sidecar naming the classes.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestError, RangeError, StratificationError
from .rng import substream
from .surgery import read_archive, write_archive
from .tensor import Tensor


@dataclass
class Dataset:
    images: Tensor  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,), int64 in [0, K)
    class_names: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.images.data.shape[0]
        if n == 0 or n != self.labels.shape[0]:
            raise RangeError(f"images/labels length mismatch: {n} vs {self.labels.shape[0]}")
        k = len(self.class_names)
        if self.labels.min() < 0 or self.labels.max() >= k:
            raise RangeError(f"labels outside [0, {k})")
        if not np.all(np.isfinite(self.images.data)):
            raise RangeError("images contain non-finite pixels")

    @property
    def n(self) -> int:
        return self.images.data.shape[0]

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            Tensor(self.images.data[idx].copy()),
            self.labels[idx].copy(),
            list(self.class_names),
        )


# ---------------------------------------------------------------------------
# synthetic generation

# Each kind draws pattern parameters from its own family so that pretext
# pretraining transfers to the task without leaking identical classes.
_FAMILIES = {
    "pretext": {
        "angles": (0.0, np.pi / 3, 2 * np.pi / 3),
        "freqs": (3.0, 6.0),
        "centers": ((0.3, 0.3), (0.7, 0.3), (0.3, 0.7), (0.7, 0.7)),
        "radii": (0.18, 0.3),
        "cells": (4, 10),
        "phase": 0.0,
    },
    "task": {
        "angles": (np.pi / 6, np.pi / 2, 5 * np.pi / 6),
        "freqs": (4.0, 8.0),
        "centers": ((0.5, 0.35), (0.35, 0.6), (0.65, 0.6), (0.5, 0.8)),
        "radii": (0.24, 0.36),
        "cells": (6, 8),
        "phase": np.pi / 2,
    },
}

_PATTERNS = ("grating", "blob", "ring", "checker")


def _base_pattern(kind: str, class_id: int, h: int, w: int) -> np.ndarray:
    fam = _FAMILIES[kind]
    pattern = _PATTERNS[class_id % 4]
    variant = class_id // 4
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    if pattern == "grating":
        angle = fam["angles"][variant % len(fam["angles"])]
        freq = fam["freqs"][variant % len(fam["freqs"])]
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + fam["phase"])
        img = 0.5 + 0.5 * wave
    elif pattern == "blob":
        cy, cx = fam["centers"][variant % len(fam["centers"])]
        sigma = 0.12 + 0.04 * (variant % 2)
        img = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)))
    elif pattern == "ring":
        r0 = fam["radii"][variant % len(fam["radii"])]
        r = np.sqrt((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
        img = np.exp(-(((r - r0) / 0.05) ** 2))
    else:  # checker
        cells = fam["cells"][variant % len(fam["cells"])]
        shift = 0.5 if kind == "task" else 0.0
        img = (((xx * cells + shift).astype(int) + (yy * cells + shift).astype(int)) % 2).astype(float)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(kind: str, classes: int, n: int, noise: float, seed: int) -> Dataset:
    """Deterministic class patterns plus Gaussian pixel noise, clamped to [0,1]."""
    if kind not in _FAMILIES:
        raise RangeError(f"kind must be one of {sorted(_FAMILIES)}, got {kind!r}")
    if classes < 2:
        raise RangeError("need at least 2 classes")
    if n < classes:
        raise RangeError(f"n={n} smaller than class count {classes}")
    if noise < 0:
        raise RangeError(f"noise sigma must be non-negative, got {noise}")
    h = w = 32
    rng = substream(seed, f"synth:{kind}")
    bases = [_base_pattern(kind, c, h, w) for c in range(classes)]
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, 1, h, w), dtype=np.float32)
    for i, lab in enumerate(labels):
        img = bases[lab]
        if noise > 0:
            img = img + noise * rng.standard_normal((h, w))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    names = [f"{kind}_{_PATTERNS[c % 4]}{c // 4}" for c in range(classes)]
    return Dataset(Tensor(images), labels, names)


# ---------------------------------------------------------------------------
# splitting and subsampling


def _class_indices(labels: np.ndarray, k: int) -> list:
    return [np.flatnonzero(labels == c) for c in range(k)]


def split(dataset: Dataset, train_frac: float = 0.8, seed: int = 0) -> tuple:
    """Stratified random partition; rounding favors the train side."""
    if not 0 < train_frac < 1:
        raise RangeError(f"train_frac must be in (0, 1), got {train_frac}")
    rng = substream(seed, "split")
    train_idx, test_idx = [], []
    for c, members in enumerate(_class_indices(dataset.labels, dataset.classes)):
        if len(members) < 2:
            raise StratificationError(
                f"class {c} has {len(members)} sample(s); need at least 2 to split"
            )
        perm = members[rng.permutation(len(members))]
        # epsilon guards against (1 - 0.8) * 500 = 99.999... style float error
        n_test = int(np.floor((1 - train_frac) * len(members) + 1e-9))
        n_test = max(1, n_test)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return dataset.take(train), dataset.take(test)


def subsample_indices(labels: np.ndarray, classes: int, pct: float, repeat_seed: int) -> np.ndarray:
    """Stratified subset indices: ceil(pct*N/100) total, >=1 per class."""
    if not 0 < pct <= 100:
        raise RangeError(f"pct must be in (0, 100], got {pct}")
    n = labels.shape[0]
    members = _class_indices(labels, classes)
    if any(len(m) == 0 for m in members):
        raise StratificationError("every class needs at least one sample to subsample")
    if pct == 100:
        return np.arange(n, dtype=np.int64)
    target = max(int(np.ceil(pct * n / 100.0)), classes)
    # largest-remainder quotas, then enforce one sample per class minimum
    exact = np.array([len(m) * target / n for m in members])
    quota = np.floor(exact).astype(int)
    remainder_order = np.argsort(-(exact - quota), kind="stable")
    for c in remainder_order[: target - quota.sum()]:
        quota[c] += 1
    while (quota == 0).any():  # total >= K, so a zero implies a donor with >= 2
        needy = int(np.flatnonzero(quota == 0)[0])
        donor = int(np.argmax(quota))
        quota[needy] += 1
        quota[donor] -= 1
    rng = substream(repeat_seed, "subsample")
    picked = []
    for c, members_c in enumerate(members):
        take = min(quota[c], len(members_c))
        chosen = rng.choice(len(members_c), size=take, replace=False)
        picked.append(members_c[np.sort(chosen)])
    return np.sort(np.concatenate(picked))


def subsample(train: Dataset, pct: float, repeat_seed: int) -> Dataset:
    return train.take(subsample_indices(train.labels, train.classes, pct, repeat_seed))


# ---------------------------------------------------------------------------
# dataset archives (NTA1 + classes sidecar)


def classes_sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".classes.json")


def save_dataset(dataset: Dataset, path) -> None:
    entries = {
        "images": dataset.images,
        "labels": Tensor(dataset.labels.astype(np.float32)),
    }
    write_archive(entries, path)
    classes_sidecar(path).write_text(json.dumps(dataset.class_names, indent=1))


def load_dataset(path) -> Dataset:
    entries = read_archive(path)
    if "images" not in entries or "labels" not in entries:
        raise IngestError(f"{path}: dataset archive needs 'images' and 'labels' entries")
    labels = entries["labels"].data.astype(np.int64)
    sidecar = classes_sidecar(path)
    if sidecar.exists():
        names = json.loads(sidecar.read_text())
    else:
        names = [f"class{i}" for i in range(int(labels.max()) + 1)]
    return Dataset(entries["images"], labels, names)


# ---------------------------------------------------------------------------
# PGM ingestion


def _read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM parser; returns float32 HxW scaled to [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"{path}: truncated PGM header")
        return blob[start:pos]

    if token() != b"P5":
        raise IngestError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise IngestError(f"{path}: malformed PGM header")
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise IngestError(f"{path}: illegal PGM dimensions {width}x{height}, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    dtype = np.uint8 if maxval < 256 else ">u2"
    count = width * height
    expected = count * np.dtype(dtype).itemsize
    if len(blob) - pos < expected:
        raise IngestError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return (pixels.astype(np.float32) / maxval).reshape(height, width)


def ingest_pgm(directory, out_path=None) -> tuple:
    """Load class_name/*.pgm trees into a Dataset and write its archive."""
    root = Path(directory)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise IngestError(f"{root} contains no class subdirectories")
    images, labels = [], []
    shape = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.pgm"))
        if not files:
            raise IngestError(f"{cdir} contains no .pgm files")
        for f in files:
            img = _read_pgm(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise IngestError(
                    f"{f}: size {img.shape} differs from first image {shape}"
                )
            images.append(img[None])  # add channel axis
            labels.append(label)
    dataset = Dataset(
        Tensor(np.stack(images)),
        np.array(labels, dtype=np.int64),
        [d.name for d in class_dirs],
    )
    archive = Path(out_path) if out_path else root.with_suffix(".nta")
    save_dataset(dataset, archive)
    return dataset, archive


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], classes), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
