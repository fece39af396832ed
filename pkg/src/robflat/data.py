"""Datasets: synthetic generators, IDX ingestion, whitening, augmentation."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs in ``[0, 1]`` (before whitening), integer labels and split index arrays."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    splits: dict[str, np.ndarray]
    image_shape: tuple[int, int, int] | None = None

    def split(self, name: str):
        idx = self.splits[name]
        return self.x[idx], self.y[idx]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")

    @property
    def holdout(self):
        return self.split("holdout")

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def _make_splits(n_train: int, n_test: int, holdout: int) -> dict[str, np.ndarray]:
    if holdout > n_test:
        raise DataError("holdout cannot exceed the test split")
    test = np.arange(n_train, n_train + n_test - holdout)
    hold = np.arange(n_train + n_test - holdout, n_train + n_test)
    return {"train": np.arange(n_train), "test": test, "holdout": hold}


def _to_unit_box(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return (x - lo) / span


def make_synthetic(
    kind: str,
    n: int,
    d: int,
    k: int,
    margin: float,
    rng: np.random.Generator,
    n_test: int = 0,
    holdout: int = 0,
    noise: float = 1.0,
) -> Dataset:
    """Balanced synthetic classification data scaled into ``[0, 1]``.

    ``gaussians``: isotropic clusters of std ``noise`` whose centers are a
    randomly rotated orthogonal frame with pairwise distance ``margin``
    (needs ``k <= d``).  ``spirals``: ``k`` interleaved 2-D spiral arms with
    Gaussian jitter ``noise``, embedded into ``d`` dimensions.
    The first ``n`` examples form the train split, the next ``n_test`` the
    test split, whose last ``holdout`` examples form the holdout split.
    """
    if n < 1 or d < 1 or k < 1:
        raise DataError("n, d and k must be >= 1")
    if n_test < 0 or holdout < 0:
        raise DataError("split sizes must be non-negative")
    total = n + n_test
    labels = np.concatenate([rng.permutation(np.arange(n) % k), rng.permutation(np.arange(n_test) % k)])
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if kind == "gaussians":
        if k > d:
            raise DataError(f"cannot place {k} equidistant centers in {d} dimensions")
        if margin <= 0:
            raise DataError("margin must be positive")
        centers = (margin / np.sqrt(2.0)) * np.eye(d)[:k] @ rot.T
        x = centers[labels] + noise * rng.standard_normal((total, d))
    elif kind == "spirals":
        if d < 2:
            raise DataError("spirals need d >= 2")
        t = rng.uniform(0.05, 1.0, size=total)
        angle = 3.0 * np.pi * t + 2.0 * np.pi * labels / k
        base = np.zeros((total, d))
        base[:, 0] = t * np.cos(angle)
        base[:, 1] = t * np.sin(angle)
        x = (base + noise * rng.standard_normal((total, d))) @ rot.T
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    return Dataset(_to_unit_box(x), labels.astype(np.int64), k, _make_splits(n, n_test, holdout))


# --------------------------------------------------------------------------
# IDX


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad magic number 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are divided by 255.  All examples land in the train split."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"image count {images.shape[0]} does not match label count {labels.shape[0]}")
    if images.shape[0] == 0:
        raise DataError("IDX files contain no examples")
    n, h, w = images.shape
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    x = images.reshape(n, h * w).astype(np.float64) / 255.0
    return Dataset(x, labels, k, _make_splits(n, 0, 0), image_shape=(1, h, w))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def concat_splits(train: Dataset, test: Dataset, holdout: int) -> Dataset:
    """Join a train and a test dataset; the last ``holdout`` test examples become the holdout split."""
    x = np.concatenate([train.x, test.x])
    y = np.concatenate([train.y, test.y])
    k = max(train.num_classes, test.num_classes)
    return Dataset(x, y, k, _make_splits(len(train.x), len(test.x), holdout), train.image_shape)


# --------------------------------------------------------------------------
# whitening / augmentation


@dataclass(frozen=True)
class WhiteningStats:
    mean: np.ndarray
    std: np.ndarray


def whitening_stats(ds: Dataset) -> WhiteningStats:
    """Per-channel mean and std over the train split, broadcast to every input feature."""
    xtr, _ = ds.train
    if len(xtr) == 0:
        raise DataError("whitening needs a non-empty train split")
    if ds.image_shape is not None:
        c = ds.image_shape[0]
        per = xtr.reshape(len(xtr), c, -1)
        mean_c = per.mean(axis=(0, 2))
        std_c = per.std(axis=(0, 2))
        reps = ds.dim // c
        mean, std = np.repeat(mean_c, reps), np.repeat(std_c, reps)
    else:
        mean, std = xtr.mean(axis=0), xtr.std(axis=0)
    if np.any(std == 0):
        log.warning("zero-variance channel(s) in whitening statistics; std clamped to 1")
        std = np.where(std == 0, 1.0, std)
    return WhiteningStats(mean, std)


def whiten(ds: Dataset) -> tuple[Dataset, WhiteningStats]:
    stats = whitening_stats(ds)
    return replace(ds, x=(ds.x - stats.mean) / stats.std), stats


def unwhiten(ds: Dataset, stats: WhiteningStats) -> Dataset:
    return replace(ds, x=ds.x * stats.std + stats.mean)


def augment(x: np.ndarray, rng: np.random.Generator, image_shape, pad: int | None = None, force_flip: bool | None = None) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop of a flattened image batch.

    ``pad`` defaults to 4 pixels per side scaled to the image width (4 on
    32-pixel images).
    """
    if image_shape is None:
        raise DataError("augmentation needs image shape metadata")
    c, h, w = image_shape
    imgs = x.reshape(len(x), c, h, w)
    if pad is None:
        pad = max(1, int(round(4 * w / 32)))
    if force_flip is None:
        flip = rng.uniform(size=len(x)) < 0.5
    else:
        flip = np.full(len(x), force_flip)
    out = np.where(flip[:, None, None, None], imgs[..., ::-1], imgs)
    if pad > 0:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(len(x), 2))
        out = np.stack([padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs)])
    return out.reshape(len(x), -1)
