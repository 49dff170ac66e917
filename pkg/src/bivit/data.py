"""Dataset ingestion: IDX image/label files, CIFAR-style binary records,
the bundled scikit-learn digits, and a synthetic prototype generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOURCES = ("idx_images", "cifar_binary", "synthetic", "digits")

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


class DatasetFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path, self.offset = path, offset


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(path, 0, "file shorter than the 4-byte magic number")
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetFormatError(path, 0, f"bad magic number {raw[:4].hex()}")
    if raw[2] not in _IDX_TYPES:
        raise DatasetFormatError(path, 2, f"unknown element type 0x{raw[2]:02x}")
    dtype, ndim = _IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != need:
        raise DatasetFormatError(
            path, header, f"payload is {len(raw) - header} bytes, dims {dims} need {need}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr) -> None:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX encoding")
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.astype(_IDX_TYPES[code]).tobytes())


def read_cifar_binary(path, label_bytes: int = 1, image_shape=(3, 32, 32)):
    """Fixed-size records: ``label_bytes`` label byte(s) then CHW uint8 pixels.

    With two label bytes (coarse, fine) the last one is used.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + int(np.prod(image_shape))
    if len(raw) == 0 or len(raw) % rec:
        raise DatasetFormatError(
            path, len(raw) - len(raw) % rec, f"trailing partial record (record size {rec})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    return arr[:, label_bytes:].reshape((-1,) + tuple(image_shape)), arr[:, label_bytes - 1].astype(np.int64)


def synthetic_prototypes(n, classes, resolution, channels=1, noise=0.6, seed=0):
    """Each class is a random smooth prototype image plus Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    coarse = rng.normal(size=(classes, channels, 4, 4))
    reps = -(-resolution // 4)
    protos = np.kron(coarse, np.ones((reps, reps)))[..., :resolution, :resolution]
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = protos[y] + noise * rng.normal(size=(n, channels, resolution, resolution))
    return x, y


def _digits():
    from sklearn.datasets import load_digits

    d = load_digits()
    return d.images[:, None].astype(np.float64), d.target.astype(np.int64)


@dataclass
class DatasetSpec:
    source: str = "digits"
    images: str | None = None  # idx image file or a list of cifar batch files (comma-separated)
    labels: str | None = None  # idx label file
    val_images: str | None = None
    val_labels: str | None = None
    resolution: int = 8
    classes: int = 10
    channels: int = 1
    mean: tuple | None = None  # per-channel; computed on the train split when None
    std: tuple | None = None
    val_fraction: float = 0.2
    split_seed: int = 0
    n_samples: int = 2000  # synthetic only
    noise: float = 0.6  # synthetic only

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    classes: int
    mean: np.ndarray = field(repr=False, default=None)
    std: np.ndarray = field(repr=False, default=None)


def _fit_resolution(x: np.ndarray, res: int) -> np.ndarray:
    """Centre-crop or zero-pad the spatial axes to ``res`` x ``res``."""
    out = np.zeros(x.shape[:2] + (res, res), dtype=np.float64)
    h, w = x.shape[2:]
    sh, sw = max(0, (h - res) // 2), max(0, (w - res) // 2)
    dh, dw = max(0, (res - h) // 2), max(0, (res - w) // 2)
    ch, cw = min(h, res), min(w, res)
    out[:, :, dh : dh + ch, dw : dw + cw] = x[:, :, sh : sh + ch, sw : sw + cw]
    return out


def _load_raw(spec: DatasetSpec):
    if spec.source == "digits":
        return _digits(), None
    if spec.source == "synthetic":
        return synthetic_prototypes(spec.n_samples, spec.classes, spec.resolution,
                                    spec.channels, spec.noise, spec.split_seed), None
    if spec.source == "idx_images":
        pair = _load_idx_pair(spec.images, spec.labels)
        val = _load_idx_pair(spec.val_images, spec.val_labels) if spec.val_images else None
        return pair, val
    files = [f for f in (spec.images or "").split(",") if f]
    if not files:
        raise ValueError("cifar_binary needs at least one record file")
    parts = [read_cifar_binary(f) for f in files]
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    val = read_cifar_binary(spec.val_images) if spec.val_images else None
    return train, val


def _load_idx_pair(images, labels):
    x, y = read_idx(images), read_idx(labels)
    if len(x) != len(y):
        raise DatasetFormatError(labels, 4, f"{len(y)} labels for {len(x)} images")
    x = x.astype(np.float64)
    if x.ndim == 3:
        x = x[:, None]
    return x, y.astype(np.int64)


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Load, split (disjointly, seeded) and normalise a dataset."""
    (x, y), val = _load_raw(spec)
    if val is None:
        perm = np.random.default_rng(spec.split_seed).permutation(len(x))
        n_val = int(round(len(x) * spec.val_fraction))
        vi, ti = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        xt, yt, xv, yv = x[ti], y[ti], x[vi], y[vi]
    else:
        xt, yt, (xv, yv) = x, y, val
    xt = _fit_resolution(np.asarray(xt, dtype=np.float64), spec.resolution)
    xv = _fit_resolution(np.asarray(xv, dtype=np.float64), spec.resolution)
    mean = np.asarray(spec.mean) if spec.mean is not None else xt.mean(axis=(0, 2, 3))
    std = np.asarray(spec.std) if spec.std is not None else xt.std(axis=(0, 2, 3))
    mean, std = mean.reshape(1, -1, 1, 1), np.maximum(std, 1e-8).reshape(1, -1, 1, 1)
    return Dataset((xt - mean) / std, yt, (xv - mean) / std, yv, spec.classes,
                   mean.ravel(), std.ravel())


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]
