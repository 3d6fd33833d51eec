"""Dataset sources: synthetic 2-D tasks, IDX image files, and CSV tables."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GAUSSIANS = "synthetic-gaussians"
SPIRALS = "synthetic-spirals"
IMAGE_IDX = "image-idx"
CSV = "csv"
KINDS = (GAUSSIANS, SPIRALS, IMAGE_IDX, CSV)

_IDX_DTYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}


class DatasetError(ValueError):
    """Malformed or unreadable dataset file."""


@dataclass
class Split:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    def as_tuple(self):
        return self.x_train, self.y_train, self.x_test, self.y_test


def make_gaussians(n_per_class: int, n_classes: int = 2, dim: int = 2, separation: float = 2.0,
                   seed: int = 0):
    """Isotropic unit-variance blobs with centers spread on a circle of radius ``separation``."""
    rng = np.random.default_rng([seed, 11])
    ang = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, dim))
    centers[:, 0] = separation * np.cos(ang)
    if dim > 1:
        centers[:, 1] = separation * np.sin(ang)
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[y] + rng.normal(size=(len(y), dim))
    return x, y


def make_spirals(n_per_class: int, n_classes: int = 2, turns: float = 1.0, noise: float = 0.05,
                 seed: int = 0):
    """Interleaved arms ``r = s``, ``theta = 2*pi*turns*s + 2*pi*k/C`` with Gaussian jitter."""
    rng = np.random.default_rng([seed, 12])
    y = np.repeat(np.arange(n_classes), n_per_class)
    s = np.sqrt(rng.random(len(y)))
    theta = 2 * np.pi * turns * s + 2 * np.pi * y / n_classes
    x = np.stack([s * np.cos(theta), s * np.sin(theta)], axis=1)
    x += noise * rng.normal(size=x.shape)
    return x, y


# ------------------------------------------------------------------- IDX


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file (``00 00 <type> <ndim>`` magic, u32 dims, payload)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e.strerror})") from e
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated header at offset {len(raw)} (need 4 magic bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetError(f"{path}: bad magic at offset 0: expected 00 00, got {raw[0]:02x} {raw[1]:02x}")
    dtype = _IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise DatasetError(f"{path}: bad magic at offset 2: unknown type code 0x{raw[2]:02x}")
    ndim = raw[3]
    if ndim == 0:
        raise DatasetError(f"{path}: bad magic at offset 3: zero dimensions")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DatasetError(f"{path}: truncated dimension table at offset {len(raw)} (need {end} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    need = end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated payload at offset {len(raw)} (expected {need} bytes)")
    if len(raw) > need:
        raise DatasetError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    return np.frombuffer(raw, dtype=dtype, offset=end).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    code = next((c for c, d in _IDX_DTYPES.items() if d.kind == array.dtype.kind
                 and d.itemsize == array.dtype.itemsize), None)
    if code is None:
        raise DatasetError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_DTYPES[code]).tobytes())


def load_idx_pair(images, labels):
    x = read_idx(images)
    y = read_idx(labels)
    if y.ndim != 1:
        raise DatasetError(f"{labels}: labels must be 1-D, got shape {y.shape}")
    if len(x) != len(y):
        raise DatasetError(f"{images}: {len(x)} images but {labels} has {len(y)} labels")
    x = x.astype(np.float64)
    if x.ndim == 3:
        x = x[..., None]
    return x, y.astype(np.int64)


# ------------------------------------------------------------------- CSV


def load_csv(path, label_column: int = -1):
    """Numeric CSV with a header row; one column holds integer class labels."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as e:
        raise DatasetError(f"{path}: cannot read ({e})") from e
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from e
    if data.shape[1] < 2:
        raise DatasetError(f"{path}: need at least one feature and a label column")
    y = data[:, label_column]
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise DatasetError(f"{path}: label column must hold non-negative integers")
    x = np.delete(data, label_column % data.shape[1], axis=1)
    return x, y.astype(np.int64)


# ------------------------------------------------------- splits / normalize


def split(x, y, test_fraction: float, seed: int):
    """Deterministic shuffled split into disjoint train/test parts."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    order = np.random.default_rng([seed, 13]).permutation(len(y))
    n_test = max(1, int(round(len(y) * test_fraction)))
    te, tr = order[:n_test], order[n_test:]
    return x[tr], y[tr], x[te], y[te]


def normalize(x_train, x_test, how: str):
    """``none``, ``standard`` (per-feature from train stats) or ``unit`` (divide by 255)."""
    if how == "none":
        return x_train, x_test
    if how == "unit":
        return x_train / 255.0, x_test / 255.0
    if how == "standard":
        axes = tuple(range(x_train.ndim - 1)) if x_train.ndim > 2 else 0
        mu = x_train.mean(axis=axes)
        sd = x_train.std(axis=axes)
        sd = np.where(sd > 0, sd, 1.0)
        return (x_train - mu) / sd, (x_test - mu) / sd
    raise ValueError(f"unknown normalization {how!r}")


def load_dataset(source) -> Split:
    """Build train/test splits from a dataset section (see ``harness.config.DatasetSection``)."""
    kind = source.kind
    if kind == GAUSSIANS:
        x, y = make_gaussians(source.samples_per_class, source.n_classes, source.dim,
                              source.separation, source.seed)
    elif kind == SPIRALS:
        x, y = make_spirals(source.samples_per_class, source.n_classes, source.turns,
                            source.noise, source.seed)
    elif kind == IMAGE_IDX:
        if not source.path or not source.labels_path:
            raise DatasetError("image-idx needs path and labels_path")
        x, y = load_idx_pair(source.path, source.labels_path)
    elif kind == CSV:
        if not source.path:
            raise DatasetError("csv needs path")
        x, y = load_csv(source.path, source.label_column)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    n_classes = int(y.max()) + 1 if source.n_classes is None or kind in (IMAGE_IDX, CSV) else source.n_classes
    if kind in (IMAGE_IDX, CSV) and source.n_classes is not None:
        if y.max() >= source.n_classes:
            raise DatasetError(f"label {int(y.max())} out of range for {source.n_classes} classes")
        n_classes = source.n_classes
    xtr, ytr, xte, yte = split(x, y, source.test_fraction, source.seed)
    xtr, xte = normalize(xtr, xte, source.normalization)
    return Split(xtr, ytr, xte, yte, n_classes)


def save_split(out_dir, data: Split):
    """Write a split as four IDX files (float64 features, uint8 labels)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, arr in (("train-x", data.x_train), ("train-y", data.y_train.astype(np.uint8)),
                      ("test-x", data.x_test), ("test-y", data.y_test.astype(np.uint8))):
        p = out / f"{name}.idx"
        write_idx(p, arr)
        paths[name] = p
    return paths
