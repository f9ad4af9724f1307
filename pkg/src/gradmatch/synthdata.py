"""Seeded synthetic datasets, resampling and IDX ingestion.

Random streams
--------------
Every draw comes from :func:`stream`, a Philox counter-based generator
keyed by a SHA-256 digest of ``(master_seed, *labels)``. Two streams with
different labels are independent regardless of the order in which they are
created, which keeps parallel sweeps bit-identical to serial ones.

Normal variates use the Box-Muller transform of two uniform draws
(:func:`normal`), not numpy's ziggurat, so that datasets are pinned by the
uniform stream alone.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def stream(master_seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(master_seed, *labels)``."""
    text = "\x1f".join([str(int(master_seed)), *map(str, labels)])
    digest = hashlib.sha256(text.encode()).digest()
    key = np.frombuffer(digest[:16], dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(master_seed: int, *labels) -> int:
    """A 63-bit integer seed derived from ``(master_seed, *labels)``."""
    text = "\x1f".join([str(int(master_seed)), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def normal(rng: np.random.Generator, size, scale: float = 1.0) -> np.ndarray:
    """Box-Muller standard normals (times ``scale``) of the given shape."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape))
    half = (count + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 is in (0, 1]
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
    return scale * z.reshape(shape)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    id: str = "anonymous"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ConfigError(f"X {X.shape} and y {y.shape} disagree on rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ConfigError("dataset has non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def take(self, rows, tag: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.X[rows], self.y[rows], tag or self.id)


@dataclass(frozen=True)
class LinearGenConfig:
    n: int
    d: int
    coef_std: float = 3.0
    noise_std: float = 1.0
    seed: int = 0
    name: str = field(default="linear", compare=False)

    def validate(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError(f"need n, d >= 1 (got n={self.n}, d={self.d})")
        if self.coef_std < 0 or self.noise_std < 0:
            raise ConfigError("coef_std and noise_std must be non-negative")


def gen_linear(cfg: LinearGenConfig, X: np.ndarray | None = None):
    """``y = X theta + eps`` with Gaussian design, coefficients and noise.

    Passing ``X`` holds the design fixed and redraws only ``theta`` and
    ``eps``. Returns ``(dataset, true_theta)``.
    """
    cfg.validate()
    if X is None:
        X = normal(stream(cfg.seed, cfg.name, "X"), (cfg.n, cfg.d))
    else:
        X = np.asarray(X, dtype=float)
        if X.shape != (cfg.n, cfg.d):
            raise ConfigError(f"fixed design has shape {X.shape}, expected {(cfg.n, cfg.d)}")
    theta = normal(stream(cfg.seed, cfg.name, "theta"), cfg.d, cfg.coef_std)
    eps = normal(stream(cfg.seed, cfg.name, "noise"), cfg.n, cfg.noise_std)
    y = X @ theta + eps
    tag = f"{cfg.name}(n={cfg.n},d={cfg.d},seed={cfg.seed})"
    return Dataset(X, y, tag), theta


def gen_blobs(n: int, d: int, classes: int, separation: float, seed: int) -> Dataset:
    """Unit-covariance Gaussian clusters with one-hot targets.

    Class means are ``separation / sqrt(2)`` times the first ``classes``
    basis vectors, so every pair of means is ``separation`` apart.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if classes > d:
        raise ConfigError(f"simplex means need classes <= d (got {classes} > {d})")
    if n < classes:
        raise ConfigError(f"n={n} is smaller than classes={classes}")
    labels = np.arange(n) % classes
    labels = labels[stream(seed, "blobs", "perm").permutation(n)]
    means = np.zeros((classes, d))
    means[np.arange(classes), np.arange(classes)] = separation / np.sqrt(2.0)
    X = means[labels] + normal(stream(seed, "blobs", "X"), (n, d))
    return Dataset(X, np.eye(classes)[labels], f"blobs(n={n},d={d},k={classes},seed={seed})")


def resample_bootstrap(data: Dataset, seed: int) -> Dataset:
    """Draw ``n`` rows uniformly with replacement."""
    rows = stream(seed, "bootstrap", data.id).integers(0, data.n, size=data.n)
    return data.take(rows, f"{data.id}|boot(seed={seed})")


def train_test_split(data: Dataset, test_frac: float, seed: int):
    if not 0.0 <= test_frac < 1.0:
        raise ConfigError(f"test_frac must lie in [0, 1), got {test_frac}")
    perm = stream(seed, "split", data.id).permutation(data.n)
    n_train = int(round(data.n * (1.0 - test_frac)))
    train, test = perm[:n_train], perm[n_train:]
    return (data.take(train, f"{data.id}|train(seed={seed})"),
            data.take(test, f"{data.id}|test(seed={seed})"))


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(raw: bytes, magic: int, ndim: int, what: str):
    if len(raw) < 4:
        raise IdxParseError(f"{what}: file too short for magic number", len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IdxParseError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxParseError(f"{what}: truncated dimension header", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IdxParseError(f"{what}: payload truncated, expected {size} bytes", len(raw))
    payload = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)
    return dims, payload


def idx_load(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (e.g. MNIST) into a Dataset.

    Pixels are scaled to [0, 1] and each image is flattened row-major;
    labels are one-hot with ``num_classes`` columns (default ``max + 1``).
    """
    dims, pixels = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, 3, "images")
    (count,), labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, 1, "labels")
    if count != dims[0]:
        raise IdxParseError(f"label count {count} does not match image count {dims[0]}", 4)
    X = pixels.reshape(dims[0], dims[1] * dims[2]).astype(float) / 255.0
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.size and labels.max() >= k:
        raise IdxParseError(f"label {labels.max()} out of range for {k} classes", 8)
    Y = np.eye(k)[labels]
    return Dataset(X, Y, f"idx({Path(images_path).name})")
