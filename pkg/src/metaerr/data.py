"""Datasets, splits, file formats and synthetic generators.

A :class:`Dataset` holds an ``N x D`` feature matrix and one label array whose
meaning depends on ``task``:

* ``classification``: integer class ids in ``[0, n_classes)``, shape ``(N,)``
* ``regression``: real scalars, shape ``(N,)``
* ``segmentation``: binary masks flattened row-major, shape ``(N, H*W)``,
  with the grid shape kept in ``mask_shape``
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_seed, make_rng

TASKS = ("classification", "regression", "segmentation")

CACHE_MAGIC = b"MEDS"
CACHE_VERSION = 1
_TASK_CODES = {name: i for i, name in enumerate(TASKS)}


class DataError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    task: str
    ids: tuple = ()
    n_classes: int | None = None
    mask_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty N x D matrix, got shape {x.shape}")
        n = x.shape[0]
        if self.task == "classification":
            y = np.asarray(self.labels)
            if y.ndim != 1 or not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataError("class labels must be a 1-d integer sequence")
            y = y.astype(np.int64)
            k = self.n_classes if self.n_classes is not None else int(y.max()) + 1
            if y.size and (y.min() < 0 or y.max() >= k):
                raise DataError(f"class label out of range [0, {k})")
            object.__setattr__(self, "n_classes", int(k))
        elif self.task == "regression":
            y = np.asarray(self.labels, dtype=np.float64)
            if y.ndim != 1:
                raise DataError("regression labels must be a 1-d sequence")
        else:
            if self.mask_shape is None:
                raise DataError("segmentation dataset needs mask_shape")
            h, w = self.mask_shape
            y = np.asarray(self.labels)
            if y.ndim == 3:
                y = y.reshape(y.shape[0], -1)
            if y.ndim != 2 or y.shape[1] != h * w:
                raise DataError(f"masks must all have shape {h}x{w}")
            if not np.all((y == 0) | (y == 1)):
                raise DataError("mask entries must be 0 or 1")
            y = y.astype(np.uint8)
            object.__setattr__(self, "mask_shape", (int(h), int(w)))
        if y.shape[0] != n:
            raise DataError(f"label count {y.shape[0]} != sample count {n}")
        ids = tuple(self.ids) if len(self.ids) else tuple(range(n))
        if len(ids) != n:
            raise DataError("ids must have one entry per sample")
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.task,
            ids=tuple(self.ids[i] for i in idx),
            n_classes=self.n_classes,
            mask_shape=self.mask_shape,
        )

    def masks(self) -> np.ndarray:
        """Masks as an ``(N, H, W)`` array (segmentation only)."""
        if self.task != "segmentation":
            raise DataError("masks() is only defined for segmentation datasets")
        return self.labels.reshape(len(self), *self.mask_shape)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.task == other.task
            and self.n_classes == other.n_classes
            and self.mask_shape == other.mask_shape
            and tuple(self.ids) == tuple(other.ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    probe_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        for name in ("train_idx", "probe_idx", "test_idx"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        a, b, c = (set(map(int, p)) for p in (self.train_idx, self.probe_idx, self.test_idx))
        if a & b or a & c or b & c:
            raise DataError("split parts overlap")

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_idx), len(self.probe_idx), len(self.test_idx)


def make_split(dataset: Dataset, fractions: Sequence[float], seed: int) -> Split:
    """Shuffle the rows with ``seed`` and cut them into train/probe/test.

    Probe and test get ``floor(fraction * N)`` rows; train gets its own floor
    plus the rounding remainder. Rows beyond ``floor(sum(fractions) * N)`` are
    left out of every part.
    """
    if len(fractions) != 3:
        raise DataError("fractions must be a (train, probe, test) triple")
    f_train, f_probe, f_test = (float(f) for f in fractions)
    if min(f_train, f_probe, f_test) < 0:
        raise DataError("fractions must be nonnegative")
    if f_train + f_probe + f_test > 1 + 1e-12:
        raise DataError(f"fractions sum to {f_train + f_probe + f_test} > 1")
    n = len(dataset)
    n_probe = math.floor(f_probe * n + 1e-9)
    n_test = math.floor(f_test * n + 1e-9)
    n_total = min(n, math.floor((f_train + f_probe + f_test) * n + 1e-9))
    n_train = n_total - n_probe - n_test
    for frac, size, name in ((f_train, n_train, "train"), (f_probe, n_probe, "probe"), (f_test, n_test, "test")):
        if frac > 0 and size == 0:
            raise DataError(f"{name} part is empty for N={n}")
    perm = make_rng(seed).permutation(n)
    return Split(
        train_idx=np.sort(perm[:n_train]),
        probe_idx=np.sort(perm[n_train:n_train + n_probe]),
        test_idx=np.sort(perm[n_train + n_probe:n_train + n_probe + n_test]),
    )


# -- generators ---------------------------------------------------------------


def blob_centers(k: int, d: int, seed: int, layout: str = "uniform", radius: float = 1.0) -> np.ndarray:
    """Cluster centers for :func:`gen_gaussian_blobs`.

    ``uniform`` draws centers from ``[-1, 1]^d``. ``orthogonal`` (needs
    ``d >= k``) places them at ``radius`` along random orthonormal directions,
    so every pair of classes is equally far apart.
    """
    rng = make_rng(seed)
    if layout == "uniform":
        return rng.uniform(-1.0, 1.0, size=(k, d))
    if layout == "orthogonal":
        if d < k:
            raise DataError("orthogonal layout needs d >= k")
        q, r = np.linalg.qr(rng.standard_normal((d, k)))
        return radius * (q * np.sign(np.diag(r))).T
    raise DataError(f"unknown center layout {layout!r}")


def gen_gaussian_blobs(
    n: int, k: int, d: int, spread: float, seed: int, layout: str = "uniform", radius: float = 1.0
) -> Dataset:
    """``k`` isotropic Gaussian clusters of std ``spread`` around :func:`blob_centers`.

    Class sizes differ by at most one.
    """
    if not (n >= k >= 2) or d < 1:
        raise DataError(f"need n >= k >= 2 and d >= 1, got n={n}, k={k}, d={d}")
    if not spread > 0:
        raise DataError("spread must be positive")
    centers = blob_centers(k, d, seed, layout, radius)
    rng = make_rng(derive_seed(seed, 1))
    labels = rng.permutation(np.arange(n) % k)
    x = centers[labels] + spread * rng.standard_normal((n, d))
    return Dataset(x, labels, "classification", n_classes=k)


def regression_weights(d: int, seed: int) -> tuple[np.ndarray, float]:
    """Generating weights and intercept of :func:`gen_regression_synthetic`."""
    rng = make_rng(seed)
    return rng.uniform(-2.0, 2.0, size=d), float(rng.uniform(-1.0, 1.0))


def gen_regression_synthetic(
    n: int, d: int, noise: float, seed: int, hetero_feature: int | None = None
) -> Dataset:
    """Linear targets ``x @ w + b`` plus Gaussian noise.

    With ``hetero_feature`` set, the noise std for a row is
    ``noise * |x[hetero_feature]|`` instead of the constant ``noise``.
    Features are uniform on ``[-1, 1]``.
    """
    if n < 1 or d < 1:
        raise DataError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if noise < 0:
        raise DataError("noise must be nonnegative")
    if hetero_feature is not None and not 0 <= hetero_feature < d:
        raise DataError("hetero_feature out of range")
    w, b = regression_weights(d, seed)
    rng = make_rng(seed)
    rng.uniform(-2.0, 2.0, size=d)
    rng.uniform(-1.0, 1.0)
    x = rng.uniform(-1.0, 1.0, size=(n, d))
    scale = noise if hetero_feature is None else noise * np.abs(x[:, hetero_feature])
    y = x @ w + b + scale * rng.standard_normal(n)
    return Dataset(x, y, "regression")


def gen_segmentation_synthetic(
    n: int, h: int, w: int, seed: int, noise: float = 0.3, max_noise: float | None = None
) -> Dataset:
    """Noisy images of one axis-aligned rectangle each, with its mask.

    Pixel values are 1 inside the rectangle and 0 outside, plus Gaussian noise
    of std ``noise`` (or a per-image std drawn uniformly from
    ``[noise, max_noise]`` when ``max_noise`` is given). Every rectangle has at
    least one pixel.
    """
    if h < 2 or w < 2 or n < 1:
        raise DataError(f"need n >= 1 and h, w >= 2, got n={n}, h={h}, w={w}")
    rng = make_rng(seed)
    masks = np.zeros((n, h, w), dtype=np.uint8)
    for i in range(n):
        r0, r1 = np.sort(rng.integers(0, h, size=2))
        c0, c1 = np.sort(rng.integers(0, w, size=2))
        masks[i, r0:r1 + 1, c0:c1 + 1] = 1
    if max_noise is None:
        sigma = np.full(n, float(noise))
    else:
        sigma = rng.uniform(noise, max_noise, size=n)
    flat = masks.reshape(n, h * w)
    x = flat + sigma[:, None] * rng.standard_normal((n, h * w))
    return Dataset(x, flat, "segmentation", mask_shape=(h, w))


# -- CSV ----------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`.

    ``label`` names the label column for classification and regression;
    segmentation files instead carry the flattened mask in ``mask_columns``.
    """

    features: tuple[str, ...]
    task: str = "classification"
    label: str | None = None
    mask_columns: tuple[str, ...] = ()
    mask_shape: tuple[int, int] | None = None
    n_classes: int | None = None
    id_column: str | None = None

    @classmethod
    def infer(cls, header: Sequence[str], task: str, **kw) -> "CsvSchema":
        """Schema for files written by :func:`save_csv`."""
        feats = tuple(c for c in header if c.startswith("f"))
        masks = tuple(c for c in header if c.startswith("m"))
        return cls(
            features=feats,
            task=task,
            label="label" if "label" in header else None,
            mask_columns=masks,
            id_column="id" if "id" in header else None,
            **kw,
        )


def _parse(cell: str, where: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"non-numeric cell {cell!r} at {where}") from None


def load_csv(path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    if not schema.features:
        raise DataError("schema needs at least one feature column")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = list(schema.features)
        if schema.task == "segmentation":
            needed += list(schema.mask_columns)
        elif schema.label is None:
            raise DataError("schema names no label column")
        else:
            needed.append(schema.label)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"missing columns: {missing}")
        feats, labels, ids = [], [], []
        for row_no, row in enumerate(reader):
            feats.append([_parse(row[c], f"row {row_no}, column {c}") for c in schema.features])
            if schema.task == "segmentation":
                labels.append([_parse(row[c], f"row {row_no}, column {c}") for c in schema.mask_columns])
            else:
                labels.append(_parse(row[schema.label], f"row {row_no}, column {schema.label}"))
            ids.append(row[schema.id_column] if schema.id_column else row_no)
    if not feats:
        raise DataError(f"{path} has no data rows")
    labels = np.asarray(labels)
    if schema.task == "classification":
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise DataError("class labels must be integers")
        labels = labels.astype(np.int64)
    ids = [int(i) if isinstance(i, str) and i.lstrip("-").isdigit() else i for i in ids]
    return Dataset(
        np.asarray(feats, dtype=np.float64),
        labels,
        schema.task,
        ids=tuple(ids),
        n_classes=schema.n_classes,
        mask_shape=schema.mask_shape,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(dataset: Dataset, path) -> CsvSchema:
    """Write ``dataset`` using shortest round-trip float text; returns the schema to reload it."""
    d = dataset.n_features
    feat_cols = [f"f{j}" for j in range(d)]
    if dataset.task == "segmentation":
        label_cols = [f"m{j}" for j in range(dataset.labels.shape[1])]
    else:
        label_cols = ["label"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *feat_cols, *label_cols])
        for i in range(len(dataset)):
            row = [dataset.ids[i], *(_fmt(v) for v in dataset.features[i])]
            if dataset.task == "segmentation":
                row += [str(int(v)) for v in dataset.labels[i]]
            elif dataset.task == "classification":
                row.append(str(int(dataset.labels[i])))
            else:
                row.append(_fmt(dataset.labels[i]))
            writer.writerow(row)
    return CsvSchema(
        features=tuple(feat_cols),
        task=dataset.task,
        label=None if dataset.task == "segmentation" else "label",
        mask_columns=tuple(label_cols) if dataset.task == "segmentation" else (),
        mask_shape=dataset.mask_shape,
        n_classes=dataset.n_classes,
        id_column="id",
    )


# -- binary cache -------------------------------------------------------------
#
# Layout (all little-endian):
#   magic b"MEDS" | u32 version | u32 task code | u64 N, D, K, H, W
#   N*D float64 features | labels: N int64 (classification), N float64
#   (regression) or N*H*W uint8 (segmentation)
# K is 0 unless classification; H and W are 0 unless segmentation.
# Sample ids are not stored; they reload as row indices.

_HEADER = struct.Struct("<4sII5Q")


def save_cache(dataset: Dataset, path) -> None:
    n, d = dataset.features.shape
    k = (dataset.n_classes or 0) if dataset.task == "classification" else 0
    h, w = dataset.mask_shape or (0, 0)
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, _TASK_CODES[dataset.task], n, d, k, h, w))
        fh.write(dataset.features.astype("<f8").tobytes())
        if dataset.task == "classification":
            fh.write(dataset.labels.astype("<i8").tobytes())
        elif dataset.task == "regression":
            fh.write(dataset.labels.astype("<f8").tobytes())
        else:
            fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_cache(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError("cache file truncated")
    magic, version, code, n, d, k, h, w = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise DataError(f"bad cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise DataError(f"unsupported cache version {version}")
    task = TASKS[code]
    off = _HEADER.size
    x = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    off += 8 * n * d
    if task == "classification":
        y = np.frombuffer(raw, dtype="<i8", count=n, offset=off)
    elif task == "regression":
        y = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    else:
        y = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=off).reshape(n, h * w)
    return Dataset(
        x.astype(np.float64),
        y,
        task,
        n_classes=k if task == "classification" else None,
        mask_shape=(h, w) if task == "segmentation" else None,
    )


# -- IDX ----------------------------------------------------------------------

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise DataError(f"{path} is not an IDX file")
    ndim = raw[3]
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    return np.frombuffer(raw, dtype=_IDX_DTYPES[raw[2]], offset=4 + 4 * ndim).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None, scale: float = 1 / 255) -> Dataset:
    """Load an MNIST-style IDX image/label file pair as a classification dataset.

    Images are flattened and multiplied by ``scale``.
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    x = images.reshape(images.shape[0], -1).astype(np.float64) * scale
    return Dataset(x, labels.astype(np.int64), "classification", n_classes=n_classes)
