"""Dataset container, loaders, synthetic blobs, stratified splits and the
multi-formation patch decoder."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]


class DatasetError(ValueError):
    """Raised for malformed inputs to any dataset operation."""


def round_half_up(x: float) -> int:
    # Python's round() is banker's rounding; counts here must be predictable.
    return int(math.floor(x + 0.5 + 1e-12))


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Optional[tuple[int, int, int]] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {self.features.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise DatasetError(f"need N >= 1 and D >= 1, got N={n}, D={d}")
        if self.labels.shape != (n,):
            raise DatasetError(f"labels shape {self.labels.shape} does not match N={n}")
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if len(self.image_shape) != 3 or int(np.prod(self.image_shape)) != d:
                raise DatasetError(f"image_shape {self.image_shape} does not multiply to D={d}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.num_classes,
            self.image_shape,
            meta={"parent_indices": idx},
        )


@dataclass
class DatasetSplit:
    train: Dataset
    test: Dataset
    seed: int


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int
    samples_per_class: int
    dim: int
    center_separation: float
    noise_std: float
    label_noise_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if self.samples_per_class < 1 or self.dim < 1:
            raise DatasetError("samples_per_class and dim must be positive")
        if not self.center_separation > 0 or not self.noise_std > 0:
            raise DatasetError("center_separation and noise_std must be > 0")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise DatasetError("label_noise_rate must lie in [0, 1)")


def class_histogram(data: Dataset) -> np.ndarray:
    return np.bincount(data.labels, minlength=data.num_classes).astype(np.int64)


# ---------------------------------------------------------------------------
# CSV


def load_csv(path: PathLike, label_column: Union[str, int] = "label") -> Dataset:
    """Read a headed CSV; every column except ``label_column`` is a feature.

    Labels are remapped to ``0..C-1`` in sorted order of the original values;
    the mapping is kept in ``meta["label_map"]``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DatasetError(f"{path}: no data rows")
    if isinstance(label_column, int):
        lab_idx = label_column
        if not -len(header) <= lab_idx < len(header):
            raise DatasetError(f"{path}: label column index {label_column} out of range")
        lab_idx %= len(header)
    else:
        if label_column not in header:
            raise DatasetError(f"{path}: no column named {label_column!r}")
        lab_idx = header.index(label_column)
    feat_cols = [j for j in range(len(header)) if j != lab_idx]
    if not feat_cols:
        raise DatasetError(f"{path}: no feature columns")

    feats = np.empty((len(body), len(feat_cols)), dtype=np.float64)
    raw_labels = np.empty(len(body), dtype=np.int64)
    for i, row in enumerate(body):
        row_no = i + 2  # 1-based, counting the header
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
        for out_j, j in enumerate(feat_cols):
            try:
                feats[i, out_j] = float(row[j])
            except ValueError:
                raise DatasetError(
                    f"{path}: non-numeric value {row[j]!r} at row {row_no}, column {header[j]!r}"
                ) from None
        try:
            lab = float(row[lab_idx])
        except ValueError:
            lab = math.nan
        if not math.isfinite(lab) or lab != int(lab):
            raise DatasetError(
                f"{path}: non-integer label {row[lab_idx]!r} at row {row_no}, column {header[lab_idx]!r}"
            )
        raw_labels[i] = int(lab)

    originals = np.unique(raw_labels)
    if len(originals) < 2:
        raise DatasetError(f"{path}: only one class present ({originals.tolist()})")
    labels = np.searchsorted(originals, raw_labels)
    label_map = {int(o): k for k, o in enumerate(originals)}
    return Dataset(
        feats,
        labels,
        len(originals),
        meta={"label_map": label_map, "feature_names": [header[j] for j in feat_cols]},
    )


def write_csv(data: Dataset, path: PathLike, label_column: str = "label") -> None:
    names = data.meta.get("feature_names") or [f"f{j}" for j in range(data.dim)]
    inverse = {v: k for k, v in data.meta.get("label_map", {}).items()}
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [label_column])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [inverse.get(int(y), int(y))])


# ---------------------------------------------------------------------------
# YTF / YTL binary tensors

_YTF_MAGIC = b"YTF1"
_YTL_MAGIC = b"YTL1"
_DTYPE_F32 = 1


def write_ytf(array: np.ndarray, path: PathLike) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    head = _YTF_MAGIC + struct.pack("<BB", _DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def read_ytf(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != _YTF_MAGIC:
        raise DatasetError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 6:
        raise DatasetError(f"{path}: truncated header")
    dtype_tag, rank = struct.unpack_from("<BB", buf, 4)
    if dtype_tag != _DTYPE_F32:
        raise DatasetError(f"{path}: unsupported dtype tag {dtype_tag}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise DatasetError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * count:
        raise DatasetError(f"{path}: payload is {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()


def write_ytl(labels: np.ndarray, path: PathLike) -> None:
    lab = np.ascontiguousarray(labels, dtype="<u4")
    Path(path).write_bytes(_YTL_MAGIC + struct.pack("<I", lab.size) + lab.tobytes())


def read_ytl(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != _YTL_MAGIC or len(buf) < 8:
        raise DatasetError(f"{path}: not a YTL1 label file")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + 4 * n:
        raise DatasetError(f"{path}: expected {n} labels, file size disagrees")
    return np.frombuffer(buf, dtype="<u4", count=n, offset=8).astype(np.int64)


def load_ytf(features_path: PathLike, labels_path: PathLike, num_classes: Optional[int] = None) -> Dataset:
    """Load a rank-2 (N, D) or rank-4 (N, C, H, W) tensor plus its labels."""
    x = read_ytf(features_path)
    y = read_ytl(labels_path)
    if x.ndim == 4:
        image_shape = tuple(x.shape[1:])
        x = x.reshape(x.shape[0], -1)
    elif x.ndim == 2:
        image_shape = None
    else:
        raise DatasetError(f"{features_path}: rank {x.ndim} tensor, expected 2 or 4")
    if len(y) != x.shape[0]:
        raise DatasetError(f"{len(y)} labels for {x.shape[0]} samples")
    c = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y, c, image_shape)


# ---------------------------------------------------------------------------
# synthetic data


def blob_centers(spec: BlobSpec) -> np.ndarray:
    """Class means: class k sits at ``center_separation`` along axis ``k mod D``.

    When C > D the axes are reused with alternating sign and growing radius
    so no two classes share a center.
    """
    centers = np.zeros((spec.num_classes, spec.dim))
    for k in range(spec.num_classes):
        wrap = k // spec.dim
        sign = -1.0 if wrap % 2 else 1.0
        centers[k, k % spec.dim] = sign * spec.center_separation * (1 + wrap // 2)
    return centers


def generate_blobs(spec: BlobSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = blob_centers(spec)
    c, m = spec.num_classes, spec.samples_per_class
    clean = np.repeat(np.arange(c), m)
    x = centers[clean] + spec.noise_std * rng.standard_normal((c * m, spec.dim))
    labels = clean.copy()
    n_flip = round_half_up(spec.label_noise_rate * c * m)
    flipped = np.sort(rng.choice(c * m, size=n_flip, replace=False)) if n_flip else np.zeros(0, np.int64)
    for i in flipped:
        # uniform over the other C-1 classes
        shift = rng.integers(1, c)
        labels[i] = (clean[i] + shift) % c
    return Dataset(
        x,
        labels,
        c,
        meta={"clean_labels": clean, "flipped": flipped, "blob_spec": spec, "seed": seed},
    )


# ---------------------------------------------------------------------------
# splitting


def split(data: Dataset, test_fraction: float, seed: int) -> DatasetSplit:
    """Stratified split: per class, ``round(test_fraction * n_k)`` rows go to test."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx: list[np.ndarray] = []
    for k in range(data.num_classes):
        members = np.flatnonzero(data.labels == k)
        if members.size == 0:
            continue
        n_test = round_half_up(test_fraction * members.size)
        if n_test == 0 or n_test == members.size:
            raise DatasetError(
                f"class {k} has {members.size} sample(s); cannot populate both train and test"
            )
        test_idx.append(rng.permutation(members)[:n_test])
    test_sel = np.sort(np.concatenate(test_idx))
    mask = np.ones(data.n, dtype=bool)
    mask[test_sel] = False
    train_sel = np.flatnonzero(mask)
    return DatasetSplit(data.subset(train_sel), data.subset(test_sel), seed)


# ---------------------------------------------------------------------------
# multi-formation


def bilinear_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) interpolation matrix, half-pixel centers, edges clamped."""
    w = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        w[o, i0] += 1.0 - frac
        w[o, i1] += frac
    return w


def multiformation_decode(data: Dataset, factor: int) -> Dataset:
    """Split every stored image into ``factor**2`` patches, each resized back
    to the full image size.

    Output order is source order, then row-major patch order; provenance goes
    to ``meta["source_index"]`` and ``meta["patch_position"]`` (row, col).
    """
    if data.image_shape is None:
        raise DatasetError("multi-formation needs image_shape")
    if factor < 1:
        raise DatasetError(f"factor must be >= 1, got {factor}")
    ch, h, w = data.image_shape
    if h % factor or w % factor:
        raise DatasetError(f"image {h}x{w} is not divisible by factor {factor}")
    if factor == 1:
        return Dataset(
            data.features.copy(),
            data.labels.copy(),
            data.num_classes,
            data.image_shape,
            meta={
                "source_index": np.arange(data.n),
                "patch_position": np.zeros((data.n, 2), dtype=np.int64),
                "factor": 1,
            },
        )
    ph, pw = h // factor, w // factor
    wh = bilinear_weights(ph, h)
    ww = bilinear_weights(pw, w)
    imgs = data.features.reshape(data.n, ch, h, w)
    # (N, C, n, ph, n, pw) -> (N, n, n, C, ph, pw): patches in row-major order
    patches = imgs.reshape(data.n, ch, factor, ph, factor, pw).transpose(0, 2, 4, 1, 3, 5)
    up = np.einsum("hp,nijcpq,wq->nijchw", wh, patches, ww, optimize=True)
    n_out = data.n * factor * factor
    feats = up.reshape(n_out, ch * h * w).astype(data.features.dtype, copy=False)
    rows, cols = np.divmod(np.arange(factor * factor), factor)
    return Dataset(
        feats,
        np.repeat(data.labels, factor * factor),
        data.num_classes,
        data.image_shape,
        meta={
            "source_index": np.repeat(np.arange(data.n), factor * factor),
            "patch_position": np.tile(np.stack([rows, cols], axis=1), (data.n, 1)),
            "factor": factor,
        },
    )
