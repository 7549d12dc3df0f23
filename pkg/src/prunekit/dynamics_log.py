"""YDLG: the on-disk record of per-epoch, per-sample training dynamics.

Layout (all little-endian)::

    "YDLG" | u16 version=1 | u32 N | u32 C | u32 E | u8 loss_kind | u64 seed
    N x u32 labels
    E x [f32 train_accuracy | f32 mean_loss | N*C x f32 logits (row-major)]
    u32 CRC32 of every preceding byte

Logits are stored raw (pre-softmax); every score in :mod:`prunekit.scoring`
is derived from logits plus labels.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"YDLG"
VERSION = 1
LOSS_KINDS = ("cross_entropy", "mse")

_HEADER = struct.Struct("<4sHIIIBQ")
HEADER_SIZE = _HEADER.size  # 27


class LogFormatError(ValueError):
    pass


class LogChecksumError(LogFormatError):
    pass


@dataclass
class DynamicsLog:
    labels: np.ndarray  # (N,)
    num_classes: int
    accuracies: np.ndarray  # (E,) float32
    losses: np.ndarray  # (E,) float32
    logits: np.ndarray  # (E, N, C) float32
    loss_kind: str = "cross_entropy"
    seed: int = 0
    # not persisted in the file
    config_hash: str = ""
    note: str = ""

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.accuracies = np.asarray(self.accuracies, dtype=np.float32)
        self.losses = np.asarray(self.losses, dtype=np.float32)
        self.logits = np.asarray(self.logits, dtype=np.float32)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_epochs(self) -> int:
        return int(self.logits.shape[0])

    def head(self, epochs: int) -> "DynamicsLog":
        """The first ``epochs`` records as a new log."""
        return DynamicsLog(
            self.labels,
            self.num_classes,
            self.accuracies[:epochs],
            self.losses[:epochs],
            self.logits[:epochs],
            self.loss_kind,
            self.seed,
            self.config_hash,
            self.note,
        )


def file_size(n: int, c: int, e: int) -> int:
    return HEADER_SIZE + 4 * n + e * (8 + 4 * n * c) + 4


def validate(log: DynamicsLog) -> list[str]:
    """Return every invariant violation found; an empty list means valid."""
    problems: list[str] = []
    n, c = log.n, log.num_classes
    if log.labels.ndim != 1:
        return [f"labels must be 1-D, got shape {log.labels.shape}"]
    if c < 2:
        problems.append(f"num_classes must be >= 2, got {c}")
    if log.logits.ndim != 3:
        return problems + [f"logits must be (E, N, C), got shape {log.logits.shape}"]
    e = log.logits.shape[0]
    if e < 1:
        problems.append("log has no epoch records")
    if log.logits.shape[1:] != (n, c):
        problems.append(f"logits shape {log.logits.shape} does not match (E, {n}, {c})")
    if log.accuracies.shape != (e,) or log.losses.shape != (e,):
        problems.append(
            f"expected {e} accuracy/loss entries, got {log.accuracies.shape} and {log.losses.shape}"
        )
    if log.loss_kind not in LOSS_KINDS:
        problems.append(f"unknown loss_kind {log.loss_kind!r}")
    if not 0 <= log.seed < 2**64:
        problems.append(f"seed {log.seed} does not fit in u64")
    bad_lab = np.flatnonzero((log.labels < 0) | (log.labels >= c))
    for i in bad_lab:
        problems.append(f"sample {i}: label {log.labels[i]} outside [0, {c})")
    if log.accuracies.ndim == 1:
        for t in np.flatnonzero(~((log.accuracies >= 0) & (log.accuracies <= 1))):
            problems.append(f"epoch {t}: accuracy {log.accuracies[t]} outside [0, 1]")
    if log.logits.ndim == 3 and log.logits.size:
        bad = ~np.isfinite(log.logits).all(axis=2)
        for t, i in zip(*np.nonzero(bad)):
            problems.append(f"epoch {t}, sample {i}: non-finite logit")
    return problems


def encode(log: DynamicsLog) -> bytes:
    problems = validate(log)
    if problems:
        raise LogFormatError("invalid log: " + "; ".join(problems[:5]))
    n, c, e = log.n, log.num_classes, log.num_epochs
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, c, e, LOSS_KINDS.index(log.loss_kind), log.seed),
        log.labels.astype("<u4").tobytes(),
    ]
    logits = np.ascontiguousarray(log.logits, dtype="<f4")
    for t in range(e):
        parts.append(struct.pack("<ff", log.accuracies[t], log.losses[t]))
        parts.append(logits[t].tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes, source: str = "<bytes>") -> DynamicsLog:
    if len(buf) < HEADER_SIZE + 4:
        raise LogFormatError(f"{source}: truncated header ({len(buf)} bytes)")
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    magic, version, n, c, e, kind, seed = _HEADER.unpack_from(buf, 0)
    expected = file_size(n, c, e)
    if zlib.crc32(buf[:-4]) != stored_crc:
        msg = f"{source}: CRC mismatch"
        if magic == MAGIC and len(buf) < expected:
            done = max(0, (len(buf) - HEADER_SIZE - 4 * n)) // (8 + 4 * n * c)
            where = "in labels" if len(buf) < HEADER_SIZE + 4 * n else f"at epoch {min(done, e - 1)}"
            msg += f"; file truncated {where}"
        raise LogChecksumError(msg)
    if magic != MAGIC:
        raise LogFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise LogFormatError(f"{source}: unsupported version {version}")
    if len(buf) != expected:
        raise LogFormatError(f"{source}: {len(buf)} bytes, header implies {expected}")
    if kind >= len(LOSS_KINDS):
        raise LogFormatError(f"{source}: unknown loss kind tag {kind}")

    off = HEADER_SIZE
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    rec = np.dtype([("acc", "<f4"), ("loss", "<f4"), ("logits", "<f4", (n, c))])
    recs = np.frombuffer(buf, dtype=rec, count=e, offset=off)
    log = DynamicsLog(
        labels,
        c,
        recs["acc"].copy(),
        recs["loss"].copy(),
        recs["logits"].reshape(e, n, c).copy(),
        LOSS_KINDS[kind],
        seed,
    )
    problems = validate(log)
    if problems:
        raise LogFormatError(f"{source}: " + "; ".join(problems[:5]))
    return log


def write_log(log: DynamicsLog, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode(log))


def read_log(path: Union[str, Path]) -> DynamicsLog:
    return decode(Path(path).read_bytes(), str(path))


def log_hash(log: DynamicsLog) -> str:
    return hashlib.sha256(encode(log)).hexdigest()
