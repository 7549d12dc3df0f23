"""Turning a score vector into a subset of sample indices.

Every selector breaks ties by ascending sample index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .dataset import round_half_up
from .scoring import ScoreVector


class SelectionError(ValueError):
    pass


class ClassShortfall(SelectionError):
    """Some classes hold fewer samples than the per-class budget."""

    def __init__(self, deficits: dict[int, int], per_class: int):
        self.deficits = deficits
        self.per_class = per_class
        listing = ", ".join(f"class {k}: {n}" for k, n in sorted(deficits.items()))
        super().__init__(f"classes with fewer than {per_class} samples ({listing})")


@dataclass
class SubsetIndex:
    indices: np.ndarray
    per_class_counts: np.ndarray
    method: str
    parameters: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.per_class_counts = np.asarray(self.per_class_counts, dtype=np.int64)
        if np.any(np.diff(self.indices) <= 0):
            raise SelectionError("indices must be strictly increasing")
        if self.indices.size != int(self.per_class_counts.sum()):
            raise SelectionError("per_class_counts do not sum to the number of indices")

    def __len__(self) -> int:
        return int(self.indices.size)

    def check_against(self, labels: np.ndarray) -> None:
        labels = np.asarray(labels)
        if self.indices.size and (self.indices[0] < 0 or self.indices[-1] >= len(labels)):
            raise SelectionError(f"indices fall outside [0, {len(labels)})")
        counts = np.bincount(labels[self.indices], minlength=len(self.per_class_counts))
        if not np.array_equal(counts, self.per_class_counts):
            raise SelectionError("per_class_counts disagree with labels of the selected samples")


@dataclass
class SelectionTarget:
    total_count: Optional[int] = None
    per_class: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.total_count is None) == (self.per_class is None):
            raise SelectionError("give exactly one of total_count or per_class")
        value = self.total_count if self.total_count is not None else self.per_class
        if value < 1:
            raise SelectionError("selection target must be positive")

    def total(self, num_classes: int) -> int:
        return self.total_count if self.total_count is not None else self.per_class * num_classes

    def per_class_budget(self, num_classes: int) -> int:
        if self.per_class is not None:
            return self.per_class
        return max(1, self.total_count // num_classes)


def _make(indices, labels, num_classes, method, params) -> SubsetIndex:
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    counts = np.bincount(np.asarray(labels)[idx], minlength=num_classes)
    return SubsetIndex(idx, counts, method, params)


def _num_classes(labels: np.ndarray, num_classes: Optional[int]) -> int:
    return int(num_classes) if num_classes is not None else int(np.max(labels)) + 1


def preference_key(scores: ScoreVector, prefer: str = "easy") -> np.ndarray:
    """Sort key where smaller means 'take first' under the given preference."""
    if prefer not in ("easy", "hard"):
        raise SelectionError(f"prefer must be 'easy' or 'hard', got {prefer!r}")
    key = scores.ease_key()
    return key if prefer == "easy" else -key


def _order(key: np.ndarray) -> np.ndarray:
    # stable sort == ascending key, then ascending index
    return np.argsort(key, kind="stable")


def rank_select(
    scores: ScoreVector,
    labels: np.ndarray,
    total_count: int,
    prefer: str = "easy",
    num_classes: Optional[int] = None,
) -> SubsetIndex:
    """Global top-``total_count`` cut with no class constraint."""
    labels = np.asarray(labels)
    n = len(scores)
    if len(labels) != n:
        raise SelectionError(f"{len(labels)} labels for {n} scores")
    if not 1 <= total_count <= n:
        raise SelectionError(f"count {total_count} out of range [1, {n}]")
    picked = _order(preference_key(scores, prefer))[:total_count]
    return _make(picked, labels, _num_classes(labels, num_classes), "rank",
                 {"total_count": int(total_count), "prefer": prefer, "metric": scores.metric})


def balanced_select(
    scores: ScoreVector,
    labels: np.ndarray,
    per_class: int,
    prefer: str = "easy",
    clamp: bool = False,
    num_classes: Optional[int] = None,
) -> SubsetIndex:
    """Take the ``per_class`` best-ranked samples of every class.

    A class with too few members raises :class:`ClassShortfall`, or with
    ``clamp`` contributes all it has (deficits go to ``parameters``).
    """
    labels = np.asarray(labels)
    if len(labels) != len(scores):
        raise SelectionError(f"{len(labels)} labels for {len(scores)} scores")
    if per_class < 1:
        raise SelectionError("per_class must be >= 1")
    c = _num_classes(labels, num_classes)
    sizes = np.bincount(labels, minlength=c)
    deficits = {k: int(sizes[k]) for k in range(c) if sizes[k] < per_class}
    if deficits and not clamp:
        raise ClassShortfall(deficits, per_class)
    key = preference_key(scores, prefer)
    chosen = []
    for k in range(c):
        members = np.flatnonzero(labels == k)
        chosen.append(members[_order(key[members])[:per_class]])
    params: dict[str, Any] = {"per_class": int(per_class), "prefer": prefer, "metric": scores.metric}
    if deficits:
        params["deficits"] = {str(k): per_class - v for k, v in deficits.items()}
    return _make(np.concatenate(chosen), labels, c, "balanced", params)


def random_select(
    n_total: int,
    total_count: int,
    seed: int,
    labels: Optional[np.ndarray] = None,
    num_classes: Optional[int] = None,
) -> SubsetIndex:
    if not 1 <= total_count <= n_total:
        raise SelectionError(f"count {total_count} out of range [1, {n_total}]")
    picked = np.random.default_rng(seed).choice(n_total, size=total_count, replace=False)
    if labels is None:
        labels = np.zeros(n_total, dtype=np.int64)
    return _make(picked, labels, _num_classes(np.asarray(labels), num_classes), "random",
                 {"total_count": int(total_count), "seed": int(seed)})


def _water_fill(sizes: list[int], budget: int) -> list[int]:
    """Spread ``budget`` over bins as evenly as capacity allows, smallest bin first."""
    alloc = [0] * len(sizes)
    order = sorted(range(len(sizes)), key=lambda b: (sizes[b], b))
    remaining = budget
    for pos, b in enumerate(order):
        share = remaining // (len(order) - pos)
        alloc[b] = min(sizes[b], share)
        remaining -= alloc[b]
    # integer division can strand a remainder; hand it out in bin order
    for b in range(len(sizes)):
        if remaining == 0:
            break
        extra = min(sizes[b] - alloc[b], remaining)
        alloc[b] += extra
        remaining -= extra
    return alloc


def ccs_select(
    scores: ScoreVector,
    labels: np.ndarray,
    total_count: int,
    hard_cutoff: float = 0.3,
    num_strata: int = 50,
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> SubsetIndex:
    """Coverage-centric selection: drop the hardest ``hard_cutoff`` fraction,
    bin the remaining ease range into equal-width strata and sample each
    stratum uniformly under an evenly spread budget."""
    labels = np.asarray(labels)
    n = len(scores)
    if not 0.0 <= hard_cutoff < 1.0:
        raise SelectionError("hard_cutoff must lie in [0, 1)")
    if num_strata < 1:
        raise SelectionError("num_strata must be >= 1")
    key = scores.ease_key()
    n_drop = round_half_up(hard_cutoff * n)
    survivors = _order(key)[: n - n_drop]
    if not 1 <= total_count <= len(survivors):
        raise SelectionError(f"budget {total_count} exceeds the {len(survivors)} samples left after the cutoff")

    sk = key[survivors]
    lo, hi = float(sk.min()), float(sk.max())
    if hi > lo:
        width = (hi - lo) / num_strata
        bins = np.minimum(((sk - lo) / width).astype(np.int64), num_strata - 1)
    else:
        bins = np.zeros(len(sk), dtype=np.int64)
    groups = [np.sort(survivors[bins == b]) for b in range(num_strata)]
    groups = [g for g in groups if g.size]
    alloc = _water_fill([g.size for g in groups], total_count)
    rng = np.random.default_rng(seed)
    picked = [rng.choice(g, size=a, replace=False) for g, a in zip(groups, alloc) if a]
    return _make(np.concatenate(picked), labels, _num_classes(labels, num_classes), "ccs",
                 {"total_count": int(total_count), "hard_cutoff": hard_cutoff,
                  "num_strata": int(num_strata), "seed": int(seed), "metric": scores.metric})


def as_easy_hard_split(
    scores: ScoreVector, labels: np.ndarray, ratio: float, num_classes: Optional[int] = None
) -> tuple[SubsetIndex, SubsetIndex]:
    """Prune ``ratio`` of the data two ways: keep the easiest, or keep the hardest."""
    if not 0.0 < ratio < 1.0:
        raise SelectionError(f"pruning ratio must lie in (0, 1), got {ratio}")
    n = len(scores)
    keep = round_half_up((1.0 - ratio) * n)
    if keep in (0, n):
        raise SelectionError(f"ratio {ratio} on {n} samples keeps {keep}; nothing to compare")
    easy = rank_select(scores, labels, keep, "easy", num_classes)
    hard = rank_select(scores, labels, keep, "hard", num_classes)
    return easy, hard


# ---------------------------------------------------------------------------
# persistence


def write_subset(subset: SubsetIndex, path: Union[str, Path], source_hash: str = "",
                 header_note: Optional[str] = None) -> Path:
    """Write ``path`` (one sample_index per row) and a JSON sidecar next to it."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.writer(fh)
        w.writerow(["sample_index"])
        for i in subset.indices:
            w.writerow([int(i)])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(
        json.dumps(
            {
                "method": subset.method,
                "parameters": subset.parameters,
                "per_class_counts": subset.per_class_counts.tolist(),
                "source_score_hash": source_hash,
                "size": len(subset),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return sidecar


def read_subset(path: Union[str, Path], labels: Optional[np.ndarray] = None,
                num_classes: Optional[int] = None) -> SubsetIndex:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    idx = np.array([int(r["sample_index"]) for r in rows], dtype=np.int64)
    if len(np.unique(idx)) != idx.size:
        raise SelectionError(f"{path}: duplicate sample indices")
    if labels is not None and idx.size and (idx.min() < 0 or idx.max() >= len(labels)):
        raise SelectionError(f"{path}: indices fall outside [0, {len(labels)})")
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    if labels is not None:
        c = _num_classes(np.asarray(labels), num_classes)
        return _make(idx, labels, c, meta.get("method", "file"), meta.get("parameters", {}))
    counts = np.asarray(meta.get("per_class_counts", [idx.size]))
    return SubsetIndex(np.sort(idx), counts, meta.get("method", "file"), meta.get("parameters", {}))
