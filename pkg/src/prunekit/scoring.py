"""Per-sample importance scores computed from a :class:`DynamicsLog`
(or, for the prototype metric, from feature vectors)."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dynamics_log import DynamicsLog, log_hash

logger = logging.getLogger(__name__)

LOWER_IS_EASIER = "lower_is_easier"
HIGHER_IS_EASIER = "higher_is_easier"

DIRECTIONS = {
    "lbpe": LOWER_IS_EASIER,
    "el2n": LOWER_IS_EASIER,
    "forgetting": LOWER_IS_EASIER,
    "aum": HIGHER_IS_EASIER,
    "entropy": LOWER_IS_EASIER,
    "ssp_distance": LOWER_IS_EASIER,
}


class ScoringError(ValueError):
    pass


@dataclass
class ScoreVector:
    scores: np.ndarray
    metric: str
    direction: str
    epochs_used: list[int] = field(default_factory=list)
    source_log_hash: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.metric not in DIRECTIONS:
            raise ScoringError(f"unknown metric {self.metric!r}")
        if self.direction != DIRECTIONS[self.metric]:
            raise ScoringError(f"{self.metric} scores are {DIRECTIONS[self.metric]}")
        if not np.all(np.isfinite(self.scores)):
            raise ScoringError(f"{self.metric}: non-finite score")

    def __len__(self) -> int:
        return len(self.scores)

    def ease_key(self) -> np.ndarray:
        """Scores oriented so that smaller means easier."""
        return self.scores if self.direction == LOWER_IS_EASIER else -self.scores

    def digest(self) -> str:
        return hashlib.sha256(self.scores.tobytes() + self.metric.encode()).hexdigest()


def _onehot(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _check_epoch(log: DynamicsLog, t: int) -> None:
    if not 0 <= t < log.num_epochs:
        raise ScoringError(f"epoch {t} out of range for a log with {log.num_epochs} epochs")


def error_norms(log: DynamicsLog, raw_logits: bool = False) -> np.ndarray:
    """(E, N) matrix of ``||p - onehot(y)||_2``; ``p`` is softmax unless ``raw_logits``."""
    preds = np.asarray(log.logits, dtype=np.float64) if raw_logits else _softmax64(log.logits)
    err = preds - _onehot(log.labels, log.num_classes)[None]
    return np.sqrt(np.sum(err * err, axis=2))


def lbpe_per_epoch(log: DynamicsLog, t: int, raw_logits: bool = False) -> np.ndarray:
    _check_epoch(log, t)
    z = np.asarray(log.logits[t], dtype=np.float64)
    err = (z if raw_logits else _softmax64(z)) - _onehot(log.labels, log.num_classes)
    return np.sqrt(np.sum(err * err, axis=1))


def topk_epochs(accuracies: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` highest accuracies, ties to the earlier epoch, sorted."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if not 1 <= k <= len(acc):
        raise ScoringError(f"K={k} must lie in [1, {len(acc)}]")
    order = np.argsort(-acc, kind="stable")
    return sorted(int(i) for i in order[:k])


def lbpe_score(
    log: DynamicsLog, early_epochs: int, k: int, raw_logits: bool = False
) -> ScoreVector:
    """Mean prediction-error norm over the ``k`` most accurate of the first
    ``early_epochs`` epochs. ``k`` larger than the window is clamped (and
    the clamp recorded in ``warnings``)."""
    if log.num_epochs < 1:
        raise ScoringError("empty log")
    if not 1 <= early_epochs <= log.num_epochs:
        raise ScoringError(f"early_epochs={early_epochs} must lie in [1, {log.num_epochs}]")
    if k < 1:
        raise ScoringError(f"K must be >= 1, got {k}")
    warnings = []
    if k > early_epochs:
        msg = f"K={k} exceeds early_epochs={early_epochs}; clamped to {early_epochs}"
        logger.warning(msg)
        warnings.append(msg)
        k = early_epochs
    window = log.head(early_epochs)
    chosen = topk_epochs(window.accuracies, k)
    norms = error_norms(window, raw_logits)
    scores = np.zeros(log.n)
    for t in chosen:  # fixed summation order
        scores += norms[t]
    return ScoreVector(scores / len(chosen), "lbpe", LOWER_IS_EASIER, chosen, log_hash(log), warnings)


def el2n_score(log: DynamicsLog, first_n: int = 10) -> ScoreVector:
    if not 1 <= first_n <= log.num_epochs:
        raise ScoringError(f"first_n={first_n} must lie in [1, {log.num_epochs}]")
    norms = error_norms(log.head(first_n))
    scores = np.zeros(log.n)
    for t in range(first_n):
        scores += norms[t]
    return ScoreVector(scores / first_n, "el2n", LOWER_IS_EASIER, list(range(first_n)), log_hash(log))


def correctness(log: DynamicsLog) -> np.ndarray:
    """(E, N) boolean; argmax ties resolve to the lowest class index."""
    return np.argmax(log.logits, axis=2) == log.labels[None, :]


def forgetting_score(log: DynamicsLog) -> ScoreVector:
    """Count of correct -> incorrect transitions between consecutive epochs;
    samples never classified correctly score ``E``."""
    e = log.num_epochs
    if e < 1:
        raise ScoringError("empty log")
    corr = correctness(log)
    events = np.sum(corr[:-1] & ~corr[1:], axis=0).astype(np.float64)
    events[~corr.any(axis=0)] = e
    return ScoreVector(events, "forgetting", LOWER_IS_EASIER, list(range(e)), log_hash(log))


def margins(log: DynamicsLog) -> np.ndarray:
    """(E, N) true-class logit minus the largest other logit."""
    z = np.asarray(log.logits, dtype=np.float64)
    idx = np.arange(log.n)
    true = z[:, idx, log.labels]
    other = z.copy()
    other[:, idx, log.labels] = -np.inf
    return true - other.max(axis=2)


def aum_score(log: DynamicsLog) -> ScoreVector:
    if log.num_classes < 2:
        raise ScoringError("AUM needs at least two classes")
    if log.num_epochs < 1:
        raise ScoringError("empty log")
    m = margins(log)
    total = np.zeros(log.n)
    for t in range(log.num_epochs):
        total += m[t]
    return ScoreVector(
        total / log.num_epochs, "aum", HIGHER_IS_EASIER, list(range(log.num_epochs)), log_hash(log)
    )


def entropy_score(log: DynamicsLog) -> ScoreVector:
    """Predictive entropy (nats) at the final recorded epoch."""
    if log.num_epochs < 1:
        raise ScoringError("empty log")
    p = _softmax64(log.logits[-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return ScoreVector(-terms.sum(axis=1), "entropy", LOWER_IS_EASIER, [log.num_epochs - 1], log_hash(log))


# ---------------------------------------------------------------------------
# prototype distance


def kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding. Returns (centroids, assignment)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ScoringError(f"cannot form {k} clusters from {n} points")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:  # every point coincides with a chosen center
            pick = rng.integers(n)
        centers[c] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
        assign = np.argmin(dist, axis=1)
        new = centers.copy()
        for c in range(k):
            members = x[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
        moved = np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if moved <= tol:
            break
    dist = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
    return centers, np.argmin(dist, axis=1)


def ssp_distance_score(
    features: np.ndarray, labels: np.ndarray, clusters_per_class: int, seed: int
) -> ScoreVector:
    """Distance from each sample to its k-means centroid, clustering every
    class separately in feature space."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or len(feats) != len(labels):
        raise ScoringError("features must be (N, h) with one label per row")
    if clusters_per_class < 1:
        raise ScoringError("clusters_per_class must be >= 1")
    classes = np.unique(labels)
    for k in classes:
        size = int(np.sum(labels == k))
        if size < clusters_per_class:
            raise ScoringError(f"class {k} has {size} samples, fewer than {clusters_per_class} clusters")
    scores = np.zeros(len(labels))
    children = np.random.SeedSequence(seed).spawn(int(classes.max()) + 1)
    for k in classes:
        members = np.flatnonzero(labels == k)
        centers, assign = kmeans(feats[members], clusters_per_class, np.random.default_rng(children[k]))
        diff = feats[members] - centers[assign]
        scores[members] = np.sqrt(np.sum(diff * diff, axis=1))
    return ScoreVector(scores, "ssp_distance", LOWER_IS_EASIER)


# ---------------------------------------------------------------------------
# CSV


def write_scores_csv(sv: ScoreVector, path: Union[str, Path], header_note: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.writer(fh)
        w.writerow(["sample_index", "score", "metric", "direction"])
        for i, s in enumerate(sv.scores):
            w.writerow([i, repr(float(s)), sv.metric, sv.direction])


def read_scores_csv(path: Union[str, Path]) -> ScoreVector:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise ScoringError(f"{path}: no score rows")
    idx = [int(r["sample_index"]) for r in rows]
    if idx != list(range(len(rows))):
        raise ScoringError(f"{path}: sample_index must run 0..N-1 in order")
    metric, direction = rows[0]["metric"], rows[0]["direction"]
    return ScoreVector(np.array([float(r["score"]) for r in rows]), metric, direction)


def per_epoch_table(log: DynamicsLog, raw_logits: bool = False) -> np.ndarray:
    """The (E, N) per-epoch error-norm matrix, for exporting score trajectories."""
    return error_norms(log, raw_logits)


METRIC_ALIASES = {"ssp": "ssp_distance"}


def score_by_name(
    metric: str,
    log: DynamicsLog,
    *,
    early_epochs: Optional[int] = None,
    topk: int = 5,
    first_n: int = 10,
    raw_logits: bool = False,
    features: Optional[np.ndarray] = None,
    clusters_per_class: int = 1,
    seed: int = 0,
) -> ScoreVector:
    """Dispatch to a metric by name; unused keyword arguments are ignored."""
    metric = METRIC_ALIASES.get(metric, metric)
    if metric == "lbpe":
        e = log.num_epochs if early_epochs is None else early_epochs
        return lbpe_score(log, e, topk, raw_logits)
    if metric == "el2n":
        return el2n_score(log, first_n)
    if metric == "forgetting":
        return forgetting_score(log)
    if metric == "aum":
        return aum_score(log)
    if metric == "entropy":
        return entropy_score(log)
    if metric == "ssp_distance":
        if features is None:
            raise ScoringError("the ssp metric needs feature vectors from a trained model")
        sv = ssp_distance_score(features, log.labels, clusters_per_class, seed)
        sv.source_log_hash = log_hash(log)
        return sv
    raise ScoringError(f"unknown metric {metric!r}")
