"""Retrain-on-subset evaluation, easy-vs-hard pruning sweeps and method
comparison tables."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .dataset import Dataset
from .dynamics_log import DynamicsLog
from .scoring import ScoreVector, score_by_name
from .selection import (
    SelectionTarget,
    SubsetIndex,
    as_easy_hard_split,
    balanced_select,
    ccs_select,
    random_select,
    rank_select,
)
from .trainer import TrainConfig, accuracy, train_with_dynamics

logger = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass
class AccuracyStats:
    mean: float
    std: float
    per_seed: list[tuple[int, float]]
    n_train_used: int
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_runs(cls, per_seed: list[tuple[int, float]], n_train_used: int, warnings=None) -> "AccuracyStats":
        accs = np.array([a for _, a in per_seed], dtype=np.float64)
        # population std
        return cls(float(accs.mean()), float(accs.std()), per_seed, n_train_used, list(warnings or []))


@dataclass
class SweepRow:
    ratio: float
    easy_acc: AccuracyStats
    hard_acc: AccuracyStats

    @property
    def diff_mean(self) -> float:
        return self.easy_acc.mean - self.hard_acc.mean


@dataclass
class TurningPointReport:
    crossover_ratio: Optional[float]
    sign_changes: int


def evaluate_subset(
    train: Dataset,
    subset: SubsetIndex,
    test: Dataset,
    cfg: TrainConfig,
    seeds: Sequence[int],
) -> AccuracyStats:
    """Train a fresh model on the selected rows once per seed; report test accuracy."""
    if len(subset) == 0:
        raise EvaluationError("empty subset")
    if not seeds:
        raise EvaluationError("need at least one seed")
    subset.check_against(train.labels)
    warnings = []
    missing = [k for k in range(train.num_classes) if subset.per_class_counts[k] == 0]
    if missing:
        msg = f"subset has no samples of class(es) {missing}"
        logger.warning(msg)
        warnings.append(msg)
    data = train.subset(subset.indices)
    runs = []
    for s in seeds:
        params, _ = train_with_dynamics(data, replace(cfg, seed=int(s), record_dynamics=False))
        runs.append((int(s), accuracy(params, test)))
    return AccuracyStats.from_runs(runs, len(subset), warnings)


def ratio_sweep(
    train: Dataset,
    test: Dataset,
    scores: ScoreVector,
    ratios: Sequence[float],
    cfg: TrainConfig,
    seeds: Sequence[int],
) -> list[SweepRow]:
    """Easy-kept vs hard-kept accuracy at each pruning ratio; both arms share
    the training budget and the seed list."""
    ratios = [float(r) for r in ratios]
    if any(not 0 < r < 1 for r in ratios):
        raise EvaluationError("ratios must lie in (0, 1)")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise EvaluationError("ratios must be ascending")
    rows = []
    for r in ratios:
        easy, hard = as_easy_hard_split(scores, train.labels, r, train.num_classes)
        rows.append(
            SweepRow(
                r,
                evaluate_subset(train, easy, test, cfg, seeds),
                evaluate_subset(train, hard, test, cfg, seeds),
            )
        )
    return rows


def _sign(x: float) -> int:
    return 1 if x >= 0 else -1


def turning_point(ratios: Sequence[float], diffs: Sequence[float]) -> TurningPointReport:
    """First negative-to-positive crossing of ``diffs`` (zero counts as
    positive), linearly interpolated in ratio, plus the number of sign flips."""
    if len(ratios) != len(diffs) or len(ratios) < 2:
        raise EvaluationError("need at least two (ratio, diff) points")
    crossover = None
    changes = 0
    for (r0, d0), (r1, d1) in zip(zip(ratios, diffs), zip(ratios[1:], diffs[1:])):
        if _sign(d0) != _sign(d1):
            changes += 1
            if crossover is None and d0 < 0:
                crossover = r0 + (0.0 - d0) * (r1 - r0) / (d1 - d0)
    return TurningPointReport(crossover, changes)


def find_turning_point(rows: Sequence[SweepRow]) -> TurningPointReport:
    return turning_point([r.ratio for r in rows], [r.diff_mean for r in rows])


# ---------------------------------------------------------------------------
# method comparison


@dataclass
class MethodSpec:
    metric: str  # ignored when selector == "random"
    selector: str  # balanced | rank | ccs | random
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "random" if self.selector == "random" else f"{self.metric}+{self.selector}"


@dataclass
class ComparisonRow:
    method: str
    metric: str
    selector: str
    stats: AccuracyStats
    per_class_counts: list[int]
    balanced_gain: Optional[float] = None  # balanced minus rank for the same metric


_SCORE_KEYS = ("early_epochs", "topk", "first_n", "raw_logits", "clusters_per_class")


def select_subset(
    spec: MethodSpec,
    scores: Optional[ScoreVector],
    labels: np.ndarray,
    num_classes: int,
    target: SelectionTarget,
) -> SubsetIndex:
    p = spec.params
    if spec.selector == "random":
        return random_select(len(labels), target.total(num_classes), p.get("seed", 0), labels, num_classes)
    assert scores is not None
    prefer = p.get("prefer", "easy")
    if spec.selector == "balanced":
        return balanced_select(scores, labels, target.per_class_budget(num_classes), prefer,
                               p.get("clamp", False), num_classes)
    if spec.selector == "rank":
        return rank_select(scores, labels, target.total(num_classes), prefer, num_classes)
    if spec.selector == "ccs":
        return ccs_select(scores, labels, target.total(num_classes), p.get("hard_cutoff", 0.3),
                          p.get("num_strata", 50), p.get("seed", 0), num_classes)
    raise EvaluationError(f"unknown selector {spec.selector!r}")


def compare_methods(
    train: Dataset,
    test: Dataset,
    log: DynamicsLog,
    methods: Sequence[MethodSpec],
    target: SelectionTarget,
    cfg: TrainConfig,
    seeds: Sequence[int],
    features: Optional[np.ndarray] = None,
) -> list[ComparisonRow]:
    """One row per method; rows of a metric evaluated both balanced and
    ranked carry the balanced-minus-rank gain on the balanced row."""
    if not methods:
        raise EvaluationError("no methods given")
    if log.n != train.n:
        raise EvaluationError(f"log covers {log.n} samples, training set has {train.n}")
    rows = []
    for spec in methods:
        scores = None
        if spec.selector != "random":
            kwargs = {k: spec.params[k] for k in _SCORE_KEYS if k in spec.params}
            scores = score_by_name(spec.metric, log, features=features, seed=spec.params.get("seed", 0), **kwargs)
        subset = select_subset(spec, scores, train.labels, train.num_classes, target)
        stats = evaluate_subset(train, subset, test, cfg, seeds)
        rows.append(ComparisonRow(spec.label, spec.metric, spec.selector, stats, subset.per_class_counts.tolist()))

    by_key = {(r.metric, r.selector): r for r in rows}
    for r in rows:
        if r.selector == "balanced" and (r.metric, "rank") in by_key:
            r.balanced_gain = r.stats.mean - by_key[(r.metric, "rank")].stats.mean
    return rows


# ---------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _per_seed(stats: AccuracyStats) -> str:
    return ";".join(f"{s}:{a:.6f}" for s, a in stats.per_seed)


def write_stats_csv(rows: Sequence[tuple[str, AccuracyStats]], path: Union[str, Path],
                    header_note: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.writer(fh)
        w.writerow(["name", "mean", "std", "n_train_used", "per_seed"])
        for name, st in rows:
            w.writerow([name, _fmt(st.mean), _fmt(st.std), st.n_train_used, _per_seed(st)])


def write_sweep_csv(rows: Sequence[SweepRow], path: Union[str, Path], header_note: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.writer(fh)
        w.writerow(["ratio", "easy_mean", "easy_std", "hard_mean", "hard_std", "diff_mean",
                    "n_kept", "easy_per_seed", "hard_per_seed"])
        for r in rows:
            w.writerow([f"{r.ratio:g}", _fmt(r.easy_acc.mean), _fmt(r.easy_acc.std),
                        _fmt(r.hard_acc.mean), _fmt(r.hard_acc.std), _fmt(r.diff_mean),
                        r.easy_acc.n_train_used, _per_seed(r.easy_acc), _per_seed(r.hard_acc)])


def write_comparison_csv(rows: Sequence[ComparisonRow], path: Union[str, Path],
                         header_note: Optional[str] = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.writer(fh)
        w.writerow(["method", "metric", "selector", "mean", "std", "gain", "per_class_counts", "per_seed"])
        for r in rows:
            gain = "" if r.balanced_gain is None else f"{r.balanced_gain * 100:+.2f}"
            w.writerow([r.method, r.metric, r.selector, _fmt(r.stats.mean), _fmt(r.stats.std), gain,
                        " ".join(map(str, r.per_class_counts)), _per_seed(r.stats)])


def sweep_markdown(rows: Sequence[SweepRow], header_note: str = "") -> str:
    tp = find_turning_point(rows) if len(rows) >= 2 else TurningPointReport(None, 0)
    lines = []
    if header_note:
        lines += [f"<!-- {header_note} -->", ""]
    lines += [
        "Easy and hard arms at each ratio share seeds and training budget; only the kept subset differs.",
        "",
        "| pruning ratio | kept | easy acc (%) | hard acc (%) | easy - hard |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.ratio:g} | {r.easy_acc.n_train_used} | {100 * r.easy_acc.mean:.2f} ± {100 * r.easy_acc.std:.2f}"
            f" | {100 * r.hard_acc.mean:.2f} ± {100 * r.hard_acc.std:.2f} | {100 * r.diff_mean:+.2f} |"
        )
    lines.append("")
    if tp.crossover_ratio is None:
        lines.append(f"Turning point: none detected (sign changes: {tp.sign_changes})")
    else:
        lines.append(f"Turning point: {tp.crossover_ratio:.4f} (sign changes: {tp.sign_changes})")
    return "\n".join(lines) + "\n"


def stats_markdown(rows: Sequence[tuple[str, AccuracyStats]], header_note: str = "") -> str:
    lines = [f"<!-- {header_note} -->", ""] if header_note else []
    lines += ["| subset | n | accuracy (%) | seeds |", "|---|---|---|---|"]
    for name, st in rows:
        lines.append(f"| {name} | {st.n_train_used} | {100 * st.mean:.2f} ± {100 * st.std:.2f} | {len(st.per_seed)} |")
    for _, st in rows:
        lines += [f"\nwarning: {w}" for w in st.warnings]
    return "\n".join(lines) + "\n"


def comparison_markdown(rows: Sequence[ComparisonRow], header_note: str = "") -> str:
    lines = [f"<!-- {header_note} -->", ""] if header_note else []
    lines += ["| method | accuracy (%) | balanced gain |", "|---|---|---|"]
    for r in rows:
        gain = "" if r.balanced_gain is None else f"{100 * r.balanced_gain:+.2f}"
        lines.append(f"| {r.method} | {100 * r.stats.mean:.2f} ± {100 * r.stats.std:.2f} | {gain} |")
    return "\n".join(lines) + "\n"


def report_paths(directory: Union[str, Path], stem: str, config_hash: str) -> tuple[Path, Path]:
    """CSV and markdown paths with the config hash embedded in the name."""
    d = Path(directory)
    tag = f"{stem}-{config_hash[:12]}"
    return d / f"{tag}.csv", d / f"{tag}.md"


def write_sweep_report(rows: Sequence[SweepRow], directory: Union[str, Path], config_hash: str,
                       stem: str = "sweep") -> tuple[Path, Path]:
    csv_path, md_path = report_paths(directory, stem, config_hash)
    note = f"config_hash: {config_hash}"
    write_sweep_csv(rows, csv_path, note)
    md_path.write_text(sweep_markdown(rows, note))
    return csv_path, md_path
