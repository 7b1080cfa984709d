"""Binary classification metrics: accuracy, F-measure, ROC/AUC (trapezoid
cross-checked against the Mann-Whitney midrank statistic), the DeLong paired
AUC test, and cross-fold aggregation.

Scores are probabilities of the positive class. By convention in binary
schemas the positive class is the second one (class index 1); every report
states this. The hard-label threshold is 0.5 with ties resolved positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .nn import ConfigError


class PairingError(ValueError):
    """DeLong inputs do not cover the identical sample set."""


@dataclass(frozen=True)
class ScoredPredictions:
    ids: tuple[str, ...]
    labels: np.ndarray   # 0/1, 1 = positive class
    scores: np.ndarray   # P(positive), finite

    def __post_init__(self):
        if len(self.ids) != len(self.labels) or len(self.ids) != len(self.scores):
            raise ConfigError("ids, labels, scores must have equal length")
        if not np.isfinite(self.scores).all():
            raise ConfigError("scores must be finite")

    @property
    def hard_labels(self) -> np.ndarray:
        return (self.scores >= 0.5).astype(np.int64)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RocCurve:
    points: np.ndarray  # (n, 2) of (fpr, tpr), anchored at (0,0) and (1,1)


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    variance: float
    z: float
    p_value: float
    degenerate: bool = False


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    f_measure: float
    auc: float
    roc: RocCurve
    positive_class_index: int = 1

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy,
            "f_measure": self.f_measure,
            "auc": self.auc,
            "positive_class_index": self.positive_class_index,
        }


@dataclass
class CvSummary:
    folds: list[EvalReport]
    mean: dict
    std: dict
    pooled: ScoredPredictions
    pooled_report: EvalReport


def _require_nonempty(preds: ScoredPredictions) -> None:
    if len(preds) == 0:
        raise ConfigError("empty prediction set")


def confusion(preds: ScoredPredictions) -> tuple[int, int, int, int]:
    _require_nonempty(preds)
    hard = preds.hard_labels
    y = preds.labels
    tp = int(((hard == 1) & (y == 1)).sum())
    fp = int(((hard == 1) & (y == 0)).sum())
    tn = int(((hard == 0) & (y == 0)).sum())
    fn = int(((hard == 0) & (y == 1)).sum())
    return tp, fp, tn, fn


def accuracy(preds: ScoredPredictions) -> float:
    tp, fp, tn, fn = confusion(preds)
    return (tp + tn) / len(preds)


def f_measure(preds: ScoredPredictions) -> float:
    """Harmonic mean of precision and recall on the positive class; 0 when
    precision + recall is 0 (or undefined)."""
    tp, fp, tn, fn = confusion(preds)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mann_whitney_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """AUC as the normalized Mann-Whitney statistic with midrank ties."""
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUC undefined: need both classes")
    ranks = sps.rankdata(scores)  # midranks
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_and_auc(preds: ScoredPredictions) -> tuple[RocCurve, float]:
    """Threshold sweep over distinct scores (descending); trapezoidal AUC,
    cross-asserted against the Mann-Whitney midrank statistic."""
    _require_nonempty(preds)
    y = preds.labels
    s = preds.scores
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUC undefined: need at least one sample of each class")

    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    tps = np.cumsum(y_sorted == 1)
    fps = np.cumsum(y_sorted == 0)
    # keep only the last point of each distinct score (duplicate thresholds merged)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    tpr = np.r_[0.0, tps[last] / n_pos]
    fpr = np.r_[0.0, fps[last] / n_neg]
    auc_trap = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    auc_mw = mann_whitney_auc(y, s)
    if abs(auc_trap - auc_mw) > 1e-12:
        raise AssertionError(
            f"trapezoid AUC {auc_trap!r} != Mann-Whitney AUC {auc_mw!r}"
        )
    return RocCurve(points=np.column_stack([fpr, tpr])), auc_trap


def evaluate(preds: ScoredPredictions) -> EvalReport:
    tp, fp, tn, fn = confusion(preds)
    roc, auc = roc_and_auc(preds)
    return EvalReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / len(preds),
        f_measure=f_measure(preds),
        auc=auc,
        roc=roc,
    )


# ---------------------------------------------------------------------------
# DeLong paired test via structural components (midranks)
# ---------------------------------------------------------------------------

def _structural_components(labels: np.ndarray, scores: np.ndarray):
    """V10 (per positive) and V01 (per negative) placement components."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = len(pos), len(neg)
    tx = sps.rankdata(pos)
    ty = sps.rankdata(neg)
    tz = sps.rankdata(np.concatenate([pos, neg]))
    v10 = (tz[:m] - tx) / n            # per positive sample
    v01 = 1.0 - (tz[m:] - ty) / m      # per negative sample
    auc = float(v10.mean())
    return auc, v10, v01


def delong_test(preds_a: ScoredPredictions, preds_b: ScoredPredictions) -> DeLongResult:
    """Two-sided test of equal AUCs for two score sets over the same samples.

    Variance of the AUC difference comes from the covariance of the paired
    structural components. A zero variance is degenerate: equal AUCs report
    p=1, unequal AUCs report p=0, both flagged.
    """
    if preds_a.ids != preds_b.ids:
        raise PairingError("prediction sets must cover identical samples (by id)")
    if not np.array_equal(preds_a.labels, preds_b.labels):
        raise PairingError("prediction sets disagree on labels")
    labels = preds_a.labels
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos < 2 or n_neg < 2:
        raise ConfigError("DeLong test needs >=2 positives and >=2 negatives")

    auc_a, v10_a, v01_a = _structural_components(labels, preds_a.scores)
    auc_b, v10_b, v01_b = _structural_components(labels, preds_b.scores)
    s10 = np.cov(np.stack([v10_a, v10_b]))
    s01 = np.cov(np.stack([v01_a, v01_b]))
    cov = s10 / n_pos + s01 / n_neg
    var = float(cov[0, 0] + cov[1, 1] - 2 * cov[0, 1])
    diff = auc_a - auc_b
    if var <= 0.0:
        if diff == 0.0:
            return DeLongResult(auc_a, auc_b, 0.0, 0.0, 1.0, degenerate=True)
        z = np.inf if diff > 0 else -np.inf
        return DeLongResult(auc_a, auc_b, 0.0, float(z), 0.0, degenerate=True)
    z = diff / np.sqrt(var)
    p = float(2.0 * sps.norm.sf(abs(z)))
    return DeLongResult(auc_a, auc_b, var, float(z), p)


# ---------------------------------------------------------------------------
# Cross-fold aggregation
# ---------------------------------------------------------------------------

def aggregate_cv(fold_reports: list[EvalReport], fold_preds: list[ScoredPredictions]) -> CvSummary:
    """Unweighted mean/std per metric across folds, plus pooled predictions
    (retained for a DeLong test over the full cross-validation output)."""
    if not fold_reports:
        raise ConfigError("need at least one fold report")
    metrics = {}
    for name in ("accuracy", "f_measure", "auc"):
        vals = np.array([getattr(r, name) for r in fold_reports])
        metrics[name] = (float(vals.mean()), float(vals.std()))
    pooled = ScoredPredictions(
        ids=tuple(i for p in fold_preds for i in p.ids),
        labels=np.concatenate([p.labels for p in fold_preds]),
        scores=np.concatenate([p.scores for p in fold_preds]),
    )
    return CvSummary(
        folds=fold_reports,
        mean={k: v[0] for k, v in metrics.items()},
        std={k: v[1] for k, v in metrics.items()},
        pooled=pooled,
        pooled_report=evaluate(pooled),
    )


def roc_csv(roc: RocCurve) -> str:
    lines = ["fpr,tpr"]
    lines += [f"{fpr!r},{tpr!r}" for fpr, tpr in roc.points]
    return "\n".join(lines) + "\n"
