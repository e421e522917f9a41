"""Instance, bag and preference evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from disagg.aggregation import AggConfig, aggregate
from disagg.data import Dataset, PreferencePair
from disagg.model import ScorerModel


def _pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def auc_roc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg), ties count 1/2."""
    s, y = _pair(scores, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC-ROC needs both classes")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision: step-interpolated area under the PR curve.

    Tied scores form a single threshold.
    """
    s, y = _pair(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("AUC-PR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    tp = np.cumsum(pos_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s_sorted.size - 1]  # end of each tie group
    tp = tp[last].astype(np.float64)
    precision = tp / (last + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class ThresholdMetrics:
    accuracy: float
    precision: float
    recall: float
    precision_undefined: bool  # nothing predicted positive; precision reported as 0


def threshold_metrics(scores, labels, threshold: float = 0.5) -> ThresholdMetrics:
    s, y = _pair(scores, labels)
    if s.size == 0:
        raise ValueError("no scores")
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    n_pred = int(pred.sum())
    n_pos = int(pos.sum())
    return ThresholdMetrics(
        accuracy=float(np.mean(pred == pos)),
        precision=tp / n_pred if n_pred else 0.0,
        recall=tp / n_pos if n_pos else 0.0,
        precision_undefined=n_pred == 0,
    )


def regression_metrics(preds, labels) -> tuple[float, float]:
    p, y = _pair(preds, labels)
    if p.size == 0:
        raise ValueError("regression metrics need at least one value")
    err = p - y
    return float(np.mean(np.abs(err))), float(np.mean(err**2))


@dataclass(frozen=True)
class PreferenceResult:
    accuracy: float
    n_pairs: int
    n_ties: int


def preference_accuracy_from_scores(bag_scores: dict, pairs: Sequence[PreferencePair]) -> PreferenceResult:
    correct = ties = 0
    for p in pairs:
        try:
            diff = bag_scores[p.bag_a] - bag_scores[p.bag_b]
        except KeyError as exc:
            raise KeyError(f"preference pair refers to unknown bag {exc.args[0]!r}") from None
        if diff == 0:
            ties += 1
        elif (diff > 0) == (p.label == 1):
            correct += 1
    n = len(pairs)
    return PreferenceResult(correct / n if n else 0.0, n, ties)


def bag_predictions(model: ScorerModel, ds: Dataset, agg: AggConfig) -> np.ndarray:
    """Aggregate prediction per bag, under ``agg`` with the dataset's kind."""
    return aggregate_bags(model.score(ds.flat.X), ds, agg)


def aggregate_bags(scores, ds: Dataset, agg: AggConfig) -> np.ndarray:
    """Aggregate per-instance scores (in ``ds.flat`` order) into one value per bag."""
    cfg = AggConfig(kind=ds.agg, approx=agg.approx, r=agg.r)
    flat = ds.flat
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (ds.n_instances,):
        raise ValueError(f"expected {ds.n_instances} instance scores, got shape {scores.shape}")
    if cfg.needs_probabilities:
        scores = np.clip(scores, 1e-12, 1.0 - 1e-12)
    return np.array([aggregate(scores[flat.bag_slice(i)], cfg)[0] for i in range(len(ds.bags))])


def preference_accuracy(model: ScorerModel, ds: Dataset, pairs: Sequence[PreferencePair], agg: AggConfig) -> PreferenceResult:
    """Fraction of pairs whose predicted order matches the label; exact ties count as wrong."""
    preds = bag_predictions(model, ds, agg)
    return preference_accuracy_from_scores({b.id: float(v) for b, v in zip(ds.bags, preds)}, pairs)


# -- reports -------------------------------------------------------------------


@dataclass
class EvalReport:
    level: str  # "instance" | "bag" | "preference"
    count: int
    auc_roc: Optional[float] = None
    auc_pr: Optional[float] = None
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    precision_undefined: Optional[bool] = None
    mae: Optional[float] = None
    mse: Optional[float] = None
    preference_accuracy: Optional[float] = None
    ties: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


ROW_FIELDS = ("level", "count", "auc_roc", "auc_pr", "accuracy", "precision", "recall", "mae", "mse", "preference_accuracy", "ties")


def report_row(report: EvalReport, **keys) -> dict:
    """A flat table row for collecting results across runs."""
    row = dict(keys)
    d = asdict(report)
    row.update({k: d[k] for k in ROW_FIELDS})
    return row


def classification_report(scores, labels, level: str) -> EvalReport:
    s, y = _pair(scores, labels)
    tm = threshold_metrics(s, y)
    rep = EvalReport(level, int(s.size), accuracy=tm.accuracy, precision=tm.precision, recall=tm.recall,
                     precision_undefined=tm.precision_undefined)
    if 0 < (y == 1).sum() < y.size:
        rep.auc_roc = auc_roc(s, y)
    if (y == 1).any():
        rep.auc_pr = auc_pr(s, y)
    return rep


def regression_report(preds, labels, level: str) -> EvalReport:
    mae, mse = regression_metrics(preds, labels)
    return EvalReport(level, int(np.size(preds)), mae=mae, mse=mse)


def instance_report(scores, ds: Dataset) -> EvalReport:
    gold = ds.flat.gold
    if np.isnan(gold).any():
        raise ValueError("instance evaluation needs gold labels on every instance")
    if ds.label_kind == "binary":
        return classification_report(scores, gold, "instance")
    return regression_report(scores, gold, "instance")


def bag_report(bag_preds, ds: Dataset) -> EvalReport:
    y = ds.flat.bag_labels
    if np.isnan(y).any():
        raise ValueError("bag evaluation needs a label on every bag")
    if ds.label_kind == "binary" and np.all((y == 0) | (y == 1)):
        return classification_report(bag_preds, y, "bag")
    return regression_report(bag_preds, y, "bag")


def preference_report(result: PreferenceResult) -> EvalReport:
    return EvalReport("preference", result.n_pairs, preference_accuracy=result.accuracy, ties=result.n_ties)
