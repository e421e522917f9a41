"""Max-likelihood, bag-consistent pseudo-labels for binary MIN/MAX bags.

Each instance is treated as an independent Bernoulli with the model's score
as its probability.  Under MIN a positive bag forces every label to 1; a
negative bag needs at least one 0, and the most likely such configuration is
the 0.5-threshold labeling, repaired if needed by zeroing the instance with
the smallest score.  MAX is the mirror image.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from disagg.data import Bag, Dataset, Instance
from disagg.model import ScorerModel


class NotApplicable(ValueError):
    """Pseudo-labeling is undefined for this task."""


@dataclass(frozen=True)
class Applicability:
    applicable: bool
    reason: Optional[str] = None


PREFERENCE_REASON = "pseudo-labeling needs bag labels; preference-only supervision gives none"
REGRESSION_REASON = "predictions in [0, L] with L > 1 are not label probabilities"
AVG_REASON = "no bag-consistent max-likelihood labeling is defined for AVG bags"


def pslab_applicability(label_kind: str, agg: str, supervision: str = "bag", L: int = 1) -> Applicability:
    """Whether pseudo-labeling applies to a task description."""
    if supervision == "preference":
        return Applicability(False, PREFERENCE_REASON)
    if label_kind != "binary" or L > 1:
        return Applicability(False, REGRESSION_REASON)
    if agg not in ("min", "max"):
        return Applicability(False, AVG_REASON)
    return Applicability(True)


def _pslab_min(s: np.ndarray, y: int) -> tuple[np.ndarray, Optional[int]]:
    if y == 1:
        return np.ones(s.size, dtype=np.int64), None
    labels = (s >= 0.5).astype(np.int64)
    if labels.all():
        j = int(np.argmin(s))  # first minimum in bag order
        labels[j] = 0
        return labels, j
    return labels, None


def pslab_bag_detail(scores, y_bag, agg: str) -> tuple[np.ndarray, Optional[int]]:
    """Labels plus the index of the instance flipped by the repair step, if any."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("pseudo-labeling needs a nonempty score vector")
    if y_bag not in (0, 1):
        raise NotApplicable(f"bag label {y_bag!r} is not binary")
    y = int(y_bag)
    if agg == "min":
        return _pslab_min(s, y)
    if agg == "max":
        labels, j = _pslab_min(1.0 - s, 1 - y)
        return 1 - labels, j
    raise NotApplicable(AVG_REASON)


def pslab_bag(scores, y_bag, agg: str) -> np.ndarray:
    return pslab_bag_detail(scores, y_bag, agg)[0]


def likelihood(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels)
    return float(np.prod(np.where(lab == 1, s, 1.0 - s)))


@dataclass(frozen=True)
class AuditRecord:
    bag_id: str
    flipped_instance_id: Optional[str]
    likelihood: float

    def to_dict(self) -> dict:
        return {"bag_id": self.bag_id, "flipped_instance_id": self.flipped_instance_id, "likelihood": self.likelihood}


def pslab_dataset(ds: Dataset, model: ScorerModel) -> tuple[Dataset, list[AuditRecord]]:
    """Replace every instance's gold label by its pseudo-label.

    Bag labels are kept; the result is consistent with them bag by bag.
    """
    verdict = pslab_applicability(ds.label_kind, ds.agg, L=ds.L)
    if not verdict.applicable:
        raise NotApplicable(verdict.reason)
    flat = ds.flat
    scores = model.score(flat.X)
    bags, audit = [], []
    for i, bag in enumerate(ds.bags):
        if bag.label is None:
            raise ValueError(f"bag {bag.id!r} has no label")
        s = scores[flat.bag_slice(i)]
        labels, flipped = pslab_bag_detail(s, bag.label, bag.agg)
        insts = tuple(replace(x, gold_label=float(lab)) for x, lab in zip(bag.instances, labels))
        bags.append(replace(bag, instances=insts))
        audit.append(
            AuditRecord(bag.id, None if flipped is None else bag.instances[flipped].id, likelihood(s, labels))
        )
    return replace(ds, bags=tuple(bags), preferences=None), audit
