"""Bag, prior and preference losses with analytic gradients.

Every public loss runs one forward pass over the instances of a minibatch,
reduces the per-instance score gradient of its term(s), and backpropagates
once.  Classification terms use soft-target cross-entropy on predictions
clamped to [1e-6, 1 - 1e-6]; the integer (regression) head uses squared
error, with priors scaled up to the label range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from disagg.aggregation import AggConfig, aggregate
from disagg.data import Dataset, PreferencePair
from disagg.model import ScorerModel
from disagg.priors import PriorSource

CLAMP = 1e-6
_PROB_EPS = 1e-12


def cross_entropy(p, q):
    """Elementwise -(p ln q + (1-p) ln(1-q)) and its derivative in q.

    ``q`` is clamped to [CLAMP, 1 - CLAMP]; the derivative is zero where the
    clamp is active.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    qc = np.clip(q, CLAMP, 1.0 - CLAMP)
    value = -(p * np.log(qc) + (1.0 - p) * np.log1p(-qc))
    grad = np.where(qc == q, (qc - p) / (qc * (1.0 - qc)), 0.0)
    return value, grad


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: bag (or preference) loss, P1 instance prior, P2 pairwise prior, external prior."""

    lambda_bag: float = 1.0
    lambda_p1: float = 0.0
    lambda_p2: float = 0.0
    lambda_ext: float = 0.0

    def __post_init__(self):
        ws = self.as_tuple()
        if any(not 0.0 <= w <= 1.0 for w in ws):
            raise ValueError(f"loss weights must lie in [0, 1], got {ws}")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {sum(ws)}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_bag, self.lambda_p1, self.lambda_p2, self.lambda_ext)

    @property
    def method_name(self) -> str:
        """Names in the style of the experiment tables, e.g. ``PriorsBagLoss(0.2, 0.1)``."""
        if self.lambda_p1 == self.lambda_p2 == self.lambda_ext == 0.0:
            return "BagLoss"
        args = [self.lambda_p1, self.lambda_p2] + ([self.lambda_ext] if self.lambda_ext else [])
        return "PriorsBagLoss(" + ", ".join(f"{a:g}" for a in args) + ")"


@dataclass
class Batch:
    """A minibatch: bag indices into ``ds.bags`` and optional preference pairs.

    ``pairs`` holds (index_a, index_b, label) triples; their bags must be in
    ``bags``.
    """

    bags: np.ndarray
    pairs: Optional[list[tuple[int, int, int]]] = None

    @classmethod
    def of_bags(cls, ds: Dataset, bags=None) -> "Batch":
        idx = np.arange(len(ds.bags)) if bags is None else np.asarray(bags, dtype=np.int64)
        return cls(bags=idx)

    @classmethod
    def of_pairs(cls, ds: Dataset, pairs: Sequence[PreferencePair]) -> "Batch":
        index = ds.bag_index
        triples = []
        for p in pairs:
            try:
                triples.append((index[p.bag_a], index[p.bag_b], p.label))
            except KeyError as exc:
                raise KeyError(f"preference pair refers to unknown bag {exc.args[0]!r}") from None
        order = dict.fromkeys(i for a, b, _ in triples for i in (a, b))
        return cls(bags=np.array(list(order), dtype=np.int64), pairs=triples)


@dataclass
class _Scored:
    """Forward pass over a batch: scores plus where each bag lives in them."""

    rows: np.ndarray
    scores: np.ndarray
    cache: object
    local: dict[int, slice]


def _score_batch(ds: Dataset, batch: Batch, model: ScorerModel) -> _Scored:
    flat = ds.flat
    rows, local, pos = [], {}, 0
    for i in batch.bags:
        sl = flat.bag_slice(int(i))
        n = sl.stop - sl.start
        rows.append(np.arange(sl.start, sl.stop))
        local[int(i)] = slice(pos, pos + n)
        pos += n
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    scores, cache = model.forward(flat.X[rows])
    return _Scored(rows, scores, cache, local)


def _agg_scores(s: np.ndarray, cfg: AggConfig):
    """Aggregate, clamping into (0, 1) first for the probability-only approximations."""
    if cfg.needs_probabilities:
        c = np.clip(s, _PROB_EPS, 1.0 - _PROB_EPS)
        value, g = aggregate(c, cfg)
        return value, np.where(c == s, g, 0.0)
    return aggregate(s, cfg)


# -- terms on precomputed scores ------------------------------------------------


def _bag_term(ds, batch, sc, model, cfg):
    labels = ds.flat.bag_labels
    dscore = np.zeros_like(sc.scores)
    total = 0.0
    for i in batch.bags:
        i = int(i)
        y = labels[i]
        if np.isnan(y):
            raise ValueError(f"bag {ds.bags[i].id!r} has no label")
        sl = sc.local[i]
        value, g = _agg_scores(sc.scores[sl], cfg)
        if model.head == "integer":
            loss, dv = (value - y) ** 2, 2.0 * (value - y)
        else:
            loss, dv = cross_entropy(y, value)
        total += float(loss)
        dscore[sl] += float(dv) * g
    n = len(batch.bags)
    return total / n, dscore / n


def _instance_targets(ds, sc, prior: PriorSource, model):
    if prior.values is None:
        raise ValueError(f"{prior.kind} prior has no per-instance values")
    t = prior.values[sc.rows]
    if np.isnan(t).any():
        missing = ds.flat.instance_ids[int(sc.rows[np.flatnonzero(np.isnan(t))[0]])]
        raise ValueError(f"no prior value for instance {missing!r}")
    if model.head == "integer" and prior.kind != "labels":
        t = t * model.scale
    return t


def _instance_term(ds, sc, prior, model):
    t = _instance_targets(ds, sc, prior, model)
    n = len(t)
    if model.head == "integer":
        diff = sc.scores - t
        return float(np.sum(diff**2) / n), 2.0 * diff / n
    value, g = cross_entropy(t, sc.scores)
    return float(value.sum() / n), g / n


def _pairwise_term(ds, batch, sc, prior, model):
    if prior.pairwise is None:
        raise ValueError(f"{prior.kind} prior has no pairwise values")
    dscore = np.zeros_like(sc.scores)
    total, n_pairs = 0.0, 0
    for i in batch.bags:
        i = int(i)
        sl = sc.local[i]
        s = sc.scores[sl]
        k = s.size
        if k < 2:
            continue
        P = prior.pairwise[i]
        if P.shape != (k, k):
            raise ValueError(f"pairwise prior for bag {ds.bags[i].id!r} has shape {P.shape}, expected {(k, k)}")
        Q = np.outer(s, s)
        off = ~np.eye(k, dtype=bool)
        if model.head == "integer":
            diff = Q - P * model.scale**2
            C, G = diff**2, 2.0 * diff
        else:
            C, G = cross_entropy(P, Q)
        G = np.where(off, G, 0.0)
        total += float(C[off].sum())
        n_pairs += k * (k - 1)
        dscore[sl] += G @ s + G.T @ s
    if n_pairs == 0:
        return 0.0, dscore
    return total / n_pairs, dscore / n_pairs


def _pref_term(ds, batch, sc, model, cfg):
    if not batch.pairs:
        raise ValueError("preference loss needs at least one pair")
    dscore = np.zeros_like(sc.scores)
    total = 0.0
    scale = model.scale
    agg = {}
    for i in {i for a, b, _ in batch.pairs for i in (a, b)}:
        value, g = _agg_scores(sc.scores[sc.local[i]], cfg)
        v = value / scale
        vc = min(max(v, CLAMP), 1.0 - CLAMP)
        # d ln(vc) / d(score)
        dlog = (g / (scale * vc)) if vc == v else np.zeros_like(g)
        agg[i] = (np.log(vc), dlog)
    for a, b, y in batch.pairs:
        la, ga = agg[a]
        lb, gb = agg[b]
        total += y * (lb - la)
        dscore[sc.local[b]] += y * gb
        dscore[sc.local[a]] -= y * ga
    n = len(batch.pairs)
    return total / n, dscore / n


# -- public API -------------------------------------------------------------------


def _finish(model, sc, value, dscore):
    return value, model.backward(sc.cache, dscore)


def bag_loss(ds: Dataset, batch: Batch, model: ScorerModel, cfg: AggConfig):
    """Mean bag loss between bag labels and aggregated predictions; returns (value, grads)."""
    sc = _score_batch(ds, batch, model)
    return _finish(model, sc, *_bag_term(ds, batch, sc, model, cfg))


def prior_loss_instance(ds: Dataset, batch: Batch, model: ScorerModel, prior: PriorSource):
    """Mean over the batch's instances of L_prior(p_x, M(x))."""
    sc = _score_batch(ds, batch, model)
    return _finish(model, sc, *_instance_term(ds, sc, prior, model))


def prior_loss_pairwise(ds: Dataset, batch: Batch, model: ScorerModel, prior: PriorSource):
    """Mean over ordered within-bag pairs (x, z), x != z, of L_prior(p_xz, M(x) M(z))."""
    sc = _score_batch(ds, batch, model)
    return _finish(model, sc, *_pairwise_term(ds, batch, sc, prior, model))


def preference_loss(ds: Dataset, batch: Batch, model: ScorerModel, cfg: AggConfig):
    """Mean over pairs of y * ln(y~_B2 / y~_B1) with clamped aggregate predictions."""
    sc = _score_batch(ds, batch, model)
    return _finish(model, sc, *_pref_term(ds, batch, sc, model, cfg))


@dataclass
class LossResult:
    value: float
    grads: list
    terms: dict = field(default_factory=dict)


def total_loss(
    ds: Dataset,
    batch: Batch,
    model: ScorerModel,
    weights: LossWeights,
    priors: Mapping[str, PriorSource],
    cfg: AggConfig,
) -> LossResult:
    """Weighted sum of the enabled terms.

    The first term is the preference loss when ``batch.pairs`` is set and the
    bag loss otherwise.  ``priors`` maps "p1" (instance), "p2" (pairwise) and
    "ext" (instance) to their sources.
    """
    sc = _score_batch(ds, batch, model)
    dscore = np.zeros_like(sc.scores)
    terms = {}
    value = 0.0
    specs = [
        ("pref" if batch.pairs else "bag", weights.lambda_bag, None),
        ("p1", weights.lambda_p1, "p1"),
        ("p2", weights.lambda_p2, "p2"),
        ("ext", weights.lambda_ext, "ext"),
    ]
    for name, w, key in specs:
        if w == 0.0:
            continue
        if key is None:
            if batch.pairs:
                v, g = _pref_term(ds, batch, sc, model, cfg)
            else:
                v, g = _bag_term(ds, batch, sc, model, cfg)
        else:
            prior = priors.get(key)
            if prior is None:
                raise ValueError(f"weight on {key!r} is nonzero but no such prior was supplied")
            if key == "p2":
                v, g = _pairwise_term(ds, batch, sc, prior, model)
            else:
                v, g = _instance_term(ds, sc, prior, model)
        terms[name] = v
        value += w * v
        dscore += w * g
    return LossResult(value, model.backward(sc.cache, dscore), terms)


def supervised_loss(ds: Dataset, batch: Batch, model: ScorerModel, targets: PriorSource) -> LossResult:
    """Per-instance loss against label targets (gold or pseudo-labels)."""
    sc = _score_batch(ds, batch, model)
    v, g = _instance_term(ds, sc, targets, model)
    return LossResult(v, model.backward(sc.cache, g), {"instance": v})
