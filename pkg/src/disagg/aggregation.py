"""Exact and differentiable approximations of MIN, MAX and AVG.

Every function takes a 1-D vector of instance scores and returns the bag
score together with its exact gradient with respect to the scores.

The probability-based approximations are written in their MAX orientation
(NOR, ISR, GM) or MIN orientation (Mult) and the other direction is obtained
through complements: ``soft_min(p) = 1 - soft_max(1 - p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

APPROXIMATIONS = ("hard", "mult", "lse", "isr", "nor", "gm")
PROB_ONLY = ("mult", "isr", "nor", "gm")
ISR_EPS = 1e-6


@dataclass(frozen=True)
class AggConfig:
    kind: str = "min"
    approx: str = "hard"
    r: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.lower())
        object.__setattr__(self, "approx", self.approx.lower())
        if self.kind not in ("min", "max", "avg"):
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if self.approx not in APPROXIMATIONS:
            raise ValueError(f"unknown approximation {self.approx!r}; expected one of {APPROXIMATIONS}")
        if not self.r > 0:
            raise ValueError(f"sharpness r must be positive, got {self.r}")

    @property
    def needs_probabilities(self) -> bool:
        return self.kind != "avg" and self.approx in PROB_ONLY


def _as_scores(scores, approx: str) -> np.ndarray:
    p = np.asarray(scores, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("aggregation needs a nonempty 1-D score vector")
    if approx in PROB_ONLY and not np.all((p > 0.0) & (p < 1.0)):
        raise ValueError(f"{approx} aggregation requires scores strictly inside (0, 1)")
    return p


def _hard(p: np.ndarray, pick) -> tuple[float, np.ndarray]:
    v = pick(p)
    mask = (p == v).astype(np.float64)
    # ties share the unit of gradient mass equally
    return float(v), mask / mask.sum()


def _mult_min(p):
    value = float(np.prod(p))
    return value, value / p


def _lse_min(p, r):
    m = p.min()
    e = np.exp(-r * (p - m))
    s = e.sum()
    value = m - np.log(s / p.size) / r
    return float(value), e / s


def _lse_max(q, r):
    m = q.max()
    e = np.exp(r * (q - m))
    s = e.sum()
    value = m + np.log(s / q.size) / r
    return float(value), e / s


def _nor_max(q):
    value = 1.0 - float(np.prod(1.0 - q))
    return value, (1.0 - value) / (1.0 - q)


def _isr_max(q):
    c = np.clip(q, ISR_EPS, 1.0 - ISR_EPS)
    odds = c / (1.0 - c)
    S = odds.sum()
    grad = 1.0 / ((1.0 + S) ** 2 * (1.0 - c) ** 2)
    grad = np.where(c == q, grad, 0.0)
    return float(S / (1.0 + S)), grad


def _gm_max(q, r):
    n = q.size
    mean_pow = float(np.sum(q**r) / n)
    value = mean_pow ** (1.0 / r)
    grad = q ** (r - 1.0) * mean_pow ** (1.0 / r - 1.0) / n
    return value, grad


def _complement(fn, p, *args):
    value, grad = fn(1.0 - p, *args)
    return 1.0 - value, grad


def soft_min(scores, cfg: AggConfig = AggConfig()) -> tuple[float, np.ndarray]:
    p = _as_scores(scores, cfg.approx)
    a = cfg.approx
    if a == "hard":
        return _hard(p, np.min)
    if a == "mult":
        return _mult_min(p)
    if a == "lse":
        return _lse_min(p, cfg.r)
    if a == "nor":
        return _complement(_nor_max, p)
    if a == "isr":
        return _complement(_isr_max, p)
    return _complement(_gm_max, p, cfg.r)


def soft_max(scores, cfg: AggConfig = AggConfig(kind="max")) -> tuple[float, np.ndarray]:
    p = _as_scores(scores, cfg.approx)
    a = cfg.approx
    if a == "hard":
        return _hard(p, np.max)
    if a == "mult":
        return _complement(_mult_min, p)
    if a == "lse":
        return _lse_max(p, cfg.r)
    if a == "nor":
        return _nor_max(p)
    if a == "isr":
        return _isr_max(p)
    return _gm_max(p, cfg.r)


def avg(scores) -> tuple[float, np.ndarray]:
    p = _as_scores(scores, "avg")
    n = p.size
    return float(p.sum() / n), np.full(n, 1.0 / n)


def aggregate(scores, cfg: AggConfig) -> tuple[float, np.ndarray]:
    """Dispatch on ``cfg.kind``; AVG ignores the approximation."""
    if cfg.kind == "min":
        return soft_min(scores, cfg)
    if cfg.kind == "max":
        return soft_max(scores, cfg)
    return avg(scores)
