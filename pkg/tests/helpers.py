"""Shared builders for tests: datasets with chosen scores, and gradient checks."""

import numpy as np

from disagg.data import Bag, Dataset, Instance
from disagg.model import ScorerModel, init_model


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def pinned_model(L: int = 1) -> ScorerModel:
    """A 1-d model whose score for embedding [t] is L * sigmoid(t - 40), for t > 0."""
    params = [np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1), np.ones(1), np.array([-40.0])]
    return ScorerModel(params, head="binary" if L == 1 else "integer", L=L)


def pinned_dataset(bag_scores, labels, agg="min", L=1, label_kind=None, contexts=None) -> Dataset:
    """Bags whose instances score exactly ``bag_scores`` (as fractions of L) under ``pinned_model``."""
    bags = []
    for i, (scores, y) in enumerate(zip(bag_scores, labels)):
        insts = tuple(
            Instance(f"b{i}s{j}", np.array([40.0 + float(logit(p))])) for j, p in enumerate(scores)
        )
        ctx = None if contexts is None else contexts[i]
        bags.append(Bag(f"b{i}", insts, agg, y, ctx))
    kind = label_kind or ("binary" if L == 1 else "integer")
    return Dataset(d=1, label_kind=kind, L=L, bags=tuple(bags))


def random_model(rng, d, h1=5, h2=4, head="binary", L=1, scale=0.6) -> ScorerModel:
    m = init_model(int(rng.integers(1 << 30)), d, h1, h2, head=head, L=L)
    m.set_flat_params(rng.normal(0, scale, m.n_params))
    return m


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def fd_gradient(model: ScorerModel, f, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f(model)`` over the flat parameter vector."""
    theta = model.flat_params()
    out = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        model.set_flat_params(up)
        fu = f(model)
        model.set_flat_params(dn)
        fdn = f(model)
        out[i] = (fu - fdn) / (2 * h)
    model.set_flat_params(theta)
    return out


def flat(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])
