"""Instance priors p_x and within-bag pairwise priors p_xz."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from disagg.data import Dataset, DatasetError


class PriorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PriorSource:
    """Prior values aligned with ``Dataset.flat`` instance order.

    Instance priors fill ``values``; pairwise priors fill ``pairwise`` with one
    symmetric k x k matrix per bag (unit diagonal).
    """

    kind: str  # "cosine_context" | "pairwise_correlation" | "external_file" | "labels"
    values: Optional[np.ndarray] = None
    pairwise: Optional[tuple[np.ndarray, ...]] = None

    @property
    def is_pairwise(self) -> bool:
        return self.pairwise is not None


def cos_prior(x, U) -> float:
    """Cosine similarity mapped from [-1, 1] onto [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if x.shape != U.shape:
        raise PriorError(f"dimension mismatch: {x.shape} vs {U.shape}")
    nx, nu = np.linalg.norm(x), np.linalg.norm(U)
    if nx == 0.0 or nu == 0.0:
        raise PriorError("cosine prior undefined for a zero-norm vector")
    c = float(np.dot(x, U) / (nx * nu))
    return min(1.0, max(0.0, 0.5 * (1.0 + c)))


def corr_prior(x, z) -> float:
    """Pearson correlation of the coordinates, mapped onto [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise PriorError(f"dimension mismatch: {x.shape} vs {z.shape}")
    if x.size < 2:
        raise PriorError("correlation needs vectors of dimension >= 2")
    xc, zc = x - x.mean(), z - z.mean()
    sx, sz = np.sqrt(np.dot(xc, xc)), np.sqrt(np.dot(zc, zc))
    if sx == 0.0 or sz == 0.0:
        raise PriorError("correlation undefined for a constant vector")
    rho = float(np.dot(xc, zc) / (sx * sz))
    return min(1.0, max(0.0, 0.5 * (1.0 + rho)))


def correlation_matrix_prior(X: np.ndarray) -> np.ndarray:
    """``corr_prior`` for every pair of rows of ``X``; symmetric, unit diagonal."""
    Xc = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", Xc, Xc))
    if np.any(norms == 0.0):
        raise PriorError("correlation undefined for a constant embedding")
    Z = Xc / norms[:, None]
    P = 0.5 * (1.0 + Z @ Z.T)
    P = np.clip(0.5 * (P + P.T), 0.0, 1.0)
    np.fill_diagonal(P, 1.0)
    return P


def cosine_priors(ds: Dataset) -> PriorSource:
    """p_x = cos_prior(x, U_B) with U_B the context embedding of x's bag."""
    flat = ds.flat
    out = np.empty(len(flat.instance_ids))
    for i, bag in enumerate(ds.bags):
        if bag.context_embedding is None:
            raise PriorError(f"bag {bag.id!r} has no context embedding")
        U = bag.context_embedding
        nu = np.linalg.norm(U)
        if nu == 0.0:
            raise PriorError(f"bag {bag.id!r}: zero-norm context embedding")
        Xb = flat.X[flat.bag_slice(i)]
        nx = np.linalg.norm(Xb, axis=1)
        if np.any(nx == 0.0):
            raise PriorError(f"bag {bag.id!r}: zero-norm instance embedding")
        out[flat.bag_slice(i)] = 0.5 * (1.0 + (Xb @ U) / (nx * nu))
    return PriorSource("cosine_context", values=np.clip(out, 0.0, 1.0))


def correlation_priors(ds: Dataset) -> PriorSource:
    flat = ds.flat
    mats = []
    for i, bag in enumerate(ds.bags):
        try:
            mats.append(correlation_matrix_prior(flat.X[flat.bag_slice(i)]))
        except PriorError as exc:
            raise PriorError(f"bag {bag.id!r}: {exc}") from None
    return PriorSource("pairwise_correlation", pairwise=tuple(mats))


def load_external_prior(ds: Dataset) -> PriorSource:
    for bag in ds.bags:
        for x in bag.instances:
            if x.external_prior is None:
                raise DatasetError(f"instance {x.id!r} has no external_prior")
    return PriorSource("external_file", values=ds.flat.external_prior.copy())


def label_targets(ds: Dataset) -> PriorSource:
    """Gold (or pseudo) instance labels, used as hard targets by supervised training."""
    gold = ds.flat.gold
    if np.isnan(gold).any():
        missing = ds.flat.instance_ids[int(np.flatnonzero(np.isnan(gold))[0])]
        raise DatasetError(f"instance {missing!r} has no gold label")
    return PriorSource("labels", values=gold.copy())
