"""Two-hidden-layer ReLU MLP instance scorer with hand-written backprop."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
_MAGIC = b"DISAGG-SCORER v1\n"


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardCache:
    X: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    s: np.ndarray  # sigmoid of the output logit


class GradientTape:
    """Per-parameter gradient accumulators shaped like a model's parameters."""

    def __init__(self, model: "ScorerModel"):
        self.grads = [np.zeros_like(p) for p in model.params]

    def accumulate(self, grads) -> None:
        if len(grads) != len(self.grads):
            raise ValueError("gradient list does not match the model")
        for acc, g in zip(self.grads, grads):
            if acc.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {acc.shape}")
            acc += g

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


class ScorerModel:
    """Maps embeddings to a score in (0, 1), or (0, L) with the integer head.

    ``params`` holds W1 (d, h1), b1 (h1,), W2 (h1, h2), b2 (h2,), W3 (h2,),
    b3 (1,).  The output is ``L * sigmoid(relu(relu(x W1 + b1) W2 + b2) W3 + b3)``
    with L = 1 for the binary head.
    """

    def __init__(self, params, head: str = "binary", L: int = 1, seed: Optional[int] = None):
        if head not in ("binary", "integer"):
            raise ValueError(f"unknown head {head!r}")
        if head == "binary" and L != 1:
            raise ValueError("binary head has L = 1")
        if L < 1:
            raise ValueError(f"L must be >= 1, got {L}")
        self.params = [np.array(p, dtype=np.float64) for p in params]
        W1, b1, W2, b2, W3, b3 = self.params
        d, h1 = W1.shape
        h2 = W2.shape[1]
        expected = [(d, h1), (h1,), (h1, h2), (h2,), (h2,), (1,)]
        if [p.shape for p in self.params] != expected:
            raise ValueError(f"parameter shapes {[p.shape for p in self.params]} do not form a d-h1-h2-1 MLP")
        self.head = head
        self.L = int(L)
        self.seed = seed

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.params[0].shape[0], self.params[0].shape[1], self.params[2].shape[1]

    @property
    def d(self) -> int:
        return self.sizes[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def scale(self) -> float:
        return float(self.L)

    def copy(self) -> "ScorerModel":
        return ScorerModel([p.copy() for p in self.params], self.head, self.L, self.seed)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"expected embeddings of dimension {self.d}, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite embedding")
        return X

    def forward(self, X) -> tuple[np.ndarray, ForwardCache]:
        """Scores for a batch of embeddings (or a single one) plus the backprop cache."""
        X = self._check_input(X)
        W1, b1, W2, b2, W3, b3 = self.params
        z1 = X @ W1 + b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ W2 + b2
        a2 = np.maximum(z2, 0.0)
        s = _sigmoid(a2 @ W3 + b3[0])
        return self.L * s, ForwardCache(X, z1, a1, z2, a2, s)

    def score(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, cache: Optional[ForwardCache], upstream, tape: Optional[GradientTape] = None) -> list[np.ndarray]:
        """Chain rule from d(loss)/d(score) per row to parameter gradients.

        Gradients are summed over rows; if ``tape`` is given they are also
        accumulated into it.
        """
        if cache is None:
            raise ValueError("backward needs the cache from a forward pass")
        g = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if g.shape[0] != cache.X.shape[0]:
            raise ValueError("upstream gradient length does not match the cached batch")
        _, _, W2, _, W3, _ = self.params
        dz3 = g * self.L * cache.s * (1.0 - cache.s)
        gW3 = cache.a2.T @ dz3
        gb3 = np.array([dz3.sum()])
        dz2 = np.outer(dz3, W3) * (cache.z2 > 0)
        gW2 = cache.a1.T @ dz2
        gb2 = dz2.sum(axis=0)
        dz1 = (dz2 @ W2.T) * (cache.z1 > 0)
        gW1 = cache.X.T @ dz1
        gb1 = dz1.sum(axis=0)
        grads = [gW1, gb1, gW2, gb2, gW3, gb3]
        if tape is not None:
            tape.accumulate(grads)
        return grads

    # -- checkpoints ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        d, h1, h2 = self.sizes
        header = {"d": d, "h1": h1, "h2": h2, "head": self.head, "L": self.L, "seed": self.seed}
        body = self.flat_params().astype("<f8").tobytes()
        return _MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ScorerModel":
        if not blob.startswith(_MAGIC):
            raise ValueError("not a scorer checkpoint")
        rest = blob[len(_MAGIC) :]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        vec = np.frombuffer(rest[nl + 1 :], dtype="<f8").astype(np.float64)
        d, h1, h2 = header["d"], header["h1"], header["h2"]
        m = ScorerModel(_zero_params(d, h1, h2), header["head"], header["L"], header["seed"])
        m.set_flat_params(vec)
        return m

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ScorerModel":
        return cls.from_bytes(Path(path).read_bytes())


def _zero_params(d, h1, h2):
    return [np.zeros((d, h1)), np.zeros(h1), np.zeros((h1, h2)), np.zeros(h2), np.zeros(h2), np.zeros(1)]


def init_model(seed: int, d: int, h1: int = 64, h2: int = 32, head: str = "binary", L: int = 1) -> ScorerModel:
    """Weights uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    if min(d, h1, h2) < 1:
        raise ValueError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    params = _zero_params(d, h1, h2)
    for idx, fan_in in ((0, d), (2, h1), (4, h2)):
        bound = 1.0 / np.sqrt(fan_in)
        params[idx] = rng.uniform(-bound, bound, size=params[idx].shape)
    return ScorerModel(params, head=head, L=L if head == "integer" else 1, seed=seed)
