"""Minibatch training for bag, preference, response-level and supervised modes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from disagg.aggregation import AggConfig
from disagg.data import Bag, Dataset, Instance
from disagg.losses import Batch, LossResult, LossWeights, supervised_loss, total_loss
from disagg.model import ScorerModel, init_model
from disagg.priors import PriorSource, correlation_priors, cosine_priors, label_targets, load_external_prior

MODES = ("bag", "preference", "response_level", "supervised")


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


class SGD:
    def __init__(self, params, lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "bag"
    batch_size: int = 32
    epochs: int = 50
    steps_per_epoch: Optional[int] = None  # default ceil(n_items / batch_size)
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    agg: AggConfig = field(default_factory=AggConfig)
    hidden: tuple[int, int] = (64, 32)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or (self.steps_per_epoch is not None and self.steps_per_epoch < 0):
            raise ValueError("epochs and steps_per_epoch must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", None)
        if isinstance(w, Mapping):
            d["weights"] = LossWeights(**w)
        elif w is not None:
            d["weights"] = LossWeights(*w)
        a = d.pop("agg", None)
        if a is not None:
            d["agg"] = AggConfig(**a)
        for key in ("betas", "hidden"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class TrainResult:
    model: ScorerModel
    log: list[dict]


def build_priors(ds: Dataset, weights: LossWeights) -> dict[str, PriorSource]:
    """Compute the prior sources that the nonzero weights need."""
    out = {}
    if weights.lambda_p1:
        out["p1"] = cosine_priors(ds)
    if weights.lambda_p2:
        out["p2"] = correlation_priors(ds)
    if weights.lambda_ext:
        out["ext"] = load_external_prior(ds)
    return out


def _model_for(ds: Dataset, cfg: TrainConfig) -> ScorerModel:
    head = "binary" if ds.label_kind == "binary" else "integer"
    return init_model(cfg.seed, ds.d, cfg.hidden[0], cfg.hidden[1], head=head, L=ds.L)


def _optimizer(cfg: TrainConfig, model: ScorerModel):
    if cfg.optimizer == "sgd":
        return SGD(model.params, cfg.learning_rate)
    return Adam(model.params, cfg.learning_rate, cfg.betas, cfg.adam_eps)


def _run(cfg: TrainConfig, model: ScorerModel, n_items: int, step: Callable[[np.ndarray], LossResult]) -> list[dict]:
    """Epoch-shuffled sampling without replacement; N * K optimizer steps."""
    q = cfg.batch_size
    if q > n_items:
        raise ValueError(f"batch_size {q} exceeds the {n_items} available training items")
    K = cfg.steps_per_epoch if cfg.steps_per_epoch is not None else math.ceil(n_items / q)
    wrap = cfg.steps_per_epoch is not None
    rng = np.random.default_rng([cfg.seed, 1])
    opt = _optimizer(cfg, model)
    log = []
    t = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_items)
        for k in range(K):
            pos = np.arange(k * q, (k + 1) * q)
            pos = pos % n_items if wrap else pos[pos < n_items]
            res = step(perm[pos])
            if not math.isfinite(res.value):
                raise TrainingDiverged(f"non-finite loss at step {t} (epoch {epoch}): terms {res.terms}")
            opt.step(res.grads)
            log.append({"step": t, "epoch": epoch, "loss": res.value, "terms": dict(res.terms)})
            t += 1
    return log


def _check_agg(ds: Dataset, cfg: TrainConfig) -> AggConfig:
    agg = replace(cfg.agg, kind=ds.agg)
    if ds.label_kind == "integer" and agg.needs_probabilities:
        raise ValueError(f"{agg.approx} aggregation needs probabilities; use hard or lse for integer labels")
    return agg


def train(ds: Dataset, cfg: TrainConfig, priors: Optional[Mapping[str, PriorSource]] = None) -> TrainResult:
    """Train an instance scorer in the mode named by ``cfg.mode``.

    Bag mode samples ``batch_size`` bags per step; preference mode samples
    ``batch_size`` preference pairs and replaces the bag loss by the
    preference loss.  Prior terms cover every instance of the sampled bags.
    """
    if cfg.mode == "supervised":
        return train_supervised(ds, cfg)
    if cfg.mode == "response_level":
        return train_response_level(ds, cfg)
    agg = _check_agg(ds, cfg)
    if priors is None:
        priors = build_priors(ds, cfg.weights)
    model = _model_for(ds, cfg)

    if cfg.mode == "bag":
        if np.isnan(ds.flat.bag_labels).any():
            raise ValueError("bag mode needs a label on every bag")
        step = lambda idx: total_loss(ds, Batch.of_bags(ds, idx), model, cfg.weights, priors, agg)
        n = len(ds.bags)
    else:
        pairs = ds.preferences
        if not pairs:
            raise ValueError("preference mode needs preference pairs")
        step = lambda idx: total_loss(ds, Batch.of_pairs(ds, [pairs[i] for i in idx]), model, cfg.weights, priors, agg)
        n = len(pairs)
    log = _run(cfg, model, n, step)
    return TrainResult(model, log)


def train_supervised(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Per-instance loss on gold labels (or pseudo-labels written into gold_label).

    Minibatches are drawn as bags, all of whose instances enter the loss.
    """
    targets = label_targets(ds)
    model = _model_for(ds, cfg)
    step = lambda idx: supervised_loss(ds, Batch.of_bags(ds, idx), model, targets)
    return TrainResult(model, _run(cfg, model, len(ds.bags), step))


def response_level_dataset(ds: Dataset) -> Dataset:
    """One singleton bag per response: mean instance embedding, same bag label."""
    bags = []
    for bag in ds.bags:
        if bag.label is None:
            raise ValueError(f"bag {bag.id!r} has no label")
        mean = np.mean([x.embedding for x in bag.instances], axis=0)
        bags.append(Bag(bag.id, (Instance(f"{bag.id}::mean", mean),), "avg", bag.label))
    return Dataset(d=ds.d, label_kind=ds.label_kind, L=ds.L, bags=tuple(bags))


def train_response_level(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fit the scorer on response embeddings against response labels.

    The bag loss on a singleton AVG bag is exactly the per-instance loss, so
    this reuses bag-mode training on the collapsed dataset.  Inference stays
    per instance.
    """
    collapsed = response_level_dataset(ds)
    inner = replace(cfg, mode="bag", weights=LossWeights(), agg=AggConfig(kind="avg"))
    return train(collapsed, inner, priors={})
