"""Baseline-vs-method comparisons on seeded synthetic data."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from disagg.aggregation import AggConfig
from disagg.data import (
    Dataset,
    generate_preferences,
    generate_synthetic,
    shuffle_preference_labels,
    split_bags,
)
from disagg.losses import LossWeights
from disagg.metrics import auc_roc, preference_accuracy
from disagg.priors import cosine_priors
from disagg.pseudolabel import pslab_dataset
from disagg.training import TrainConfig, train, train_response_level, train_supervised


@dataclass(frozen=True)
class SyntheticSetup:
    n_train: int = 500
    n_test: int = 100
    bag_size_range: tuple[int, int] = (2, 8)
    d: int = 32
    agg: str = "min"
    noise: float = 0.1
    prior_quality: float = 0.8

    def make(self, seed: int) -> tuple[Dataset, Dataset]:
        ds = generate_synthetic(
            seed,
            self.n_train + self.n_test,
            self.bag_size_range,
            self.d,
            self.agg,
            noise=self.noise,
            prior_quality=self.prior_quality,
        )
        return split_bags(ds, self.n_train)


@dataclass(frozen=True)
class OrderingConfig:
    setup: SyntheticSetup = field(default_factory=SyntheticSetup)
    base: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32, epochs=20, learning_rate=1e-3))
    # Chosen by grid search on validation seeds 100-102 and 200-209 (scripts/tune_ordering.py), never on the
    # evaluation seeds. Each method gets the epoch count that maximized its own validation AUC.
    prior_weights: LossWeights = field(default_factory=lambda: LossWeights(0.2, 0.7, 0.1, 0.0))
    epochs: dict = field(
        default_factory=lambda: {"supervised": 10, "fractal": 10, "bag_loss": 20, "response_level": 20}
    )

    def config(self, method: str, seed: int) -> TrainConfig:
        return replace(self.base, seed=seed, epochs=self.epochs.get(method, self.base.epochs))


def fractal(train_ds: Dataset, cfg: TrainConfig, weights: LossWeights):
    """Prior-augmented bag loss, pseudo-label the train set, retrain on the pseudo-labels."""
    first = train(train_ds, replace(cfg, mode="bag", weights=weights)).model
    relabeled, audit = pslab_dataset(train_ds, first)
    final = train_supervised(relabeled, replace(cfg, mode="supervised")).model
    return final, first, audit


def run_ordering(seed: int, oc: OrderingConfig = OrderingConfig()) -> dict[str, float]:
    """Instance AUC-ROC on held-out bags for each method, for one seed."""
    train_ds, test_ds = oc.setup.make(seed)
    X, gold = test_ds.flat.X, test_ds.flat.gold
    out = {}
    sup = train_supervised(train_ds, replace(oc.config("supervised", seed), mode="supervised")).model
    out["supervised"] = auc_roc(sup.score(X), gold)
    final, first, _ = fractal(train_ds, oc.config("fractal", seed), oc.prior_weights)
    out["fractal"] = auc_roc(final.score(X), gold)
    out["priors_bag_loss"] = auc_roc(first.score(X), gold)
    bag = train(train_ds, replace(oc.config("bag_loss", seed), mode="bag", weights=LossWeights())).model
    out["bag_loss"] = auc_roc(bag.score(X), gold)
    out["response_level"] = auc_roc(train_response_level(train_ds, oc.config("response_level", seed)).model.score(X), gold)
    out["cosine"] = auc_roc(cosine_priors(test_ds).values, gold)
    return out


@dataclass(frozen=True)
class PreferenceSetup:
    synth: SyntheticSetup = field(default_factory=lambda: SyntheticSetup(agg="avg", noise=0.0))
    n_train_pairs: int = 2000
    n_test_pairs: int = 500
    # Picked on validation seeds 100-105. The preference loss is unbounded below and, trained long,
    # pushes most scores to the clamp; the prior terms and a short schedule keep the ranking usable.
    base: TrainConfig = field(
        default_factory=lambda: TrainConfig(mode="preference", batch_size=32, epochs=5, learning_rate=3e-4,
                                            agg=AggConfig(kind="avg"))
    )
    weights: LossWeights = field(default_factory=lambda: LossWeights(0.5, 0.4, 0.1, 0.0))


def run_preference(seed: int, ps: PreferenceSetup = PreferenceSetup()) -> dict[str, float]:
    """Held-out preference accuracy for PriorsPrefBagLoss and for a label-shuffled control.

    Train and test pairs are drawn among disjoint bags. The control sees the
    same pairs with permuted labels and no prior terms, so nothing it learns
    can carry information about the true ordering.
    """
    train_ds, test_ds = ps.synth.make(seed)
    train_pairs = generate_preferences(train_ds, ps.n_train_pairs, seed)
    test_pairs = generate_preferences(test_ds, ps.n_test_pairs, seed + 10_000)
    cfg = replace(ps.base, seed=seed)
    model = train(train_ds.with_preferences(train_pairs), replace(cfg, weights=ps.weights)).model
    shuffled = train_ds.with_preferences(shuffle_preference_labels(train_pairs, seed))
    control = train(shuffled, replace(cfg, weights=LossWeights())).model
    agg = cfg.agg
    return {
        "priors_pref_bag_loss": preference_accuracy(model, test_ds, test_pairs, agg).accuracy,
        "shuffled_control": preference_accuracy(control, test_ds, test_pairs, agg).accuracy,
    }
