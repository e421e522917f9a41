"""Grid search for the preference experiment, on validation seeds 100-105 only.

The chosen values are pinned in ``disagg.experiments.PreferenceSetup``.

    python scripts/tune_preference.py
"""

import itertools
from dataclasses import replace

import numpy as np

from disagg.experiments import PreferenceSetup, run_preference
from disagg.losses import LossWeights

SEEDS = range(100, 106)
WEIGHTS = ((1, 0, 0, 0), (0.8, 0.2, 0, 0), (0.5, 0.4, 0.1, 0), (0.3, 0.6, 0.1, 0), (0.2, 0.7, 0.1, 0), (0.3, 0.5, 0.2, 0))


def main():
    ps0 = PreferenceSetup()
    for ep, lr, w in itertools.product((1, 2, 5, 10), (3e-4, 1e-3), WEIGHTS):
        ps = replace(ps0, base=replace(ps0.base, epochs=ep, learning_rate=lr), weights=LossWeights(*w))
        runs = [run_preference(s, ps) for s in SEEDS]
        acc = np.mean([r["priors_pref_bag_loss"] for r in runs])
        ctrl = np.mean([r["shuffled_control"] for r in runs])
        print(f"epochs={ep:3d} lr={lr:g} {w} accuracy={acc:.4f} control={ctrl:.4f}", flush=True)


if __name__ == "__main__":
    main()
