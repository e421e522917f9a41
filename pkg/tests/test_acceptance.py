"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import itertools
import json
import time

import numpy as np
import pytest

from disagg.aggregation import AggConfig, soft_max, soft_min
from disagg.cli import main
from disagg.data import generate_preferences, generate_synthetic
from disagg.experiments import run_ordering, run_preference
from disagg.losses import Batch, bag_loss, preference_loss, prior_loss_instance, prior_loss_pairwise
from disagg.metrics import auc_roc, regression_metrics
from disagg.pseudolabel import likelihood, pslab_bag

from .helpers import fd_gradient, flat, random_model, rel_error
from .test_losses import random_priors


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


def test_1_gradient_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, checks = 0.0, 0
    for approx in ("mult", "lse", "isr", "nor", "gm", "avg"):
        for draw in range(20):
            kind = "avg" if approx == "avg" else ("min", "max")[draw % 2]
            cfg = AggConfig(kind, "hard" if approx == "avg" else approx)
            ds = generate_synthetic(int(rng.integers(1 << 30)), 6, (1, 6), 4, kind)
            pairs = generate_preferences(ds, 5, draw, skip_ties=False)
            ext, pair = random_priors(ds, rng)
            m = random_model(rng, 4)
            bags, prefs = Batch.of_bags(ds), Batch.of_pairs(ds, pairs)
            losses = [
                lambda mm: bag_loss(ds, bags, mm, cfg),
                lambda mm: prior_loss_instance(ds, bags, mm, ext),
                lambda mm: prior_loss_pairwise(ds, bags, mm, pair),
                lambda mm: preference_loss(ds, prefs, mm, cfg),
            ]
            for fn in losses:
                err = rel_error(flat(fn(m)[1]), fd_gradient(m, lambda mm: fn(mm)[0]))
                worst = max(worst, err)
                checks += 1
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 60, f"{checks} checks, worst relative error {worst:.2e}, {elapsed:.1f}s")


def _brute(scores, y, agg, table):
    lab = table[len(scores)]
    ok = (lab.min(axis=1) if agg == "min" else lab.max(axis=1)) == y
    lik = np.prod(np.where(lab[ok] == 1, scores, 1 - scores), axis=1)
    return lik.max()


def test_2_pslab_oracle(report):
    t0 = time.perf_counter()
    table = {n: np.array(list(itertools.product((0, 1), repeat=n))) for n in range(1, 13)}
    rng = np.random.default_rng(7)
    bad_lik = bad_cons = 0
    n_bags = 0
    for agg in ("min", "max"):
        for _ in range(1000):
            n = int(rng.integers(1, 13))
            s = rng.uniform(0, 1, n)
            y = int(rng.integers(0, 2))
            lab = pslab_bag(s, y, agg)
            if (lab.min() if agg == "min" else lab.max()) != y:
                bad_cons += 1
            best = _brute(s, y, agg, table)
            if not np.isclose(likelihood(s, lab), best, rtol=1e-12, atol=0):
                bad_lik += 1
            n_bags += 1
    elapsed = time.perf_counter() - t0
    ok = bad_lik == 0 and bad_cons == 0 and elapsed < 30
    report(2, ok, f"{n_bags} bags, {bad_lik} likelihood mismatches, {bad_cons} inconsistent, {elapsed:.1f}s")


def test_3_aggregation_bounds(report):
    rng = np.random.default_rng(3)
    r = 4.0
    lse = AggConfig("min", "lse", r)
    viol = {"lse_lower": 0, "lse_upper": 0, "mult": 0, "duality": 0}
    worst_dual = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 20))
        p = rng.uniform(1e-6, 1 - 1e-6, n)
        m = p.min()
        v = soft_min(p, lse)[0]
        viol["lse_lower"] += int(v < m - 1e-12)
        viol["lse_upper"] += int(v > m + np.log(n) / r + 1e-12)
        viol["mult"] += int(soft_min(p, AggConfig("min", "mult"))[0] > m + 1e-12)
        for approx in ("hard", "mult", "lse", "isr", "nor", "gm"):
            d = abs(soft_max(p, AggConfig("max", approx, r))[0] - (1 - soft_min(1 - p, AggConfig("min", approx, r))[0]))
            worst_dual = max(worst_dual, d)
            viol["duality"] += int(d > 1e-12)
    report(3, not any(viol.values()), f"violations {viol}, worst duality gap {worst_dual:.1e}")


def test_4_synthetic_ordering(report):
    t0 = time.perf_counter()
    runs = [run_ordering(seed) for seed in (0, 1, 2)]
    mean = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    elapsed = time.perf_counter() - t0
    order = mean["supervised"] >= mean["fractal"] >= mean["bag_loss"] >= mean["response_level"]
    gap = mean["fractal"] - mean["bag_loss"]
    detail = (
        f"supervised {mean['supervised']:.4f} >= fractal {mean['fractal']:.4f} >= bag_loss {mean['bag_loss']:.4f}"
        f" >= response_level {mean['response_level']:.4f}: {order}; fractal - bag_loss = {gap:.4f} (need >= 0.02);"
        f" {elapsed:.0f}s"
    )
    report(4, order and gap >= 0.02 and elapsed < 600, detail)


def test_5_preference_pipeline(report):
    runs = [run_preference(seed) for seed in (0, 1, 2)]
    acc = float(np.mean([r["priors_pref_bag_loss"] for r in runs]))
    ctrl = float(np.mean([r["shuffled_control"] for r in runs]))
    ok = acc >= 0.80 and abs(ctrl - 0.5) <= 0.05
    report(5, ok, f"PriorsPrefBagLoss accuracy {acc:.4f} (need >= 0.80), shuffled control {ctrl:.4f} (need 0.5 +/- 0.05)")


def test_6_metric_oracles(report):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.uniform(0, 1, n)
        hits = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in s[y == 1] for b in s[y == 0])
        mismatches += auc_roc(s, y) != hits / ((y == 1).sum() * (y == 0).sum())
    mse_bad = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 30))
        mae, mse = regression_metrics(rng.normal(0, 3, n), rng.normal(0, 3, n))
        mse_bad += mae**2 > mse * (1 + 1e-12)
    report(6, mismatches == 0 and mse_bad == 0, f"{mismatches} AUC mismatches in 10000 cases, {mse_bad} mae^2 > mse")


def test_7_determinism(report, tmp_path):
    cfg = tmp_path / "pipeline.json"
    cfg.write_text(json.dumps({
        "synth": {"bags": 60, "test_bags": 20, "d": 8, "noise": 0.1, "prior_quality": 0.8},
        "train": {"epochs": 2, "batch_size": 8, "hidden": [8, 4], "weights": [0.6, 0.3, 0.1, 0]},
        "retrain": {"epochs": 2},
    }))
    assert main(["pipeline", "--config", str(cfg), "--seeds", "0", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["rerun", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differing = [str(f) for f in files if f.name != "manifest.json"
                 and (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".bin" for f in files)
    report(7, not differing and n_ckpt == 4, f"{len(files)} files compared ({n_ckpt} checkpoints), differing: {differing}")
