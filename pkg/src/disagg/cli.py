"""Command-line entry point.

Every command writes into a fresh output directory that appears atomically
and contains ``manifest.json``: the argv, resolved flags and input hashes
needed to reproduce it (``disagg rerun <manifest> --out <dir>``).

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 pseudo-labeling not applicable.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from disagg.aggregation import APPROXIMATIONS, AggConfig
from disagg.data import (
    Dataset,
    generate_preferences,
    generate_synthetic,
    load_dataset,
    load_preferences,
    split_bags,
    validate_consistency,
    write_dataset,
    write_preferences,
)
from disagg.losses import LossWeights
from disagg.metrics import (
    ROW_FIELDS,
    aggregate_bags,
    bag_report,
    instance_report,
    preference_accuracy_from_scores,
    preference_report,
    report_row,
)
from disagg.model import ScorerModel
from disagg.priors import cosine_priors, load_external_prior
from disagg.pseudolabel import NotApplicable, pslab_applicability, pslab_dataset
from disagg.training import TrainConfig, TrainingDiverged, train, train_supervised

log = logging.getLogger("disagg")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_NOT_APPLICABLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors here are exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- files ----------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _write_rows(path: Path, rows: list[dict]) -> None:
    keys = [k for k in rows[0] if k not in ROW_FIELDS] + list(ROW_FIELDS) if rows else list(ROW_FIELDS)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in keys})


@contextlib.contextmanager
def _output_dir(out: str, force: bool):
    """Yield a scratch directory that is renamed to ``out`` only on success."""
    target = Path(out)
    if target.exists() and not force:
        raise UsageError(f"output directory {target} exists; pass --force to replace it")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.rename(tmp, target)


def _manifest(args, argv: Sequence[str], inputs: dict[str, Optional[str]], **extra) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "force")}
    files = {name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in inputs.items() if p}
    out = {"command": args.command, "argv": list(argv), "flags": flags, "inputs": files}
    out.update(extra)
    return out


# -- shared helpers -------------------------------------------------------------------


def _load(path: str, pairs: Optional[str] = None) -> Dataset:
    ds = load_dataset(path)
    if pairs:
        ds = ds.with_preferences(load_preferences(pairs))
    return ds


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        data = json.loads(Path(args.config).read_text())
        cfg = TrainConfig.from_dict(data.get("train", data))
    over = {}
    for flag, key in (("mode", "mode"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("optimizer", "optimizer"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if getattr(args, "weights", None) is not None:
        over["weights"] = LossWeights(*args.weights)
    if getattr(args, "approx", None) is not None:
        over["agg"] = replace(cfg.agg, approx=args.approx)
    if getattr(args, "hidden", None) is not None:
        over["hidden"] = tuple(args.hidden)
    return replace(cfg, **over)


def _synthesize(out: Path, seed: int, p: dict) -> dict[str, str]:
    """Write train/test datasets (and optional preference pairs); return written names."""
    n_test = int(p.get("test_bags", 0))
    ds = generate_synthetic(
        seed,
        int(p["bags"]) + n_test,
        tuple(p.get("bag_size", (2, 8))),
        int(p.get("d", 32)),
        p.get("agg", "min"),
        label_kind=p.get("label_kind", "binary"),
        L=int(p.get("L", 1)),
        noise=float(p.get("noise", 0.0)),
        prior_quality=float(p.get("prior_quality", 1.0)),
    )
    written = {}
    parts = [("train", ds, int(p.get("pairs", 0)))]
    if n_test:
        train_ds, test_ds = split_bags(ds, int(p["bags"]))
        parts = [("train", train_ds, int(p.get("pairs", 0))), ("test", test_ds, int(p.get("test_pairs", 0)))]
    for name, part, n_pairs in parts:
        write_dataset(part, out / f"{name}.jsonl")
        written[name] = f"{name}.jsonl"
        if n_pairs:
            # pair seeds are derived from the run seed so train and test pairs differ
            pairs = generate_preferences(part, n_pairs, seed * 2 + (name == "test"))
            write_preferences(pairs, out / f"{name}_pairs.jsonl")
            written[f"{name}_pairs"] = f"{name}_pairs.jsonl"
    return written


def _fit(ds: Dataset, cfg: TrainConfig, out: Path, stem: str) -> ScorerModel:
    res = train(ds, cfg)
    res.model.save(out / f"{stem}.bin")
    _write_jsonl(out / f"{stem}_log.jsonl", res.log)
    if res.log:
        log.info("%s: %d steps, final loss %.6f", stem, len(res.log), res.log[-1]["loss"])
    return res.model


def _evaluate(ds: Dataset, scores: np.ndarray, agg: AggConfig, pairs=None) -> list:
    """Instance report always; bag report when every bag is labeled; preference report when pairs exist."""
    reports = [instance_report(scores, ds)]
    bag_preds = aggregate_bags(scores, ds, agg)
    if all(b.label is not None for b in ds.bags):
        reports.append(bag_report(bag_preds, ds))
    if pairs:
        res = preference_accuracy_from_scores({b.id: float(v) for b, v in zip(ds.bags, bag_preds)}, pairs)
        reports.append(preference_report(res))
    return reports


def _write_reports(out: Path, reports, **keys) -> list[dict]:
    (out / "report.json").write_text(_dump({"reports": [r.to_dict() for r in reports], **keys}))
    rows = [report_row(r, **keys) for r in reports]
    _write_rows(out / "report.csv", rows)
    return rows


# -- commands ---------------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    params = {
        "bags": args.bags, "test_bags": args.test_bags, "bag_size": args.bag_size, "d": args.d,
        "agg": args.agg, "label_kind": args.label_kind, "L": args.L, "noise": args.noise,
        "prior_quality": args.prior_quality, "pairs": args.pairs, "test_pairs": args.test_pairs,
    }
    with _output_dir(args.out, args.force) as out:
        files = _synthesize(out, args.seed, params)
        (out / "manifest.json").write_text(_dump(_manifest(args, argv, {}, seed=args.seed, outputs=files)))
    print(_dump({"out": args.out, "files": files}), end="")
    return EXIT_OK


def cmd_validate(args, argv) -> int:
    ds = load_dataset(args.data)
    violations = validate_consistency(ds)
    report = {
        "bags": len(ds.bags),
        "instances": ds.n_instances,
        "violations": [{"bag_id": v.bag_id, "bag_label": v.bag_label, "aggregated": v.aggregated} for v in violations],
    }
    print(_dump(report), end="")
    return EXIT_OK if not violations else EXIT_USAGE


def cmd_train(args, argv) -> int:
    cfg = _train_config(args)
    ds = _load(args.data, args.pairs)
    with _output_dir(args.out, args.force) as out:
        (out / "config.json").write_text(_dump(cfg.to_dict()))
        _fit(ds, cfg, out, "model")
        inputs = {"data": args.data, "pairs": args.pairs, "config": args.config}
        (out / "manifest.json").write_text(_dump(_manifest(args, argv, inputs, seed=cfg.seed, config=cfg.to_dict())))
    log.info("method %s; wrote %s", cfg.weights.method_name, args.out)
    return EXIT_OK


def cmd_pslab(args, argv) -> int:
    ds = load_dataset(args.data)
    verdict = pslab_applicability(ds.label_kind, ds.agg, args.supervision, ds.L)
    if not verdict.applicable:
        raise NotApplicable(verdict.reason)
    model = ScorerModel.load(args.model)
    with _output_dir(args.out, args.force) as out:
        new, audit = pslab_dataset(ds, model)
        write_dataset(new, out / "dataset.jsonl")
        _write_jsonl(out / "audit.jsonl", [a.to_dict() for a in audit])
        inputs = {"data": args.data, "model": args.model}
        (out / "manifest.json").write_text(_dump(_manifest(args, argv, inputs)))
    flipped = sum(a.flipped_instance_id is not None for a in audit)
    print(_dump({"out": args.out, "bags": len(audit), "flipped": flipped}), end="")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    if (args.model is None) == (args.scores is None):
        raise UsageError("give exactly one of --model or --scores")
    ds = load_dataset(args.data)
    pairs = load_preferences(args.pairs) if args.pairs else ()
    if args.model:
        scores = ScorerModel.load(args.model).score(ds.flat.X)
        source = "model"
    elif args.scores == "cosine":
        scores, source = cosine_priors(ds).values, "cosine_similarity"
    else:
        scores, source = load_external_prior(ds).values, "external_prior"
    if ds.label_kind == "integer" and source != "model":
        scores = scores * ds.L
    agg = AggConfig(kind=ds.agg, approx=args.approx, r=args.r)
    reports = _evaluate(ds, scores, agg, pairs)
    with _output_dir(args.out, args.force) as out:
        rows = _write_reports(out, reports, source=source)
        inputs = {"data": args.data, "model": args.model, "pairs": args.pairs}
        (out / "manifest.json").write_text(_dump(_manifest(args, argv, inputs)))
    print(_dump(rows), end="")
    return EXIT_OK


DEFAULT_PIPELINE = {
    "seeds": [0],
    "synth": {"bags": 500, "test_bags": 100, "bag_size": [2, 8], "d": 32, "agg": "min",
              "noise": 0.1, "prior_quality": 0.8},
    "train": {"epochs": 10, "batch_size": 32, "learning_rate": 1e-3, "weights": [0.2, 0.7, 0.1, 0.0]},
    "retrain": {"epochs": 10},
}


def _pipeline_config(path: Optional[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_PIPELINE))
    if path:
        user = json.loads(Path(path).read_text())
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"unknown pipeline config keys: {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key] = {**cfg[key], **value}
            else:
                cfg[key] = value
    return cfg


def _run_seed(out: Path, seed: int, pc: dict) -> list[dict]:
    out.mkdir()
    files = _synthesize(out, seed, pc["synth"])
    if "test" not in files:
        raise UsageError("pipeline needs synth.test_bags > 0 for evaluation")
    train_ds = _load(out / files["train"], out / files["train_pairs"] if "train_pairs" in files else None)
    test_ds = load_dataset(out / files["test"])
    test_pairs = load_preferences(out / files["test_pairs"]) if "test_pairs" in files else ()
    cfg = replace(TrainConfig.from_dict(pc["train"]), seed=seed)
    agg = replace(cfg.agg, kind=train_ds.agg)
    stages = [("bag_model", _fit(train_ds, cfg, out, "model"))]
    if pc.get("retrain") is not None:
        supervision = "preference" if cfg.mode == "preference" else "bag"
        verdict = pslab_applicability(train_ds.label_kind, train_ds.agg, supervision, train_ds.L)
        if not verdict.applicable:
            raise NotApplicable(verdict.reason)
        relabeled, audit = pslab_dataset(train_ds, stages[0][1])
        write_dataset(relabeled, out / "pslab.jsonl")
        _write_jsonl(out / "audit.jsonl", [a.to_dict() for a in audit])
        rcfg = replace(TrainConfig.from_dict({**pc["train"], **pc["retrain"]}), seed=seed, mode="supervised")
        res = train_supervised(relabeled, rcfg)
        res.model.save(out / "final.bin")
        _write_jsonl(out / "final_log.jsonl", res.log)
        stages.append(("final", res.model))
    rows, reports = [], []
    for stage, model in stages:
        reps = _evaluate(test_ds, model.score(test_ds.flat.X), agg, test_pairs)
        reports += [{"stage": stage, **r.to_dict()} for r in reps]
        rows += [report_row(r, seed=seed, stage=stage) for r in reps]
    (out / "report.json").write_text(_dump({"seed": seed, "method": cfg.weights.method_name, "reports": reports}))
    _write_rows(out / "report.csv", rows)
    return rows


def cmd_pipeline(args, argv) -> int:
    pc = _pipeline_config(args.config)
    if args.seeds is not None:
        pc["seeds"] = list(args.seeds)
    with _output_dir(args.out, args.force) as out:
        rows = []
        for seed in pc["seeds"]:
            log.info("pipeline seed %d", seed)
            rows += _run_seed(out / f"seed_{seed}", int(seed), pc)
        _write_rows(out / "summary.csv", rows)
        (out / "pipeline_config.json").write_text(_dump(pc))
        (out / "manifest.json").write_text(_dump(_manifest(args, argv, {"config": args.config}, resolved=pc)))
    print(_dump(rows), end="")
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    replay = list(manifest["argv"]) + ["--out", args.out] + (["--force"] if args.force else [])
    return main(replay)


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disagg", description="Disaggregate bag labels into instance scores.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_out(sp):
        sp.add_argument("--out", required=True, help="output directory (created atomically)")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")

    s = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bags", type=int, required=True, help="number of training bags")
    s.add_argument("--test-bags", type=int, default=0)
    s.add_argument("--bag-size", type=int, nargs=2, default=[2, 8], metavar=("MIN", "MAX"))
    s.add_argument("--d", type=int, default=32, help="embedding dimension")
    s.add_argument("--agg", choices=("min", "max", "avg"), default="min")
    s.add_argument("--label-kind", choices=("binary", "integer"), default="binary")
    s.add_argument("--L", type=int, default=1, help="largest label for integer labels")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--prior-quality", type=float, default=1.0)
    s.add_argument("--pairs", type=int, default=0, help="preference pairs among training bags")
    s.add_argument("--test-pairs", type=int, default=0)
    with_out(s)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="check bag labels against aggregated gold labels")
    v.add_argument("data")
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="train an instance scorer")
    t.add_argument("--data", required=True)
    t.add_argument("--pairs", help="preference pairs file (preference mode)")
    t.add_argument("--config", help="JSON training config; flags below override it")
    t.add_argument("--mode", choices=("bag", "preference", "response_level", "supervised"))
    t.add_argument("--weights", type=float, nargs=4, metavar=("BAG", "P1", "P2", "EXT"))
    t.add_argument("--approx", choices=APPROXIMATIONS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--hidden", type=int, nargs=2, metavar=("H1", "H2"))
    t.add_argument("--seed", type=int)
    with_out(t)
    t.set_defaults(func=cmd_train)

    ps = sub.add_parser("pslab", help="pseudo-label a training set with a trained model")
    ps.add_argument("--data", required=True)
    ps.add_argument("--model", required=True)
    ps.add_argument("--supervision", choices=("bag", "preference"), default="bag")
    with_out(ps)
    ps.set_defaults(func=cmd_pslab)

    e = sub.add_parser("eval", help="instance, bag and preference reports")
    e.add_argument("--data", required=True)
    e.add_argument("--model")
    e.add_argument("--scores", choices=("cosine", "external"), help="score instances by a prior instead of a model")
    e.add_argument("--pairs")
    e.add_argument("--approx", choices=APPROXIMATIONS, default="hard", help="aggregation used for bag predictions")
    e.add_argument("--r", type=float, default=4.0)
    with_out(e)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="synth, train, pseudo-label, retrain and evaluate per seed")
    pl.add_argument("--config", help="JSON with optional keys seeds, synth, train, retrain")
    pl.add_argument("--seeds", type=int, nargs="+")
    with_out(pl)
    pl.set_defaults(func=cmd_pipeline)

    r = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    r.add_argument("manifest")
    with_out(r)
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    recorded = [a for a in argv if a not in ("-v", "--verbose")]
    try:
        return args.func(args, recorded)
    except NotApplicable as exc:
        print(f"error: pseudo-labeling is not applicable: {exc}", file=sys.stderr)
        return EXIT_NOT_APPLICABLE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
