"""Bag/instance data model, dataset files, and the synthetic generator.

A dataset file is line-delimited JSON.  The first line is a header
``{"d": int, "label_kind": "binary"|"integer", "L": int|null}`` and every
following line is one bag::

    {"id": str, "agg": "min|max|avg", "label": number|null,
     "context_embedding": [float, ...]|null,
     "instances": [{"id": str, "embedding": [float, ...],
                    "gold_label": number|null, "external_prior": number|null}]}

Preference pairs live in a separate file, one ``{"bag_a", "bag_b", "label"}``
record per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

AGG_KINDS = ("min", "max", "avg")
LABEL_KINDS = ("binary", "integer")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


def _frozen_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DatasetError(f"{name} must be a flat vector")
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


def _opt_equal(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class Instance:
    id: str
    embedding: np.ndarray
    gold_label: Optional[float] = None
    external_prior: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.embedding, np.ndarray) or self.embedding.flags.writeable:
            object.__setattr__(self, "embedding", _frozen_vector(self.embedding, f"instance {self.id!r} embedding"))
        if self.external_prior is not None and not 0.0 <= self.external_prior <= 1.0:
            raise DatasetError(f"instance {self.id!r}: external_prior {self.external_prior} outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.id == other.id
            and _opt_equal(self.embedding, other.embedding)
            and self.gold_label == other.gold_label
            and self.external_prior == other.external_prior
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Bag:
    id: str
    instances: tuple[Instance, ...]
    agg: str
    label: Optional[float] = None
    context_embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if not self.instances:
            raise DatasetError(f"bag {self.id!r} is empty")
        if self.agg not in AGG_KINDS:
            raise DatasetError(f"bag {self.id!r}: unknown aggregation {self.agg!r}")
        ctx = self.context_embedding
        if ctx is not None and (not isinstance(ctx, np.ndarray) or ctx.flags.writeable):
            object.__setattr__(self, "context_embedding", _frozen_vector(ctx, f"bag {self.id!r} context_embedding"))

    def __len__(self):
        return len(self.instances)

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.id == other.id
            and self.agg == other.agg
            and self.label == other.label
            and _opt_equal(self.context_embedding, other.context_embedding)
            and self.instances == other.instances
        )

    __hash__ = None


@dataclass(frozen=True)
class PreferencePair:
    """``label`` is +1 when bag_a's label exceeds bag_b's, else -1."""

    bag_a: str
    bag_b: str
    label: int

    def __post_init__(self):
        if self.bag_a == self.bag_b:
            raise DatasetError(f"preference pair compares bag {self.bag_a!r} with itself")
        if self.label not in (1, -1):
            raise DatasetError(f"preference label must be +1 or -1, got {self.label!r}")


@dataclass(frozen=True)
class FlatView:
    """Instances of a dataset stacked in bag order, for vectorized work."""

    X: np.ndarray  # (N, d)
    offsets: np.ndarray  # (n_bags + 1,), bag i spans offsets[i]:offsets[i+1]
    instance_ids: tuple[str, ...]
    gold: np.ndarray  # nan where missing
    external_prior: np.ndarray  # nan where missing
    bag_labels: np.ndarray  # nan where missing

    def bag_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


@dataclass(frozen=True, eq=False)
class Dataset:
    d: int
    label_kind: str
    bags: tuple[Bag, ...]
    L: int = 1
    preferences: Optional[tuple[PreferencePair, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        if self.preferences is not None:
            object.__setattr__(self, "preferences", tuple(self.preferences))
        _check_dataset(self)

    @property
    def agg(self) -> str:
        return self.bags[0].agg

    @property
    def label_max(self) -> float:
        """Upper end of the label range: 1 for binary, L for integer labels."""
        return 1.0 if self.label_kind == "binary" else float(self.L)

    @property
    def n_instances(self) -> int:
        return sum(len(b) for b in self.bags)

    @cached_property
    def bag_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.bags)}

    @cached_property
    def flat(self) -> FlatView:
        insts = [x for b in self.bags for x in b.instances]
        sizes = [len(b) for b in self.bags]
        X = np.stack([x.embedding for x in insts])
        X.flags.writeable = False
        nan = float("nan")
        return FlatView(
            X=X,
            offsets=np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
            instance_ids=tuple(x.id for x in insts),
            gold=np.array([nan if x.gold_label is None else x.gold_label for x in insts]),
            external_prior=np.array([nan if x.external_prior is None else x.external_prior for x in insts]),
            bag_labels=np.array([nan if b.label is None else b.label for b in self.bags]),
        )

    def with_preferences(self, pairs: Optional[Iterable[PreferencePair]]) -> "Dataset":
        return replace(self, preferences=None if pairs is None else tuple(pairs))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.d == other.d
            and self.label_kind == other.label_kind
            and self.L == other.L
            and self.bags == other.bags
            and self.preferences == other.preferences
        )

    __hash__ = None


def _check_label(value: float, label_kind: str, L: int, *, integral: bool, what: str) -> None:
    hi = 1 if label_kind == "binary" else L
    if not (math.isfinite(value) and 0 <= value <= hi):
        raise DatasetError(f"{what} {value} outside [0, {hi}]")
    if integral and value != int(value):
        raise DatasetError(f"{what} {value} is not in the label set {{0..{hi}}}")


def _check_dataset(ds: Dataset) -> None:
    if ds.d < 1:
        raise DatasetError(f"embedding dimension must be positive, got {ds.d}")
    if ds.label_kind not in LABEL_KINDS:
        raise DatasetError(f"unknown label_kind {ds.label_kind!r}")
    if ds.label_kind == "integer" and ds.L < 1:
        raise DatasetError(f"integer labels need L >= 1, got {ds.L}")
    if ds.label_kind == "binary" and ds.L != 1:
        raise DatasetError("binary datasets have L = 1")
    if not ds.bags:
        raise DatasetError("dataset has no bags")
    agg = ds.bags[0].agg
    seen_inst: set[str] = set()
    seen_bag: set[str] = set()
    for bag in ds.bags:
        if bag.id in seen_bag:
            raise DatasetError(f"duplicate bag id {bag.id!r}")
        seen_bag.add(bag.id)
        if bag.agg != agg:
            raise DatasetError(f"bag {bag.id!r} uses aggregation {bag.agg!r}, dataset uses {agg!r}")
        if bag.label is not None:
            # MIN/MAX of labels is itself a label; AVG may fall anywhere in the segment.
            _check_label(bag.label, ds.label_kind, ds.L, integral=False, what=f"bag {bag.id!r} label")
        if bag.context_embedding is not None and bag.context_embedding.shape != (ds.d,):
            raise DatasetError(
                f"bag {bag.id!r}: context embedding has dimension {bag.context_embedding.shape[0]}, expected {ds.d}"
            )
        for inst in bag.instances:
            if inst.id in seen_inst:
                raise DatasetError(f"duplicate instance id {inst.id!r} (bags must be disjoint)")
            seen_inst.add(inst.id)
            if inst.embedding.shape != (ds.d,):
                raise DatasetError(
                    f"instance {inst.id!r}: embedding has dimension {inst.embedding.shape[0]}, expected {ds.d}"
                )
            if inst.gold_label is not None:
                _check_label(inst.gold_label, ds.label_kind, ds.L, integral=True, what=f"instance {inst.id!r} gold_label")
    if ds.preferences is not None:
        for p in ds.preferences:
            for bid in (p.bag_a, p.bag_b):
                if bid not in seen_bag:
                    raise DatasetError(f"preference pair refers to unknown bag {bid!r}")


# ---------------------------------------------------------------------------
# file IO


def _opt_float(v, what: str) -> Optional[float]:
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DatasetError(f"{what} must be a number or null")
    return float(v)


def _parse_bag(rec: dict) -> Bag:
    if not isinstance(rec, dict):
        raise DatasetError("bag record must be an object")
    try:
        insts = [
            Instance(
                id=str(r["id"]),
                embedding=r["embedding"],
                gold_label=_opt_float(r.get("gold_label"), "gold_label"),
                external_prior=_opt_float(r.get("external_prior"), "external_prior"),
            )
            for r in rec["instances"]
        ]
        return Bag(
            id=str(rec["id"]),
            instances=tuple(insts),
            agg=str(rec["agg"]).lower(),
            label=_opt_float(rec.get("label"), "label"),
            context_embedding=rec.get("context_embedding"),
        )
    except KeyError as exc:
        raise DatasetError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(str(exc)) from None


def load_dataset(
    path: str | Path,
    label_kind: Optional[str] = None,
    preferences: str | Path | None = None,
) -> Dataset:
    """Read and validate a dataset file.

    If ``label_kind`` is given, the header must declare the same kind.
    Errors carry the offending line number.
    """
    path = Path(path)
    header = None
    bags = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if header is None:
                    if not isinstance(rec, dict) or "d" not in rec or "label_kind" not in rec:
                        raise DatasetError("first record must be the header {d, label_kind, L}")
                    header = rec
                    continue
                bag = _parse_bag(rec)
                d = int(header["d"])
                for inst in bag.instances:
                    if inst.embedding.shape != (d,):
                        raise DatasetError(
                            f"instance {inst.id!r}: embedding has dimension {inst.embedding.shape[0]}, expected {d}"
                        )
                bags.append(bag)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record: {exc.msg}") from None
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if header is None:
        raise DatasetError(f"{path}: missing header line")
    kind = header["label_kind"]
    if label_kind is not None and kind != label_kind:
        raise DatasetError(f"{path}: expected label_kind {label_kind!r}, file declares {kind!r}")
    L = header.get("L")
    L = 1 if L is None else int(L)
    pairs = load_preferences(preferences) if preferences is not None else None
    try:
        return Dataset(d=int(header["d"]), label_kind=kind, L=L, bags=tuple(bags), preferences=pairs)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def _vec(a: Optional[np.ndarray]):
    return None if a is None else [float(v) for v in a]


def dataset_lines(ds: Dataset) -> list[str]:
    header = {"d": ds.d, "label_kind": ds.label_kind, "L": ds.L if ds.label_kind == "integer" else None}
    lines = [json.dumps(header)]
    for bag in ds.bags:
        rec = {
            "id": bag.id,
            "agg": bag.agg,
            "label": bag.label,
            "context_embedding": _vec(bag.context_embedding),
            "instances": [
                {
                    "id": x.id,
                    "embedding": _vec(x.embedding),
                    "gold_label": x.gold_label,
                    "external_prior": x.external_prior,
                }
                for x in bag.instances
            ],
        }
        lines.append(json.dumps(rec))
    return lines


def write_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text("\n".join(dataset_lines(ds)) + "\n")


def load_preferences(path: str | Path) -> tuple[PreferencePair, ...]:
    pairs = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(PreferencePair(str(rec["bag_a"]), str(rec["bag_b"]), int(rec["label"])))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record: {exc.msg}") from None
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return tuple(pairs)


def write_preferences(pairs: Iterable[PreferencePair], path: str | Path) -> None:
    lines = [json.dumps({"bag_a": p.bag_a, "bag_b": p.bag_b, "label": p.label}) for p in pairs]
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# consistency


def exact_aggregate(labels: Sequence[float], agg: str) -> float:
    if agg == "min":
        return float(min(labels))
    if agg == "max":
        return float(max(labels))
    if agg == "avg":
        return float(math.fsum(labels) / len(labels))
    raise ValueError(f"unknown aggregation {agg!r}")


@dataclass(frozen=True)
class Violation:
    bag_id: str
    bag_label: Optional[float]
    aggregated: float


def validate_consistency(ds: Dataset, atol: float = 1e-9) -> list[Violation]:
    """List bags whose label differs from the aggregate of their gold labels."""
    out = []
    for bag in ds.bags:
        golds = [x.gold_label for x in bag.instances]
        if any(g is None for g in golds):
            missing = next(x.id for x in bag.instances if x.gold_label is None)
            raise DatasetError(f"instance {missing!r} has no gold label")
        value = exact_aggregate(golds, bag.agg)
        if bag.label is None or abs(value - bag.label) > atol:
            out.append(Violation(bag.id, bag.label, value))
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class PlantedRule:
    """The hidden linear rule behind a synthetic dataset: label = [w.x + b > 0]."""

    w: np.ndarray
    b: float
    cuts: Optional[np.ndarray] = field(default=None)  # bucket edges for integer labels

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.w + self.b

    def labels(self, X: np.ndarray) -> np.ndarray:
        z = self.logits(X)
        if self.cuts is None:
            return (z > 0).astype(np.float64)
        return np.searchsorted(self.cuts, z, side="right").astype(np.float64)


def generate_synthetic(
    seed: int,
    n_bags: int,
    bag_size_range: tuple[int, int],
    d: int,
    agg: str,
    label_kind: str = "binary",
    L: int = 1,
    noise: float = 0.0,
    prior_quality: float = 1.0,
    *,
    return_rule: bool = False,
):
    """Generate bags whose instance labels follow a planted linear rule.

    Embeddings are standard normal.  The offset of the rule is drawn so that
    MIN bags see mostly positive instances, MAX bags mostly negative ones and
    AVG bags a balanced mix; otherwise almost every bag label would be the
    same.  Labels are flipped (binary) or resampled to a different value
    (integer) with probability ``noise``.  Bags share a unit context
    embedding whose cosine with the rule direction is ``prior_quality``, and
    each instance an external prior equal to its (normalized) gold label
    shrunk toward 0.5 by ``1 - prior_quality``.
    """
    lo, hi = bag_size_range
    if n_bags < 1 or lo < 1 or hi < lo:
        raise ValueError(f"invalid bag counts/sizes: n_bags={n_bags}, range=({lo}, {hi})")
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if agg not in AGG_KINDS:
        raise ValueError(f"unknown aggregation {agg!r}")
    if label_kind not in LABEL_KINDS:
        raise ValueError(f"unknown label_kind {label_kind!r}")
    if label_kind == "binary":
        L = 1
    elif L < 1:
        raise ValueError(f"integer labels need L >= 1, got {L}")
    if not (0.0 <= noise <= 1.0 and 0.0 <= prior_quality <= 1.0):
        raise ValueError("noise and prior_quality must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    shift = rng.uniform(0.5, 1.0)
    b = {"min": shift, "max": -shift, "avg": shift - 0.75}[agg]
    sizes = rng.integers(lo, hi + 1, size=n_bags)
    X = rng.standard_normal((int(sizes.sum()), d))

    logits = X @ w + b
    cuts = None
    if label_kind == "integer":
        cuts = np.quantile(logits, np.arange(1, L + 1) / (L + 1))
    rule = PlantedRule(w=w, b=float(b), cuts=cuts)
    labels = rule.labels(X)

    flip = rng.random(len(labels)) < noise
    if label_kind == "binary":
        labels = np.where(flip, 1.0 - labels, labels)
    else:
        # shift by 1..L modulo L+1 gives a uniformly random different label
        offset = rng.integers(1, L + 1, size=len(labels))
        labels = np.where(flip, (labels + offset) % (L + 1), labels)

    priors = labels / L
    priors = priors + (0.5 - priors) * (1.0 - prior_quality)

    # one off-rule direction shared by every context, so the prior's bias
    # does not average out across bags
    bias = rng.standard_normal(d)
    bias -= (bias @ w) * w
    bias /= np.linalg.norm(bias)
    context = prior_quality * w + np.sqrt(1.0 - prior_quality**2) * bias

    bags = []
    pos = 0
    for i, k in enumerate(sizes):
        insts = tuple(
            Instance(
                id=f"b{i}s{j}",
                embedding=X[pos + j],
                gold_label=float(labels[pos + j]),
                external_prior=float(priors[pos + j]),
            )
            for j in range(k)
        )
        bag_label = exact_aggregate(labels[pos : pos + k].tolist(), agg)
        bags.append(Bag(id=f"b{i}", instances=insts, agg=agg, label=bag_label, context_embedding=context))
        pos += k
    ds = Dataset(d=d, label_kind=label_kind, L=L, bags=tuple(bags))
    return (ds, rule) if return_rule else ds


def generate_preferences(ds: Dataset, n_pairs: int, seed: int, *, skip_ties: bool = True) -> tuple[PreferencePair, ...]:
    """Sample bag pairs and label them from the bags' (gold) labels.

    With ``skip_ties`` pairs whose bag labels are equal are redrawn, mirroring
    side-by-side data where annotators state a strict preference.
    """
    labels = ds.flat.bag_labels
    if np.isnan(labels).any():
        raise DatasetError("preference generation needs every bag labeled")
    n = len(ds.bags)
    if n < 2:
        raise DatasetError("need at least two bags to form pairs")
    if skip_ties and np.all(labels == labels[0]):
        raise DatasetError("all bag labels are equal; no strict preference exists")
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        a, b = rng.choice(n, size=2, replace=False)
        if skip_ties and labels[a] == labels[b]:
            continue
        label = 1 if labels[a] > labels[b] else -1
        pairs.append(PreferencePair(ds.bags[a].id, ds.bags[b].id, label))
    return tuple(pairs)


def shuffle_preference_labels(pairs: Sequence[PreferencePair], seed: int) -> tuple[PreferencePair, ...]:
    """Permute labels across pairs; the label-shuffled control keeps the label marginals."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation([p.label for p in pairs])
    return tuple(PreferencePair(p.bag_a, p.bag_b, int(y)) for p, y in zip(pairs, labels))


def split_bags(ds: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Split into the first ``n_first`` bags and the rest (preferences dropped)."""
    return (
        replace(ds, bags=ds.bags[:n_first], preferences=None),
        replace(ds, bags=ds.bags[n_first:], preferences=None),
    )
