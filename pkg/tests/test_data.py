import json

import numpy as np
import pytest

from disagg.data import (
    Bag,
    Dataset,
    DatasetError,
    Instance,
    PreferencePair,
    generate_preferences,
    generate_synthetic,
    load_dataset,
    load_preferences,
    shuffle_preference_labels,
    validate_consistency,
    write_dataset,
    write_preferences,
)


def _write_lines(path, header, bags):
    path.write_text("\n".join(json.dumps(r) for r in [header, *bags]) + "\n")


def _inst(id_, emb, gold=None, prior=None):
    return {"id": id_, "embedding": emb, "gold_label": gold, "external_prior": prior}


@pytest.fixture
def two_bag_file(tmp_path):
    path = tmp_path / "ds.jsonl"
    _write_lines(
        path,
        {"d": 4, "label_kind": "binary", "L": None},
        [
            {"id": "r1", "agg": "min", "label": 0, "context_embedding": [1, 0, 0, 0],
             "instances": [_inst("s1", [1, 2, 3, 4], 1, 0.9), _inst("s2", [0, 1, 0, 1], 0, 0.2)]},
            {"id": "r2", "agg": "min", "label": 1, "context_embedding": None,
             "instances": [_inst("s3", [1, 1, 1, 1], 1, None)]},
        ],
    )
    return path


class TestLoad:
    def test_two_bags(self, two_bag_file):
        ds = load_dataset(two_bag_file, "binary")
        assert len(ds.bags) == 2
        assert ds.d == 4
        assert ds.agg == "min"
        assert [x.id for x in ds.bags[0].instances] == ["s1", "s2"]
        assert ds.bags[0].instances[0].external_prior == 0.9
        assert ds.bags[1].context_embedding is None
        np.testing.assert_array_equal(ds.bags[0].context_embedding, [1, 0, 0, 0])

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        _write_lines(path, {"d": 4, "label_kind": "binary", "L": None},
                     [{"id": "r1", "agg": "max", "label": 1, "instances": [_inst("s1", [1, 2, 3], 1)]}])
        with pytest.raises(DatasetError, match=r"bad.jsonl:2:.*dimension 3, expected 4"):
            load_dataset(path)

    def test_duplicate_instance_across_bags(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        _write_lines(path, {"d": 2, "label_kind": "binary", "L": None}, [
            {"id": "r1", "agg": "max", "label": 1, "instances": [_inst("s1", [1, 2], 1)]},
            {"id": "r2", "agg": "max", "label": 1, "instances": [_inst("s1", [3, 4], 1)]},
        ])
        with pytest.raises(DatasetError, match="duplicate instance id 's1'"):
            load_dataset(path)

    def test_bag_label_out_of_range(self, tmp_path):
        path = tmp_path / "lab.jsonl"
        _write_lines(path, {"d": 2, "label_kind": "binary", "L": None},
                     [{"id": "r1", "agg": "max", "label": 2, "instances": [_inst("s1", [1, 2])]}])
        with pytest.raises(DatasetError, match="outside"):
            load_dataset(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"d": 2, "label_kind": "binary", "L": null}\n{"id": "r1", "agg": \n')
        with pytest.raises(DatasetError, match=r"broken.jsonl:2: malformed"):
            load_dataset(path)

    def test_empty_bag_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        _write_lines(path, {"d": 2, "label_kind": "binary", "L": None},
                     [{"id": "r1", "agg": "max", "label": 0, "instances": []}])
        with pytest.raises(DatasetError, match="empty"):
            load_dataset(path)

    def test_schema_kind_mismatch(self, two_bag_file):
        with pytest.raises(DatasetError, match="expected label_kind 'integer'"):
            load_dataset(two_bag_file, "integer")

    def test_integer_gold_must_be_in_label_set(self, tmp_path):
        path = tmp_path / "int.jsonl"
        _write_lines(path, {"d": 2, "label_kind": "integer", "L": 4},
                     [{"id": "r1", "agg": "max", "label": 4, "instances": [_inst("s1", [1, 2], 2.5)]}])
        with pytest.raises(DatasetError, match="not in the label set"):
            load_dataset(path)

    def test_mixed_aggregations_rejected(self, tmp_path):
        path = tmp_path / "mixed.jsonl"
        _write_lines(path, {"d": 2, "label_kind": "binary", "L": None}, [
            {"id": "r1", "agg": "max", "label": 1, "instances": [_inst("s1", [1, 2])]},
            {"id": "r2", "agg": "min", "label": 1, "instances": [_inst("s2", [1, 2])]},
        ])
        with pytest.raises(DatasetError, match="aggregation"):
            load_dataset(path)


class TestRoundTrip:
    @pytest.mark.parametrize("label_kind,L,agg", [("binary", 1, "min"), ("binary", 1, "avg"), ("integer", 4, "max")])
    def test_write_then_load(self, tmp_path, label_kind, L, agg):
        ds = generate_synthetic(3, 20, (1, 5), 6, agg, label_kind=label_kind, L=L, noise=0.2, prior_quality=0.7)
        write_dataset(ds, tmp_path / "ds.jsonl")
        again = load_dataset(tmp_path / "ds.jsonl", label_kind)
        assert again == ds

    def test_preferences_round_trip(self, tmp_path):
        ds = generate_synthetic(1, 30, (2, 4), 4, "avg")
        pairs = generate_preferences(ds, 25, seed=2)
        write_dataset(ds, tmp_path / "ds.jsonl")
        write_preferences(pairs, tmp_path / "pairs.jsonl")
        assert load_preferences(tmp_path / "pairs.jsonl") == pairs
        again = load_dataset(tmp_path / "ds.jsonl", preferences=tmp_path / "pairs.jsonl")
        assert again == ds.with_preferences(pairs)

    def test_preference_to_unknown_bag(self, tmp_path):
        ds = generate_synthetic(1, 3, (1, 2), 4, "avg")
        write_dataset(ds, tmp_path / "ds.jsonl")
        write_preferences([PreferencePair("b0", "nope", 1)], tmp_path / "pairs.jsonl")
        with pytest.raises(DatasetError, match="unknown bag 'nope'"):
            load_dataset(tmp_path / "ds.jsonl", preferences=tmp_path / "pairs.jsonl")


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        a = generate_synthetic(7, 50, (1, 6), 8, "min", noise=0.1, prior_quality=0.5)
        b = generate_synthetic(7, 50, (1, 6), 8, "min", noise=0.1, prior_quality=0.5)
        write_dataset(a, tmp_path / "a.jsonl")
        write_dataset(b, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_seeds_differ(self):
        a = generate_synthetic(7, 5, (1, 3), 4, "min")
        b = generate_synthetic(8, 5, (1, 3), 4, "min")
        assert a != b

    def test_min_bag_label(self):
        ds = generate_synthetic(0, 200, (1, 6), 8, "min", noise=0.3)
        for bag in ds.bags:
            assert bag.label == min(x.gold_label for x in bag.instances)
        # some bag of golds like [1, 1, 0] exists and is labeled 0
        assert any(bag.label == 0 and sum(x.gold_label for x in bag.instances) > 0 for bag in ds.bags)

    def test_noise_free_perfect_prior(self):
        ds = generate_synthetic(2, 40, (1, 5), 6, "max", noise=0.0, prior_quality=1.0)
        for bag in ds.bags:
            for x in bag.instances:
                assert x.external_prior == x.gold_label

    def test_integer_prior_normalized(self):
        ds = generate_synthetic(2, 40, (1, 5), 6, "max", label_kind="integer", L=4, noise=0.0, prior_quality=1.0)
        for x in (x for b in ds.bags for x in b.instances):
            assert x.external_prior == x.gold_label / 4

    def test_noise_free_labels_follow_rule(self):
        ds, rule = generate_synthetic(5, 100, (1, 8), 10, "min", noise=0.0, return_rule=True)
        np.testing.assert_array_equal(rule.labels(ds.flat.X), ds.flat.gold)
        # separable by the planted hyperplane
        z = rule.logits(ds.flat.X)
        assert z[ds.flat.gold == 1].min() > 0 > z[ds.flat.gold == 0].max()

    def test_integer_buckets_roughly_equal_mass(self):
        ds = generate_synthetic(4, 400, (3, 6), 8, "max", label_kind="integer", L=4)
        counts = np.bincount(ds.flat.gold.astype(int), minlength=5)
        assert counts.min() > 0.15 * counts.sum()

    def test_context_cosine_equals_prior_quality(self):
        ds, rule = generate_synthetic(9, 10, (1, 3), 16, "min", prior_quality=0.6, return_rule=True)
        for bag in ds.bags:
            U = bag.context_embedding
            assert np.dot(U, rule.w) / np.linalg.norm(U) == pytest.approx(0.6, abs=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_bags=0), dict(bag_size_range=(0, 3)), dict(bag_size_range=(4, 3)), dict(d=1), dict(noise=1.5)],
    )
    def test_invalid_ranges(self, kwargs):
        args = dict(seed=0, n_bags=5, bag_size_range=(1, 3), d=4, agg="min")
        args.update(kwargs)
        with pytest.raises(ValueError):
            generate_synthetic(**args)


class TestConsistency:
    def _bag(self, golds, agg, label):
        insts = tuple(Instance(f"x{i}", np.zeros(2) + i, gold_label=g) for i, g in enumerate(golds))
        return Bag("b", insts, agg, label)

    def test_synthetic_is_consistent(self):
        for agg in ("min", "max", "avg"):
            assert validate_consistency(generate_synthetic(1, 60, (1, 7), 5, agg, noise=0.2)) == []

    def test_max_violation(self):
        ds = Dataset(d=2, label_kind="binary", bags=(self._bag([0, 0], "max", 1),))
        report = validate_consistency(ds)
        assert len(report) == 1 and report[0].aggregated == 0

    def test_integer_max_ok(self):
        ds = Dataset(d=2, label_kind="integer", L=4, bags=(self._bag([2, 4], "max", 4),))
        assert validate_consistency(ds) == []

    def test_missing_gold(self):
        ds = Dataset(d=2, label_kind="binary", bags=(self._bag([1, None], "min", 1),))
        with pytest.raises(DatasetError, match="no gold label"):
            validate_consistency(ds)


class TestPreferences:
    def test_labels_follow_bag_labels(self):
        ds = generate_synthetic(3, 40, (2, 6), 4, "avg")
        labels = {b.id: b.label for b in ds.bags}
        for p in generate_preferences(ds, 100, seed=1):
            assert labels[p.bag_a] != labels[p.bag_b]
            assert p.label == (1 if labels[p.bag_a] > labels[p.bag_b] else -1)

    def test_ties_kept_when_asked(self):
        ds = generate_synthetic(3, 40, (1, 1), 4, "avg")
        pairs = generate_preferences(ds, 200, seed=1, skip_ties=False)
        labels = {b.id: b.label for b in ds.bags}
        tied = [p for p in pairs if labels[p.bag_a] == labels[p.bag_b]]
        assert tied and all(p.label == -1 for p in tied)

    def test_shuffle_keeps_marginals(self):
        ds = generate_synthetic(3, 40, (2, 6), 4, "avg")
        pairs = generate_preferences(ds, 100, seed=1)
        shuffled = shuffle_preference_labels(pairs, seed=5)
        assert sorted(p.label for p in shuffled) == sorted(p.label for p in pairs)
        assert [(p.bag_a, p.bag_b) for p in shuffled] == [(p.bag_a, p.bag_b) for p in pairs]

    def test_self_pair_rejected(self):
        with pytest.raises(DatasetError):
            PreferencePair("a", "a", 1)
