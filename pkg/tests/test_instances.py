"""Distractor sampling, instance ladders, storage and splits."""

from collections import Counter

import pytest

from hierkd.core.errors import InstanceError, TaxonomyError
from hierkd.core.models import LETTERS, SamplerPolicy
from hierkd.processing.instances import (
    DistractorSampler,
    build_instance,
    generate_instances,
    load_instances,
    sample_distractors,
    save_instances,
    split_manifest,
)
from hierkd.taxonomy.synthetic import synthetic_taxonomy

pytestmark = pytest.mark.unit

# chi-square critical value, 3 degrees of freedom, p = 0.01
CHI2_CRITICAL_DF3 = 11.345


class TestSampleDistractors:
    def test_sibling_first(self, bird_fish_tree):
        assert sample_distractors(bird_fish_tree, "sparrow", 1, SamplerPolicy.SIBLING, rng_seed=0) == ["crow"]

    def test_sibling_falls_back_to_cousins(self, bird_fish_tree):
        assert sample_distractors(bird_fish_tree, "sparrow", 3, "sibling", rng_seed=0) == ["crow", "carp"]

    def test_cousin_takes_same_position_under_nearest_parent(self):
        tree = synthetic_taxonomy([2, 2, 2])
        assert sample_distractors(tree, "n4_0", 1, SamplerPolicy.COUSIN, rng_seed=3) == ["order-2"]
        assert sample_distractors(tree, "n4_0", 1, SamplerPolicy.SIBLING, rng_seed=3) == ["order-1"]

    def test_uniform_depends_on_seed(self):
        tree = synthetic_taxonomy([100])
        first = sample_distractors(tree, "n2_0", 3, SamplerPolicy.UNIFORM, rng_seed=1)
        second = sample_distractors(tree, "n2_0", 3, SamplerPolicy.UNIFORM, rng_seed=2)
        assert first != second
        for picks in (first, second):
            assert len(set(picks)) == 3
            assert "phylum-00" not in picks

    def test_deterministic(self, toy_tree):
        picks = [sample_distractors(toy_tree, "passer_domesticus", 3, "uniform", rng_seed=11) for _ in range(3)]
        assert picks[0] == picks[1] == picks[2]

    def test_weighted_follows_confusion_row(self, bird_fish_tree):
        sampler = DistractorSampler(policy=SamplerPolicy.WEIGHTED, weights={"sparrow": {"carp": 1.0, "crow": 0.0}})
        assert sample_distractors(bird_fish_tree, "sparrow", 3, sampler, rng_seed=5) == ["carp"]

    def test_weighted_without_row_raises(self, bird_fish_tree):
        sampler = DistractorSampler(policy=SamplerPolicy.WEIGHTED, weights={"crow": {"carp": 1.0}})
        with pytest.raises(InstanceError, match="no confusion weights"):
            sample_distractors(bird_fish_tree, "sparrow", 1, sampler, rng_seed=0)

    def test_k_must_be_positive(self, bird_fish_tree):
        with pytest.raises(InstanceError):
            sample_distractors(bird_fish_tree, "sparrow", 0, "uniform", rng_seed=0)

    def test_singleton_level_has_no_distractors(self, bird_fish_tree):
        with pytest.raises(InstanceError, match="no non-gold labels"):
            sample_distractors(bird_fish_tree, "animal", 3, "uniform", rng_seed=0)

    def test_replay_returns_stored_set(self, bird_fish_tree):
        sampler = DistractorSampler(policy="replay", choice_sets={"img-1|3": ["carp", "sparrow", "crow"]})
        assert sample_distractors(bird_fish_tree, "sparrow", 3, sampler, rng_seed=0, image_ref="img-1") == ["carp", "crow"]

    def test_replay_miss(self, bird_fish_tree):
        sampler = DistractorSampler(policy="replay", choice_sets={})
        with pytest.raises(InstanceError, match="no released choice set"):
            sample_distractors(bird_fish_tree, "sparrow", 3, sampler, rng_seed=0, image_ref="img-1")


class TestBuildInstance:
    def test_ladder_shape(self, bird_fish_tree):
        instance = build_instance(bird_fish_tree, "crow", image_ref="img", sampler="uniform", rng_seed=1)
        assert instance.levels_asked == [1, 2, 3]
        assert [len(q.options) for q in instance.per_level] == [1, 2, 3]
        assert instance.gold_labels == ["animal", "bird", "crow"]
        assert instance.per_level[0].gold_letter == "A"

    def test_skip_singleton_levels(self, toy_tree):
        instance = build_instance(toy_tree, "pica_pica", "img", "sibling", rng_seed=2, skip_singleton_levels=True)
        assert instance.levels_asked == [2, 3, 4]
        assert [q.level_name for q in instance.per_level] == ["class", "order", "species"]
        assert [q.level_index for q in instance.per_level] == [1, 2, 3]
        assert instance.gold_labels == ["Aves", "Passeriformes", "Pica pica"]

    def test_sibling_ladder_stays_close(self, toy_tree):
        instance = build_instance(toy_tree, "pica_pica", "img", "sibling", rng_seed=2, skip_singleton_levels=True)
        species = instance.per_level[-1]
        assert set(species.options) == {"Corvus corax", "Pica pica", "Passer domesticus", "Turdus merula"}

    def test_replay_keeps_stored_order(self, bird_fish_tree):
        sampler = DistractorSampler(
            policy=SamplerPolicy.REPLAY,
            choice_sets={"img|2": ["fish", "bird"], "img|3": ["carp", "sparrow", "crow"]},
        )
        instance = build_instance(bird_fish_tree, "sparrow", "img", sampler, rng_seed=0, skip_singleton_levels=True)
        assert [q.options for q in instance.per_level] == [["fish", "bird"], ["carp", "sparrow", "crow"]]
        assert instance.gold_letters == ["B", "B"]

    def test_unknown_leaf(self, bird_fish_tree):
        with pytest.raises(TaxonomyError, match="unknown"):
            build_instance(bird_fish_tree, "whale", "img", "uniform", rng_seed=0)


class TestGoldLetterBalance:
    def test_frequency_per_letter(self, six_level_instances):
        counts = Counter(letter for inst in six_level_instances for letter in inst.gold_letters)
        total = sum(counts.values())
        for letter in LETTERS:
            assert 0.2 <= counts[letter] / total <= 0.3

    @pytest.mark.slow
    def test_chi_square(self, six_level_tree):
        instances = generate_instances(six_level_tree, 2000, SamplerPolicy.UNIFORM, seed=99, skip_singleton_levels=True)
        counts = Counter(letter for inst in instances for letter in inst.gold_letters)
        total = sum(counts.values())
        assert total >= 10_000
        expected = total / len(LETTERS)
        chi2 = sum((counts[letter] - expected) ** 2 / expected for letter in LETTERS)
        assert chi2 < CHI2_CRITICAL_DF3


class TestGenerateInstances:
    def test_deterministic(self, toy_tree):
        first = generate_instances(toy_tree, 20, "sibling", seed=4)
        second = generate_instances(toy_tree, 20, "sibling", seed=4)
        assert first == second
        assert len({inst.instance_id for inst in first}) == 20

    def test_seed_changes_output(self, toy_tree):
        assert generate_instances(toy_tree, 20, "uniform", seed=4) != generate_instances(toy_tree, 20, "uniform", seed=5)

    def test_n_must_be_positive(self, toy_tree):
        with pytest.raises(InstanceError):
            generate_instances(toy_tree, 0, "uniform", seed=0)


class TestStorage:
    def test_round_trip(self, toy_tree, tmp_path):
        instances = generate_instances(toy_tree, 15, "cousin", seed=1, skip_singleton_levels=True)
        path = tmp_path / "instances.jsonl"
        assert save_instances(path, instances, header={"taxonomy": toy_tree.name}) == 15
        header, loaded = load_instances(path)
        assert header == {"taxonomy": "toy-animals"}
        assert loaded == instances

    def test_invalid_record_names_the_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"header": {}}\n{"instance_id": "x"}\n', encoding="utf-8")
        with pytest.raises(InstanceError, match=":2:"):
            load_instances(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InstanceError, match="cannot read"):
            load_instances(tmp_path / "absent.jsonl")


class TestSplitManifest:
    @pytest.mark.parametrize("n, sizes", [(100, (60, 20, 20)), (10, (6, 2, 2)), (7, (5, 1, 1))])
    def test_sizes(self, n, sizes):
        ids = [f"id-{i:03d}" for i in range(n)]
        manifest = split_manifest(ids)
        assert (len(manifest["train"]), len(manifest["val"]), len(manifest["test"])) == sizes

    def test_disjoint_and_complete(self):
        ids = [f"id-{i:03d}" for i in range(53)]
        manifest = split_manifest(ids, ratio=(7, 2, 1), seed=3)
        parts = [set(manifest[name]) for name in ("train", "val", "test")]
        assert set().union(*parts) == set(ids)
        assert sum(len(p) for p in parts) == len(ids)

    def test_deterministic(self):
        ids = [str(i) for i in range(40)]
        assert split_manifest(ids, seed=1) == split_manifest(ids, seed=1)
        assert split_manifest(ids, seed=1) != split_manifest(ids, seed=2)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InstanceError, match="unique"):
            split_manifest(["a", "a", "b"])

    def test_bad_ratio(self):
        with pytest.raises(InstanceError):
            split_manifest(["a", "b"], ratio=(0, 0, 0))
