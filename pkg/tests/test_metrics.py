"""Path-consistency metrics against brute-force definitions and worked examples."""

import itertools

import numpy as np
import pytest

from hierkd.core.errors import MetricError
from hierkd.core.models import FAIL, PredictionRecord, Protocol
from hierkd.processing.metrics import (
    aggregate_reports,
    build_report,
    compute_conditional,
    compute_forgetting,
    compute_hca,
    compute_leaf_acc,
    compute_per_level_accuracy,
    compute_por,
    compute_spor,
    compute_tor,
    depthwise_frame,
    longest_correct_run,
    report_to_frame,
    singleton_positions,
    summary_row,
)

pytestmark = pytest.mark.unit

ORACLE_TOL = 1e-12


# brute-force definitions, written independently of the implementation
def _hca(masks):
    return np.mean([1.0 if all(m) else 0.0 for m in masks])


def _por(masks):
    return np.mean([np.mean(m) for m in masks])


def _spor(masks):
    out = []
    for m in masks:
        best = 0
        for i in range(len(m)):
            j = i
            while j < len(m) and m[j]:
                j += 1
            best = max(best, j - i)
        out.append(best / len(m))
    return np.mean(out)


def _tor(masks):
    values = [np.mean([m[i] and m[i + 1] for i in range(len(m) - 1)]) for m in masks if len(m) >= 2]
    return np.mean(values)


def _leaf_acc(masks):
    return np.mean([1.0 if m[-1] else 0.0 for m in masks])


def _conditional(masks, level):
    deep = np.array([m[: level + 1] for m in masks if len(m) >= level + 1], dtype=bool).reshape(-1, level + 1)
    parent, child = deep[:, level - 1], deep[:, level]
    given_correct = child[parent].mean() if parent.any() else None
    given_error = child[~parent].mean() if (~parent).any() else None
    return given_correct, given_error


def _close(value, expected):
    assert abs(value - expected) <= ORACLE_TOL, (value, expected)


def _record(instance_id, mask, levels_asked):
    letters = ["A"] * len(mask)
    return PredictionRecord(
        instance_id=instance_id,
        protocol=Protocol.JOINT,
        predicted_letters=letters,
        predicted_labels=letters,
        correct_mask=mask,
        levels_asked=levels_asked,
    )


def _random_masks(rng, n, max_len=12):
    return [list(rng.random(int(rng.integers(1, max_len + 1))) < rng.uniform(0.2, 0.95)) for _ in range(n)]


class TestWorkedExamples:
    def test_single_broken_level(self):
        mask = [True, True, False, True, True, True]
        assert compute_hca([mask]) == 0.0
        assert compute_por([mask]) == pytest.approx(5 / 6)
        assert compute_spor([mask]) == pytest.approx(1 / 2)
        assert compute_spor([mask], prefix=True) == pytest.approx(2 / 6)
        assert compute_tor([mask]) == pytest.approx(3 / 5)
        assert compute_leaf_acc([mask]) == 1.0

    def test_all_correct_and_all_wrong(self):
        masks = [[True] * 4, [False] * 4]
        assert compute_hca(masks) == 0.5
        assert compute_por(masks) == compute_spor(masks) == compute_tor(masks) == 0.5

    def test_records_and_masks_agree(self):
        record = PredictionRecord(
            instance_id="r1",
            protocol=Protocol.CONDITIONED,
            predicted_letters=["B", FAIL, "C"],
            predicted_labels=["Aves", FAIL, "Passer domesticus"],
            correct_mask=[True, False, True],
        )
        assert compute_por([record]) == compute_por([[True, False, True]])
        assert compute_tor([record]) == 0.0

    def test_conditional(self):
        masks = [[True, True], [True, False], [True, True], [False, False], [False, True], [True, True, False]]
        cond = compute_conditional(masks, 1)
        assert cond.acc_given_correct == pytest.approx(3 / 4)
        assert cond.acc_given_error == pytest.approx(1 / 2)
        assert cond.delta == pytest.approx(1 / 4)
        assert (cond.n_correct, cond.n_error) == (4, 2)

    def test_conditional_only_counts_deep_samples(self):
        cond = compute_conditional([[True, False, True], [True, True]], 2)
        assert cond.n_correct == 0
        assert cond.n_error == 1
        assert cond.acc_given_correct is None
        assert cond.delta is None

    def test_forgetting(self):
        report = compute_forgetting(0.8454, 0.8411)
        assert round(report.delta_pp, 2) == -0.43
        assert round(report.rel_forget_pct, 2) == 0.51
        assert report.ratio == pytest.approx(0.8411 / 0.8454)

    def test_forgetting_rejects_zero_base(self):
        with pytest.raises(MetricError):
            compute_forgetting(0.0, 0.5)


class TestEdgeCases:
    def test_empty_input(self):
        with pytest.raises(MetricError, match="no records"):
            compute_hca([])

    def test_empty_mask(self):
        with pytest.raises(MetricError):
            compute_por([[True], []])

    def test_tor_needs_two_levels(self):
        with pytest.raises(MetricError, match="two or more"):
            compute_tor([[True], [False]])

    def test_report_without_tor(self):
        report = build_report([[True], [False]])
        assert report.tor is None
        assert report.excluded_counts["tor"] == 2

    def test_ragged_per_level_accuracy(self):
        assert compute_per_level_accuracy([[True], [False, True], [True, True, False]]) == [
            pytest.approx(2 / 3),
            1.0,
            0.0,
        ]


class TestAgainstBruteForce:
    def test_random_mask_sets(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            masks = _random_masks(rng, int(rng.integers(1, 30)))
            _close(compute_hca(masks), _hca(masks))
            _close(compute_leaf_acc(masks), _leaf_acc(masks))
            _close(compute_por(masks), _por(masks))
            _close(compute_spor(masks), _spor(masks))
            if any(len(m) >= 2 for m in masks):
                _close(compute_tor(masks), _tor(masks))

    def test_conditional_random_masks(self):
        rng = np.random.default_rng(23)
        for _ in range(500):
            masks = _random_masks(rng, int(rng.integers(1, 40)), max_len=6)
            for level in range(1, max(len(m) for m in masks)):
                cond = compute_conditional(masks, level)
                given_correct, given_error = _conditional(masks, level)
                for value, expected in ((cond.acc_given_correct, given_correct), (cond.acc_given_error, given_error)):
                    if expected is None:
                        assert value is None
                    else:
                        _close(value, expected)

    def test_record_order_does_not_matter(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            masks = _random_masks(rng, 25)
            shuffled = [masks[i] for i in rng.permutation(len(masks))]
            first, second = build_report(masks), build_report(shuffled)
            for name in ("hca", "leaf_acc", "por", "s_por", "tor"):
                a, b = getattr(first, name), getattr(second, name)
                assert (a is None) == (b is None)
                if a is not None:
                    _close(a, b)
            for a, b in zip(first.per_level_acc, second.per_level_acc):
                _close(a, b)
            for a, b in zip(first.conditional, second.conditional):
                assert (a.n_correct, a.n_error) == (b.n_correct, b.n_error)
                if a.acc_given_correct is not None:
                    _close(a.acc_given_correct, b.acc_given_correct)
                if a.acc_given_error is not None:
                    _close(a.acc_given_error, b.acc_given_error)

    @pytest.mark.parametrize("length", range(1, 13))
    def test_longest_run_exhaustive(self, length):
        for bits in itertools.product([False, True], repeat=length):
            blocks = [len(list(group)) for correct, group in itertools.groupby(bits) if correct]
            assert longest_correct_run(bits) == max(blocks, default=0)
            _close(compute_spor([bits]), max(blocks, default=0) / length)

    def test_ordering_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            masks = _random_masks(rng, 20)
            hca, spor, por = compute_hca(masks), compute_spor(masks), compute_por(masks)
            assert hca <= spor + 1e-12 <= por + 2e-12
            assert hca <= compute_leaf_acc(masks) + 1e-12

    def test_tor_never_exceeds_por(self):
        rng = np.random.default_rng(31)
        for _ in range(500):
            masks = [m for m in _random_masks(rng, 20) if len(m) >= 2]
            if not masks:
                continue
            assert compute_tor(masks) <= compute_por(masks) + 1e-12
            for m in masks:
                assert compute_tor([m]) <= compute_por([m]) + 1e-12

    def test_hca_never_exceeds_any_level(self):
        rng = np.random.default_rng(37)
        for _ in range(500):
            depth = int(rng.integers(1, 9))
            masks = [list(rng.random(depth) < rng.uniform(0.3, 0.95)) for _ in range(int(rng.integers(1, 30)))]
            assert compute_hca(masks) <= min(compute_per_level_accuracy(masks)) + 1e-12
            ragged = _random_masks(rng, 20)
            assert compute_hca(ragged) <= compute_per_level_accuracy(ragged)[0] + 1e-12


class TestReport:
    def test_depthwise_drops_singleton_levels(self):
        masks = [[True, True, False], [True, False, False], [True, True, True]]
        report = build_report(masks, singleton_levels=[1])
        assert [row.level for row in report.depthwise] == [2, 3]
        assert report.per_level_acc[0] == 1.0
        assert report.excluded_counts["depthwise_singleton_levels"] == 1

        kept = build_report(masks, singleton_levels=[1], exclude_singletons=False)
        assert [row.level for row in kept.depthwise] == [1, 2, 3]
        assert kept.depthwise[0].singleton

    def test_singleton_positions_follow_levels_asked(self):
        skipped = [_record("a", [True, False], [2, 3]), _record("b", [True, True], [2, 3])]
        assert singleton_positions(skipped, [1]) == []
        assert singleton_positions([_record("c", [True, True, False], [1, 2, 3])], [1]) == [1]
        report = build_report(skipped, singleton_levels=singleton_positions(skipped, [1]))
        assert [row.level for row in report.depthwise] == [1, 2]

    def test_singleton_positions_without_levels_asked(self):
        assert singleton_positions([_record("d", [True, False], [])], [1]) == [1]

    def test_depthwise_carries_conditionals(self):
        report = build_report([[True, True], [True, False], [False, False]])
        frame = depthwise_frame(report)
        assert list(frame.columns) == ["level", "acc", "acc|correct", "acc|error", "delta"]
        assert frame.loc[1, "acc|correct"] == pytest.approx(0.5)
        assert frame.loc[1, "acc|error"] == 0.0

    def test_prefix_variant_is_named(self):
        assert build_report([[True, False, True]], prefix_spor=True).spor_variant == "prefix"

    def test_report_frame(self):
        frame = report_to_frame(build_report([[True, True], [False]]))
        assert list(frame["metric"]) == ["hca", "leaf_acc", "por", "s_por", "tor"]
        assert frame.set_index("metric").loc["tor", "n"] == 1

    def test_summary_row(self):
        row = summary_row(build_report([[True, True]]))
        assert row == {"hca": 1.0, "leaf_acc": 1.0, "por": 1.0, "s_por": 1.0, "tor": 1.0}


class TestAggregate:
    def test_mean_and_population_std(self):
        first = build_report([[True, True], [False, False], [False, True], [False, True], [False, True]])
        second = build_report([[True, True], [True, True], [False, False], [False, True], [False, True]])
        assert (first.hca, second.hca) == pytest.approx((0.2, 0.4))
        frame = aggregate_reports([first, second]).set_index("metric")
        assert frame.loc["hca", "mean"] == pytest.approx(0.3)
        assert frame.loc["hca", "std"] == pytest.approx(0.1)
        assert frame.loc["hca", "runs"] == 2

    def test_nothing_to_aggregate(self):
        with pytest.raises(MetricError):
            aggregate_reports([])
