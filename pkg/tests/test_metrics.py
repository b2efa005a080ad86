import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from realm import metrics
from realm.metrics import MetricError, auprc, auroc, bce_loss, bootstrap_metrics, f1, min_p_se

from oracles import (
    auprc_threshold_enum,
    auroc_pairwise,
    bce_by_loop,
    f1_by_counts,
    min_p_se_sweep,
)

TOL = 1e-6


def random_case(rng, n=30, ties=False):
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.random(n)
    if ties:
        scores = np.round(scores, 1)
    return scores, labels


class TestBce:
    def test_half_probability(self):
        npt.assert_allclose(bce_loss([0.5], [1]), np.log(2.0), atol=TOL)

    def test_confident_correct_is_near_zero(self):
        assert bce_loss([1.0, 0.0], [1, 0]) < 1e-6

    def test_hand_case(self):
        # -0.5 * (ln 0.9 + ln 0.9) = -ln 0.9
        npt.assert_allclose(bce_loss([0.9, 0.1], [1, 0]), 0.10536051565782628, atol=TOL)

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            bce_loss([0.5, 0.5], [1])

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            p = rng.random(17)
            y = rng.integers(0, 2, size=17)
            npt.assert_allclose(bce_loss(p, y), bce_by_loop(p, y), atol=TOL)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_hand_case(self):
        npt.assert_allclose(auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75, atol=TOL)

    def test_all_ties(self):
        npt.assert_allclose(auroc([0.3, 0.3, 0.3, 0.3], [0, 1, 0, 1]), 0.5, atol=TOL)

    def test_single_class_errors(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(12))
    def test_against_pairwise_oracle(self, seed):
        scores, labels = random_case(np.random.default_rng(seed), ties=seed % 2 == 0)
        npt.assert_allclose(auroc(scores, labels), auroc_pairwise(scores, labels), atol=TOL)


class TestAuprc:
    def test_perfect_ranking(self):
        npt.assert_allclose(auprc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]), 1.0, atol=TOL)

    def test_positive_ranked_last(self):
        npt.assert_allclose(auprc([0.2, 0.9], [1, 0]), 0.5, atol=TOL)

    def test_single_positive_first(self):
        npt.assert_allclose(auprc([0.9, 0.1, 0.2, 0.3], [1, 0, 0, 0]), 1.0, atol=TOL)

    def test_no_positives_errors(self):
        with pytest.raises(MetricError):
            auprc([0.1, 0.2], [0, 0])

    @pytest.mark.parametrize("seed", range(12))
    def test_against_threshold_oracle(self, seed):
        scores, labels = random_case(np.random.default_rng(100 + seed), ties=seed % 2 == 0)
        npt.assert_allclose(auprc(scores, labels), auprc_threshold_enum(scores, labels), atol=TOL)


class TestMinPSe:
    def test_perfect_separation(self):
        npt.assert_allclose(min_p_se([0.9, 0.8, 0.1], [1, 1, 0]), 1.0, atol=TOL)

    def test_hand_case(self):
        # threshold 0.4: precision 1/2, sensitivity 1
        npt.assert_allclose(min_p_se([0.4, 0.6], [1, 0]), 0.5, atol=TOL)

    def test_all_equal_balanced(self):
        npt.assert_allclose(min_p_se([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]), 0.5, atol=TOL)

    def test_single_class_errors(self):
        with pytest.raises(MetricError):
            min_p_se([0.1, 0.2], [0, 0])

    @pytest.mark.parametrize("seed", range(12))
    def test_against_sweep_oracle(self, seed):
        scores, labels = random_case(np.random.default_rng(200 + seed), ties=seed % 2 == 0)
        npt.assert_allclose(min_p_se(scores, labels), min_p_se_sweep(scores, labels), atol=TOL)


class TestF1:
    def test_exact_predictions(self):
        assert f1([1.0, 1.0, 0.0], [1, 1, 0]) == 1.0

    def test_hand_case(self):
        npt.assert_allclose(f1([1.0, 0.0, 0.0], [1, 1, 0]), 2 / 3, atol=TOL)

    def test_no_predicted_positives(self):
        assert f1([0.1, 0.2], [1, 1]) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_against_count_oracle(self, seed):
        scores, labels = random_case(np.random.default_rng(300 + seed))
        npt.assert_allclose(f1(scores, labels), f1_by_counts(scores, labels), atol=TOL)


class TestProperties:
    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_metrics_bounded(self, seed):
        scores, labels = random_case(np.random.default_rng(seed), n=25, ties=seed % 3 == 0)
        for value in metrics.compute_all(scores, labels).values():
            assert 0.0 <= value <= 1.0

    @pytest.mark.parametrize("seed", range(6))
    def test_rank_invariance_under_monotone_transform(self, seed):
        scores, labels = random_case(np.random.default_rng(400 + seed), ties=True)
        transformed = np.exp(3.0 * scores) + 7.0  # strictly monotone, preserves ties
        assert auroc(scores, labels) == auroc(transformed, labels)
        assert auprc(scores, labels) == auprc(transformed, labels)
        assert min_p_se(scores, labels) == min_p_se(transformed, labels)


class TestBootstrap:
    def test_single_draw_has_zero_std(self):
        scores, labels = random_case(np.random.default_rng(1))
        report = bootstrap_metrics(scores, labels, b=1, seed=5)
        assert all(report.std[name] == 0.0 for name in metrics.METRIC_NAMES)

    def test_deterministic_under_seed(self):
        scores, labels = random_case(np.random.default_rng(2), n=50)
        r1 = bootstrap_metrics(scores, labels, b=10, seed=9)
        r2 = bootstrap_metrics(scores, labels, b=10, seed=9)
        assert r1.to_dict() == r2.to_dict()

    def test_mean_tracks_full_set_metric(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, size=1000)
        scores = np.clip(0.6 * labels + 0.25 * rng.random(1000), 0, 1)
        report = bootstrap_metrics(scores, labels, b=10, seed=0)
        full = metrics.compute_all(scores, labels)
        for name in metrics.METRIC_NAMES:
            se = max(report.std[name] / np.sqrt(10), 1e-4)
            assert abs(report.mean[name] - full[name]) <= 3 * se

    def test_single_class_input_exhausts_retries(self):
        with pytest.raises(MetricError):
            bootstrap_metrics([0.4, 0.6, 0.7], [1, 1, 1], b=2, seed=0)

    def test_render_is_x100_scaled(self):
        scores, labels = random_case(np.random.default_rng(4), n=60)
        report = bootstrap_metrics(scores, labels, b=10, seed=1)
        cell = report.render("auroc")
        mean_str, std_str = cell.split("±")
        npt.assert_allclose(float(mean_str), 100 * report.mean["auroc"], atol=0.005)
        npt.assert_allclose(float(std_str), 100 * report.std["auroc"], atol=0.005)
