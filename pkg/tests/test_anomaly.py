import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedanom import anomaly, nn
from fedanom.errors import ConfigError


def two_pass_stats(scores):
    # independent mean and population sigma, plain floats
    n = len(scores)
    mean = sum(scores) / n
    var = sum((s - mean) ** 2 for s in scores) / n
    return mean, math.sqrt(var)


class TestComputeThreshold:
    def test_constant_scores(self):
        th = anomaly.compute_threshold([1.0, 1.0, 1.0], alpha=3.0)
        assert th.tr == 1.0
        assert th.std_mse == 0.0
        assert th.n_samples == 3

    def test_hand_arithmetic(self):
        th = anomaly.compute_threshold([0.0, 2.0], alpha=3.0)
        assert th.mean_mse == 1.0
        assert th.std_mse == 1.0
        assert th.tr == 4.0

    def test_matches_two_pass_oracle_on_model_scores(self):
        # score a real (untrained) autoencoder on random traffic
        model = nn.init_autoencoder(nn.AutoencoderConfig(input_dim=115, seed=13))
        x = np.random.default_rng(13).uniform(0, 1, size=(3000, 115))
        scores = nn.mse_per_sample(x, nn.forward(model, x))
        th = anomaly.compute_threshold(scores, alpha=3.0)
        mean, std = two_pass_stats([float(s) for s in scores])
        assert th.mean_mse == pytest.approx(mean, abs=1e-10)
        assert th.std_mse == pytest.approx(std, abs=1e-10)
        assert th.tr == pytest.approx(mean + 3.0 * std, abs=1e-10)

    def test_default_alpha(self):
        th = anomaly.compute_threshold([0.0, 2.0])
        assert th.alpha == 3.0

    def test_too_few_scores_rejected(self):
        with pytest.raises(ValueError):
            anomaly.compute_threshold([1.0])

    def test_negative_scores_rejected(self):
        with pytest.raises(ValueError):
            anomaly.compute_threshold([0.5, -0.1])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            anomaly.compute_threshold([0.5, float("inf")])

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError):
            anomaly.compute_threshold([0.0, 1.0], alpha=-1.0)

    def test_inconsistent_threshold_record_rejected(self):
        with pytest.raises(ConfigError):
            anomaly.DetectionThreshold(tr=5.0, mean_mse=1.0, std_mse=1.0,
                                       alpha=3.0, n_samples=10)

    @settings(deadline=None, max_examples=100)
    @given(st.lists(st.floats(0.0, 1e6), min_size=2, max_size=200),
           st.floats(0.0, 10.0), st.floats(0.0, 10.0))
    def test_monotone_in_alpha(self, scores, a1, a2):
        lo, hi = sorted((a1, a2))
        t_lo = anomaly.compute_threshold(scores, alpha=lo)
        t_hi = anomaly.compute_threshold(scores, alpha=hi)
        assert t_lo.tr <= t_hi.tr

    @settings(deadline=None, max_examples=60)
    @given(st.lists(st.floats(0.0, 1e3), min_size=2, max_size=500),
           st.floats(1.0, 6.0))
    def test_chebyshev_bound_on_own_scores(self, scores, alpha):
        th = anomaly.compute_threshold(scores, alpha=alpha)
        flagged = anomaly.detect(scores, th)
        assert flagged.sum() <= len(scores) / alpha ** 2


class TestDetect:
    def test_boundary_is_benign(self):
        th = anomaly.compute_threshold([0.0, 2.0], alpha=3.0)
        assert th.tr == 4.0
        labels = anomaly.detect([4.0], th)
        assert labels.tolist() == [0]

    def test_strictly_above_is_anomalous(self):
        th = anomaly.compute_threshold([0.0, 2.0], alpha=3.0)
        assert anomaly.detect([np.nextafter(4.0, 5.0)], th).tolist() == [1]

    def test_basic_split(self):
        th = anomaly.DetectionThreshold(tr=1.0, mean_mse=1.0, std_mse=0.0,
                                        alpha=3.0, n_samples=2)
        assert anomaly.detect([0.5, 5.0], th).tolist() == [0, 1]

    def test_all_zero_scores_benign(self):
        th = anomaly.DetectionThreshold(tr=0.5, mean_mse=0.5, std_mse=0.0,
                                        alpha=3.0, n_samples=2)
        assert anomaly.detect(np.zeros(10), th).sum() == 0

    def test_non_finite_rejected(self):
        th = anomaly.DetectionThreshold(tr=1.0, mean_mse=1.0, std_mse=0.0,
                                        alpha=3.0, n_samples=2)
        with pytest.raises(ValueError):
            anomaly.detect([float("nan")], th)

    @settings(deadline=None, max_examples=60)
    @given(st.lists(st.floats(0.0, 100.0), min_size=2, max_size=100),
           st.floats(0.5, 5.0))
    def test_boundary_strictness_property(self, scores, alpha):
        th = anomaly.compute_threshold(scores, alpha=alpha)
        at = anomaly.detect([th.tr], th)
        above = anomaly.detect([np.nextafter(th.tr, np.inf)], th)
        assert at[0] == 0
        assert above[0] == 1


class TestConfusion:
    def test_perfect_prediction(self):
        cm = anomaly.confusion([1, 0], [1, 0])
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (1, 1, 0, 0)

    def test_all_false_positive(self):
        cm = anomaly.confusion([1, 1], [0, 0])
        assert cm.fp == 2
        assert cm.tp == cm.tn == cm.fn == 0

    def test_counts_sum_to_total(self):
        rng = np.random.default_rng(7)
        pred = rng.integers(0, 2, size=1000)
        truth = rng.integers(0, 2, size=1000)
        cm = anomaly.confusion(pred, truth)
        assert cm.total == 1000

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(21)
        pred = rng.integers(0, 2, size=1000)
        truth = rng.integers(0, 2, size=1000)
        tp = tn = fp = fn = 0
        for p, t in zip(pred, truth):
            if p == 1 and t == 1:
                tp += 1
            elif p == 0 and t == 0:
                tn += 1
            elif p == 1 and t == 0:
                fp += 1
            else:
                fn += 1
        cm = anomaly.confusion(pred, truth)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (tp, tn, fp, fn)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            anomaly.confusion([1, 0], [1])

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            anomaly.confusion([2, 0], [1, 0])

    def test_negative_counts_rejected(self):
        with pytest.raises(ConfigError):
            anomaly.ConfusionMatrix(tp=-1, tn=0, fp=0, fn=0)


class TestMetrics:
    def test_perfect(self):
        m = anomaly.metrics(anomaly.ConfusionMatrix(tp=2, tn=2, fp=0, fn=0))
        assert (m.acc, m.fpr, m.tpr, m.tnr) == (1.0, 0.0, 1.0, 1.0)

    def test_all_wrong(self):
        m = anomaly.metrics(anomaly.ConfusionMatrix(tp=0, tn=0, fp=1, fn=1))
        assert (m.acc, m.fpr, m.tpr, m.tnr) == (0.0, 1.0, 0.0, 0.0)

    def test_published_rates_are_complementary(self):
        # the reported false-positive and true-negative rates of the
        # federated detector: 3.45% and 96.55%
        assert 0.0345 + 0.9655 == pytest.approx(1.0, abs=1e-12)

    def test_no_negatives_gives_nan_rates(self):
        m = anomaly.metrics(anomaly.ConfusionMatrix(tp=3, tn=0, fp=0, fn=1))
        assert math.isnan(m.fpr)
        assert math.isnan(m.tnr)
        assert m.tpr == 0.75

    def test_no_positives_gives_nan_tpr(self):
        m = anomaly.metrics(anomaly.ConfusionMatrix(tp=0, tn=4, fp=1, fn=0))
        assert math.isnan(m.tpr)
        assert m.fpr == 0.2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            anomaly.metrics(anomaly.ConfusionMatrix(tp=0, tn=0, fp=0, fn=0))

    def test_identity_prediction_perfect_accuracy(self):
        rng = np.random.default_rng(3)
        truth = rng.integers(0, 2, size=500)
        m = anomaly.metrics(anomaly.confusion(truth, truth))
        assert m.acc == 1.0

    @settings(deadline=None, max_examples=200)
    @given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6),
           st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
    def test_fpr_tnr_complement_exact(self, tp, tn, fp, fn):
        cm = anomaly.ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)
        if cm.total == 0:
            return
        m = anomaly.metrics(cm)
        if tn + fp > 0:
            assert m.fpr + m.tnr == 1.0
        assert 0.0 <= m.acc <= 1.0
