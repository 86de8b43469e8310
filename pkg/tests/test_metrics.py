import itertools
from fractions import Fraction

import numpy as np
import pytest

from advclip.metrics import MetricsReport, accuracy, confusion_matrix, macro_f1, macro_f1_from_confusion
from advclip.optim import SGD, ScheduleConfig, lr_at, sgd_step
from advclip.gradcore import Tensor


def oracle_macro_f1(cm):
    """Exact rational arithmetic from the confusion-matrix definition."""
    k = len(cm)
    f1s = []
    for c in range(k):
        tp = Fraction(int(cm[c][c]))
        fp = Fraction(sum(int(cm[r][c]) for r in range(k) if r != c))
        fn = Fraction(sum(int(cm[c][r]) for r in range(k) if r != c))
        f1s.append(Fraction(0) if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(sum(f1s) / k)


def expand(cm):
    preds, labels = [], []
    for t, p in itertools.product(range(len(cm)), repeat=2):
        labels += [t] * int(cm[t][p])
        preds += [p] * int(cm[t][p])
    return np.array(preds), np.array(labels)


class TestMacroF1:
    def test_all_correct(self):
        assert macro_f1([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0

    def test_hand_example(self):
        assert macro_f1([1, 0, 0, 0], [1, 1, 0, 0]) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-15)
        assert macro_f1([1, 0, 0, 0], [1, 1, 0, 0]) == pytest.approx(0.7333333333333333, abs=1e-15)

    def test_relabel_symmetry(self):
        rng = np.random.default_rng(0)
        p, y = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
        assert macro_f1(p, y) == pytest.approx(macro_f1(1 - p, 1 - y), abs=1e-15)

    def test_empty_class_warns_and_scores_zero(self):
        with pytest.warns(RuntimeWarning):
            assert macro_f1([0, 0], [0, 0]) == 0.5

    @pytest.mark.parametrize("seed", range(20))
    def test_random_confusion_matrices_vs_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        cm = rng.integers(0, 9, (k, k))
        cm[np.arange(k), np.arange(k)] += 1
        preds, labels = expand(cm)
        np.testing.assert_array_equal(confusion_matrix(preds, labels, k), cm)
        assert abs(macro_f1(preds, labels, k) - oracle_macro_f1(cm)) <= 1e-12
        assert abs(accuracy(preds, labels) - float(Fraction(int(np.trace(cm)), int(cm.sum())))) <= 1e-12


class TestReport:
    def test_report_cross_check(self):
        rng = np.random.default_rng(4)
        p, y = rng.integers(0, 2, 40), rng.integers(0, 2, 40)
        r = MetricsReport.from_predictions(p, y)
        assert r.check(1e-12)
        assert sum(map(sum, r.confusion)) == 40
        assert 0 <= r.accuracy <= 1 and 0 <= r.macro_f1 <= 1

    def test_json_keys(self):
        r = MetricsReport.from_predictions([0, 1], [0, 1])
        assert set(r.to_json()) == {"accuracy", "macro_f1", "precision", "recall", "f1", "confusion"}


class TestSchedule:
    def test_defaults(self):
        c = ScheduleConfig()
        assert (c.base_lr, c.momentum, c.weight_decay, c.batch_size, c.epochs, c.warmup_epochs, c.seed, c.log_every) == \
            (2e-3, 0.9, 5e-4, 16, 8, 1, 17, 5)

    def test_endpoints(self):
        c = ScheduleConfig()
        total = 80
        assert lr_at(0, total, c) == 0.0
        assert lr_at(10, total, c) == pytest.approx(2e-3)
        assert lr_at(total, total, c) == pytest.approx(0.0, abs=1e-18)
        assert lr_at(5, total, c) == pytest.approx(1e-3)

    def test_cosine_midpoint(self):
        c = ScheduleConfig()
        assert lr_at(45, 80, c) == pytest.approx(1e-3)


class TestSGD:
    def test_zero_grad_no_wd(self):
        p = Tensor(np.array([1.0, -2.0]))
        sgd_step([p], [np.zeros(2)], [np.zeros(2)], 0.1, 0.9, 0.0)
        assert p.data.tolist() == [1.0, -2.0]

    def test_vanilla(self):
        p = Tensor(np.array([1.0]))
        sgd_step([p], [np.array([0.5])], [np.zeros(1)], 0.1, 0.0, 0.0)
        assert p.data[0] == pytest.approx(0.95)

    def test_two_step_trace(self):
        # v1 = g1 + wd p0; p1 = p0 - lr v1; v2 = m v1 + g2 + wd p1; p2 = p1 - lr v2
        p0, g1, g2, lr, m, wd = 2.0, 0.3, -0.1, 0.5, 0.9, 0.01
        v1 = g1 + wd * p0
        p1 = p0 - lr * v1
        v2 = m * v1 + g2 + wd * p1
        p2 = p1 - lr * v2
        p = Tensor(np.array([p0]))
        vel = [np.zeros(1)]
        sgd_step([p], [np.array([g1])], vel, lr, m, wd)
        assert p.data[0] == pytest.approx(p1, abs=1e-15)
        sgd_step([p], [np.array([g2])], vel, lr, m, wd)
        assert p.data[0] == pytest.approx(p2, abs=1e-15)

    def test_optimizer_wrapper_skips_missing_grads(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = SGD([p], momentum=0.9, weight_decay=0.0)
        opt.step(1.0)
        assert p.data.tolist() == [1.0, 1.0, 1.0]
