import numpy as np
import pytest

from tmlab import eval_metrics as EM
from tmlab import model as M
from tmlab.errors import DimensionError, ValidationError
from tmlab.sits_data import Dataset, generate_domain
from tmlab.scenarios import separable_scenario

from helpers import tiny_model


class TestF1:
    def test_identity_confusion(self):
        conf = np.diag([5, 3, 7])
        assert EM.per_class_f1(conf).tolist() == [1.0, 1.0, 1.0]
        assert EM.macro_f1(conf) == 1.0

    def test_absent_class_zero_and_flagged(self):
        conf = np.array([[4, 0, 0], [0, 5, 0], [0, 0, 0]])
        result = EM.result_from_confusion(conf)
        assert result.per_class_f1[2] == 0.0
        assert result.absent_classes == [2]
        assert result.macro_f1 == pytest.approx(2 / 3)

    def test_hand_computed_two_class(self):
        conf = np.array([[8, 2], [3, 7]])
        prec0, rec0 = 8 / 11, 8 / 10
        prec1, rec1 = 7 / 9, 7 / 10
        f10 = 2 * prec0 * rec0 / (prec0 + rec0)
        f11 = 2 * prec1 * rec1 / (prec1 + rec1)
        result = EM.result_from_confusion(conf)
        assert result.per_class_f1 == pytest.approx([f10, f11], rel=1e-12)
        assert result.macro_f1 == pytest.approx((f10 + f11) / 2, rel=1e-12)
        assert result.accuracy == pytest.approx(15 / 20)

    def test_constant_predictor_one_third(self):
        # balanced 2-class set, always predicting class 0
        conf = np.array([[10, 0], [10, 0]])
        assert EM.macro_f1(conf) == pytest.approx((2 / 3 + 0.0) / 2)

    def test_class_permutation_property(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            conf = rng.integers(0, 20, size=(4, 4))
            perm = rng.permutation(4)
            permuted = conf[np.ix_(perm, perm)]
            assert EM.per_class_f1(permuted) == pytest.approx(
                EM.per_class_f1(conf)[perm], rel=1e-12)
            assert EM.macro_f1(permuted) == pytest.approx(EM.macro_f1(conf), rel=1e-12)

    def test_duplication_property(self):
        rng = np.random.default_rng(1)
        conf = rng.integers(0, 20, size=(3, 3))
        doubled = 2 * conf
        a, b = EM.result_from_confusion(conf), EM.result_from_confusion(doubled)
        assert b.per_class_f1 == pytest.approx(a.per_class_f1, rel=1e-12)
        assert b.accuracy == pytest.approx(a.accuracy, rel=1e-12)

    def test_accuracy_is_trace_over_sum(self):
        rng = np.random.default_rng(2)
        conf = rng.integers(0, 9, size=(5, 5))
        result = EM.result_from_confusion(conf)
        assert result.accuracy == pytest.approx(np.trace(conf) / conf.sum())


@pytest.fixture(scope="module")
def data():
    scn = separable_scenario(n_per_domain=40)
    return generate_domain(scn, "source", seed=3)


class TestEvaluate:
    def test_repeated_calls_bit_identical(self, data):
        rng = np.random.default_rng(0)
        params = tiny_model(rng, c=4, k=3)
        params.class_names = list(data.class_names)
        a = EM.evaluate(params, data, "source", 0)
        b = EM.evaluate(params, data, "source", 0)
        assert np.array_equal(a.confusion, b.confusion)
        assert a.macro_f1 == b.macro_f1

    def test_oracle_like_model_perfect(self, data):
        # rig the head so the logits read off a bias ordering per class and
        # feed samples of one class only: confusion must be diagonal
        rng = np.random.default_rng(1)
        params = tiny_model(rng, c=4, k=3)
        params.class_names = list(data.class_names)
        only = Dataset(samples=[s for s in data.samples if s.label == 0][:5],
                       class_names=data.class_names, domain_id="source")
        params.weights["head2_w"][:] = 0
        params.weights["head2_b"][:] = np.array([5.0, 0.0, 0.0])
        result = EM.evaluate(params, only, "source", 0)
        assert result.confusion[0, 0] == len(only.samples)
        assert result.accuracy == 1.0

    def test_unlabeled_sample_rejected(self, data):
        rng = np.random.default_rng(2)
        params = tiny_model(rng, c=4, k=3)
        params.class_names = list(data.class_names)
        stripped = Dataset(
            samples=[type(s)(s.id, s.days, s.pixels, None) for s in data.samples[:3]],
            class_names=data.class_names, domain_id="source")
        with pytest.raises(ValidationError):
            EM.evaluate(params, stripped, "source", 0)

    def test_class_count_mismatch(self, data):
        rng = np.random.default_rng(3)
        params = tiny_model(rng, c=4, k=4)
        with pytest.raises(DimensionError):
            EM.evaluate(params, data, "source", 0)

    def test_result_serializable(self, data):
        import json
        rng = np.random.default_rng(4)
        params = tiny_model(rng, c=4, k=3)
        params.class_names = list(data.class_names)
        result = EM.evaluate(params, data, "source", 0)
        payload = json.dumps(result.to_dict())
        assert "macro_f1" in payload
        assert result.n_evaluated == len(data.samples)
        assert result.confusion.sum() == len(data.samples)
