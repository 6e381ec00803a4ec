import math

import numpy as np
import pytest

from tmlab import model as M
from tmlab import shift as SH
from tmlab.errors import EmptyDatasetError, ShiftRangeError, ValidationError
from tmlab.sits_data import Dataset, generate_domain
from tmlab.scenarios import separable_scenario

from helpers import tiny_model, tiny_sample


# --- independent direct-summation oracles (no shared code with tmlab.shift)

def oracle_entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0)


def oracle_expected_entropy(probs):
    return sum(oracle_entropy(row) for row in probs) / len(probs)


def oracle_marginal(probs):
    k = len(probs[0])
    return [sum(row[j] for row in probs) / len(probs) for j in range(k)]


def oracle_is_mean_kl(probs):
    """Mean KL(conditional || marginal), the direct definition."""
    marg = oracle_marginal(probs)
    total = 0.0
    for row in probs:
        total += sum(v * (math.log(v) - math.log(marg[j]))
                     for j, v in enumerate(row) if v > 0)
    return total / len(probs)


def oracle_am(probs, class_dist):
    marg = [max(v, 1e-12) for v in oracle_marginal(probs)]
    kl = sum(c * (math.log(c) - math.log(m))
             for c, m in zip(class_dist, marg) if c > 0)
    return oracle_expected_entropy(probs) + kl


def random_probs(rng, n, k):
    return rng.dirichlet(np.ones(k) * rng.uniform(0.3, 3.0), size=n)


class TestScoreStatistics:
    def test_uniform_entropy(self):
        probs = np.full((7, 4), 0.25)
        assert SH.expected_entropy_of(probs) == pytest.approx(math.log(4), rel=1e-12)

    def test_one_hot_entropy_zero(self):
        probs = np.eye(3)[[0, 1, 2, 0]]
        assert SH.expected_entropy_of(probs) == 0.0

    def test_two_sample_entropy_direct_sum(self):
        probs = np.array([[0.9, 0.1], [0.5, 0.5]])
        assert SH.expected_entropy_of(probs) == pytest.approx(
            oracle_expected_entropy(probs), rel=1e-12)

    def test_marginal_identical_predictions(self):
        p = np.array([0.2, 0.5, 0.3])
        probs = np.tile(p, (5, 1))
        assert SH.marginal_of(probs) == pytest.approx(p, rel=1e-12)

    def test_marginal_average(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert SH.marginal_of(probs) == pytest.approx([0.5, 0.5])

    def test_is_zero_when_conditionals_equal_marginal(self):
        probs = np.tile(np.array([0.3, 0.7]), (9, 1))
        assert SH.inception_score_of(probs) == pytest.approx(0.0, abs=1e-12)

    def test_is_one_hot_pair(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert SH.inception_score_of(probs) == pytest.approx(math.log(2), rel=1e-12)

    def test_am_matched_one_hot(self):
        # one-hot predictions with frequencies equal to the reference: 0
        probs = np.eye(2)[[0, 0, 1, 1]]
        assert SH.am_score_of(probs, [0.5, 0.5]) == pytest.approx(0.0, abs=1e-12)

    def test_am_mismatch_is_kl(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert SH.am_score_of(probs, [1.0, 0.0]) == pytest.approx(math.log(2), rel=1e-12)

    def test_am_uniform_entropy_term(self):
        probs = np.full((6, 4), 0.25)
        assert SH.am_score_of(probs, [0.25] * 4) == pytest.approx(math.log(4), rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_batches_match_oracles(self, seed):
        rng = np.random.default_rng(seed)
        probs = random_probs(rng, int(rng.integers(2, 21)), int(rng.integers(2, 6)))
        dist = rng.dirichlet(np.ones(probs.shape[1]))
        assert SH.expected_entropy_of(probs) == pytest.approx(
            oracle_expected_entropy(probs), abs=1e-9)
        assert SH.marginal_of(probs) == pytest.approx(oracle_marginal(probs), abs=1e-12)
        assert SH.inception_score_of(probs) == pytest.approx(
            oracle_is_mean_kl(probs), abs=1e-9)
        assert SH.am_score_of(probs, dist) == pytest.approx(
            oracle_am(probs, dist), abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_is_decomposition_forms_agree(self, seed):
        # entropy-difference form vs mean-KL form
        rng = np.random.default_rng(100 + seed)
        probs = random_probs(rng, 15, 4)
        direct = oracle_is_mean_kl(probs)
        decomposed = oracle_entropy(oracle_marginal(probs)) - oracle_expected_entropy(probs)
        assert abs(direct - decomposed) < 1e-9
        assert SH.inception_score_of(probs) == pytest.approx(direct, abs=1e-9)

    def test_scores_nonnegative_property(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            probs = random_probs(rng, int(rng.integers(1, 12)), int(rng.integers(2, 5)))
            dist = rng.dirichlet(np.ones(probs.shape[1]))
            assert SH.inception_score_of(probs) >= 0.0
            assert SH.am_score_of(probs, dist) >= 0.0
            assert 0.0 <= SH.expected_entropy_of(probs) <= math.log(probs.shape[1]) + 1e-9

    def test_pseudo_label_counts(self):
        probs = np.array([[0.6, 0.4], [0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
        # argmax ties go to the first index
        assert SH.pseudo_label_counts(probs, 2).tolist() == [3.0, 1.0]


@pytest.fixture(scope="module")
def rigged():
    """Small dataset plus a model whose head can be forced."""
    scn = separable_scenario(n_per_domain=24)
    data = generate_domain(scn, "target", seed=5)
    rng = np.random.default_rng(0)
    params = tiny_model(rng, c=4, k=3, max_shift=30)
    params.class_names = list(data.class_names)
    return params, data


def force_uniform(params):
    out = params.copy()
    out.weights["head2_w"][:] = 0.0
    out.weights["head2_b"][:] = 0.0
    return out


def force_one_hot(params, cls=1):
    out = params.copy()
    out.weights["head2_w"][:] = 0.0
    out.weights["head2_b"][:] = 0.0
    out.weights["head2_b"][cls] = 60.0
    return out


class TestModelDrivenScores:
    def test_uniform_model_entropy_is_log_k(self, rigged):
        params, data = rigged
        ent = SH.expected_entropy(force_uniform(params), data, 0)
        assert ent == pytest.approx(math.log(3), abs=1e-6)

    def test_one_hot_model_entropy_zero(self, rigged):
        params, data = rigged
        ent = SH.expected_entropy(force_one_hot(params), data, 0)
        assert ent == pytest.approx(0.0, abs=1e-9)

    def test_marginal_is_simplex_point(self, rigged):
        params, data = rigged
        dist = SH.marginal(params, data, 5)
        dist.validate()

    def test_empty_dataset_rejected(self, rigged):
        params, _ = rigged
        empty = Dataset(samples=[], class_names=["a", "unknown"], domain_id="t")
        with pytest.raises(EmptyDatasetError):
            SH.expected_entropy(params, empty, 0)

    def test_pseudo_label_distribution_counting(self, rigged):
        params, data = rigged
        dist = SH.pseudo_label_distribution(force_one_hot(params, cls=2), data, 0)
        assert dist.probs.tolist() == [0.0, 0.0, 1.0]

    def test_pseudo_label_distribution_matches_brute_force(self, rigged):
        params, data = rigged
        sub = Dataset(samples=data.samples[:10], class_names=data.class_names,
                      domain_id=data.domain_id)
        dist = SH.pseudo_label_distribution(params, sub, 4)
        counts = [0, 0, 0]
        for s in sub.samples:
            probs, _ = M.forward(params, s, 4, "target")
            counts[int(np.argmax(probs))] += 1
        assert dist.probs == pytest.approx(np.array(counts) / 10, abs=1e-12)

    def test_grid_probs_match_per_shift_forwards(self, rigged):
        params, data = rigged
        samples = data.samples[:8]
        deltas = [-9, -3, 0, 4, 11]
        grid = SH.grid_probs(params, samples, deltas)
        for j, delta in enumerate(deltas):
            direct = SH.predict_probs(params, samples, delta)
            assert np.array_equal(grid[j], direct)


class TestEstimators:
    def test_constant_model_ties_to_zero(self, rigged):
        params, data = rigged
        est = SH.estimate_shift_is(force_uniform(params), data, 12)
        assert est.delta_t_to_s == 0
        assert len(est.curve) == 25
        est_am = SH.estimate_shift_am(force_uniform(params), data, 12,
                                      SH.ClassDistribution.uniform(3))
        assert est_am.delta_t_to_s == 0

    def test_curve_has_full_grid(self, rigged):
        params, data = rigged
        est = SH.estimate_shift_is(params, data, 7)
        assert sorted(est.curve) == list(range(-7, 8))

    def test_tie_break_ordering(self):
        curve = {d: 1.0 for d in range(-3, 4)}
        curve[-2] = 2.0
        curve[2] = 2.0
        assert SH._select(curve, maximize=True) == -2
        curve[1] = 2.0
        assert SH._select(curve, maximize=True) == 1

    def test_grid_exceeding_posenc_rejected(self, rigged):
        params, data = rigged
        with pytest.raises(ShiftRangeError):
            SH.estimate_shift_is(params, data, params.posenc.max_shift + 1)

    def test_prior_dist_single_am_scan(self, rigged):
        params, data = rigged
        counters = SH.ScanCounters()
        est = SH.estimate_temporal_shift(params, data, 6,
                                         prior_dist=[0.4, 0.4, 0.2],
                                         counters=counters)
        assert counters.am_scans == 1
        assert counters.is_scans == 0
        assert est.metric == "am"
        assert est.class_distribution_used == pytest.approx([0.4, 0.4, 0.2])

    def test_no_prior_runs_is_then_am(self, rigged):
        params, data = rigged
        counters = SH.ScanCounters()
        est = SH.estimate_temporal_shift(params, data, 6, counters=counters)
        assert counters.is_scans == 1
        assert counters.am_scans == 1
        assert est.class_distribution_used is not None
        assert abs(est.class_distribution_used.sum() - 1.0) < 1e-9

    def test_no_prior_constant_model_returns_zero(self, rigged):
        params, data = rigged
        est = SH.estimate_temporal_shift(force_uniform(params), data, 9)
        assert est.delta_t_to_s == 0

    def test_invalid_prior_rejected(self, rigged):
        params, data = rigged
        with pytest.raises(ValidationError):
            SH.estimate_temporal_shift(params, data, 5, prior_dist=[0.9, 0.9, 0.2])

    def test_order_invariance(self, rigged):
        params, data = rigged
        reversed_data = Dataset(samples=list(reversed(data.samples)),
                                class_names=data.class_names,
                                domain_id=data.domain_id)
        a = SH.estimate_temporal_shift(params, data, 8, sample_cap=15)
        b = SH.estimate_temporal_shift(params, reversed_data, 8, sample_cap=15)
        assert a.delta_t_to_s == b.delta_t_to_s
        for d in a.curve:
            assert abs(a.curve[d] - b.curve[d]) < 1e-9

    def test_sample_cap_limits_forwards(self, rigged):
        params, data = rigged
        counters = SH.ScanCounters()
        SH.estimate_shift_is(params, data, 3, sample_cap=5, counters=counters)
        assert counters.grid_forwards == 7 * 5

    def test_score_curves_columns(self, rigged):
        params, data = rigged
        curves = SH.score_curves(params, data, 4)
        assert sorted(curves["entropy"]) == list(range(-4, 5))
        assert sorted(curves["is"]) == list(range(-4, 5))
        assert sorted(curves["am"]) == list(range(-4, 5))
        assert abs(curves["class_distribution"].sum() - 1.0) < 1e-9

    def test_entropy_estimator_runs(self, rigged):
        params, data = rigged
        est = SH.estimate_shift_entropy(params, data, 5)
        assert est.metric == "entropy"
        assert -5 <= est.delta_t_to_s <= 5
