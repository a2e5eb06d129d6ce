"""Layer primitives, parameter store, RNG plumbing and the gradient checker."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from miv import numerics as nx
from miv.errors import DegenerateInputError, NumericalFailure, ParameterError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(nx.affine([[1.0, 2.0]], np.eye(2), [0.0, 0.0]), [[1.0, 2.0]])

    def test_hand_multiplication(self):
        # [1,1] @ [[2,3],[4,5]] = [6,8]; plus bias [1,1]
        y = nx.affine([[1.0, 1.0]], [[2.0, 3.0], [4.0, 5.0]], [1.0, 1.0])
        np.testing.assert_array_equal(y, [[7.0, 9.0]])

    def test_zero_input_passes_bias(self):
        y = nx.affine(np.zeros((1, 3)), np.arange(6.0).reshape(3, 2), [5.0, 6.0])
        np.testing.assert_array_equal(y, [[5.0, 6.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
            nx.affine(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalFailure):
            nx.affine([[np.nan, 1.0]], np.eye(2), np.zeros(2))


class TestActivations:
    def test_fixed_points(self):
        assert nx.sigmoid(0.0) == 0.5
        np.testing.assert_array_equal(nx.softmax_rows(np.zeros((1, 4))), [[0.25] * 4])
        np.testing.assert_array_equal(nx.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_sigmoid_stable_at_extremes(self):
        y = nx.sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(y))
        np.testing.assert_array_equal(y, [0.0, 1.0])

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            nx.activation(np.zeros(2), "tanh")

    @given(arrays(np.float64, (3, 5), elements=finite), finite)
    def test_softmax_shift_invariance(self, x, c):
        np.testing.assert_allclose(nx.softmax_rows(x + c), nx.softmax_rows(x), atol=1e-12)

    @given(arrays(np.float64, (4, 6), elements=finite))
    def test_softmax_rows_are_distributions(self, x):
        y = nx.softmax_rows(x)
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


class TestNormalization:
    def test_constant_column_maps_to_zero(self):
        y, _ = nx.batch_norm(np.full((2, 1), 3.0), np.ones(1), np.zeros(1), "train",
                             nx.RunningStats.zeros(1))
        np.testing.assert_array_equal(y, [[0.0], [0.0]])

    def test_population_variance(self):
        # mean 2, population variance 1 -> (x - 2) / 1
        y, _ = nx.batch_norm(np.array([[1.0], [3.0]]), np.ones(1), np.zeros(1), "train",
                             nx.RunningStats.zeros(1), eps=0.0)
        np.testing.assert_allclose(y, [[-1.0], [1.0]], atol=1e-15)

    def test_single_row_training_batch_rejected(self):
        with pytest.raises(DegenerateInputError):
            nx.batch_norm(np.ones((1, 3)), np.ones(3), np.zeros(3), "train", nx.RunningStats.zeros(3))

    def test_running_stats_update_and_eval_use(self):
        rs = nx.RunningStats.zeros(1)
        x = np.array([[1.0], [3.0]])
        nx.batch_norm(x, np.ones(1), np.zeros(1), "train", rs)
        # momentum 0.1 towards batch mean 2 and population variance 1, from (0, 1)
        np.testing.assert_allclose(rs.mean, [0.2])
        np.testing.assert_allclose(rs.var, [1.0])
        y, _ = nx.batch_norm(np.array([[0.2]]), np.ones(1), np.zeros(1), "eval", rs)
        np.testing.assert_allclose(y, [[0.0]], atol=1e-12)

    def test_group_norm_constant_row(self):
        y, _ = nx.group_norm(np.full((1, 4), 2.0), np.ones(4), np.zeros(4), 1)
        np.testing.assert_array_equal(y, np.zeros((1, 4)))

    def test_group_norm_g1_is_per_example(self):
        x = np.random.default_rng(0).standard_normal((3, 8))
        y, _ = nx.group_norm(x, np.ones(8), np.zeros(8), 1, eps=0.0)
        expected = (x - x.mean(1, keepdims=True)) / x.std(1, keepdims=True)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_group_count_must_divide(self):
        with pytest.raises(ShapeError):
            nx.group_norm(np.zeros((1, 6)), np.ones(6), np.zeros(6), 4)

    def test_default_groups(self):
        assert nx.default_groups(512) == 32
        assert nx.default_groups(16) == 1


class TestDropout:
    def test_zero_rate_and_eval_are_identity(self):
        x = np.random.default_rng(1).standard_normal((3, 4))
        np.testing.assert_array_equal(nx.dropout(x, 0.0, "train", nx.make_rng(0))[0], x)
        np.testing.assert_array_equal(nx.dropout(x, 0.7, "eval", None)[0], x)

    def test_expectation_preserved(self):
        y, _ = nx.dropout(np.ones((1, 100_000)), 0.5, "train", nx.make_rng(3))
        assert abs(y.mean() - 1.0) < 0.02

    def test_rate_one_rejected(self):
        with pytest.raises(ParameterError):
            nx.dropout(np.ones(3), 1.0, "train", nx.make_rng(0))


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(nx.l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)

    def test_zero_row(self):
        with pytest.raises(DegenerateInputError):
            nx.l2_normalize(np.zeros((1, 2)))

    @given(arrays(np.float64, (4, 5), elements=st.floats(0.1, 10)))
    def test_unit_rows_and_idempotent(self, x):
        y = nx.l2_normalize(x)
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(nx.l2_normalize(y), y, atol=1e-12)


class TestBCE:
    def test_confident_correct(self):
        assert nx.bce_loss([1 - nx.BCE_EPS], [1]) < 1e-6

    def test_midpoint(self):
        assert math.isclose(nx.bce_loss([0.5], [1]), math.log(2), rel_tol=1e-12)

    def test_direct_evaluation(self):
        assert math.isclose(nx.bce_loss([0.9, 0.1], [1, 0]), -math.log(0.9), rel_tol=1e-12)

    def test_clamped_at_zero_probability(self):
        assert math.isclose(nx.bce_loss([0.0], [1]), -math.log(nx.BCE_EPS), rel_tol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            nx.bce_loss([0.5, 0.5], [1])


class TestParamStore:
    def test_duplicate_slot_rejected(self):
        p = nx.ParamStore()
        p.add("w", np.zeros(2))
        with pytest.raises(ParameterError):
            p.add("w", np.zeros(2))

    def test_gradient_shape_enforced(self):
        p = nx.ParamStore()
        p.add("w", np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            p.accumulate("w", np.zeros(3))

    def test_copy_is_deep(self):
        p = nx.ParamStore()
        p.add("w", np.zeros(2))
        q = p.copy()
        q.values["w"][0] = 1.0
        assert p["w"][0] == 0.0


class TestRng:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(nx.make_rng(5).random(8), nx.make_rng(5).random(8))

    def test_derive_seed_is_stable_and_distinct(self):
        assert nx.derive_seed(1, 2) == nx.derive_seed(1, 2)
        assert nx.derive_seed(1, 2) != nx.derive_seed(2, 1)
        assert 0 <= nx.derive_seed(7) < 2 ** 63


class TestGradCheck:
    def _bce_sigmoid_affine(self, seed=0):
        rng = nx.make_rng(seed)
        p = nx.ParamStore()
        p.add("W", rng.standard_normal((3, 1)))
        p.add("b", rng.standard_normal(1))
        x = rng.standard_normal((4, 3))
        y = np.array([1.0, 0.0, 1.0, 0.0])

        def f(p):
            z = nx.affine(x, p["W"], p["b"])
            prob = nx.sigmoid(z)[:, 0]
            dprob = nx.bce_loss_backward(prob, y)
            dz = (dprob * prob * (1 - prob))[:, None]
            _, dW, db = nx.affine_backward(dz, x, p["W"])
            p.accumulate("W", dW)
            p.accumulate("b", db)
            return nx.bce_loss(prob, y)
        return f, p

    def test_bce_sigmoid_affine(self):
        f, p = self._bce_sigmoid_affine()
        report = nx.grad_check(f, p, tol=1e-6)
        assert report.passed, report
        assert report.max_rel_err < 1e-6

    def test_constant_slot(self):
        p = nx.ParamStore()
        p.add("w", np.ones(3))
        p.add("unused", np.ones(2))

        def f(p):
            p.accumulate("w", 2 * p["w"])
            return float((p["w"] ** 2).sum())
        report = nx.grad_check(f, p)
        assert report.per_slot["unused"] < 1e-8

    def test_detects_wrong_gradient(self):
        p = nx.ParamStore()
        p.add("w", np.array([1.0, 2.0]))

        def f(p):
            p.accumulate("w", 3 * p["w"])  # true gradient is 2w
            return float((p["w"] ** 2).sum())
        report = nx.grad_check(f, p)
        assert not report.passed
        assert report.worst_slot == "w"

    def test_non_finite_probe_reported(self):
        p = nx.ParamStore()
        p.add("w", np.array([0.0]))

        def f(p):
            p.accumulate("w", np.zeros(1))
            return float(np.log(p["w"][0])) if p["w"][0] != 0 else 0.0
        report = nx.grad_check(f, p)
        assert report.nonfinite == ["w"]
        assert not report.passed
