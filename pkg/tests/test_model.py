"""Siamese comparison network: shapes, determinism, gradients and prediction."""

import numpy as np
import pytest

from miv import model as mm
from miv.attention import AttentionConfig
from miv.bagdata import Exemplar
from miv.errors import ConfigError, DegenerateInputError, ParameterError, ShapeError
from miv.numerics import grad_check, make_rng

DIM = 16


def _small(kind="dba_l2", heads=2, dropout=0.3, seed=0, input_dim=6):
    return mm.init_model(input_dim, AttentionConfig(kind, heads, DIM), seed=seed, hidden=12,
                         head_hidden=8, dropout=dropout)


def _batch(b=4, input_dim=6, seed=1):
    rng = make_rng(seed)
    return rng.standard_normal((b, input_dim)), rng.standard_normal((b, 4, input_dim)), \
        rng.integers(0, 2, b).astype(float)


class TestInit:
    def test_convnext_preset_width(self):
        m = mm.init_model(1024, AttentionConfig("mean"), seed=0)
        assert m.params["ft.W1"].shape == (1024, mm.HIDDEN)
        assert m.params["ft.W2"].shape[1] == 512
        assert mm.BACKBONE_DIMS["convnext"] == 1024

    def test_deterministic(self):
        a, b = _small(seed=4), _small(seed=4)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_heads_must_divide_512(self):
        with pytest.raises(ConfigError):
            mm.init_model(8, AttentionConfig("vema", 3))

    @pytest.mark.parametrize("kw", [{"input_dim": 0}, {"dropout": 1.0}])
    def test_bad_arguments(self, kw):
        args = {"input_dim": 4, "config": AttentionConfig("mean", 1, DIM), **kw}
        with pytest.raises(ParameterError):
            mm.init_model(**args)

    def test_copy_is_independent(self):
        m = _small()
        c = m.copy()
        c.params.values["ft.W1"][0, 0] += 1.0
        c.bn.mean[0] += 1.0
        assert m.params["ft.W1"][0, 0] != c.params["ft.W1"][0, 0]
        assert m.bn.mean[0] == 0.0


class TestTransform:
    def test_output_width(self):
        out = mm.feature_transform(_small(), make_rng(0).standard_normal((5, 6)))
        assert out.shape == (5, DIM)

    def test_eval_is_deterministic(self):
        m, x = _small(), make_rng(0).standard_normal((3, 6))
        np.testing.assert_array_equal(mm.feature_transform(m, x), mm.feature_transform(m, x))

    def test_single_row_train_batch(self):
        with pytest.raises(DegenerateInputError):
            mm.feature_transform(_small(), np.ones((1, 6)), "train", make_rng(0))

    def test_column_mismatch(self):
        with pytest.raises(ShapeError):
            mm.feature_transform(_small(), np.ones((2, 5)))


class TestForward:
    def test_probabilities_in_unit_interval(self):
        q, bags, _ = _batch(8)
        p, trace = mm.forward_arrays(_small(), 3 * q, 3 * bags)
        assert np.all((p > 0) & (p < 1))
        assert trace.weights.shape == (8, 2, 4)

    def test_copies_of_query_give_zero_difference(self):
        m = _small("mean", 1)
        q = make_rng(2).standard_normal((1, 6))
        _, trace = mm.forward_arrays(m, q, np.repeat(q[:, None], 4, axis=1))
        diff = trace.caches[4]
        np.testing.assert_allclose(diff, 0.0, atol=1e-12)

    def test_single_exemplar(self):
        rng = make_rng(0)
        e = Exemplar(rng.standard_normal(6), rng.standard_normal((4, 6)), True,
                     ("a", "0", 2), tuple(("a", "0", v) for v in (1, 3, 4, 5)))
        p, _ = mm.forward(_small(), e)
        assert 0 < p < 1

    @pytest.mark.parametrize("kind", ["mean", "max", "vema", "dba_l1", "dba_l2", "mhsce"])
    def test_bag_permutation_leaves_probability_unchanged(self, kind):
        m = _small(kind, 1 if kind in ("mean", "max") else 2)
        q, bags, _ = _batch(6)
        perm = make_rng(3).permutation(4)
        np.testing.assert_array_equal(mm.predict_proba(m, q, bags),
                                      mm.predict_proba(m, q, bags[:, perm]))

    def test_train_mode_needs_rng(self):
        q, bags, _ = _batch()
        with pytest.raises(ParameterError):
            mm.forward_arrays(_small(), q, bags, "train")

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mm.forward_arrays(_small(), np.zeros((2, 6)), np.zeros((3, 4, 6)))


class TestLossAndGradients:
    def test_duplicated_batch_same_loss(self):
        m = _small(dropout=0.0)
        q, bags, y = _batch(3)
        a = mm.loss_arrays(m, q, bags, y, "eval")
        b = mm.loss_arrays(m, np.tile(q, (2, 1)), np.tile(bags, (2, 1, 1)), np.tile(y, 2), "eval")
        assert abs(a - b) < 1e-12

    @pytest.mark.parametrize("kind,heads", [("mean", 1), ("vema", 2), ("dba_l1", 2),
                                            ("dba_l2", 4), ("mhsce", 1), ("max", 1)])
    def test_full_model_gradient(self, kind, heads):
        m = _small(kind, heads)
        q, bags, y = _batch(4)

        def f(params):
            m.params = params
            return mm.loss_arrays(m, q, bags, y, "train", make_rng(9))
        report = grad_check(f, m.params, tol=1e-4, max_entries=12)
        assert report.passed, str(report)

    def test_single_exemplar_train_batch_rejected(self):
        q, bags, y = _batch(1)
        e = Exemplar(q[0], bags[0], True, ("a", "0", 2), ())
        with pytest.raises(ParameterError):
            mm.loss_batch(_small(), [e])
        with pytest.raises(ParameterError):
            mm.loss_batch(_small(), [])


class TestPredict:
    def test_threshold(self):
        assert mm.predict(0.7) is True
        assert mm.predict(0.49) is False
        assert mm.predict(0.5) is True

    def test_vectorized(self):
        np.testing.assert_array_equal(mm.predict(np.array([0.2, 0.9])), [False, True])

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            mm.predict(1.2)
