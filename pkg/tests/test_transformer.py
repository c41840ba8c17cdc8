import numpy as np
import pytest

from hsg import oversegment as ovs
from hsg import tensor as tn
from hsg import transformer as tf
from hsg.tensor import Tensor


def _unit(rng, n, m):
    x = rng.normal(size=(n, m))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def params():
    return tf.TransformerParams.init(16, (8, 4), seed=1)


class TestStatisticalQueryAdaptation:
    def test_zero_features_give_bias_shift(self, params):
        p = params.level(0)
        q = tf.statistical_query_adaptation(np.zeros((5, 16)), p["query"], p).data
        # zero mean feeds only the bias; the std branch sees sqrt(eps) per feature
        spread = np.full((1, 16), np.sqrt(tf.STD_EPS))
        expect = (p["query"].data + p["stat_mean.b"].data
                  + spread @ p["stat_std.w"].data + p["stat_std.b"].data)
        np.testing.assert_allclose(q, expect, atol=1e-12)

    def test_single_row_is_finite(self, params, rng):
        p = params.level(0)
        q = tf.statistical_query_adaptation(_unit(rng, 1, 16), p["query"], p).data
        assert np.all(np.isfinite(q))

    def test_deterministic(self, params, rng):
        p = params.level(1)
        y = rng.normal(size=(8, 16))
        a = tf.statistical_query_adaptation(y, p["query"], p).data
        b = tf.statistical_query_adaptation(y, p["query"], p).data
        np.testing.assert_array_equal(a, b)


class TestTransformerLevel:
    def test_shapes_and_row_sums(self, params, rng):
        out = tf.transformer_level(_unit(rng, 16, 16), params, 0)
        assert out.y.shape == (16, 16) and out.x_next.shape == (8, 16)
        lvl1 = tf.transformer_level(out.x_next, params, 1)
        assert lvl1.y.shape == (8, 16) and lvl1.x_next.shape == (4, 16)
        assert lvl1.z_next.shape == (4, 16) and lvl1.transition.shape == (8, 4)
        np.testing.assert_allclose(out.transition.data.sum(1), 1.0, atol=1e-9)

    def test_permutation_equivariance(self, params, rng):
        x = _unit(rng, 16, 16)
        perm = rng.permutation(16)
        a = tf.transformer_level(x, params, 0)
        b = tf.transformer_level(x[perm], params, 0)
        np.testing.assert_allclose(b.transition.data, a.transition.data[perm], atol=1e-9)
        np.testing.assert_allclose(b.x_next.data, a.x_next.data, atol=1e-9)

    def test_dropout_only_in_training(self, params, rng):
        x = _unit(rng, 16, 16)
        a = tf.transformer_level(x, params, 0).transition.data
        b = tf.transformer_level(x, params, 0).transition.data
        c = tf.transformer_level(x, params, 0, train=True, rng=np.random.default_rng(0)).transition.data
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_wrong_width(self, params):
        with pytest.raises(tn.ShapeMismatch):
            tf.transformer_level(np.ones((4, 8)), params, 0)

    def test_gradient(self, rng):
        p = tf.TransformerParams.init(8, (3,), seed=4)
        x0 = _unit(rng, 6, 8)
        w = rng.normal(size=(6, 3))

        def f(v):
            return (tf.transformer_level(tn.reshape(v, (6, 8)), p, 0).transition * w).sum()

        report = tn.grad_check(f, x0.ravel(), 1e-5, 1e-4)
        assert report.passed, report


class TestPropagateAndBinarize:
    def test_identity_transition(self, rng):
        p = rng.dirichlet(np.ones(3), size=4)
        np.testing.assert_array_equal(tf.propagate(p, np.eye(3)).data, p)

    def test_direct_product(self):
        out = tf.propagate(np.array([[1.0, 0.0]]), np.array([[0.3, 0.7], [0.9, 0.1]])).data
        np.testing.assert_allclose(out, [[0.3, 0.7]])

    def test_stochastic_closure(self, rng):
        p = rng.dirichlet(np.ones(5), size=7)
        c = rng.dirichlet(np.ones(3), size=5)
        np.testing.assert_allclose(tf.propagate(p, c).data.sum(1), 1.0, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(tn.ShapeMismatch):
            tf.propagate(np.ones((2, 3)), np.ones((2, 2)))

    def test_binarize(self):
        assert tf.binarize(np.array([[0.3, 0.7]]))[0] == 1
        assert tf.binarize(np.array([[0.5, 0.5]]))[0] == 0
        np.testing.assert_array_equal(tf.binarize(np.eye(4)[[2, 0, 3]]), [2, 0, 3])


class TestHierarchy:
    def test_no_levels(self, params, rng):
        x0 = _unit(rng, 16, 16)
        g0 = rng.integers(0, 16, (6, 6))
        h = tf.hierarchy_forward(x0, g0, params, levels=())
        assert len(h.x) == 1 and len(h.pixel_labels) == 1
        np.testing.assert_array_equal(h.pixel_labels[0], g0)

    def test_block_diagonal_chain(self):
        c1 = np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]])
        c2 = np.array([[0.0, 1.0], [1.0, 0.0]])
        g0 = np.array([[0, 1, 2, 3], [3, 2, 1, 0]])
        groups = tf.chain_groups([c1, c2])
        # enumeration: 0,1 -> 0 -> 1 ; 2,3 -> 1 -> 0
        np.testing.assert_array_equal(groups[1], [0, 0, 1, 1])
        np.testing.assert_array_equal(groups[2], [1, 1, 0, 0])
        np.testing.assert_array_equal(groups[2][g0], [[1, 1, 0, 0], [0, 0, 1, 1]])

    def test_label_bounds_and_merges(self, params, rng):
        x0 = _unit(rng, 16, 16)
        g0 = rng.integers(0, 16, (10, 10))
        h = tf.hierarchy_forward(x0, g0, params)
        assert len(np.unique(h.pixel_labels[1])) <= 8
        assert len(np.unique(h.pixel_labels[2])) <= 4
        assert ovs.is_refinement(h.pixel_labels[0], h.pixel_labels[1])
        assert ovs.is_refinement(h.pixel_labels[1], h.pixel_labels[2])
        for s in h.soft[1:]:
            np.testing.assert_allclose(s.data.sum(1), 1.0, atol=1e-9)

    def test_soft_chain_is_product(self, params, rng):
        h = tf.hierarchy_forward(_unit(rng, 16, 16), None, params)
        np.testing.assert_allclose(h.soft[2].data, h.transitions[0].data @ h.transitions[1].data,
                                   atol=1e-14)
