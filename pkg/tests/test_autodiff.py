import numpy as np
import pytest
from hypothesis import given, strategies as st

from handfold import autodiff as ad
from handfold import diagnostics
from handfold.autodiff import DimensionError, GraphError, RunningStats, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


@pytest.fixture(autouse=True)
def float64():
    with ad.precision("float64"):
        yield


# ---------------------------------------------------------------- examples

def test_add_backward_is_ones():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    ad.backward(ad.sum_all(ad.add(a, b)))
    assert a.grad.tolist() == [1.0, 1.0] and b.grad.tolist() == [1.0, 1.0]


def test_mul_product_rule():
    a, b = leaf([2.0, -3.0]), leaf([5.0, 7.0])
    ad.backward(ad.sum_all(ad.mul(a, b)))
    assert a.grad.tolist() == [5.0, 7.0] and b.grad.tolist() == [2.0, -3.0]


def test_linear_known_values():
    x = leaf([[1.0, 2.0]])
    W = leaf([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    b = leaf([0.5, 0.5, 0.5])
    y = ad.linear(x, W, b)
    assert y.data.tolist() == [[1.5, 2.5, 0.5]]
    ad.backward(ad.sum_all(y))
    assert x.grad.tolist() == [[3.0, 0.0]]
    assert W.grad.tolist() == [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]
    assert b.grad.tolist() == [1.0, 1.0, 1.0]


def test_max_routes_gradient_to_first_argmax_on_ties():
    x = leaf(np.array([[[1.0], [3.0], [3.0], [0.0]]]))
    y, arg = ad.max_over_axis(x, axis=1)
    assert y.data.tolist() == [[3.0]] and arg.tolist() == [[1]]
    ad.backward(ad.sum_all(y))
    assert x.grad.reshape(-1).tolist() == [0.0, 1.0, 0.0, 0.0]


def test_relu_gradient_zero_at_and_below_zero():
    x = leaf([-1.0, 0.0, 2.0])
    ad.backward(ad.sum_all(ad.relu(x)))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_gather_rows_scatter_adds_repeats():
    x = leaf(np.arange(6.0).reshape(3, 2))
    y = ad.gather_rows(x, np.array([2, 0, 2]))
    assert y.data.tolist() == [[4, 5], [0, 1], [4, 5]]
    ad.backward(ad.sum_all(y))
    assert x.grad.tolist() == [[1, 1], [0, 0], [2, 2]]


def test_expand_sums_back():
    x = leaf([[1.0, 2.0]])
    y = ad.expand(x, 1, 4)
    assert y.shape == (1, 4, 2)
    ad.backward(ad.sum_all(y))
    assert x.grad.tolist() == [[4.0, 4.0]]


def test_smooth_l1_values_and_slopes():
    x = leaf([0.004, -0.004, 0.5, -0.5])
    y = ad.smooth_l1(x)
    np.testing.assert_allclose(y.data, [0.002, 0.002, 0.495, 0.495])
    ad.backward(ad.sum_all(y))
    assert x.grad.tolist() == [0.5, -0.5, 1.0, -1.0]


def test_batch_norm_training_output_statistics():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(3.0, 2.0, (50, 4)))
    st_ = RunningStats.fresh(4)
    y = ad.batch_norm(x, leaf(np.ones(4)), leaf(np.zeros(4)), st_, True)
    np.testing.assert_allclose(y.data.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=0), x.data.var(axis=0) / (x.data.var(axis=0) + 1e-5), rtol=1e-10)
    # running stats: momentum 0.1 toward the unbiased batch variance
    np.testing.assert_allclose(st_.mean, 0.1 * x.data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(st_.var, 0.9 + 0.1 * x.data.var(axis=0, ddof=1), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    st_ = RunningStats(np.array([1.0]), np.array([4.0]))
    x = leaf([[3.0], [5.0]])
    y = ad.batch_norm(x, leaf([2.0]), leaf([1.0]), st_, training=False)
    np.testing.assert_allclose(y.data.ravel(), [1 + 2 * 2 / np.sqrt(4 + 1e-5), 1 + 2 * 4 / np.sqrt(4 + 1e-5)])


def test_fused_dense_bn_relu_matches_composition():
    rng = np.random.default_rng(5)
    x, W, b = leaf(rng.normal(size=(3, 7, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    g, be = leaf(rng.uniform(0.5, 1.5, 5)), leaf(rng.normal(size=5))
    fused = ad.dense_bn_relu(x, W, b, g, be, RunningStats.fresh(5))
    ref = ad.relu(ad.batch_norm(ad.linear(x, W, b), g, be, RunningStats.fresh(5)))
    np.testing.assert_allclose(fused.data, ref.data, atol=1e-12)
    pooled, arg = ad.dense_bn_relu_max(x, W, b, g, be, RunningStats.fresh(5))
    ref_pool, ref_arg = ad.max_over_axis(ref, axis=1)
    np.testing.assert_allclose(pooled.data, ref_pool.data, atol=1e-12)
    mask = ref_pool.data > 0
    assert (arg[mask] == ref_arg[mask]).all()


# ---------------------------------------------------------------- graph errors

def test_backward_twice_raises():
    a = leaf([1.0])
    loss = ad.sum_all(ad.mul(a, a))
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)


def test_constant_loss_raises():
    with pytest.raises(GraphError):
        ad.backward(Tensor(np.array(1.0)))


def test_non_scalar_loss_raises():
    with pytest.raises(GraphError):
        ad.backward(ad.add(leaf([1.0, 2.0]), leaf([1.0, 2.0])))


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        ad.add(leaf([1.0]), leaf([1.0, 2.0]))
    with pytest.raises(DimensionError):
        ad.linear(leaf(np.ones((2, 3))), leaf(np.ones((4, 2))))


def test_empty_max_region_raises():
    with pytest.raises(DimensionError):
        ad.max_over_axis(leaf(np.ones((2, 0, 3))), axis=1)


def test_unregistered_op_rejected():
    with pytest.raises(GraphError):
        ad._record(np.ones(1), (leaf([1.0]),), "mystery", lambda g, n: (g,))


def test_gradients_accumulate_over_reuse():
    a = leaf([3.0])
    ad.backward(ad.sum_all(ad.add(ad.mul(a, a), a)))  # d/da (a^2 + a) = 2a + 1
    assert a.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    a = leaf([1.0])
    with ad.no_grad():
        y = ad.mul(a, a)
    assert y.node is None and not y.requires_grad


def test_float32_default_precision():
    with ad.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x, W = leaf(rng.normal(size=(6, 3))), leaf(rng.normal(size=(3, 4)))
        g, b = leaf(np.ones(4)), leaf(np.zeros(4))
        y = ad.dense_bn_relu(x, W, leaf(np.zeros(4)), g, b, RunningStats.fresh(4))
        ad.backward(ad.sum_all(ad.smooth_l1(y)))
        return W.grad.tobytes(), x.grad.tobytes()
    assert run() == run()


# ---------------------------------------------------------------- finite differences

@pytest.mark.parametrize("op", ad.OPS)
def test_operator_gradcheck(op):
    r = diagnostics.check_op(op, seed=0)
    assert r.rel_error < 1e-4, r.line()


def test_gradcheck_report_lists_each_op_once():
    names = [r.name for r in diagnostics.check_ops(seed=1)]
    assert sorted(names) == sorted(ad.OPS) and len(set(names)) == len(names)


def test_perturbed_backward_is_detected():
    with ad.grad_hook("linear", diagnostics.perturbing_hook()):
        r = diagnostics.check_op("linear")
    assert not r.passed


# ---------------------------------------------------------------- conservation properties

@given(st.integers(0, 10_000))
def test_expand_then_sum_conserves_gradient_mass(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, 3)))
    n = int(rng.integers(1, 6))
    G = rng.normal(size=(2, n, 3))
    ad.backward(ad.sum_all(ad.mul(ad.expand(x, 1, n), Tensor(G))))
    np.testing.assert_allclose(x.grad, G.sum(axis=1), atol=1e-12)


@given(st.integers(0, 10_000))
def test_gather_gradient_total_equals_upstream_total(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(5, 2)))
    idx = rng.integers(0, 5, size=(3, 4))
    G = rng.normal(size=(3, 4, 2))
    ad.backward(ad.sum_all(ad.mul(ad.gather_rows(x, idx), Tensor(G))))
    np.testing.assert_allclose(x.grad.sum(axis=0), G.reshape(-1, 2).sum(axis=0), atol=1e-12)
