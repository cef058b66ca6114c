import numpy as np
import pytest

from leakseg import autodiff as ad

from .conftest import check_gradients


def T(x, grad=False):
    return ad.Tensor(x, requires_grad=grad)


class TestForward:
    def test_matmul_identity(self):
        out = ad.matmul(T([[1, 0], [0, 1]]), T([[3], [4]]))
        assert out.data.tolist() == [[3], [4]]

    def test_softmax_symmetric(self):
        assert ad.softmax(T([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_softmax_large_logits_stable(self):
        out = ad.softmax(T([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]], atol=1e-300)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            ad.add(T([1.0, 2.0]), T([1.0, 2.0, 3.0]))
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    def test_no_broadcasting(self):
        with pytest.raises(ValueError):
            ad.mul(T(np.ones((2, 2))), T(np.ones((1, 2))))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_is_an_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(T([0.0, 1.0]))
        with pytest.raises(ad.NonFiniteError):
            ad.scale(T([1e308]), 10.0)

    def test_log_floor_clips(self):
        out = ad.log(T([0.0, 1.0]), floor=1e-12)
        assert out.data[0] == pytest.approx(np.log(1e-12))

    def test_tensor_is_immutable(self):
        t = T([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_reshape_error(self):
        with pytest.raises(ValueError, match="reshape"):
            ad.reshape(T(np.ones(6)), (4, 2))


class TestBackward:
    def test_quadratic(self):
        x = T([1.0, 2.0], grad=True)
        (g,) = ad.grad(ad.sum_(ad.mul(x, x)), [x])
        assert g.tolist() == [2.0, 4.0]

    def test_relu_gate(self):
        x = T([-1.0, 1.0], grad=True)
        (g,) = ad.grad(ad.mean(ad.relu(x)), [x])
        assert g.tolist() == [0.0, 0.5]

    def test_abs_sum_sign(self):
        x = T([2.0, -3.0], grad=True)
        (g,) = ad.grad(ad.sum_(ad.abs_(x)), [x])
        assert g.tolist() == [1.0, -1.0]

    def test_abs_kink_is_zero(self):
        x = T([0.0, 1.0], grad=True)
        (g,) = ad.grad(ad.sum_(ad.abs_(x)), [x])
        assert g.tolist() == [0.0, 1.0]

    def test_non_scalar_root_rejected(self):
        x = T([1.0, 2.0], grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.grad(ad.scale(x, 2.0), [x])

    def test_unreachable_leaf_gets_zero(self):
        x = T([1.0, 2.0], grad=True)
        y = T([[3.0]], grad=True)
        (gx, gy) = ad.grad(ad.sum_(x), [x, y])
        assert gx.tolist() == [1.0, 1.0]
        assert gy.tolist() == [[0.0]]

    def test_backward_populates_leaves(self):
        x = T([3.0], grad=True)
        ad.backward(ad.sum_(ad.mul(x, x)))
        assert x.grad.tolist() == [6.0]

    def test_shared_subgraph_visited_once(self):
        x = T([2.0], grad=True)
        y = ad.mul(x, x)
        z = ad.sum_(ad.add(y, y))  # 2 x^2
        (g,) = ad.grad(z, [x])
        assert g.tolist() == [8.0]

    def test_deterministic(self, rng):
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((4, 3))

        def run():
            x, w = T(a, True), T(b, True)
            return ad.grad(ad.sum_(ad.log(ad.softmax(ad.matmul(x, w)))), [x, w])

        g1, g2 = run(), run()
        for u, v in zip(g1, g2):
            assert np.array_equal(u, v)

    def test_deep_chain_no_recursion_limit(self):
        x = T([1.0], grad=True)
        y = x
        for _ in range(5000):
            y = ad.scale(y, 1.0)
        (g,) = ad.grad(ad.sum_(y), [x])
        assert g.tolist() == [1.0]


# every registered op, scalarized by a fixed random weighting so no gradient is trivially zero
def _cases(rng):
    def weigh(t, w):
        return ad.sum_(ad.mul(t, T(w)))

    n, k = 4, 3
    W = rng.standard_normal((n, k))
    cases = {
        "add": (lambda a, b: weigh(ad.add(a, b), W), [rng.standard_normal((n, k)), rng.standard_normal((n, k))]),
        "sub": (lambda a, b: weigh(ad.sub(a, b), W), [rng.standard_normal((n, k)), rng.standard_normal((n, k))]),
        "mul": (lambda a, b: weigh(ad.mul(a, b), W), [rng.standard_normal((n, k)), rng.standard_normal((n, k))]),
        "div": (
            lambda a, b: weigh(ad.div(a, b), W),
            [rng.standard_normal((n, k)), rng.uniform(0.5, 2.0, (n, k)) * rng.choice([-1, 1], (n, k))],
        ),
        "matmul": (
            lambda a, b: weigh(ad.matmul(a, b), W[:, :2]),
            [rng.standard_normal((n, k)), rng.standard_normal((k, 2))],
        ),
        # keep inputs away from the kink so the finite difference is smooth
        "relu": (lambda a: weigh(ad.relu(a), W), [rng.uniform(0.1, 1, (n, k)) * rng.choice([-1, 1], (n, k))]),
        "softmax": (lambda a: weigh(ad.softmax(a), W), [rng.standard_normal((n, k))]),
        "log": (lambda a: weigh(ad.log(a), W), [rng.uniform(0.2, 3.0, (n, k))]),
        "abs": (lambda a: weigh(ad.abs_(a), W), [rng.uniform(0.1, 1, (n, k)) * rng.choice([-1, 1], (n, k))]),
        "sum": (lambda a: weigh(ad.sum_(a, axis=1), W[:, 0]), [rng.standard_normal((n, k))]),
        "mean": (lambda a: weigh(ad.mean(a, axis=0), W[0]), [rng.standard_normal((n, k))]),
        "scale": (lambda a: weigh(ad.scale(a, -2.5), W), [rng.standard_normal((n, k))]),
        "reshape": (lambda a: weigh(ad.reshape(a, (k, n)), W.T), [rng.standard_normal((n, k))]),
    }
    return cases


@pytest.mark.parametrize("op", ad.REGISTERED_OPS)
def test_op_gradient_matches_finite_differences(op):
    """100 random points per op, central differences with step 1e-5."""
    rng = np.random.default_rng(sum(map(ord, op)))
    worst = 0.0
    for _ in range(100):
        build, arrays = _cases(rng)[op]
        worst = max(worst, check_gradients(build, arrays))
    assert worst < 1e-4


def test_every_registered_op_has_a_case(rng):
    assert set(_cases(rng)) == set(ad.REGISTERED_OPS)
