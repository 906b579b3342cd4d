import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnikit import autodiff as ad
from omnikit.autodiff import Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_orthogonal_rows():
    out = ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_value_and_adjoints_match_triple_loop(rng, f64):
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    g0 = rng.normal(size=(3, 2))
    a, b = Tensor(a0, True), Tensor(b0, True)
    out = ad.matmul(a, b)
    np.testing.assert_allclose(out.data, naive_matmul(a0, b0), atol=1e-12)
    ad.backward(ad.sum_(out * Tensor(g0)))
    np.testing.assert_allclose(a.grad, naive_matmul(g0, b0.T), atol=1e-12)
    np.testing.assert_allclose(b.grad, naive_matmul(a0.T, g0), atol=1e-12)


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_matmul_batched_broadcast_grads(rng, f64):
    a = Tensor(rng.normal(size=(2, 3, 4)), True)
    b = Tensor(rng.normal(size=(4, 5)), True)
    rep = ad.grad_check(lambda: ad.sum_(ad.matmul(a, b) ** 2), {"a": a, "b": b})
    assert rep.passed, rep.summary()


# -- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_large_logits_do_not_overflow(f64):
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_direct_formula(f64):
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, direct, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_positive_and_normalized(values):
    out = ad.softmax(Tensor(np.array(values))).data
    assert np.all(out > 0)
    assert abs(out.sum() - 1.0) < 1e-5


# -- backward ---------------------------------------------------------------


@pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 1, 3, 2)])
def test_grad_of_sum_is_ones(shape):
    x = Tensor(np.random.default_rng(0).normal(size=shape), True)
    ad.backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_grad_of_mean_square(f64):
    x = Tensor([1.0, 2.0], True)
    ad.backward(ad.mean(x * x))
    np.testing.assert_allclose(x.grad, [1.0, 2.0], atol=1e-15)


def test_grad_of_sigmoid_at_zero():
    x = Tensor([0.0], True)
    ad.backward(ad.sum_(ad.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_backward_rejects_unconnected_loss():
    with pytest.raises(ValueError):
        ad.backward(ad.sum_(Tensor(np.ones(3))))


def test_repeated_backward_accumulates(f64):
    x = Tensor([1.0, -2.0, 3.0], True)
    ad.backward(ad.sum_(x * x))
    first = x.grad.copy()
    ad.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_visits_each_node_once(f64):
    # diamond: y used twice; a double visit would double-count its adjoint
    x = Tensor([2.0], True)
    y = x * 3.0
    z = y * y + y
    tape = ad.Tape.from_output(z)
    assert len({id(t) for t in tape.records}) == len(tape.records)
    ad.backward(ad.sum_(z))
    assert x.grad[0] == pytest.approx(3 * (2 * 6.0 + 1))


def test_linearity_of_adjoints(rng, f64):
    x0 = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 2)))

    def l1(x):
        return ad.sum_(ad.sigmoid(ad.matmul(x, w)))

    def l2(x):
        return ad.mean(ad.exp(x * 0.3))

    xa = Tensor(x0, True)
    ad.backward(l1(xa) + l2(xa))
    xb = Tensor(x0, True)
    ad.backward(l1(xb))
    g1 = xb.grad.copy()
    xb.zero_grad()
    ad.backward(l2(xb))
    np.testing.assert_allclose(xa.grad, g1 + xb.grad, atol=1e-12)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), True)
    with ad.no_grad():
        y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_forward_is_bit_identical_across_runs(rng):
    x = rng.normal(size=(2, 3, 6, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ad.softmax(ad.conv2d_valid(Tensor(x), Tensor(w)), axis=1).data
    b = ad.softmax(ad.conv2d_valid(Tensor(x), Tensor(w)), axis=1).data
    assert a.tobytes() == b.tobytes()


def test_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with ad.precision(64):
        assert Tensor([1.0]).dtype == np.float64
    assert ad.get_precision() == 32
    with pytest.raises(ValueError):
        ad.set_precision(16)


# -- primitives vs finite differences on random shapes -------------------------


def _random_shapes(seed, n=50):
    r = np.random.default_rng(seed)
    return [tuple(int(s) for s in r.integers(1, 5, size=r.integers(1, 5))) for _ in range(n)]


def _unary_cases():
    return {
        "exp": lambda x: ad.exp(x),
        "log": lambda x: ad.log(ad.abs_(x) + 0.5),
        "relu": lambda x: ad.relu(x),
        "sigmoid": lambda x: ad.sigmoid(x),
        "scale": lambda x: ad.scale(x, -1.7),
        "sum_axis0": lambda x: ad.sum_(x, axis=0),
        "mean_last": lambda x: ad.mean(x, axis=-1, keepdims=True),
        "reshape": lambda x: ad.reshape(x, (-1,)),
        "slice": lambda x: x[..., ::2],
        "pad_zero": lambda x: ad.pad(x, [(1, 2)] * x.ndim, "zero"),
        "pad_circular": lambda x: ad.pad(x, [(1, 1)] * x.ndim, "circular"),
        "concat": lambda x: ad.concat([x, x * 2.0], axis=-1),
        "softmax": lambda x: ad.softmax(x, axis=-1),
        "amax": lambda x: ad.amax(x),
        "power": lambda x: ad.power(ad.abs_(x) + 1.0, 1.5),
    }


@pytest.mark.parametrize("name", list(_unary_cases()))
def test_unary_primitive_adjoints_on_50_shapes(name, f64):
    op = _unary_cases()[name]
    for k, shape in enumerate(_random_shapes(hash(name) % 1000)):
        r = np.random.default_rng(k)
        x = Tensor(r.normal(size=shape), True)
        readout = None

        def f():
            nonlocal readout
            out = op(x)
            if readout is None:
                readout = Tensor(np.random.default_rng(k + 1).normal(size=out.shape))
            return ad.sum_(out * readout)

        rep = ad.grad_check(f, {"x": x})
        assert rep.passed, f"{name} {shape}: {rep.summary()}"


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "maximum"])
def test_binary_primitive_adjoints_on_50_shapes(name, f64):
    op = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": lambda a, b: ad.div(a, ad.abs_(b) + 0.5),
          "maximum": ad.maximum}[name]
    for k, shape in enumerate(_random_shapes(7)):
        r = np.random.default_rng(k)
        a = Tensor(r.normal(size=shape), True)
        # broadcast the second operand over the leading axis
        b = Tensor(r.normal(size=(1,) + shape[1:]), True)
        w = Tensor(r.normal(size=shape))
        rep = ad.grad_check(lambda: ad.sum_(op(a, b) * w), {"a": a, "b": b})
        assert rep.passed, f"{name} {shape}: {rep.summary()}"


def test_take_adjoint_accumulates_repeats(f64):
    x = Tensor(np.arange(4.0), True)
    ad.backward(ad.sum_(ad.take(x, [[0, 0], [3, 1]])))
    np.testing.assert_array_equal(x.grad, [2.0, 1.0, 0.0, 1.0])


def test_pad_replicate_values():
    out = ad.pad(Tensor(np.array([1.0, 2.0, 3.0])), [(2, 1)], "replicate").data
    np.testing.assert_array_equal(out, [1, 1, 1, 2, 3, 3])


def test_pad_circular_values():
    out = ad.pad(Tensor(np.array([1.0, 2.0, 3.0])), [(1, 2)], "circular").data
    np.testing.assert_array_equal(out, [3, 1, 2, 3, 1, 2])


def test_relu_adjoint_zero_at_kink():
    x = Tensor([0.0, 1.0, -1.0], True)
    ad.backward(ad.sum_(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


# -- grad_check harness ---------------------------------------------------------


def test_grad_check_linear_function_has_zero_error(rng, f64):
    x = Tensor(rng.normal(size=(3, 5)), True)
    rep = ad.grad_check(lambda: ad.sum_(x), {"x": x})
    assert rep.passed
    assert rep.max_rel_error["x"] < 1e-9


def test_grad_check_requires_64_bit():
    x = Tensor([1.0], True)
    with pytest.raises(RuntimeError, match="64-bit"):
        ad.grad_check(lambda: ad.sum_(x), {"x": x})


def test_grad_check_detects_wrong_adjoint(f64):
    x = Tensor([0.3, -0.4], True)

    def broken_square(t):
        return ad._make(t.data**2, "broken", (t,), lambda g: (g * t.data,))  # missing factor 2

    rep = ad.grad_check(lambda: ad.sum_(broken_square(x)), {"x": x})
    assert not rep.passed


def test_grad_check_reports_nonfinite_coordinates(f64):
    x = Tensor([1e-7, 1.0], True)
    rep = ad.grad_check(lambda: ad.sum_(ad.log(x)), {"x": x}, eps=1e-6)
    assert rep.nonfinite["x"] == [0]
    assert not rep.passed


def test_grad_check_skips_kinks(f64):
    x = Tensor([0.0, 2e-7, 0.8], True)
    rep = ad.grad_check(lambda: ad.sum_(ad.relu(x)), {"x": x})
    assert rep.passed
    assert rep.skipped_kinks["x"] == 2
    assert rep.checked["x"] == 1


def test_grad_check_does_not_mistake_curvature_for_kinks(rng, f64):
    x = Tensor(rng.normal(size=(20,)), True)
    rep = ad.grad_check(lambda: ad.sum_(ad.exp(x)), {"x": x})
    assert rep.passed and rep.skipped_kinks["x"] == 0


def test_grad_check_rejects_non_scalar(f64):
    x = Tensor([1.0, 2.0], True)
    with pytest.raises(ValueError):
        ad.grad_check(lambda: x * 2.0, {"x": x})
