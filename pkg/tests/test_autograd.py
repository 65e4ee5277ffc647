import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmdistill.autograd import LOG_GUARD, Graph, GraphError, NonDifferentiableError, fd_gradient
from mmdistill.tensor import Tensor


def naive_conv(x, w, b, stride, pad):
    """Direct loop cross-correlation, the reference for conv2d."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[oc, i, j] = np.sum(patch * w[oc]) + (b[oc] if b is not None else 0.0)
    return out


def check_grads(build, bindings, rtol=1e-6, atol=1e-8, eps=1e-6):
    """Compare every leaf gradient of a scalar graph with central differences."""
    g = Graph()
    out = build(g)
    g.output("y", out)
    g.forward(bindings)
    grads = g.backward("y")
    for name, value in bindings.items():

        def f(v, name=name):
            return g.forward({**bindings, name: v})["y"].item()

        num = fd_gradient(f, value, eps, detect_kinks=False).data
        np.testing.assert_allclose(grads[name].data, num, rtol=rtol, atol=atol, err_msg=name)


class TestForwardValues:
    def test_conv_matches_naive_loop(self, rng):
        x = rng.normal(size=(3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride in (1, 2):
            g = Graph()
            out = g.conv2d(g.input("x", x.shape), g.input("w", w.shape), g.input("b", b.shape), stride=stride)
            g.output("y", out)
            got = g.forward({"x": x, "w": w, "b": b})["y"].data
            np.testing.assert_allclose(got, naive_conv(x, w, b, stride, 1), atol=1e-12)

    def test_conv_output_shape(self):
        g = Graph()
        y = g.conv2d(g.input("x", (2, 12, 12)), g.input("w", (5, 2, 3, 3)), stride=2)
        assert y.shape == (5, 6, 6)

    def test_softmax_temperature(self):
        g = Graph()
        x = g.input("x", (3,))
        g.output("y", g.softmax(x, temperature=2.0))
        got = g.forward({"x": [0.0, 2.0, 4.0]})["y"].data
        e = np.exp([0.0, 1.0, 2.0])
        np.testing.assert_allclose(got, e / e.sum())

    def test_log_guard(self):
        g = Graph()
        x = g.input("x", (2,))
        g.output("y", g.log(x))
        got = g.forward({"x": [0.0, 1.0]})["y"].data
        assert got[0] == pytest.approx(np.log(LOG_GUARD))
        assert got[1] == 0.0

    def test_dense_and_pools(self, rng):
        x = rng.normal(size=(2, 4, 4))
        g = Graph()
        xi = g.input("x", x.shape)
        g.output("gap", g.global_avg_pool(xi))
        g.output("cm", g.channel_mean(xi))
        g.output("ap", g.avg_pool(xi, 2))
        out = g.forward({"x": x})
        np.testing.assert_allclose(out["gap"].data, x.mean(axis=(1, 2)))
        np.testing.assert_allclose(out["cm"].data, x.mean(axis=0))
        np.testing.assert_allclose(out["ap"].data, x.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4)))

    def test_l2_norm_floor(self):
        g = Graph()
        x = g.input("x", (3,))
        g.output("n", g.l2_norm(x, floor=0.5))
        assert g.forward({"x": [0.0, 0.0, 0.0]})["n"].item() == 0.5
        assert g.forward({"x": [3.0, 4.0, 0.0]})["n"].item() == 5.0


class TestGradients:
    """Analytic adjoints against central differences, one primitive at a time."""

    @pytest.mark.parametrize("op", ["exp", "sigmoid", "swish", "log"])
    def test_unary(self, op, rng):
        x = rng.uniform(0.2, 2.0, size=(2, 3))
        check_grads(lambda g: g.sum(getattr(g, op)(g.input("x", x.shape))), {"x": x})

    @pytest.mark.parametrize("op", ["abs", "relu"])
    def test_piecewise_away_from_kink(self, op, rng):
        x = rng.uniform(0.3, 1.0, size=5) * rng.choice([-1, 1], size=5)
        check_grads(lambda g: g.sum(getattr(g, op)(g.input("x", x.shape))), {"x": x})

    def test_binary_and_scalar_broadcast(self, rng):
        a, b, s = rng.normal(size=4), rng.normal(size=4), np.array(1.7)

        def build(g):
            ai, bi, si = g.input("a", (4,)), g.input("b", (4,)), g.input("s", ())
            y = g.mul(g.sub(g.add(ai, bi), g.scale(bi, 0.3)), si)
            return g.sum(g.mul(y, ai))

        check_grads(build, {"a": a, "b": b, "s": s})

    def test_pow(self, rng):
        x = rng.uniform(0.5, 2.0, size=6)
        for p in (2.0, 0.5, -1.0, 3.0):
            check_grads(lambda g, p=p: g.sum(g.pow(g.input("x", (6,)), p)), {"x": x})

    def test_softmax(self, rng):
        x, w = rng.normal(size=5), rng.normal(size=5)
        check_grads(
            lambda g: g.sum(g.mul(g.softmax(g.input("x", (5,)), 3.0), g.constant(w))), {"x": x}
        )

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d(self, stride, rng):
        x = rng.normal(size=(2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        probe = rng.normal(size=naive_conv(x, w, b, stride, 1).shape)

        def build(g):
            y = g.conv2d(g.input("x", x.shape), g.input("w", w.shape), g.input("b", b.shape), stride=stride)
            return g.sum(g.mul(y, g.constant(probe)))

        check_grads(build, {"x": x, "w": w, "b": b})

    def test_dense_batched(self, rng):
        x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
        probe = rng.normal(size=(2, 4))
        check_grads(
            lambda g: g.sum(g.mul(g.dense(g.input("x", (2, 3)), g.input("w", (3, 4)), g.input("b", (4,))), g.constant(probe))),
            {"x": x, "w": w, "b": b},
        )

    def test_reductions_reshape_concat(self, rng):
        x, y = rng.normal(size=(2, 2, 2)), rng.normal(size=(1, 2, 2))
        probe = rng.normal(size=(3, 2, 2))

        def build(g):
            xi, yi = g.input("x", x.shape), g.input("y", y.shape)
            cat = g.concat([xi, yi])
            flat = g.reshape(g.mul(cat, g.constant(probe)), (12,))
            parts = [g.sum(flat), g.mean(g.channel_mean(cat)), g.l2_norm(xi), g.sum(g.avg_pool(cat, 2))]
            acc = parts[0]
            for p in parts[1:]:
                acc = g.add(acc, p)
            return g.add(acc, g.sum(g.global_avg_pool(yi)))

        check_grads(build, {"x": x, "y": y})

    def test_shared_subexpression_accumulates(self):
        def build(g):
            x = g.input("x", (1,))
            return g.sum(g.mul(x, x))

        check_grads(build, {"x": np.array([1.5])})


class TestErrors:
    def test_shape_mismatch_names_node(self):
        g = Graph()
        with pytest.raises(GraphError, match="my_add"):
            g.add(g.input("a", (2,)), g.input("b", (3,)), name="my_add")

    def test_no_general_broadcasting(self):
        g = Graph()
        with pytest.raises(GraphError):
            g.mul(g.input("a", (2, 3)), g.input("b", (3,)))

    def test_bound_shape_checked(self):
        g = Graph()
        g.output("y", g.sum(g.input("x", (2,))))
        with pytest.raises(GraphError, match="x"):
            g.forward({"x": np.zeros(3)})

    def test_unbound_leaf(self):
        g = Graph()
        g.output("y", g.sum(g.input("x", (2,))))
        with pytest.raises(GraphError, match="unbound"):
            g.forward({})

    def test_backward_before_forward(self):
        g = Graph()
        g.output("y", g.sum(g.input("x", (2,))))
        with pytest.raises(GraphError):
            g.backward("y")

    def test_backward_needs_scalar(self):
        g = Graph()
        g.output("y", g.exp(g.input("x", (2,))))
        g.forward({"x": np.zeros(2)})
        with pytest.raises(GraphError, match="scalar"):
            g.backward("y")

    def test_non_finite_forward(self):
        g = Graph()
        g.output("y", g.sum(g.exp(g.input("x", (1,)), name="blowup")))
        with pytest.raises(GraphError, match="blowup"):
            g.forward({"x": [1e4]})

    def test_foreign_node(self):
        g1, g2 = Graph(), Graph()
        x = g1.input("x", (1,))
        with pytest.raises(GraphError):
            g2.exp(x)


class TestFdGradient:
    def test_quadratic(self):
        grad = fd_gradient(lambda t: float(np.sum(t.data**2)), np.array([1.0, -2.0]))
        np.testing.assert_allclose(grad.data, [2.0, -4.0], atol=1e-8)

    def test_kink_detected(self):
        with pytest.raises(NonDifferentiableError):
            fd_gradient(lambda t: float(np.abs(t.data).sum()), np.array([0.0]))

    def test_smooth_not_flagged(self):
        grad = fd_gradient(lambda t: float(np.sum(np.sin(t.data))), np.array([0.3, 1.1]), 1e-3)
        np.testing.assert_allclose(grad.data, np.cos([0.3, 1.1]), rtol=1e-6)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=5))
    def test_linear_exact(self, coeffs):
        c = np.array(coeffs)
        grad = fd_gradient(lambda t: float(c @ t.data), np.zeros_like(c), detect_kinks=False)
        np.testing.assert_allclose(grad.data, c, atol=1e-9)

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            fd_gradient(lambda t: 0.0, np.zeros(1), epsilon=0.0)


class TestReuse:
    def test_forward_is_repeatable(self, rng):
        g = Graph()
        x = g.input("x", (4,))
        g.output("y", g.sum(g.swish(x)))
        v = rng.normal(size=4)
        assert g.forward({"x": v})["y"] == g.forward({"x": v})["y"]

    def test_outputs_are_tensors(self):
        g = Graph()
        g.output("y", g.sum(g.input("x", (2,))))
        assert isinstance(g.forward({"x": [1.0, 2.0]})["y"], Tensor)
