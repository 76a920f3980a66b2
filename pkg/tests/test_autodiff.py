import numpy as np
import pytest

from cimsim import autodiff as ad
from cimsim.autodiff import (
    Tape,
    backward,
    constant,
    logsumexp_rows,
    parameter,
    pick,
    record,
    take,
)

RNG = np.random.default_rng(7)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def check_scalar_output(build, x, rtol=1e-5, atol=1e-9):
    """`build(node) -> scalar node`; compares tape gradient to central FD."""
    tape = Tape()
    x_n = parameter(tape, x)
    out = build(x_n)
    grads = backward(tape, out)
    got = grads[x_n.node]

    def f(xv):
        t = Tape()
        return float(build(parameter(t, xv)).value)

    np.testing.assert_allclose(got, numeric_grad(f, x), rtol=rtol, atol=atol)


class TestElementwiseOps:
    def test_exp(self):
        check_scalar_output(lambda n: ad.sum_along(ad.exp(n), None),
                            RNG.uniform(-1, 1, (3, 4)))

    def test_log(self):
        check_scalar_output(lambda n: ad.sum_along(ad.log(n), None),
                            RNG.uniform(0.5, 2.0, (3, 4)))

    def test_sinh(self):
        check_scalar_output(lambda n: ad.sum_along(ad.sinh(n), None),
                            RNG.uniform(-1, 1, (5,)))

    def test_tanh(self):
        check_scalar_output(lambda n: ad.sum_along(ad.tanh(n), None),
                            RNG.uniform(-2, 2, (5,)))

    def test_softplus(self):
        check_scalar_output(lambda n: ad.sum_along(ad.softplus(n), None),
                            RNG.uniform(-3, 3, (6,)))

    def test_relu_away_from_kink(self):
        x = np.array([-2.0, -0.5, 0.5, 2.0])
        check_scalar_output(lambda n: ad.sum_along(ad.relu(n), None), x)

    def test_relu_subgradient_zero_at_zero(self):
        tape = Tape()
        x_n = parameter(tape, np.array([0.0]))
        out = ad.sum_along(ad.relu(x_n), None)
        assert backward(tape, out)[x_n.node][0] == 0.0

    def test_affine(self):
        check_scalar_output(lambda n: ad.sum_along(ad.affine(n, 2.5, -1.0), None),
                            RNG.uniform(-1, 1, (4,)))


class TestArithmetic:
    def test_add_mul_neg_chain(self):
        x = RNG.uniform(-1, 1, (3,))

        def build(n):
            return ad.sum_along((n + n * n) - (-n), None)

        check_scalar_output(build, x)

    def test_mul_broadcast(self):
        a = RNG.uniform(-1, 1, (3, 4))
        b = RNG.uniform(-1, 1, (4,))
        tape = Tape()
        a_n, b_n = parameter(tape, a), parameter(tape, b)
        out = ad.sum_along(a_n * b_n, None)
        grads = backward(tape, out)
        np.testing.assert_allclose(grads[a_n.node], np.broadcast_to(b, (3, 4)))
        np.testing.assert_allclose(grads[b_n.node], a.sum(axis=0))

    def test_matmul(self):
        a = RNG.uniform(-1, 1, (3, 4))
        b = RNG.uniform(-1, 1, (4, 2))
        tape = Tape()
        a_n, b_n = parameter(tape, a), parameter(tape, b)
        out = ad.sum_along(ad.matmul(a_n, b_n), None)
        grads = backward(tape, out)
        np.testing.assert_allclose(grads[a_n.node], np.ones((3, 2)) @ b.T)
        np.testing.assert_allclose(grads[b_n.node], a.T @ np.ones((3, 2)))


class TestStructuralOps:
    def test_reshape_transpose(self):
        x = RNG.uniform(-1, 1, (2, 6))

        def build(n):
            n = ad.reshape(n, (2, 3, 2))
            n = ad.transpose(n, (2, 0, 1))
            return ad.sum_along(n * n, None)

        check_scalar_output(build, x)

    def test_take_scatters_gradient(self):
        x = RNG.uniform(-1, 1, (5,))
        idx = np.array([0, 2, 2, 4])
        tape = Tape()
        x_n = parameter(tape, x)
        out = ad.sum_along(take(x_n, idx, idx.shape), None)
        g = backward(tape, out)[x_n.node]
        np.testing.assert_allclose(g, [1.0, 0.0, 2.0, 0.0, 1.0])

    def test_pick(self):
        x = RNG.uniform(-1, 1, (3, 4))
        rows = np.arange(3)
        cols = np.array([1, 0, 3])
        tape = Tape()
        x_n = parameter(tape, x)
        out = ad.sum_along(pick(x_n, rows, cols), None)
        g = backward(tape, out)[x_n.node]
        expect = np.zeros((3, 4))
        expect[rows, cols] = 1.0
        np.testing.assert_allclose(g, expect)

    def test_sum_axis(self):
        x = RNG.uniform(-1, 1, (2, 3, 4))
        check_scalar_output(
            lambda n: ad.sum_along(ad.tanh(ad.sum_along(n, 1)), None), x)

    def test_logsumexp_rows(self):
        z = RNG.uniform(-2, 2, (4, 5))
        tape = Tape()
        z_n = parameter(tape, z)
        out = ad.sum_along(logsumexp_rows(z_n), None)
        g = backward(tape, out)[z_n.node]
        softmax = np.exp(z - z.max(1, keepdims=True))
        softmax /= softmax.sum(1, keepdims=True)
        np.testing.assert_allclose(g, softmax, rtol=1e-12)
        np.testing.assert_allclose(
            out.value, np.log(np.exp(z).sum(1)).sum(), rtol=1e-12)


class TestTapeSemantics:
    def test_constants_get_no_gradient(self):
        tape = Tape()
        c = constant(tape, np.ones(3))
        p = parameter(tape, np.ones(3))
        out = ad.sum_along(c * p, None)
        grads = backward(tape, out)
        assert p.node in grads and c.node not in grads

    def test_seed_scales_gradient(self):
        tape = Tape()
        p = parameter(tape, np.array([2.0]))
        out = p * p
        g = backward(tape, out, seed=np.array([3.0]))[p.node]
        np.testing.assert_allclose(g, [12.0])

    def test_unknown_op_rejected(self):
        tape = Tape()
        p = parameter(tape, np.ones(2))
        with pytest.raises(Exception):
            record("definitely_not_an_op", p)

    def test_mixed_tape_nodes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = parameter(t1, np.ones(2))
        b = parameter(t2, np.ones(2))
        with pytest.raises(Exception):
            _ = a + b
