import math

import numpy as np
import pytest

from cascade_draft import numerics as nx
from cascade_draft.numerics import DimensionError, GradTape, ParameterError, TapeError, Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f over every entry of array x (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(build, *arrays, tol=1e-6):
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with GradTape():
        out = build(*tensors)
    nx.backward(out)
    for t in tensors:
        num = numeric_grad(lambda: build(*tensors).item(), t.data)
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


class TestForwardValues:
    def test_smooth_l1_points(self):
        out = nx.smooth_l1(Tensor([0.5, -2.0, 0.0, 1.0], dtype=np.float64)).data
        np.testing.assert_allclose(out, [0.125, 1.5, 0.0, 0.5], atol=1e-12)

    def test_cross_entropy_one_hot(self):
        q = np.array([0.1, 0.2, 0.3, 0.4])
        for j in range(4):
            p = np.eye(4)[j]
            assert nx.cross_entropy(p, Tensor(q, dtype=np.float64)).item() == pytest.approx(-math.log(q[j]), abs=1e-12)

    def test_cross_entropy_zero_teacher_entries_ignored(self):
        p = np.array([0.0, 1.0])
        q = Tensor([0.0, 1.0], dtype=np.float64)
        assert nx.cross_entropy(p, q).item() == 0.0

    def test_cross_entropy_keeps_leading_axes(self):
        p = np.full((2, 3, 4), 0.25)
        q = Tensor(np.full((2, 3, 4), 0.25), dtype=np.float64)
        out = nx.cross_entropy(p, q)
        assert out.shape == (2, 3)
        np.testing.assert_allclose(out.data, math.log(4))

    def test_softmax_matches_high_precision_reference(self, rng):
        x = rng.normal(size=(3, 7)) * 20
        ref = np.exp(x - x.max(axis=1, keepdims=True))
        ref /= ref.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(nx.softmax(Tensor(x, dtype=np.float64)).data, ref, rtol=1e-12)

    def test_softmax_temperature_and_mask(self):
        x = Tensor([0.0, math.log(3.0), 5.0], dtype=np.float64)
        out = nx.softmax(x, temperature=1.0, mask=np.array([True, True, False])).data
        np.testing.assert_allclose(out, [0.25, 0.75, 0.0], atol=1e-12)
        with pytest.raises(ParameterError):
            nx.softmax(x, temperature=0.0)

    def test_matmul_against_triple_loop(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        ref = np.zeros((2, 3, 5))
        for n in range(2):
            for i in range(3):
                for j in range(5):
                    ref[n, i, j] = sum(a[n, i, k] * b[k, j] for k in range(4))
        np.testing.assert_allclose(nx.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data,
                                   ref, rtol=1e-12)

    def test_matmul_vector_row(self, rng):
        a, b = rng.normal(size=4), rng.normal(size=(4, 3))
        assert nx.matmul(Tensor(a), Tensor(b)).shape == (3,)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_rms_norm_unit_weight(self):
        x = np.array([[3.0, 4.0]])
        out = nx.rms_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(2), dtype=np.float64), 0.0).data
        np.testing.assert_allclose(out, x / math.sqrt(12.5))

    def test_float32_default(self):
        assert Tensor([1, 2]).dtype == np.float32


class TestGradients:
    def test_elementwise(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_grad(lambda x, y: nx.sum(nx.mul(nx.add(x, y), nx.sub(x, y))), a, b)

    def test_gelu_and_smooth_l1(self, rng):
        a = rng.normal(size=(5,)) * 2
        check_grad(lambda x: nx.sum(nx.smooth_l1(nx.gelu(x))), a)

    def test_matmul_batched(self, rng):
        check_grad(lambda x, w: nx.sum(nx.gelu(nx.matmul(x, w))), rng.normal(size=(2, 3, 4)),
                   rng.normal(size=(4, 2)))

    def test_softmax_cross_entropy(self, rng):
        p = rng.dirichlet(np.ones(6), size=3)
        check_grad(lambda z: nx.mean(nx.cross_entropy(p, nx.softmax(z, temperature=0.7))), rng.normal(size=(3, 6)))

    def test_rms_norm(self, rng):
        check_grad(lambda x, w: nx.sum(nx.mul(nx.rms_norm(x, w, 1e-5), x)), rng.normal(size=(2, 5)),
                   rng.normal(size=(5,)))

    def test_shape_ops(self, rng):
        def f(x, y):
            z = nx.concat([nx.transpose(x, (1, 0)), y], axis=-1)
            return nx.sum(nx.mul(nx.reshape(z, (-1,)), nx.reshape(z, (-1,))))
        check_grad(f, rng.normal(size=(2, 3)), rng.normal(size=(3, 1)))

    def test_take_and_embedding_accumulate(self, rng):
        w = rng.normal(size=(4, 3))
        check_grad(lambda t: nx.sum(nx.gelu(nx.embedding(t, np.array([[0, 2, 2], [1, 2, 0]])))), w)
        check_grad(lambda t: nx.sum(nx.gelu(nx.take(t, (slice(None), slice(1, 3))))), w)

    def test_shared_subexpression(self, rng):
        check_grad(lambda x: nx.sum(nx.mul(nx.gelu(x), nx.gelu(x))), rng.normal(size=(4,)))


class TestTape:
    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = nx.mul(x, x)
        with pytest.raises(TapeError):
            nx.backward(nx.sum(y))

    def test_replay_twice_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape():
            loss = nx.sum(nx.mul(x, x))
        nx.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        with pytest.raises(TapeError):
            nx.backward(loss)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape():
            y = nx.mul(x, x)
        with pytest.raises(DimensionError):
            nx.backward(y)

    def test_frozen_inputs_get_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        c = Tensor([3.0])
        with GradTape():
            loss = nx.sum(nx.mul(x, c))
        nx.backward(loss)
        assert c.grad is None and x.grad[0] == pytest.approx(3.0)

    def test_global_norm(self):
        a, b = Tensor([0.0]), Tensor([0.0])
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        assert nx.global_norm([a, b]) == pytest.approx(5.0)
