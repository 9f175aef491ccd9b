import numpy as np
import pytest

from fedcompress.autodiff import Param, Tape, backward, grad_check
from fedcompress.data import Dataset
from fedcompress.linalg import RngStream, ShapeError
from fedcompress.peft import init_compression


def test_add_fan_out_doubles_gradient():
    t = Tape()
    a = t.leaf(np.ones((2, 3)), name="A")
    loss = t.record("sum", [t.add(a, a)])
    assert np.array_equal(backward(t, loss)["A"], 2 * np.ones((2, 3)))


def test_matmul_rule():
    rng = np.random.default_rng(0)
    av, bv, up = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    t = Tape()
    a, b = t.leaf(av, name="A"), t.leaf(bv, name="B")
    loss = t.record("sum", [t.record("mul", [t.matmul(a, b), t.leaf(up)])])
    g = t.backward(loss)
    assert np.allclose(g["A"], up @ bv.T, atol=1e-14)
    assert np.allclose(g["B"], av.T @ up, atol=1e-14)


def test_sum_and_half_square():
    av = np.random.default_rng(1).standard_normal((3, 3))
    t = Tape()
    a = t.leaf(av, name="A")
    assert np.array_equal(t.backward(t.record("sum", [a]))["A"], np.ones((3, 3)))
    t = Tape()
    a = t.leaf(av, name="A")
    g = t.backward(t.scale(t.record("sum", [t.record("mul", [a, a])]), 0.5))
    assert np.allclose(g["A"], av, atol=1e-15)


def test_composite_against_finite_differences():
    rng = np.random.default_rng(2)
    xv, wv = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    y = np.array([0, 2, 1, 1, 0])

    def f(w):
        t = Tape()
        h = t.record("gelu", [t.linear(t.leaf(xv), t.leaf(w, name="W"))])
        s = t.record("softmax", [h])
        loss = t.record("softmax_xent", [t.add(h, s)], targets=y)
        return t, loss

    t, loss = f(wv)
    g = t.backward(loss)["W"]
    eps, num = 1e-6, np.zeros_like(wv)
    for idx in np.ndindex(wv.shape):
        up, dn = wv.copy(), wv.copy()
        up[idx] += eps
        dn[idx] -= eps
        num[idx] = (f(up)[1].value[0, 0] - f(dn)[1].value[0, 0]) / (2 * eps)
    assert np.abs(g - num).max() / np.abs(num).max() < 1e-7


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(3)
    av, c1, c2 = rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), rng.standard_normal((2, 2))

    def grad(c):
        t = Tape()
        a = t.leaf(av, name="A")
        return t.backward(t.record("sum", [t.record("mul", [t.matmul(a, a), t.leaf(c)])]))["A"]

    assert np.allclose(grad(c1 + 2 * c2), grad(c1) + 2 * grad(c2), atol=1e-13)


def test_backward_is_deterministic():
    av = np.random.default_rng(4).standard_normal((3, 3))

    def grad():
        t = Tape()
        a = t.leaf(av, name="A")
        return t.backward(t.record("sum", [t.record("softmax", [t.matmul(a, a)])]))["A"]

    assert np.array_equal(grad(), grad())


def test_tape_errors():
    t = Tape()
    a = t.leaf(np.ones((2, 2)))
    with pytest.raises(KeyError):
        t.record("nope", [a])
    with pytest.raises(ShapeError):
        t.backward(a)
    with pytest.raises(ShapeError):
        t.matmul(a, t.leaf(np.ones((3, 1))))
    with pytest.raises(ValueError):
        t.add(a, Tape().leaf(np.ones((2, 2))))
    loss = t.record("sum", [a])
    t.backward(loss)
    with pytest.raises(RuntimeError):
        t.backward(loss)


class LinearRegression:
    def __init__(self, w):
        self.params = {"w": Param("w", w)}

    def trainable_names(self):
        return ["w"]

    def _loss(self, batch):
        t = Tape()
        r = t.add(t.linear(t.leaf(batch.inputs), t.param(self.params["w"])), t.leaf(-batch.targets))
        return t, t.scale(t.record("sum", [t.record("mul", [r, r])]), 1.0 / len(batch))

    def loss(self, batch):
        return float(self._loss(batch)[1].value[0, 0])

    def loss_and_grads(self, batch):
        t, loss = self._loss(batch)
        return float(loss.value[0, 0]), t.backward(loss)


def test_grad_check_linear_regression():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((20, 6))
    data = Dataset(x, np.zeros(20, dtype=int), 1, "vec_classify", targets=rng.standard_normal((20, 2)))
    assert grad_check(LinearRegression(rng.standard_normal((2, 6))), data) < 1e-7


def test_gradient_reaches_wc_through_frozen_w2(base, batch):
    m = init_compression(base, 8, RngStream(1))
    for name in m.params:
        if name.endswith(".w2"):
            m.params[name].trainable = False
    _, grads = m.loss_and_grads(batch)
    assert np.abs(grads["blocks.0.ffn.wc"]).max() > 0
    assert grad_check(m, batch, samples=8) < 1e-5


def test_tiny_gradients_hit_the_difference_floor():
    # after a few steps B is small, so dL/dA is ~1e-5 and central differences
    # at eps=1e-6 are dominated by rounding; a larger eps shrinks the error
    from fedcompress.data import make_task
    from fedcompress.federation import local_train
    from fedcompress.model import ModelConfig, build
    from fedcompress.peft import AdapterSpec, attach

    data = make_task("char_lm", 24, 4, RngStream(1))
    m = attach(build(ModelConfig(task_kind="char_lm"), RngStream(2)), AdapterSpec("lora"), RngStream(3))
    local_train(m, data, 3, 0.1, 1.0, RngStream(4))
    b = data.subset(np.arange(8))
    assert grad_check(m, b, eps=1e-4) < grad_check(m, b, eps=1e-5) < grad_check(m, b, eps=1e-6)
