import numpy as np
import pytest

import cdlab.tensor as T
from cdlab.tensor import (
    AdamState, MissingGrad, NonFinite, NotScalar, ShapeMismatch, Tape, Tensor,
    adam_step, backward, forward,
)

from gradcheck import check_gradients


def _fixed_mask_where(rng):
    mask = rng.random((3, 4)) > 0.5  # drawn once; must not move between evals
    return lambda a, b: T.where(mask, a, b)


def scalar(f):
    """Reduce an op output to a weighted scalar so gradcheck sees every element."""
    def wrapped():
        out = f()
        w = Tensor(np.linspace(0.7, 1.3, out.size).reshape(out.shape))
        return T.sum_(out * w)
    return wrapped


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    assert np.array_equal(T.matmul(a, eye).data, a.data)


def test_softmax_symmetry_and_normalization():
    out = T.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(7, 5)) * 30)
    s = T.softmax(x, axis=-1).data.sum(axis=-1)
    assert np.all(np.abs(s - 1.0) < 1e-12)


def test_sigmoid_analytic():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_backward_sum_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x)
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_quadratic():
    x = Tensor([2.0, -1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x * x)
    backward(tape, loss)
    assert np.allclose(x.grad, [4.0, -2.0])


def test_backward_accumulates_across_uses():
    x = Tensor([1.5], requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(x + x)  # both addends alias x
    backward(tape, loss)
    assert np.allclose(x.grad, [2.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(NotScalar):
        backward(tape, y)


def test_nonfinite_raises():
    with pytest.raises(NonFinite):
        Tensor([np.nan])
    x = Tensor([1.0, 0.0])
    with pytest.raises(NonFinite):
        with Tape():
            T.log(x - 1.0)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_forward_dispatch_records_on_tape():
    tape = Tape()
    x = Tensor([[0.0, 1.0]], requires_grad=True)
    out = forward(tape, "tanh", x)
    assert len(tape) == 1
    assert np.allclose(out.data, np.tanh(x.data))
    with pytest.raises(KeyError):
        forward(tape, "no_such_op", x)


@pytest.mark.parametrize("name,builder", [
    ("add", lambda r: (lambda a, b: T.add(a, b), [(3, 4), (3, 4)])),
    ("add_broadcast", lambda r: (lambda a, b: T.add(a, b), [(3, 4), (4,)])),
    ("sub", lambda r: (lambda a, b: T.sub(a, b), [(2, 5), (2, 5)])),
    ("mul", lambda r: (lambda a, b: T.mul(a, b), [(4, 3), (1, 3)])),
    ("div", lambda r: (lambda a, b: T.div(a, T.add(T.mul(b, b), Tensor(0.5))), [(3, 3), (3, 3)])),
    ("matmul", lambda r: (lambda a, b: T.matmul(a, b), [(4, 3), (3, 5)])),
    ("matmul_batched", lambda r: (lambda a, b: T.matmul(a, b), [(2, 4, 3), (2, 3, 2)])),
    ("matmul_bcast", lambda r: (lambda a, b: T.matmul(a, b), [(3, 4), (2, 4, 3)])),
    ("exp", lambda r: (lambda a: T.exp(a), [(3, 4)])),
    ("log", lambda r: (lambda a: T.log(T.add(T.mul(a, a), Tensor(0.3))), [(3, 4)])),
    ("sqrt", lambda r: (lambda a: T.sqrt(T.add(T.mul(a, a), Tensor(0.2))), [(3, 4)])),
    ("abs", lambda r: (lambda a: T.abs_(a), [(3, 4)])),
    ("relu", lambda r: (lambda a: T.relu(a), [(5, 5)])),
    ("elu", lambda r: (lambda a: T.elu(a), [(5, 5)])),
    ("sigmoid", lambda r: (lambda a: T.sigmoid(a), [(3, 4)])),
    ("tanh", lambda r: (lambda a: T.tanh(a), [(3, 4)])),
    ("softmax", lambda r: (lambda a: T.softmax(a, axis=-1), [(4, 6)])),
    ("log_softmax", lambda r: (lambda a: T.log_softmax(a, axis=-1), [(4, 6)])),
    ("sum_axis", lambda r: (lambda a: T.sum_(a, axis=1, keepdims=True), [(3, 4, 2)])),
    ("mean_axis", lambda r: (lambda a: T.mean(a, axis=0), [(3, 4)])),
    ("mean_all", lambda r: (lambda a: T.mean(a), [(3, 4)])),
    ("concat", lambda r: (lambda a, b: T.concat([a, b], axis=1), [(3, 2), (3, 4)])),
    ("slice_basic", lambda r: (lambda a: a[:, 1:3], [(4, 5)])),
    ("slice_fancy", lambda r: (lambda a: a[np.array([0, 2, 2])], [(4, 5)])),
    ("reshape", lambda r: (lambda a: T.reshape(a, (2, 6)), [(3, 4)])),
    ("transpose", lambda r: (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)])),
    ("broadcast", lambda r: (lambda a: T.broadcast(a, (3, 2, 4)), [(2, 4)])),
    ("where", lambda r: (_fixed_mask_where(r), [(3, 4), (3, 4)])),
    ("conv1d", lambda r: (lambda x, w, b: T.conv1d(x, w, b), [(2, 3, 9), (4, 3, 3), (4,)])),
    ("max_pool1d", lambda r: (lambda x: T.max_pool1d(x, 2), [(2, 3, 9)])),
])
def test_primitive_gradients(name, builder):
    rng = np.random.default_rng(hash(name) % (2**32))
    fn, shapes = builder(rng)
    leaves = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    check_gradients(scalar(lambda: fn(*leaves)), leaves)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    w1 = Tensor(rng.normal(size=(6, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=(8,)) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.normal(size=(3,)) * 0.1, requires_grad=True)
    x = Tensor(rng.normal(size=(5, 6)))

    def f():
        h = T.relu(T.matmul(x, w1) + b1)
        out = T.tanh(T.matmul(h, w2) + b2)
        return T.sum_(out * out)

    err = check_gradients(f, [w1, b1, w2, b2], tol=1e-4)
    assert err < 1e-4


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.softmax(T.matmul(x, w), axis=-1) * x)
        backward(tape, loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_adam_zero_grad_is_fixed_point():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState([p], lr=0.1)
    adam_step(state)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_analytic():
    p = Tensor([1.0], requires_grad=True)
    p.grad[:] = 1.0
    state = AdamState([p], lr=0.1)
    adam_step(state)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert abs(p.data[0] - expected) < 1e-12
    assert np.array_equal(p.grad, [0.0])
    assert state.t == 1


def test_adam_converges_on_quadratic():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState([p], lr=0.1)
    for _ in range(100):
        with Tape() as tape:
            loss = T.sum_(p * p)
        backward(tape, loss)
        adam_step(state)
    assert abs(p.data[0]) < 0.05


def test_adam_missing_grad():
    p = Tensor([1.0])  # requires_grad False -> no accumulator
    state = AdamState([p], lr=0.1)
    with pytest.raises(MissingGrad):
        adam_step(state)


def test_clip_grad_norm():
    p = Tensor(np.ones(4), requires_grad=True)
    p.grad[:] = 3.0
    norm = T.clip_grad_norm([p], 1.0)
    assert abs(norm - 6.0) < 1e-12
    assert abs(np.linalg.norm(p.grad) - 1.0) < 1e-12
