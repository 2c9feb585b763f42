import zlib

import numpy as np
import pytest

from hiercas import tensor as T
from gradcheck import finite_diff, max_rel_err

OP_TOL = 1e-6


def scalar_loss(t, weights=None):
    """Reduce any tensor to a scalar via a fixed random weighting."""
    if weights is None:
        return T.tsum(t)
    return T.tsum(T.mul(t, T.constant(weights)))


def check_grads(build, arrays, tol=OP_TOL):
    """build() -> scalar Tensor reading the given numpy arrays in place."""
    loss = build()
    T.backward(loss)
    grads = [a._holder.grad.copy() for a in arrays]

    for holder_arr, got in zip(arrays, grads):
        def f():
            with T.no_grad():
                return build().item()

        want = finite_diff(f, holder_arr._array)
        assert max_rel_err(got, want) < tol


class _P:
    """Pairs a parameter ndarray with its Tensor so tests can perturb it."""

    def __init__(self, arr):
        self._array = np.array(arr, dtype=np.float64)
        self._holder = T.Tensor(self._array)
        self._holder.data = self._array  # share the buffer for perturbation
        self._holder.requires_grad = True

    @property
    def t(self):
        return self._holder


def param(arr):
    return _P(arr)


# --- forward semantics -----------------------------------------------------


def test_matmul_identity():
    out = T.matmul(T.constant([[1.0, 0.0], [0.0, 1.0]]), T.constant([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_matmul_dot():
    out = T.matmul(T.constant([[1.0, 2.0]]), T.constant([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.constant(np.zeros((2, 3))), T.constant(np.zeros((2, 2))))


def test_relu_definition():
    out = T.relu(T.constant([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_cos_at_zero():
    out = T.cos(T.constant([0.0, 0.0]))
    assert np.array_equal(out.data, [1.0, 1.0])


def test_gather_identity_row():
    out = T.gather_rows(T.constant(np.eye(3)), [2])
    assert np.array_equal(out.data, [[0.0, 0.0, 1.0]])


def test_gather_out_of_range():
    with pytest.raises(IndexError, match="index 3 out of range for 3 rows"):
        T.gather_rows(T.constant(np.eye(3)), [3])


def test_log_domain_error():
    with pytest.raises(ValueError, match="strictly positive"):
        T.log(T.constant([1.0, 0.0]))


def test_softmax_uniform_row():
    out = T.softmax_row(T.constant([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=0, rtol=1e-15)


def test_softmax_singleton():
    out = T.softmax_row(T.constant([[4.2]]))
    assert out.data[0, 0] == 1.0


def test_softmax_rows_sum_to_one_and_masked_zero():
    rng = np.random.default_rng(0)
    x = T.constant(rng.normal(size=(6, 9)))
    mask = rng.random((6, 9)) < 0.4
    mask[:, 0] = False  # keep every row feasible
    out = T.softmax_row(x, mask)
    assert np.all(out.data[mask] == 0.0)
    assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) <= 1e-12


def test_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError, match="fully masked"):
        T.softmax_row(T.constant([[1.0, 2.0]]), np.array([[True, True]]))


def test_invariant_product_shape_equals_buffer():
    t = T.constant(np.zeros((3, 4)))
    assert int(np.prod(t.shape)) == t.data.size


# --- backward semantics ----------------------------------------------------


def test_backward_sum_is_ones():
    p = param([1.0, 2.0, 3.0])
    T.backward(T.tsum(p.t))
    assert np.array_equal(p.t.grad, [1.0, 1.0, 1.0])


def test_backward_sum_of_squares():
    p = param([1.0, 2.0])
    T.backward(T.tsum(T.square(p.t)))
    assert np.array_equal(p.t.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    p = param([[1.0, 2.0]])
    out = T.scale(p.t, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(out)
    T.reset_graph()


def test_backward_consumes_graph():
    p = param([1.0])
    loss = T.tsum(p.t)
    T.backward(loss)
    with pytest.raises(ValueError, match="not part of the active graph"):
        T.backward(loss)


def test_gradients_summed_over_reuse():
    p = param([2.0])
    loss = T.tsum(T.add(T.square(p.t), T.scale(p.t, 3.0)))
    T.backward(loss)
    assert np.allclose(p.t.grad, [2 * 2.0 + 3.0], atol=0)


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4,))
    a, b = 1.7, -0.6

    def grad_of(fn):
        p = param(x0)
        T.backward(fn(p.t))
        return p.t.grad

    gf = grad_of(lambda t: T.tsum(T.square(t)))
    gg = grad_of(lambda t: T.tsum(T.cos(t)))
    gboth = grad_of(
        lambda t: T.add(T.scale(T.tsum(T.square(t)), a), T.scale(T.tsum(T.cos(t)), b))
    )
    assert np.allclose(gboth, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(3, 3))

    def run():
        p = param(x0)
        out = T.softmax_row(T.matmul(p.t, T.constant(x0.T)))
        loss = T.tsum(T.square(out))
        T.backward(loss)
        return out.data.copy(), p.t.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(g1, g2)


def test_no_grad_skips_tape():
    p = param([1.0, 2.0])
    with T.no_grad():
        out = T.tsum(T.square(p.t))
    assert not out.requires_grad
    with pytest.raises(ValueError):
        T.backward(out)


# --- finite-difference oracle per op ---------------------------------------


def _w(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def test_grad_matmul():
    rng = np.random.default_rng(1)
    a = param(rng.normal(size=(3, 4)))
    b = param(rng.normal(size=(4, 2)))
    check_grads(lambda: T.tsum(T.matmul(a.t, b.t)), [a, b])


def test_grad_softmax_row():
    rng = np.random.default_rng(2)
    x = param(rng.normal(size=(2, 5)))
    w = _w((2, 5), 20)
    check_grads(lambda: scalar_loss(T.softmax_row(x.t), w), [x])


def test_grad_softmax_row_masked():
    rng = np.random.default_rng(4)
    x = param(rng.normal(size=(3, 5)))
    mask = np.zeros((3, 5), dtype=bool)
    mask[0, 2:] = True
    mask[2, :3] = True
    w = _w((3, 5), 21)
    check_grads(lambda: scalar_loss(T.softmax_row(x.t, mask), w), [x])


@pytest.mark.parametrize(
    "name",
    ["add", "sub", "mul", "scale", "relu", "cos", "log", "square", "tsum", "mean"],
)
def test_grad_elementwise(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    base = rng.normal(size=(3, 4))
    if name == "relu":
        base = base + np.sign(base) * 0.05  # keep clear of the kink
    if name == "log":
        base = np.abs(base) + 0.5
    x = param(base)
    w = _w((3, 4), 22)

    if name in ("add", "sub", "mul"):
        y = param(rng.normal(size=(3, 4)))
        op = getattr(T, name)
        check_grads(lambda: scalar_loss(op(x.t, y.t), w), [x, y])
    elif name == "scale":
        check_grads(lambda: scalar_loss(T.scale(x.t, -1.3), w), [x])
    elif name in ("tsum", "mean"):
        op = getattr(T, name)
        check_grads(lambda: T.square(op(x.t)), [x])
    else:
        op = getattr(T, name)
        check_grads(lambda: scalar_loss(op(x.t), w), [x])


def test_grad_scalar_broadcast():
    rng = np.random.default_rng(6)
    x = param(rng.normal(size=(2, 3)))
    s = param([[0.7]])
    w = _w((2, 3), 23)
    check_grads(lambda: scalar_loss(T.mul(x.t, s.t), w), [x, s])
    check_grads(lambda: scalar_loss(T.add(x.t, s.t), w), [x, s])


def test_grad_row_col_broadcast_ops():
    rng = np.random.default_rng(7)
    x = param(rng.normal(size=(4, 3)))
    v = param(rng.normal(size=(1, 3)))
    c = param(rng.normal(size=(4, 1)))
    w = _w((4, 3), 24)
    check_grads(lambda: scalar_loss(T.add_rowvec(x.t, v.t), w), [x, v])
    check_grads(lambda: scalar_loss(T.mul_rowvec(x.t, v.t), w), [x, v])
    check_grads(lambda: scalar_loss(T.mul_colvec(x.t, c.t), w), [x, c])


def test_grad_structural_ops():
    rng = np.random.default_rng(8)
    a = param(rng.normal(size=(2, 3)))
    b = param(rng.normal(size=(2, 2)))
    w = _w((2, 5), 25)
    check_grads(lambda: scalar_loss(T.concat_lastdim([a.t, b.t]), w), [a, b])

    c = param(rng.normal(size=(1, 3)))
    w2 = _w((3, 3), 26)
    check_grads(lambda: scalar_loss(T.concat_rows([a.t, c.t]), w2), [a, c])

    w3 = _w((3, 2), 27)
    check_grads(lambda: scalar_loss(T.transpose(a.t), w3), [a])

    w4 = _w((6, 1), 28)
    check_grads(lambda: scalar_loss(T.reshape(a.t, (6, 1)), w4), [a])

    w5 = _w((2, 1), 29)
    check_grads(lambda: scalar_loss(T.sum_lastdim(a.t), w5), [a])

    d = param(rng.normal(size=(6, 2)))
    w6 = _w((2, 2), 30)
    check_grads(lambda: scalar_loss(T.sum_row_blocks(d.t, 3), w6), [d])


def test_grad_gather_rows():
    rng = np.random.default_rng(10)
    table = param(rng.normal(size=(5, 3)))
    idx = [0, 3, 3, 1]
    w = _w((4, 3), 31)
    check_grads(lambda: scalar_loss(T.gather_rows(table.t, idx), w), [table])
