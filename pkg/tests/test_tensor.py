import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tmim import tensor as T
from tmim.oracles import oracle_dft2
from tmim.tensor import GraphError, ShapeError, Tensor

from gradcheck import SEEDS, grad_error


def rng(seed):
    return np.random.default_rng(seed)


def away_from_zero(r, shape, gap=1e-2):
    x = r.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


# -- forward values ------------------------------------------------------------
def test_add_values():
    assert np.array_equal(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_mul_by_ones_is_identity():
    x = rng(0).normal(size=(3, 4))
    assert np.array_equal(T.mul(Tensor(x), Tensor(np.ones_like(x))).data, x)


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_division_by_zero():
    with pytest.raises(ZeroDivisionError):
        T.div(Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))


def test_broadcast_add_mul_commute_bit_exactly():
    r = rng(1)
    a, b = r.normal(size=(4, 5)), r.normal(size=(4, 5))
    assert np.array_equal(T.add(Tensor(a), Tensor(b)).data, T.add(Tensor(b), Tensor(a)).data)
    assert np.array_equal(T.mul(Tensor(a), Tensor(b)).data, T.mul(Tensor(b), Tensor(a)).data)


def test_matmul_values():
    b = rng(2).normal(size=(3, 2))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]])).data
    assert np.array_equal(out, [[19, 22], [43, 50]])


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_conv_identity_kernel():
    x = rng(3).normal(size=(2, 1, 5, 6))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0)
    assert np.array_equal(out.data, x)


def test_conv_box_kernel_on_constant():
    out = T.conv2d(Tensor(np.full((1, 1, 6, 6), 0.5)), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, 4.5)


@pytest.mark.parametrize("h,w,k,stride,pad", [(7, 5, 3, 1, 1), (8, 8, 3, 2, 1), (9, 6, 2, 3, 0), (5, 5, 5, 1, 0)])
def test_conv_output_size(h, w, k, stride, pad):
    out = T.conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((3, 2, k, k))), stride=stride, pad=pad)
    assert out.shape == (1, 3, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv_matches_direct_loops():
    r = rng(4)
    x, wt, b = r.normal(size=(2, 3, 6, 7)), r.normal(size=(4, 3, 3, 3)), r.normal(size=4)
    for stride in (1, 2):
        out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                ref = np.einsum("ncij,ocij->no", patch, wt) + b
                np.testing.assert_allclose(out[:, :, i, j], ref, atol=1e-12)


def test_conv_spatial_underflow():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_upsample_values_and_grad():
    out = T.upsample_nearest(Tensor(np.full((1, 1, 1, 1), 5.0)), 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 5.0))
    x = Tensor(rng(5).normal(size=(2, 3, 4, 4)), requires_grad=True)
    T.tsum(T.upsample_nearest(x, 3)).backward()
    assert np.array_equal(x.grad, np.full(x.shape, 9.0))
    y = rng(6).normal(size=(1, 2, 3, 3))
    assert np.array_equal(T.upsample_nearest(Tensor(y), 1).data, y)


def test_activation_values():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_kink_takes_positive_branch():
    x = Tensor([0.0], requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert x.grad[0] == 1.0
    x = Tensor([0.0], requires_grad=True)
    T.tsum(T.leaky_relu(x, 0.1)).backward()
    assert x.grad[0] == 1.0


def test_reduce_values():
    assert T.mean(Tensor([2.0, 4.0, 6.0])).item() == 4.0
    x = rng(7).normal(size=(3, 2))
    assert np.array_equal(T.tsum(Tensor(x), axes=[]).data, x)
    t = Tensor(x, requires_grad=True)
    T.mean(t).backward()
    np.testing.assert_allclose(t.grad, 1 / 6)


def test_reduce_invalid_axis():
    with pytest.raises(ShapeError):
        T.tsum(Tensor(np.zeros((2, 3))), axes=[2])


def test_dft_constant_is_dc_only():
    out = T.dft2(Tensor(np.full((1, 1, 4, 4), 0.25))).data[0, 0]
    expected = np.zeros((4, 4))
    expected[0, 0] = 4.0
    np.testing.assert_allclose(out[0], expected, atol=1e-12)
    np.testing.assert_allclose(out[1], 0.0, atol=1e-12)


@pytest.mark.parametrize("h,w", [(8, 8), (11, 16), (16, 13), (1, 5)])
def test_dft_matches_oracle(h, w):
    x = rng(h * 31 + w).normal(size=(2, 3, h, w))
    assert np.max(np.abs(T.dft2(Tensor(x)).data - oracle_dft2(x))) < 1e-9


# -- backward contract ----------------------------------------------------------
def test_backward_simple():
    x = Tensor([1.0, 1.0, 1.0], requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, [1, 1, 1])
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert np.array_equal(x.grad, [2, 4])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        T.mul(x, 2.0).backward()
    loss = T.tsum(x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_grad_accumulates_until_reset():
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.tsum(T.mul(x, 3.0)).backward()
    T.tsum(T.mul(x, 3.0)).backward()
    assert np.array_equal(x.grad, [6, 6])
    x.zero_grad()
    assert x.grad is None


def test_constants_never_get_grad():
    c = Tensor([1.0, 2.0])
    x = Tensor([3.0, 4.0], requires_grad=True)
    T.tsum(T.mul(c, x)).backward()
    assert c.grad is None and not c.requires_grad


def test_shared_subexpression_visited_once():
    x = Tensor([1.5], requires_grad=True)
    y = T.mul(x, x)
    T.tsum(T.add(y, y)).backward()
    assert x.grad[0] == pytest.approx(4 * 1.5)


def test_backward_is_deterministic():
    r = rng(8)
    x0, w0 = r.normal(size=(2, 3, 8, 8)), r.normal(size=(4, 3, 3, 3))
    grads = []
    for _ in range(2):
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        T.mean(T.relu(T.conv2d(x, w, pad=1))).backward()
        grads.append((x.grad, w.grad))
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


# -- finite differences, 20 seeds per op -----------------------------------------
OPS = {
    "add": (lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.tsum(T.square(T.sub(a, b))), [(2, 3), (2, 1)]),
    "mul": (lambda a, b: T.tsum(T.mul(a, b)), [(3, 4), (3, 4)]),
    "div": (lambda a, b: T.tsum(T.div(a, b)), [(3, 4), (4,)]),
    "square": (lambda a: T.tsum(T.square(a)), [(5,)]),
    "abs": (lambda a: T.tsum(T.mul(T.absolute(a), a)), [(6,)]),
    "matmul": (lambda a, b: T.tsum(T.square(T.matmul(a, b))), [(4, 5), (5, 3)]),
    "bmm": (lambda a, b: T.tsum(T.square(T.matmul(a, b))), [(2, 3, 4), (2, 4, 2)]),
    "reshape": (lambda a: T.tsum(T.square(T.reshape(a, (6, 2))) * Tensor(np.arange(12.).reshape(6, 2))), [(3, 4)]),
    "transpose": (lambda a: T.tsum(T.transpose(a, (2, 0, 1)) * Tensor(np.arange(24.).reshape(4, 2, 3))),
                  [(2, 3, 4)]),
    "getitem": (lambda a: T.tsum(T.square(a[1:, ::2])), [(3, 5)]),
    "getitem_fancy": (lambda a: T.tsum(T.square(a[np.array([0, 2, 0])])), [(3, 2)]),
    "concat": (lambda a, b: T.tsum(T.square(T.concat([a, b], axis=1)) * Tensor(np.arange(10.).reshape(2, 5))),
               [(2, 2), (2, 3)]),
    "stack": (lambda a, b: T.tsum(T.square(T.stack([a, b], axis=0)) * Tensor(np.arange(6.).reshape(2, 3))),
              [(3,), (3,)]),
    "sum_axes": (lambda a: T.tsum(T.square(T.tsum(a, axes=[0, 2]))), [(2, 3, 4)]),
    "mean_keepdims": (lambda a: T.tsum(T.square(T.mean(a, axes=[1], keepdims=True))), [(3, 4)]),
    "relu": (lambda a: T.tsum(T.square(T.relu(a))), [(10,)]),
    "leaky_relu": (lambda a: T.tsum(T.square(T.leaky_relu(a, 0.2))), [(10,)]),
    "sigmoid": (lambda a: T.tsum(T.square(T.sigmoid(a))), [(10,)]),
    "conv2d_s1": (lambda x, w, b: T.tsum(T.square(T.conv2d(x, w, b, stride=1, pad=1))),
                  [(2, 3, 5, 6), (4, 3, 3, 3), (4,)]),
    "conv2d_s2": (lambda x, w, b: T.tsum(T.square(T.conv2d(x, w, b, stride=2, pad=1))),
                  [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    "upsample": (lambda a: T.tsum(T.square(T.upsample_nearest(a, 2))), [(1, 2, 3, 3)]),
    "dft2": (lambda a: T.tsum(T.square(T.dft2(a))), [(1, 2, 5, 4)]),
    "dft2_real_plane": (lambda a: T.tsum(T.dft2(a)[:, :, 0]), [(1, 1, 4, 4)]),
}


def op_case(name, seed):
    fn, shapes = OPS[name]
    r = rng(1000 + seed)
    arrays = [away_from_zero(r, s, gap=0.05) for s in shapes]
    if name == "div":
        arrays[1] = np.sign(arrays[1]) * (np.abs(arrays[1]) + 0.5)
    return fn, arrays


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_20_seeds(name):
    worst = 0.0
    for seed in SEEDS:
        fn, arrays = op_case(name, seed)
        worst = max(worst, grad_error(fn, *arrays))
    assert worst < 1e-5, f"{name}: rel err {worst:.2e}"


def test_composite_conv_relu_mean():
    for seed in SEEDS:
        r = rng(2000 + seed)
        x, w, b = r.normal(size=(2, 3, 6, 6)), r.normal(size=(2, 3, 3, 3)), r.normal(size=2)

        def fn(x, w, b):
            return T.mean(T.relu(T.conv2d(x, w, b, pad=1)))

        assert grad_error(fn, x, w, b) < 1e-5


# -- properties ------------------------------------------------------------------
@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1e3, 1e3)))
def test_tensor_roundtrip_and_grad_shape(x):
    t = Tensor(x, requires_grad=True)
    assert t.size == int(np.prod(t.shape))
    T.tsum(T.mul(t, 2.0)).backward()
    assert t.grad.shape == t.shape
    assert np.array_equal(t.grad, np.full(x.shape, 2.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_dft_is_linear(h, w, seed):
    r = rng(seed)
    a, b = r.normal(size=(1, 1, h, w)), r.normal(size=(1, 1, h, w))
    lhs = T.dft2(Tensor(2.0 * a + b)).data
    rhs = 2.0 * T.dft2(Tensor(a)).data + T.dft2(Tensor(b)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)
