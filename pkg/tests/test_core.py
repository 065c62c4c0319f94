import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effvit.core import evt1, kernels
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.errors import ContractError, InputError, NumericError, ParameterError, ShapeError, StateError


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_conv(x, w, stride, pad, groups):
    b, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    opg = cout // groups
    out = np.zeros((b, cout, ho, wo))
    for n in range(b):
        for o in range(cout):
            gidx = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cpg):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[n, gidx * cpg + c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


# --------------------------------------------------------------- creation / rng


def test_tensor_new_fills():
    z = T.tensor_new([2, 3], "zeros")
    assert z.shape == (2, 3) and z.size == 6 and not z.data.any()
    c = T.tensor_new([1], "constant", value=5.0)
    assert c.data.tolist() == [5.0]
    assert T.tensor_new([2], "ones", dtype="f64").data.tolist() == [1.0, 1.0]


def test_tensor_new_uniform_streams_repeat():
    a = T.tensor_new([4], "uniform", rng=Rng(7), lo=0, hi=1)
    b = T.tensor_new([4], "uniform", rng=Rng(7), lo=0, hi=1)
    assert a.data.tobytes() == b.data.tobytes()
    assert ((a.data >= 0) & (a.data < 1)).all()


@pytest.mark.parametrize("shape", [[0, 3], [2, -1], [0]])
def test_tensor_new_rejects_bad_extents(shape):
    with pytest.raises(ShapeError):
        T.tensor_new(shape, "zeros")


def test_tensor_new_needs_rng():
    with pytest.raises(ParameterError):
        T.tensor_new([3], "uniform")


def test_rng_streams_and_ranges():
    r1, r2 = Rng(123), Rng(123)
    assert r1.uniform(100, dtype="f64").tobytes() == r2.uniform(100, dtype="f64").tobytes()
    assert Rng(1).uniform(10).tobytes() != Rng(2).uniform(10).tobytes()
    tn = Rng(5).trunc_normal(20000, std=0.02, dtype="f64")
    assert np.abs(tn).max() <= 0.04
    assert abs(tn.std() - 0.02 * 0.88) < 0.002  # std of a normal truncated at 2 sigma
    n = Rng(9).normal(50000, dtype="f64")
    assert abs(n.mean()) < 0.02 and abs(n.std() - 1) < 0.02
    ints = Rng(3).integers(1000, 10)
    assert ints.min() >= 0 and ints.max() < 10


def test_rng_transforms_match_bit_formulas():
    raw = np.random.PCG64(2024).random_raw(6).astype(np.uint64).tolist()
    assert Rng(2024).raw(2).tolist() == raw[:2]
    u64 = Rng(2024).uniform(6, dtype="f64")
    assert u64.tolist() == [(w >> 11) * 2.0**-53 for w in raw]
    u32 = Rng(2024).uniform(6, dtype="f32")
    hi = [(w >> 40) * 2.0**-24 for w in raw[:3]]
    lo = [((w & 0xFFFFFFFF) >> 8) * 2.0**-24 for w in raw[:3]]
    assert u32.tolist() == hi + lo
    n = Rng(2024).normal(2, dtype="f64")
    rad = np.sqrt(-2.0 * np.log1p(-u64[0]))
    assert n.tolist() == [rad * np.cos(2 * np.pi * u64[1]), rad * np.sin(2 * np.pi * u64[1])]


# --------------------------------------------------------------- matmul


def test_matmul_identity_and_hand_case():
    x = np.arange(6, dtype=np.float32).reshape(3, 2)
    assert np.array_equal(T.matmul(T.Tensor(np.eye(3, dtype=np.float32)), T.Tensor(x)).data, x)
    out = T.matmul(T.Tensor(np.array([[1, 2], [3, 4]], np.float32)), T.Tensor(np.array([[5], [6]], np.float32)))
    assert out.data.tolist() == [[17], [39]]


def test_matmul_vs_naive():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 5)).astype(np.float32)
    b = rng.standard_normal((5, 6)).astype(np.float32)
    np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, naive_matmul(a, b), atol=1e-6, rtol=0)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


# --------------------------------------------------------------- softmax


def test_softmax_cases():
    np.testing.assert_array_equal(T.softmax_lastdim(T.zeros((4,))).data, np.full(4, 0.25, np.float32))
    big = T.softmax_lastdim(T.Tensor(np.array([1e30, 1e30], np.float32)))
    assert big.data.tolist() == [0.5, 0.5]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_vs_f64_oracle(vals):
    x = np.array(vals, dtype=np.float32)
    e = np.exp(x.astype(np.float64) - x.astype(np.float64).max())
    ref = e / e.sum()
    np.testing.assert_allclose(T.softmax_lastdim(T.Tensor(x)).data, ref, atol=1e-6, rtol=0)


# --------------------------------------------------------------- conv2d


def test_conv_identity_1x1():
    x = T.uniform((2, 3, 5, 5), Rng(0))
    w = T.Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
    np.testing.assert_array_equal(T.conv2d(x, w).data, x.data)


def test_conv_out_extent():
    assert T.conv_out_extent(7, 3, 2, 1) == 4
    x = T.zeros((1, 2, 7, 7))
    assert T.conv2d(x, T.zeros((2, 2, 3, 3)), stride=2, pad=1).shape == (1, 2, 4, 4)


@pytest.mark.parametrize("stride,pad,groups,cin,cout,k", [
    (1, 1, 4, 4, 4, 3),   # depthwise
    (2, 1, 4, 4, 4, 3),   # depthwise stride 2
    (1, 0, 1, 3, 5, 1),   # pointwise
    (2, 1, 1, 3, 4, 3),   # dense strided
    (1, 1, 2, 4, 6, 3),   # grouped
])
def test_conv_vs_naive(stride, pad, groups, cin, cout, k):
    rng = np.random.default_rng(stride * 10 + groups)
    x = rng.standard_normal((2, cin, 6, 5))
    w = rng.standard_normal((cout, cin // groups, k, k))
    out = T.conv2d(t64(x), t64(w), stride=stride, pad=pad, groups=groups).data
    np.testing.assert_allclose(out, naive_conv(x, w, stride, pad, groups), atol=1e-10)


def test_depthwise_f32_vs_naive():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 8, 9, 9)).astype(np.float32)
    w = rng.standard_normal((8, 1, 3, 3)).astype(np.float32)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), pad=1, groups=8).data
    np.testing.assert_allclose(out, naive_conv(x.astype(np.float64), w.astype(np.float64), 1, 1, 8), atol=1e-5)


def test_conv_group_errors():
    with pytest.raises(ShapeError):
        T.conv2d(T.zeros((1, 6, 4, 4)), T.zeros((4, 2, 3, 3)), groups=4)


@pytest.mark.skipif("cython" not in kernels.available(), reason="compiled kernel not built")
@pytest.mark.parametrize("stride", [1, 2])
def test_backends_agree(stride):
    rng = np.random.default_rng(stride)
    xp = rng.standard_normal((2, 5, 9, 8))
    w = rng.standard_normal((5, 3, 3))
    ho, wo = (9 - 3) // stride + 1, (8 - 3) // stride + 1
    g = rng.standard_normal((2, 5, ho, wo))
    prev = kernels.set_backend("python")
    try:
        ref = (kernels.dw_forward(xp, w, stride, ho, wo), kernels.dw_backward_input(g, w, stride, 9, 8),
               kernels.dw_backward_weight(g, xp, stride, 3, 3))
        kernels.set_backend("cython")
        got = (kernels.dw_forward(xp, w, stride, ho, wo), kernels.dw_backward_input(g, w, stride, 9, 8),
               kernels.dw_backward_weight(g, xp, stride, 3, 3))
    finally:
        kernels.set_backend(prev)
    np.testing.assert_array_equal(got[0], ref[0])
    for a, b in zip(got[1:], ref[1:]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_set_backend_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


# --------------------------------------------------------------- batchnorm


def _bn_params(c, dtype="f32"):
    return T.ones((c,), dtype), T.zeros((c,), dtype), T.zeros((c,), dtype), T.ones((c,), dtype)


def test_bn_identity_infer():
    x = T.uniform((2, 3, 4, 4), Rng(0), -2, 2)
    y = T.batchnorm(x, *_bn_params(3), mode="infer")
    assert np.abs(y.data - x.data).max() < 1e-5 * 2 + 1e-6


def test_bn_constant_input_train_gives_beta():
    g, b, m, v = _bn_params(2)
    b.data[:] = [0.5, -1.5]
    y = T.batchnorm(T.full((3, 2, 2, 2), 4.0), g, b, m, v, mode="train")
    np.testing.assert_allclose(y.data, np.broadcast_to(b.data.reshape(1, 2, 1, 1), y.shape), atol=1e-6)


def test_bn_train_statistics_and_running_update():
    x = T.uniform((8, 3, 5, 5), Rng(2), -3, 5, dtype="f64")
    g, b, m, v = _bn_params(3, "f64")
    y = T.batchnorm(x, g, b, m, v, mode="train", momentum=0.1)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-4)
    n = 8 * 25
    np.testing.assert_allclose(m.data, 0.1 * x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(v.data, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)) * n / (n - 1))


def test_bn_eps_must_be_positive():
    with pytest.raises(ParameterError):
        T.batchnorm(T.zeros((1, 2)), *_bn_params(2), eps=0.0)


# --------------------------------------------------------------- small ops


def test_relu_and_shape_ops():
    assert T.relu(T.Tensor(np.array([-1, 0, 2], np.float32))).data.tolist() == [0, 0, 2]
    x = T.uniform((2, 8, 3, 3), Rng(4))
    parts = T.split_channels(x, 4)
    assert len(parts) == 4 and parts[0].shape == (2, 2, 3, 3)
    np.testing.assert_array_equal(T.concat_channels(parts).data, x.data)
    y = T.uniform((2, 3, 4), Rng(5))
    np.testing.assert_array_equal(T.transpose_last2(T.transpose_last2(y)).data, y.data)
    assert T.global_avg_pool(x).shape == (2, 8)
    np.testing.assert_allclose(T.global_avg_pool(x).data, x.data.mean(axis=(2, 3)), rtol=1e-6)
    with pytest.raises(ShapeError):
        T.split_channels(x, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4))
def test_split_concat_roundtrip_property(b, h, d):
    x = T.uniform((b, h * d, 2, 2), Rng(b * 100 + h * 10 + d))
    np.testing.assert_array_equal(T.concat_channels(T.split_channels(x, h)).data, x.data)


def test_nonfinite_is_an_error():
    x = T.Tensor(np.array([np.inf, 1.0], np.float32))
    with pytest.raises(NumericError):
        T.relu(x)
    with T.no_checks():
        T.relu(x)
    assert T.checks_enabled()


# --------------------------------------------------------------- autodiff


def test_grad_of_sum_and_square():
    x = t64(np.random.default_rng(0).standard_normal((3, 4)), grad=True)
    with T.record() as g:
        loss = T.reduce_sum(x)
    T.backward(g, loss)
    np.testing.assert_array_equal(x.grad.data, np.ones((3, 4)))
    x.grad = None
    with T.record() as g:
        loss = T.reduce_sum(T.mul(x, x))
    T.backward(g, loss)
    np.testing.assert_allclose(x.grad.data, 2 * x.data)


def test_mlp_grads_vs_finite_differences():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((4, 5)))
    w1, b1 = t64(rng.standard_normal((6, 5)), True), t64(rng.standard_normal(6), True)
    w2, b2 = t64(rng.standard_normal((3, 6)), True), t64(rng.standard_normal(3), True)

    def loss_fn(w1_, b1_, w2_, b2_):
        h = T.relu(T.linear(x, w1_, b1_))
        return T.cross_entropy(T.linear(h, w2_, b2_), [0, 2, 1, 1])

    with T.record() as g:
        loss = loss_fn(w1, b1, w2, b2)
    T.backward(g, loss)
    params = [w1, b1, w2, b2]
    for i, p in enumerate(params):
        def f(v, i=i):
            args = list(params)
            args[i] = v
            with T.no_checks():
                return loss_fn(*args)
        num = T.finite_diff_grad(f, p).data
        rel = np.abs(num - p.grad.data) / np.maximum(np.abs(num) + np.abs(p.grad.data), 1e-8)
        assert rel.max() < 1e-4


def test_backward_errors():
    x = t64([1.0, 2.0], grad=True)
    with T.record() as g:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(g, y)
    detached = T.reduce_sum(T.mul(x, x))
    with pytest.raises(StateError):
        T.backward(g, detached)


def test_backward_reverse_order_and_replay():
    rng = np.random.default_rng(8)
    x = t64(rng.standard_normal((2, 3)), grad=True)
    w = t64(rng.standard_normal((4, 3)), grad=True)
    with T.record() as g:
        y = T.softmax_lastdim(T.linear(x, w))
        loss = T.reduce_mean(T.mul(y, y))
    outs = [n.output.data.copy() for n in g.nodes]
    g.replay()
    for n, o in zip(g.nodes, outs):
        assert n.output.data.tobytes() == o.tobytes()
    T.backward(g, loss)
    assert x.grad is not None and w.grad is not None


def test_finite_diff_basics():
    x = t64(np.random.default_rng(1).standard_normal((2, 3)))
    np.testing.assert_allclose(T.finite_diff_grad(lambda v: T.reduce_sum(v), x).data, np.ones((2, 3)), atol=1e-8)
    g = T.finite_diff_grad(lambda v: float(v.data[0] ** 2), t64([3.0]))
    assert abs(g.data[0] - 6.0) < 1e-6
    with pytest.raises(ContractError):
        T.finite_diff_grad(lambda v: v, x)
    with pytest.raises(ContractError):
        T.finite_diff_grad(lambda v: T.reduce_sum(v), T.zeros((2,)))


def test_softmax_ce_finite_diff_vs_analytic():
    rng = np.random.default_rng(11)
    z = rng.standard_normal((3, 5))
    labels = [4, 0, 2]
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    onehot = np.eye(5)[labels]
    analytic = (p - onehot) / 3
    num = T.finite_diff_grad(lambda v: T.cross_entropy(v, labels), t64(z)).data
    assert (np.abs(num - analytic) / np.maximum(np.abs(analytic), 1e-12)).max() < 1e-6


def test_op_hook_attributes_every_call():
    seen = []
    x = T.uniform((1, 4, 3, 3), Rng(0))
    with T.op_hook(lambda name, cat, dt, ins, out: seen.append((name, cat))):
        T.relu(T.add(x, x))
        T.reshape(x, (4, 9))
    assert seen == [("add", "elementwise"), ("relu", "elementwise"), ("reshape", "reshape")]
    assert set(T.OP_CATEGORY.values()) <= set(T.CATEGORIES)


# --------------------------------------------------------------- EVT1


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["f32", "f64"]), st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 99))
def test_evt1_roundtrip(dtype, shape, seed):
    t = T.uniform(tuple(shape) or (1,), Rng(seed), -1, 1, dtype=dtype) if shape else T.Tensor(
        np.array(1.5, dtype=T.as_dtype(dtype)))
    buf = evt1.encode(t)
    back = evt1.decode(buf)
    assert back.dtype == t.dtype and back.shape == t.shape
    assert evt1.encode(back) == buf


def test_evt1_layout():
    t = T.Tensor(np.array([[1, 2, 3]], np.float32))
    buf = evt1.encode(t)
    assert buf[:4] == b"EVT1" and buf[4] == 0 and buf[5] == 2
    assert buf[6:14] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(buf[14:], "<f4").tolist() == [1, 2, 3]


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"EVT2" + b[4:], 0),
    (lambda b: b[:4] + b"\x07" + b[5:], 4),
    (lambda b: b[:6] + (0).to_bytes(4, "little") + b[10:], 6),
    (lambda b: b[:-1], 14),
    (lambda b: b + b"\x00", 26),
    (lambda b: b[:3], 0),
])
def test_evt1_errors_carry_offset(mutate, offset):
    buf = evt1.encode(T.Tensor(np.array([[1, 2, 3]], np.float32)))
    with pytest.raises(InputError) as ei:
        evt1.decode(mutate(buf))
    assert ei.value.offset == offset


def test_evt1_file_roundtrip(tmp_path):
    t = T.uniform((2, 3), Rng(1), dtype="f64")
    evt1.save(t, tmp_path / "t.evt1")
    data = (tmp_path / "t.evt1").read_bytes()
    assert evt1.encode(evt1.load(tmp_path / "t.evt1")) == data
