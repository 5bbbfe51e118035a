import numpy as np
import pytest

from sifa.tensor import (Conv2dParams, FormatError, ShapeError, Tensor,
                         add, conv2d, dot, dump_tensor, elementwise,
                         load_tensor, mul, parse_tensor, save_tensor, sigmoid,
                         sub, zeros, zeros_like)


def test_zeros_basic():
    t = zeros([2, 2])
    assert t.shape == (2, 2)
    assert np.array_equal(t.data, np.zeros((2, 2), np.float32))
    assert zeros([3, 4, 5]).data.sum() == 0


@pytest.mark.parametrize("shape", [[0], [2, 0, 3], [-1, 4]])
def test_zeros_bad_extent(shape):
    with pytest.raises(ShapeError):
        zeros(shape)


def test_rank_bounds():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2, 2, 2)))
    with pytest.raises(ShapeError):
        zeros([])


def test_row_major_index_roundtrip():
    t = zeros([2, 3, 4, 5])
    rng = np.random.default_rng(0)
    for _ in range(50):
        coords = tuple(rng.integers(0, d) for d in t.shape)
        flat = t.flat_index(coords)
        # the documented law: ((i0*d1+i1)*d2+i2)*d3+i3
        i0, i1, i2, i3 = coords
        assert flat == ((i0 * 3 + i1) * 4 + i2) * 5 + i3
        assert t.coords_of(flat) == coords


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        Tensor(np.array([np.inf, 0.0]))


def test_elementwise_examples():
    a = Tensor(np.array([4.0, 1.0]))
    b = Tensor(np.array([1.0, 2.0]))
    assert np.array_equal(sub(a, b).data, np.array([3.0, -1.0], np.float32))
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32))
    assert np.array_equal(mul(x, zeros_like(x)).data, np.zeros((3, 4), np.float32))


def test_elementwise_commutative_add():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
    b = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
    assert np.array_equal(add(a, b).data, add(b, a).data)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        add(zeros([2, 2]), zeros([2, 3]))
    with pytest.raises(ValueError):
        elementwise("div", zeros([2]), zeros([2]))


def test_sigmoid_values():
    t = Tensor(np.array([0.0, np.log(3.0)]))
    out = sigmoid(t).data
    assert out[0] == pytest.approx(0.5, abs=1e-7)
    assert out[1] == pytest.approx(0.75, abs=1e-6)
    sat = sigmoid(Tensor(np.array([-100.0], np.float64))).data[0]
    assert 0.0 < sat < 1e-40


def test_dot_examples():
    assert dot(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0
    q = np.random.default_rng(3).normal(size=8)
    assert dot(q, q) >= 0.0
    with pytest.raises(ShapeError):
        dot(np.ones(3), np.ones(4))


def test_dot_against_naive_loop():
    rng = np.random.default_rng(4)
    a = rng.normal(size=64)
    b = rng.normal(size=64)
    acc = 0.0
    for i in range(64):
        acc += a[i] * b[i]
    assert dot(a, b) == pytest.approx(acc, rel=1e-12)


def _conv_params(weight, bias):
    return Conv2dParams(weight=Tensor(weight), bias=Tensor(bias),
                        padding=(weight.shape[2] - 1) // 2)


def test_conv2d_zero_weight_gives_bias():
    w = np.zeros((2, 3, 3, 3), np.float32)
    b = np.array([1.5, -2.0], np.float32)
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4, 4)).astype(np.float32))
    y = conv2d(x, _conv_params(w, b))
    assert np.allclose(y.data[0], 1.5) and np.allclose(y.data[1], -2.0)


def test_conv2d_identity_kernel():
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    x = Tensor(np.random.default_rng(6).normal(size=(3, 5, 6)).astype(np.float32))
    y = conv2d(x, _conv_params(w, np.zeros(3, np.float32)))
    assert np.array_equal(y.data, x.data)


def _conv_loop_oracle(x, w, b, pad):
    c_out, c_in, kh, kw = w.shape
    _, h, ww = x.shape
    out = np.zeros((c_out, h, ww))
    for o in range(c_out):
        for i in range(h):
            for j in range(ww):
                acc = float(b[o])
                for ci in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            rr, cc = i + di - pad, j + dj - pad
                            if 0 <= rr < h and 0 <= cc < ww:
                                acc += float(w[o, ci, di, dj]) * float(x[ci, rr, cc])
                out[o, i, j] = acc
    return out


def test_conv2d_against_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.uniform(-0.5, 0.5, size=(4, 5, 5)).astype(np.float32)
    w = rng.uniform(-0.5, 0.5, size=(3, 4, 3, 3)).astype(np.float32)
    b = rng.uniform(-0.5, 0.5, size=3).astype(np.float32)
    y = conv2d(Tensor(x), _conv_params(w, b))
    ref = _conv_loop_oracle(x, w, b, 1)
    assert np.abs(y.data - ref).max() < 1e-6


@pytest.mark.parametrize("kh", [1, 3, 5])
def test_conv2d_shape_preserved(kh):
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 7, 9)).astype(np.float32))
    w = rng.normal(size=(5, 2, kh, kh)).astype(np.float32)
    y = conv2d(x, _conv_params(w, np.zeros(5, np.float32)))
    assert y.shape == (5, 7, 9)


def test_conv2d_channel_mismatch():
    x = zeros([3, 4, 4])
    w = np.zeros((2, 4, 3, 3), np.float32)
    with pytest.raises(ShapeError):
        conv2d(x, _conv_params(w, np.zeros(2, np.float32)))


def test_conv2d_bad_padding_rejected():
    w = Tensor(np.zeros((2, 2, 3, 3), np.float32))
    with pytest.raises(ShapeError):
        Conv2dParams(weight=w, bias=Tensor(np.zeros(2, np.float32)), padding=0)
    even = Tensor(np.zeros((2, 2, 2, 2), np.float32))
    with pytest.raises(ShapeError):
        Conv2dParams(weight=even, bias=Tensor(np.zeros(2, np.float32)), padding=0)


def test_conv2d_linearity():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    p = _conv_params(w, np.zeros(3, np.float32))
    x = rng.normal(size=(2, 6, 6)).astype(np.float32)
    y = rng.normal(size=(2, 6, 6)).astype(np.float32)
    a, b = 1.7, -0.4
    lhs = conv2d(Tensor(a * x + b * y), p).data
    rhs = a * conv2d(Tensor(x), p).data + b * conv2d(Tensor(y), p).data
    rel = np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-12)
    assert rel < 1e-5


def test_determinism_bit_identical():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(4, 8, 8)).astype(np.float32))
    w = rng.normal(size=(6, 4, 3, 3)).astype(np.float32)
    p = _conv_params(w, rng.normal(size=6).astype(np.float32))
    y1 = conv2d(x, p).data
    y2 = conv2d(x, p).data
    assert y1.tobytes() == y2.tobytes()
    assert sigmoid(x).data.tobytes() == sigmoid(x).data.tobytes()


# --- serialization -----------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roundtrip_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(11)
    t = Tensor(rng.normal(size=(3, 4, 5)).astype(dtype))
    path = tmp_path / "t.sifa"
    save_tensor(path, t)
    back = load_tensor(path)
    assert back.dtype == t.dtype
    assert back.shape == t.shape
    assert back.data.tobytes() == t.data.tobytes()


def test_magic_bytes():
    buf = dump_tensor(zeros([2, 2]))
    assert buf[:4] == bytes([0x53, 0x49, 0x46, 0x41]) == b"SIFA"
    assert buf[4] == 1  # version


def test_corrupted_magic_rejected():
    buf = bytearray(dump_tensor(zeros([2, 2])))
    buf[0] ^= 0xFF
    with pytest.raises(FormatError):
        parse_tensor(bytes(buf))


def test_bad_version_dtype_rank_payload():
    good = bytearray(dump_tensor(zeros([2, 2])))
    bad_version = good.copy()
    bad_version[4] = 9
    with pytest.raises(FormatError):
        parse_tensor(bytes(bad_version))
    bad_dtype = good.copy()
    bad_dtype[5] = 7
    with pytest.raises(FormatError):
        parse_tensor(bytes(bad_dtype))
    bad_rank = good.copy()
    bad_rank[6] = 5
    with pytest.raises(FormatError):
        parse_tensor(bytes(bad_rank))
    with pytest.raises(FormatError):
        parse_tensor(bytes(good[:-3]))
