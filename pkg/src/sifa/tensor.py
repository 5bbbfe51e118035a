"""Minimal dense-tensor substrate: storage, elementwise math, conv2d, serialization.

Tensors are rank 1-4, row-major (last axis fastest), single precision by
default with a double-precision mode used for gradient checking. All public
operations validate that their result is finite; NaN/Inf is treated as an
error state, never as a value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32
F64 = np.float64

_DTYPE_CODES = {1: F32, 2: F64}
_CODE_OF_DTYPE = {np.dtype(F32): 1, np.dtype(F64): 2}

MAGIC = bytes((0x53, 0x49, 0x46, 0x41))  # "SIFA"
FORMAT_VERSION = 1

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when shapes or extents are inconsistent with an operation."""


class FormatError(ValueError):
    """Raised when a tensor file does not conform to the on-disk format."""


def _as_dtype(precision) -> np.dtype:
    if precision in ("f32", "single", F32, np.dtype(F32)):
        return np.dtype(F32)
    if precision in ("f64", "double", F64, np.dtype(F64)):
        return np.dtype(F64)
    raise ValueError(f"unsupported precision: {precision!r}")


class Tensor:
    """Dense row-major array of rank 1-4, float32 or float64.

    `data` is always C-contiguous, so the flat index of coordinates
    (i0..i3) is ((i0*d1+i1)*d2+i2)*d3+i3.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.dtype(F32), np.dtype(F64)):
            arr = arr.astype(F32)
        if not (1 <= arr.ndim <= MAX_RANK):
            raise ShapeError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor contains non-finite values")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def size(self) -> int:
        return self.data.size

    def flat_index(self, coords) -> int:
        """Row-major flat index of a coordinate tuple."""
        if len(coords) != self.rank:
            raise ShapeError(f"expected {self.rank} coordinates, got {len(coords)}")
        idx = 0
        for c, d in zip(coords, self.shape):
            if not 0 <= c < d:
                raise ShapeError(f"coordinate {coords} out of bounds for {self.shape}")
            idx = idx * d + c
        return idx

    def coords_of(self, flat: int) -> tuple:
        """Inverse of flat_index."""
        if not 0 <= flat < self.size():
            raise ShapeError(f"flat index {flat} out of bounds")
        coords = []
        for d in reversed(self.shape):
            coords.append(flat % d)
            flat //= d
        return tuple(reversed(coords))

    def astype(self, precision) -> "Tensor":
        return Tensor(self.data.astype(_as_dtype(precision)))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def zeros(shape, dtype=F32) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}")
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank must be <= {MAX_RANK}")
    return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape, dtype=t.dtype))


def _check_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _finish(arr: np.ndarray) -> Tensor:
    if not np.isfinite(arr).all():
        raise ValueError("operation produced non-finite values")
    return Tensor(arr)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add/sub/mul of equal-shape tensors."""
    _check_same_shape(a, b)
    if op == "add":
        return _finish(a.data + b.data)
    if op == "sub":
        return _finish(a.data - b.data)
    if op == "mul":
        return _finish(a.data * b.data)
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function, branched on sign."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    return _finish(sigmoid_array(a.data))


def dot(a, b) -> float:
    """Dot product of two equal-length vectors, summed left to right.

    The fixed accumulation order makes the result independent of any
    internal blocking, at the cost of speed; this is the reference
    reduction used by the per-query attention path.
    """
    av = np.asarray(a.data if isinstance(a, Tensor) else a)
    bv = np.asarray(b.data if isinstance(b, Tensor) else b)
    if av.ndim != 1 or bv.ndim != 1:
        raise ShapeError("dot expects rank-1 vectors")
    if av.shape[0] != bv.shape[0]:
        raise ShapeError(f"length mismatch: {av.shape[0]} vs {bv.shape[0]}")
    al = av.tolist()
    bl = bv.tolist()
    acc = 0.0
    for x, y in zip(al, bl):
        acc += x * y
    return acc


@dataclass
class Conv2dParams:
    """2D cross-correlation parameters, stride fixed at 1.

    Same-size output requires an odd square kernel with padding (kh-1)/2;
    that is enforced here because every estimator in this package is a
    same-size convolution.
    """

    weight: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor    # (out_ch,)
    padding: int = field(default=0)

    def __post_init__(self):
        if self.weight.rank != 4:
            raise ShapeError("conv weight must have rank 4 (out,in,kh,kw)")
        out_ch, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.padding != (kh - 1) // 2:
            raise ShapeError(f"padding must be (kh-1)//2={(kh-1)//2}, got {self.padding}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"bias must have shape ({out_ch},), got {self.bias.shape}")
        if self.bias.dtype != self.weight.dtype:
            raise ShapeError("weight/bias dtype mismatch")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def conv2d_array(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                 padding: int) -> np.ndarray:
    """Same-size cross-correlation on a batch (N, C_in, H, W) via im2col."""
    n, c_in, h, w = x.shape
    out_ch, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"channel mismatch: input {c_in} vs weight {c_in_w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c_in * kh * kw, h * w), dtype=x.dtype)
    i = 0
    for di in range(kh):
        for dj in range(kw):
            cols[:, i * c_in:(i + 1) * c_in, :] = (
                xp[:, :, di:di + h, dj:dj + w].reshape(n, c_in, h * w))
            i += 1
    wmat = np.ascontiguousarray(
        weight.transpose(0, 2, 3, 1).reshape(out_ch, kh * kw * c_in))
    y = np.matmul(wmat, cols)  # (n, out_ch, h*w)
    y += bias.reshape(1, out_ch, 1)
    return y.reshape(n, out_ch, h, w)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation of a (C_in, H, W) tensor with zero padding and bias."""
    if x.rank != 3:
        raise ShapeError(f"conv2d input must be rank 3 (C,H,W), got rank {x.rank}")
    y = conv2d_array(x.data[None].astype(p.weight.dtype, copy=False),
                     p.weight.data, p.bias.data, p.padding)[0]
    return _finish(y)


# ---------------------------------------------------------------------------
# On-disk format: magic "SIFA", version byte, dtype byte (1=f32, 2=f64),
# rank byte, extents as u32 little-endian, then data little-endian row-major.
# ---------------------------------------------------------------------------

def dump_tensor(t: Tensor) -> bytes:
    code = _CODE_OF_DTYPE[np.dtype(t.dtype)]
    head = MAGIC + struct.pack("<BBB", FORMAT_VERSION, code, t.rank)
    head += struct.pack(f"<{t.rank}I", *t.shape)
    le = "<f4" if code == 1 else "<f8"
    return head + np.ascontiguousarray(t.data).astype(le, copy=False).tobytes()


def parse_tensor(buf: bytes) -> Tensor:
    if len(buf) < 7:
        raise FormatError("truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack("<BBB", buf[4:7])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"invalid rank {rank}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated extent list")
    shape = struct.unpack(f"<{rank}I", buf[7:off])
    if any(d < 1 for d in shape):
        raise FormatError(f"invalid extents {shape}")
    le = np.dtype("<f4") if code == 1 else np.dtype("<f8")
    count = int(np.prod(shape))
    expected = off + count * le.itemsize
    if len(buf) != expected:
        raise FormatError(f"payload size {len(buf) - off}, expected {expected - off}")
    data = np.frombuffer(buf, dtype=le, count=count, offset=off)
    return Tensor(data.astype(_DTYPE_CODES[code]).reshape(shape))


def save_tensor(path, t: Tensor):
    with open(path, "wb") as f:
        f.write(dump_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return parse_tensor(f.read())
