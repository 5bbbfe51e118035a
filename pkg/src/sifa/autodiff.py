"""Reverse-mode derivatives for every learnable path in the block.

Rather than a general graph autodiff, this module provides a fixed set of
primitives, each with an explicit backward rule, recorded on a `Tape` in
forward order and replayed in exact reverse order. Every primitive accepts
`tape=None`, in which case it computes the forward value only; the
vectorized block/network forward is therefore a single code path whether or
not gradients are wanted.

Array layout conventions used throughout:
  clips     (B, C, L, H, W)
  frames    (N, C, H, W)      with N = B*L
  pixels    (N, P, C)         with P = H*W
  samples   (N, P, K, C)      with K = grid size (k*k, or 2*k*k joint pools)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .deform import grid_points


class Var:
    """A node value with an optional gradient slot.

    `_grad_owned` tracks whether `grad` may be mutated in place: the first
    contribution is aliased without a copy and never written to, so views of
    other gradients can be handed over safely.
    """

    __slots__ = ("value", "grad", "_grad_owned")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = None
        self._grad_owned = False


class Tape:
    """Ordered record of primitive applications; backward replays it reversed."""

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def record(self, backward_fn):
        self.records.append(backward_fn)

    def backward(self, loss: Var):
        if loss.value.size != 1:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self.records):
            fn()


def _accum(var: Var, g):
    if var.grad is None:
        var.grad = g
        var._grad_owned = False
    elif var._grad_owned:
        var.grad += g
    else:
        var.grad = var.grad + g
        var._grad_owned = True


def backward(loss: Var, tape: Tape):
    """Propagate d(loss)=1 through the tape into every leaf's grad slot."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(tape, a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, out.grad)
        tape.record(bwd)
    return out


def sub(tape, a: Var, b: Var) -> Var:
    out = Var(a.value - b.value)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, -out.grad)
        tape.record(bwd)
    return out


def mul(tape, a: Var, b: Var) -> Var:
    out = Var(a.value * b.value)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(a, out.grad * b.value)
            _accum(b, out.grad * a.value)
        tape.record(bwd)
    return out


def sigmoid(tape, x: Var) -> Var:
    v = x.value
    # exp of -|v| never overflows; branchless recombination
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Var(y)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad * y * (1.0 - y))
        tape.record(bwd)
    return out


def tanh(tape, x: Var) -> Var:
    y = np.tanh(x.value)
    out = Var(y)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad * (1.0 - y * y))
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# convolution / affine
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, kh * kw * c, h * w), dtype=x.dtype)
    i = 0
    for di in range(kh):
        for dj in range(kw):
            cols[:, i * c:(i + 1) * c, :] = xp[:, :, di:di + h, dj:dj + w].reshape(n, c, h * w)
            i += 1
    return cols


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, padding: int) -> np.ndarray:
    n, c, h, w = shape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    i = 0
    for di in range(kh):
        for dj in range(kw):
            buf[:, :, di:di + h, dj:dj + w] += dcols[:, i * c:(i + 1) * c, :].reshape(n, c, h, w)
            i += 1
    return buf[:, :, padding:padding + h, padding:padding + w]


def conv2d(tape, x: Var, weight: Var, bias: Var, padding: int) -> Var:
    """Same-size stride-1 cross-correlation over a frame batch (N,Cin,H,W)."""
    n, c_in, h, w = x.value.shape
    out_ch, c_in_w, kh, kw = weight.value.shape
    if c_in != c_in_w:
        raise ValueError(f"channel mismatch: {c_in} vs {c_in_w}")
    cols = _im2col(x.value, kh, kw, padding)
    wmat = np.ascontiguousarray(weight.value.transpose(2, 3, 1, 0)
                                .reshape(kh * kw * c_in, out_ch)).T
    y = np.matmul(wmat, cols) + bias.value.reshape(1, out_ch, 1)
    out = Var(y.reshape(n, out_ch, h, w))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            dy = out.grad.reshape(n, out_ch, h * w)
            _accum(bias, dy.sum(axis=(0, 2)))
            dwmat = np.tensordot(dy, cols, axes=([0, 2], [0, 2]))
            _accum(weight, dwmat.reshape(out_ch, kh, kw, c_in).transpose(0, 3, 1, 2))
            dcols = np.matmul(wmat.T, dy)
            _accum(x, _col2im(dcols, (n, c_in, h, w), kh, kw, padding))
        tape.record(bwd)
    return out


def pointwise_affine(tape, x: Var, weight: Var, bias: Var) -> Var:
    """y = x @ weight.T + bias over the last axis."""
    out = Var(x.value @ weight.value.T + bias.value)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accum(x, g @ weight.value)
            gf = g.reshape(-1, g.shape[-1])
            xf = x.value.reshape(-1, x.value.shape[-1])
            _accum(weight, gf.T @ xf)
            _accum(bias, gf.sum(axis=0))
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# layout / temporal structure
# ---------------------------------------------------------------------------

def frames_of(tape, x: Var) -> Var:
    """(B,C,L,H,W) -> (B*L, C, H, W)."""
    b, c, l, h, w = x.value.shape
    out = Var(np.ascontiguousarray(x.value.transpose(0, 2, 1, 3, 4)).reshape(b * l, c, h, w))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad.reshape(b, l, c, h, w).transpose(0, 2, 1, 3, 4))
        tape.record(bwd)
    return out


def clip_of(tape, x: Var, b: int, l: int) -> Var:
    """(B*L, C, H, W) -> (B,C,L,H,W)."""
    _, c, h, w = x.value.shape
    out = Var(np.ascontiguousarray(x.value.reshape(b, l, c, h, w).transpose(0, 2, 1, 3, 4)))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, np.ascontiguousarray(out.grad.transpose(0, 2, 1, 3, 4))
                   .reshape(b * l, c, h, w))
        tape.record(bwd)
    return out


def pixels_of(tape, x: Var) -> Var:
    """(N,C,H,W) -> (N, H*W, C)."""
    n, c, h, w = x.value.shape
    out = Var(np.ascontiguousarray(x.value.transpose(0, 2, 3, 1)).reshape(n, h * w, c))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, out.grad.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        tape.record(bwd)
    return out


def planes_of(tape, x: Var, h: int, w: int) -> Var:
    """(N, H*W, C) -> (N, C, H, W)."""
    n, _, c = x.value.shape
    out = Var(np.ascontiguousarray(x.value.reshape(n, h, w, c).transpose(0, 3, 1, 2)))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(n, h * w, c))
        tape.record(bwd)
    return out


def next_frames(tape, x: Var) -> Var:
    """Shift the L axis one step forward; the last frame maps to itself."""
    l = x.value.shape[2]
    out = Var(np.concatenate([x.value[:, :, 1:], x.value[:, :, l - 1:l]], axis=2)
              if l > 1 else x.value.copy())
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            if l > 1:
                g[:, :, 1:] += out.grad[:, :, :l - 1]
                g[:, :, l - 1] += out.grad[:, :, l - 1]
            else:
                g += out.grad
            _accum(x, g)
        tape.record(bwd)
    return out


def prev_frames(tape, x: Var) -> Var:
    """Shift the L axis one step backward; the first frame maps to itself."""
    l = x.value.shape[2]
    out = Var(np.concatenate([x.value[:, :, 0:1], x.value[:, :, :l - 1]], axis=2)
              if l > 1 else x.value.copy())
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(x.value)
            if l > 1:
                g[:, :, :l - 1] += out.grad[:, :, 1:]
                g[:, :, 0] += out.grad[:, :, 0]
            else:
                g += out.grad
            _accum(x, g)
        tape.record(bwd)
    return out


def concat(tape, parts, axis: int) -> Var:
    sizes = [p.value.shape[axis] for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            off = 0
            for p, s in zip(parts, sizes):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(off, off + s)
                _accum(p, out.grad[tuple(sl)])
                off += s
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def base_grid(k: int, h: int, w: int, dtype):
    """Regular sampling positions: (P, K) row and column coordinate tables."""
    grid = np.asarray(grid_points(k), dtype=dtype)  # (K, 2)
    qr = np.repeat(np.arange(h, dtype=dtype), w)    # (P,)
    qc = np.tile(np.arange(w, dtype=dtype), h)
    rows = qr[:, None] + grid[None, :, 0]
    cols = qc[:, None] + grid[None, :, 1]
    return rows, cols


def offsets_to_positions(tape, off: Var, k: int):
    """Turn a (N, 2K, H, W) offset map into absolute sample positions.

    Returns (rows, cols), each (N, P, K): query coordinate + regular grid
    displacement + predicted offset.
    """
    n, twok, h, w = off.value.shape
    kk = k * k
    if twok != 2 * kk:
        raise ValueError(f"expected {2 * kk} offset channels, got {twok}")
    br, bc = base_grid(k, h, w, off.value.dtype)
    o5 = off.value.reshape(n, kk, 2, h, w)
    drow = np.ascontiguousarray(o5[:, :, 0].transpose(0, 2, 3, 1)).reshape(n, h * w, kk)
    dcol = np.ascontiguousarray(o5[:, :, 1].transpose(0, 2, 3, 1)).reshape(n, h * w, kk)
    rows = Var(br[None] + drow)
    cols = Var(bc[None] + dcol)
    if tape is not None:
        def bwd():
            g = np.zeros_like(off.value).reshape(n, kk, 2, h, w)
            any_grad = False
            if rows.grad is not None:
                g[:, :, 0] = rows.grad.reshape(n, h, w, kk).transpose(0, 3, 1, 2)
                any_grad = True
            if cols.grad is not None:
                g[:, :, 1] = cols.grad.reshape(n, h, w, kk).transpose(0, 3, 1, 2)
                any_grad = True
            if any_grad:
                _accum(off, g.reshape(n, 2 * kk, h, w))
        tape.record(bwd)
    return rows, cols


def bilinear_gather(tape, frames: Var, rows: Var, cols: Var) -> Var:
    """Sample frames at fractional positions -> (N, P, K, C).

    Gradients flow to the frame values (scatter of the interpolation
    weights) and to the positions (left-limit subgradient at integers).
    """
    n, c, h, w = frames.value.shape
    _, p, k = rows.value.shape
    flatf = np.ascontiguousarray(frames.value.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    base = np.repeat(np.arange(n, dtype=np.int64) * (h * w), p * k)
    rflat = np.ascontiguousarray(rows.value).reshape(-1)
    cflat = np.ascontiguousarray(cols.value).reshape(-1)
    out2 = _kernels.bilinear_gather(flatf, base, rflat, cflat, h, w)
    out = Var(out2.reshape(n, p, k, c))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g2 = np.ascontiguousarray(out.grad).reshape(n * p * k, c)
            dflat = _kernels.bilinear_scatter(g2, base, rflat, cflat, h, w, n * h * w)
            _accum(frames, dflat.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            grow, gcol = _kernels.bilinear_pos_grad(flatf, g2, base, rflat, cflat, h, w)
            _accum(rows, grow.reshape(n, p, k))
            _accum(cols, gcol.reshape(n, p, k))
        tape.record(bwd)
    return out


def grid_gather(tape, frames: Var, k: int) -> Var:
    """Extract the regular zero-padded k*k neighborhood -> (N, P, K, C)."""
    n, c, h, w = frames.value.shape
    r = (k - 1) // 2
    kk = k * k
    xp = np.pad(frames.value, ((0, 0), (0, 0), (r, r), (r, r)))
    out_v = np.empty((n, h * w, kk, c), dtype=frames.value.dtype)
    for g, (a, b) in enumerate(grid_points(k)):
        sl = xp[:, :, r + a:r + a + h, r + b:r + b + w]
        out_v[:, :, g, :] = sl.transpose(0, 2, 3, 1).reshape(n, h * w, c)
    out = Var(out_v)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            buf = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=out.grad.dtype)
            for g, (a, b) in enumerate(grid_points(k)):
                buf[:, :, r + a:r + a + h, r + b:r + b + w] += (
                    out.grad[:, :, g, :].reshape(n, h, w, c).transpose(0, 3, 1, 2))
            _accum(frames, buf[:, :, r:r + h, r:r + w])
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# attention math
# ---------------------------------------------------------------------------

def correlate(tape, q: Var, s: Var) -> Var:
    """(N,P,C) x (N,P,K,C) -> raw attention logits (N,P,K)."""
    out = Var(np.matmul(s.value, q.value[..., None])[..., 0])
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accum(q, (g[..., None] * s.value).sum(axis=2))
            _accum(s, g[..., None] * q.value[:, :, None, :])
        tape.record(bwd)
    return out


def softmax(tape, x: Var, scale: float) -> Var:
    """Stable softmax of scale*x over the last axis."""
    z = x.value * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Var(y)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            inner = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, scale * y * (g - inner))
        tape.record(bwd)
    return out


def aggregate(tape, w: Var, s: Var) -> Var:
    """Weighted sum of samples over K -> (N,P,C), accumulated in float64."""
    acc = np.einsum("npk,npkc->npc", w.value, s.value, dtype=np.float64)
    out = Var(acc.astype(s.value.dtype))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            _accum(w, (s.value * g[:, :, None, :]).sum(axis=-1))
            _accum(s, w.value[..., None] * g[:, :, None, :])
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# head / loss
# ---------------------------------------------------------------------------

def mean_pool(tape, x: Var) -> Var:
    """Global average over (L,H,W): (B,C,L,H,W) -> (B,C)."""
    b, c, l, h, w = x.value.shape
    out = Var(x.value.mean(axis=(2, 3, 4)))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad[:, :, None, None, None] / (l * h * w)
            _accum(x, np.broadcast_to(g, x.value.shape).copy())
        tape.record(bwd)
    return out


def cross_entropy(tape, logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy of (B, n) logits against integer labels."""
    z = logits.value
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(se)
    b = z.shape[0]
    out = Var(np.asarray(-logp[np.arange(b), labels].mean(), dtype=z.dtype))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            p = e / se
            p[np.arange(b), labels] -= 1.0
            _accum(logits, (float(out.grad) / b) * p)
        tape.record(bwd)
    return out


def total_sum(tape, x: Var) -> Var:
    out = Var(np.asarray(x.value.sum(), dtype=x.value.dtype))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, np.full(x.value.shape, float(out.grad), dtype=x.value.dtype))
        tape.record(bwd)
    return out


def project_scalar(tape, x: Var, coeffs: np.ndarray) -> Var:
    """Fixed linear functional sum(coeffs * x); scalarizes op outputs for checks."""
    out = Var(np.asarray((x.value * coeffs).sum(), dtype=x.value.dtype))
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accum(x, float(out.grad) * coeffs)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

REL_ERR_FLOOR = 1e-8


@dataclass
class GradReport:
    """Analytic-vs-numeric comparison for one parameter.

    `numeric` holds central differences at the sampled coordinates and NaN
    elsewhere; `max_rel_err` is taken over the sampled coordinates with the
    denominator floored at 1e-8.
    """

    parameter: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float
    passed: bool


def finite_diff_check(fn, params, h: float = 1e-3, tol: float = 1e-4,
                      max_coords: int = 256, seed: int = 0,
                      mode: str = "double"):
    """Check analytic gradients of `fn` against central differences.

    `fn(tape)` must rebuild the same scalar loss Var from the live values of
    `params`, a list of (name, Var) pairs; it is called once with a tape to
    obtain analytic gradients and twice per probed coordinate without one.
    At most `max_coords` coordinates per parameter are probed, chosen by a
    seeded RNG.
    """
    if mode == "double":
        for name, v in params:
            if v.value.dtype != np.float64:
                raise ValueError(f"parameter {name} is not float64; "
                                 "finite differences need double precision")
    elif mode != "single":
        raise ValueError(f"unknown mode {mode!r}")

    for _, v in params:
        v.grad = None
    tape = Tape()
    loss = fn(tape)
    if not np.isfinite(loss.value):
        raise ValueError("loss is non-finite")
    tape.backward(loss)
    analytic = {}
    for name, v in params:
        analytic[name] = (np.zeros_like(v.value) if v.grad is None
                          else np.array(v.grad, copy=True))

    rng = np.random.default_rng(seed)
    reports = []
    for name, v in params:
        flat = v.value.reshape(-1)
        size = flat.shape[0]
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = np.full(v.value.shape, np.nan, dtype=v.value.dtype)
        nflat = numeric.reshape(-1)
        worst = 0.0
        aflat = analytic[name].reshape(-1)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            fp = float(fn(None).value)
            flat[ci] = orig - h
            fm = float(fn(None).value)
            flat[ci] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"non-finite loss while probing {name}[{ci}]")
            num = (fp - fm) / (2.0 * h)
            nflat[ci] = num
            a = float(aflat[ci])
            rel = abs(a - num) / max(abs(a), abs(num), REL_ERR_FLOOR)
            worst = max(worst, rel)
        reports.append(GradReport(parameter=name, analytic=analytic[name],
                                  numeric=numeric, max_rel_err=worst,
                                  passed=worst < tol))
    return reports


def render_report_table(reports) -> str:
    """Fixed-width text table of gradient-check results."""
    name_w = max([len(r.parameter) for r in reports] + [9])
    lines = [f"{'parameter':<{name_w}}  {'max_rel_err':>12}  {'pass':>4}",
             "-" * (name_w + 20)]
    for r in reports:
        lines.append(f"{r.parameter:<{name_w}}  {r.max_rel_err:>12.3e}  "
                     f"{'ok' if r.passed else 'FAIL':>4}")
    return "\n".join(lines)


def write_report_csv(reports, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("parameter,max_rel_err,pass\n")
        for r in reports:
            f.write(f"{r.parameter},{r.max_rel_err:.9e},{int(r.passed)}\n")
