"""Brute-force scalar reference for the block forward.

Everything here is written against nested Python lists with explicit
loops, as naively as possible, and shares no computation code with the
optimized path: its only imports are the tensor container and the config
dataclass. `OpCounter` tallies multiply-accumulates at the four counted
sites (offset convolution, bilinear sampling, correlation, aggregation) so
the analytic cost model can be audited against actual scalar operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OpCounter:
    correlation: int = 0
    aggregation: int = 0
    offset_conv: int = 0
    sampling: int = 0

    @property
    def total(self) -> int:
        return self.correlation + self.aggregation + self.offset_conv + self.sampling


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _conv2d_naive(x, weight, bias, pad, counter=None, field=None):
    """Zero-padded same-size cross-correlation on one frame (lists).

    Every kernel tap is multiplied, including taps over the zero padding,
    so the MAC count is exactly H*W*out*in*kh*kw.
    """
    c_in = len(x)
    h = len(x[0])
    w = len(x[0][0])
    out_ch = len(weight)
    kh = len(weight[0][0])
    kw = len(weight[0][0][0])
    out = [[[0.0] * w for _ in range(h)] for _ in range(out_ch)]
    macs = 0
    for o in range(out_ch):
        wo = weight[o]
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for ci in range(c_in):
                    xc = x[ci]
                    wc = wo[ci]
                    for di in range(kh):
                        rr = i + di - pad
                        row = xc[rr] if 0 <= rr < h else None
                        wrow = wc[di]
                        for dj in range(kw):
                            cc = j + dj - pad
                            v = row[cc] if (row is not None and 0 <= cc < w) else 0.0
                            acc += wrow[dj] * v
                            macs += 1
                out[o][i][j] = acc
    if counter is not None and field is not None:
        setattr(counter, field, getattr(counter, field) + macs)
    return out


def _bilinear_naive(frame, r, c, counter=None):
    """Sample all channels at one fractional position; 4 MACs per scalar."""
    n_ch = len(frame)
    h = len(frame[0])
    w = len(frame[0][0])
    r0 = math.floor(r)
    c0 = math.floor(c)
    fr = r - r0
    fc = c - c0
    out = [0.0] * n_ch
    for dr in (0, 1):
        rr = r0 + dr
        wr = fr if dr == 1 else 1.0 - fr
        r_ok = 0 <= rr < h
        for dc in (0, 1):
            cc = c0 + dc
            wt = wr * (fc if dc == 1 else 1.0 - fc)
            c_ok = 0 <= cc < w
            for ch in range(n_ch):
                v = frame[ch][rr][cc] if (r_ok and c_ok) else 0.0
                out[ch] += wt * v
            if counter is not None:
                counter.sampling += n_ch
    return out


def _grid(k):
    r = (k - 1) // 2
    return [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)]


def _frame_of(clip, t):
    """clip[c][t] slices -> frame[c][h][w] lists."""
    return [clip[c][t] for c in range(len(clip))]


def _offset_source(cfg, cur, other):
    if cfg.offset_source == "next_frame":
        return other
    c_n = len(cur)
    h = len(cur[0])
    w = len(cur[0][0])
    src = [[[0.0] * w for _ in range(h)] for _ in range(c_n)]
    for ci in range(c_n):
        for i in range(h):
            for j in range(w):
                d = other[ci][i][j] - cur[ci][i][j]
                if cfg.offset_source == "temporal_difference":
                    src[ci][i][j] = d
                else:  # motion_saliency
                    src[ci][i][j] = _sigmoid(d) * other[ci][i][j]
    return src


def _direction_columns(cfg, other, x, y, counter, offsets):
    """The k*k sampled columns for one query in one temporal direction."""
    cols = []
    for g, (a, b) in enumerate(_grid(cfg.k)):
        if cfg.sampling == "deformable":
            da = offsets[2 * g][x][y]
            db = offsets[2 * g + 1][x][y]
            cols.append(_bilinear_naive(other, x + a + da, y + b + db, counter))
        else:
            rr = x + a
            cc = y + b
            h = len(other[0])
            w = len(other[0][0])
            if 0 <= rr < h and 0 <= cc < w:
                cols.append([other[ch][rr][cc] for ch in range(len(other))])
            else:
                cols.append([0.0] * len(other))
    return cols


def oracle_forward(clip: Tensor, cfg, params, counter: OpCounter | None = None) -> Tensor:
    """Scalar re-implementation of the block forward on one (C,L,H,W) clip."""
    data = clip.data.tolist()
    c_n = len(data)
    l_n = len(data[0])
    h = len(data[0][0])
    w = len(data[0][0][0])
    sqrt_c = math.sqrt(c_n)

    if cfg.projection:
        pw = params.qkv_projection.weight.data.tolist()
        pb = params.qkv_projection.bias.data.tolist()
        proj = [[[[0.0] * w for _ in range(h)] for _ in range(l_n)] for _ in range(c_n)]
        for t in range(l_n):
            for i in range(h):
                for j in range(w):
                    vec = [data[ci][t][i][j] for ci in range(c_n)]
                    for co in range(c_n):
                        acc = pb[co]
                        for ci in range(c_n):
                            acc += pw[co][ci] * vec[ci]
                        proj[co][t][i][j] = acc
        data = proj

    est_w = est_b = est_w_prev = est_b_prev = None
    if cfg.sampling == "deformable":
        est_w = params.offset_estimator.weight.data.tolist()
        est_b = params.offset_estimator.bias.data.tolist()
        if cfg.variant == "star":
            est_w_prev = params.offset_estimator_prev.weight.data.tolist()
            est_b_prev = params.offset_estimator_prev.bias.data.tolist()
    if cfg.variant == "correlation_only":
        proj_w = params.corr_projection.weight.data.tolist()
        proj_b = params.corr_projection.bias.data.tolist()

    pad = (len(params.offset_estimator.weight.data[0][0]) - 1) // 2 \
        if cfg.sampling == "deformable" else 0

    out = [[[[0.0] * w for _ in range(h)] for _ in range(l_n)] for _ in range(c_n)]

    for t in range(l_n):
        cur = _frame_of(data, t)
        t_next = t + 1 if t + 1 < l_n else t
        nxt = _frame_of(data, t_next)
        off_next = None
        if cfg.sampling == "deformable":
            src = _offset_source(cfg, cur, nxt)
            off_next = _conv2d_naive(src, est_w, est_b, pad, counter, "offset_conv")
        directions = [(nxt, off_next)]
        if cfg.variant == "star":
            t_prev = t - 1 if t - 1 >= 0 else t
            prv = _frame_of(data, t_prev)
            off_prev = None
            if cfg.sampling == "deformable":
                src = _offset_source(cfg, cur, prv)
                off_prev = _conv2d_naive(src, est_w_prev, est_b_prev, pad,
                                         counter, "offset_conv")
            directions.append((prv, off_prev))

        for x in range(h):
            for y in range(w):
                q = [cur[ci][x][y] for ci in range(c_n)]
                cols = []
                for other, offs in directions:
                    cols.extend(_direction_columns(cfg, other, x, y, counter, offs))
                wts = []
                for col in cols:
                    acc = 0.0
                    for ci in range(c_n):
                        acc += q[ci] * col[ci]
                    wts.append(acc)
                    if counter is not None:
                        counter.correlation += c_n
                if cfg.norm == "softmax":
                    scaled = [v / sqrt_c for v in wts]
                    m = max(scaled)
                    es = [math.exp(v - m) for v in scaled]
                    se = sum(es)
                    wts = [e / se for e in es]

                if cfg.variant == "correlation_only":
                    feat = q + wts
                    for co in range(c_n):
                        acc = proj_b[co]
                        row = proj_w[co]
                        for ci in range(len(feat)):
                            acc += row[ci] * feat[ci]
                        out[co][t][x][y] = acc
                else:
                    for ci in range(c_n):
                        acc = 0.0
                        for g, col in enumerate(cols):
                            acc += wts[g] * col[ci]
                        out[ci][t][x][y] = q[ci] + acc
                        if counter is not None:
                            counter.aggregation += len(cols)
    return Tensor(np.asarray(out, dtype=clip.dtype))
