"""Compiled inner loops for bilinear sampling and its two gradients.

These are the only hot paths that resist numpy vectorization (scattered
reads/writes per sample point). Each kernel is a plain sequential loop, so
results are deterministic and the accumulation order is fixed by
construction. `flat_frames` is the frame stack flattened to (N*H*W, C) with
channels contiguous; `base` carries the per-sample frame offset n*H*W.

The position gradient uses left-limit cell anchors (ceil(p)-1) so that the
derivative at exactly-integer positions is the subgradient from below;
everywhere else the anchors coincide with floor(p).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bilinear_gather(flat_frames, base, rows, cols, h, w):
    m = rows.shape[0]
    c = flat_frames.shape[1]
    out = np.zeros((m, c), dtype=flat_frames.dtype)
    for i in range(m):
        r = rows[i]
        cl = cols[i]
        r0 = int(np.floor(r))
        c0 = int(np.floor(cl))
        fr = r - r0
        fc = cl - c0
        b = base[i]
        for dr in range(2):
            rr = r0 + dr
            if rr < 0 or rr >= h:
                continue
            wr = fr if dr == 1 else 1.0 - fr
            if wr == 0.0:
                continue
            for dc in range(2):
                cc = c0 + dc
                if cc < 0 or cc >= w:
                    continue
                wt = wr * (fc if dc == 1 else 1.0 - fc)
                src = b + rr * w + cc
                for ch in range(c):
                    out[i, ch] += wt * flat_frames[src, ch]
    return out


@njit(cache=True)
def bilinear_scatter(grad_samples, base, rows, cols, h, w, nflat):
    m = rows.shape[0]
    c = grad_samples.shape[1]
    out = np.zeros((nflat, c), dtype=grad_samples.dtype)
    for i in range(m):
        r = rows[i]
        cl = cols[i]
        r0 = int(np.floor(r))
        c0 = int(np.floor(cl))
        fr = r - r0
        fc = cl - c0
        b = base[i]
        for dr in range(2):
            rr = r0 + dr
            if rr < 0 or rr >= h:
                continue
            wr = fr if dr == 1 else 1.0 - fr
            if wr == 0.0:
                continue
            for dc in range(2):
                cc = c0 + dc
                if cc < 0 or cc >= w:
                    continue
                wt = wr * (fc if dc == 1 else 1.0 - fc)
                dst = b + rr * w + cc
                for ch in range(c):
                    out[dst, ch] += wt * grad_samples[i, ch]
    return out


@njit(cache=True)
def bilinear_pos_grad(flat_frames, grad_samples, base, rows, cols, h, w):
    m = rows.shape[0]
    c = flat_frames.shape[1]
    grow = np.zeros(m, dtype=flat_frames.dtype)
    gcol = np.zeros(m, dtype=flat_frames.dtype)
    for i in range(m):
        r = rows[i]
        cl = cols[i]
        ra = int(np.ceil(r)) - 1
        ca = int(np.ceil(cl)) - 1
        fr = r - ra
        fc = cl - ca
        b = base[i]
        # s[dr][dc] = sum_ch grad_samples[i,ch] * frame(ra+dr, ca+dc)
        s00 = 0.0
        s01 = 0.0
        s10 = 0.0
        s11 = 0.0
        for dr in range(2):
            rr = ra + dr
            if rr < 0 or rr >= h:
                continue
            for dc in range(2):
                cc = ca + dc
                if cc < 0 or cc >= w:
                    continue
                src = b + rr * w + cc
                acc = 0.0
                for ch in range(c):
                    acc += grad_samples[i, ch] * flat_frames[src, ch]
                if dr == 0:
                    if dc == 0:
                        s00 = acc
                    else:
                        s01 = acc
                else:
                    if dc == 0:
                        s10 = acc
                    else:
                        s11 = acc
        grow[i] = (s10 - s00) * (1.0 - fc) + (s11 - s01) * fc
        gcol[i] = (s01 - s00) * (1.0 - fr) + (s11 - s10) * fr
    return grow, gcol
