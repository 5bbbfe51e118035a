"""Attention/saliency export: CSVs, PGM heatmaps, tensor dumps and figures.

For a chosen query (frame t, location x,y) every block contributes:
  block{i}_attention.csv   grid_index, sample_row, sample_col, weight
  block{i}_weights.csv     grid_index, d_row, d_col, weight (displacements)
  block{i}_weights.pgm     the weight grid as an 8-bit P5 heatmap
  block{i}_msm.pgm         channel-mean motion saliency of the (t, t+1) pair
  block{i}_offsets.sifa    the raw offset field for frame t
  block{i}_msm.sifa        the raw saliency map for frame t
  block{i}_attention.png   matplotlib overview figure
Entries that do not apply to a configuration (regular sampling has no
offsets or saliency) are skipped.
"""

from __future__ import annotations

import os

import numpy as np

from .autodiff import Var
from .blocks import DemoNet, demo_forward
from .deform import grid_points
from .tensor import ShapeError, Tensor, save_tensor


def write_pgm(path, img: np.ndarray):
    """8-bit binary PGM with min-max scaling to [0, 255]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("PGM export expects a 2D array")
    lo = a.min()
    hi = a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    data = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError("not a binary PGM")
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError("expected 8-bit PGM")
        return np.frombuffer(f.read(), dtype=np.uint8, count=h * w).reshape(h, w)


def weights_to_grid(weights: np.ndarray, k: int) -> np.ndarray:
    """Reshape per-query weights to the spatial window; star pools give (k, 2k)."""
    kk = k * k
    if weights.shape[0] == kk:
        return weights.reshape(k, k)
    if weights.shape[0] == 2 * kk:
        return np.concatenate([weights[:kk].reshape(k, k),
                               weights[kk:].reshape(k, k)], axis=1)
    raise ShapeError(f"cannot arrange {weights.shape[0]} weights for k={k}")


def attention_weight_rows(weights, rows, cols, query_xy):
    """(grid_index, d_row, d_col, weight) displacement rows for one query."""
    x, y = query_xy
    out = []
    for g in range(weights.shape[0]):
        out.append((g, float(rows[g] - x), float(cols[g] - y), float(weights[g])))
    return out


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def query_capture(capture: dict, cfg, t: int, x: int, y: int, w: int):
    """Slice one query's sampling positions and weights out of a capture dict.

    Returns (rows (K,), cols (K,), weights (K,)) with the star variant's two
    directions concatenated next-then-prev.
    """
    p = x * w + y
    weights = capture["weights"][t, p]
    if cfg.variant == "star":
        def pos(sub):
            if "rows" in sub:
                r, c = sub["rows"], sub["cols"]
                return (r[t, p] if r.ndim == 3 else r[p]), \
                       (c[t, p] if c.ndim == 3 else c[p])
            raise KeyError("rows")
        rn, cn = pos(capture["next"])
        rp, cp = pos(capture["prev"])
        rows = np.concatenate([rn, rp])
        cols = np.concatenate([cn, cp])
    else:
        r, c = capture["rows"], capture["cols"]
        rows = r[t, p] if r.ndim == 3 else r[p]
        cols = c[t, p] if c.ndim == 3 else c[p]
    return rows, cols, weights


def export_attention(net: DemoNet, clip: Tensor, t: int, x: int, y: int,
                     out_dir, figures: bool = True) -> list:
    """Write per-block attention artifacts for one query; returns the paths."""
    if clip.rank != 4:
        raise ShapeError("clip must be rank 4 (C,L,H,W)")
    _, l, h, w = clip.shape
    if not (0 <= t < l and 0 <= x < h and 0 <= y < w):
        raise ShapeError(f"query (t={t}, x={x}, y={y}) out of range for "
                         f"L={l}, H={h}, W={w}")
    os.makedirs(out_dir, exist_ok=True)
    capture = []
    demo_forward(None, Var(clip.data[None].astype(net.dtype, copy=False)),
                 net, capture=capture)
    paths = []
    for i, cap in enumerate(capture):
        cfg = net.blocks[i][0]
        rows, cols, weights = query_capture(cap, cfg, t, x, y, w)
        base = os.path.join(out_dir, f"block{i}")

        p = base + "_attention.csv"
        _write_csv(p, ["grid_index", "sample_row", "sample_col", "weight"],
                   [(g, float(rows[g]), float(cols[g]), float(weights[g]))
                    for g in range(len(weights))])
        paths.append(p)

        p = base + "_weights.csv"
        _write_csv(p, ["grid_index", "d_row", "d_col", "weight"],
                   attention_weight_rows(weights, rows, cols, (x, y)))
        paths.append(p)

        p = base + "_weights.pgm"
        write_pgm(p, weights_to_grid(weights, cfg.k))
        paths.append(p)

        subs = [cap] if cfg.variant != "star" else [cap.get("next", {})]
        sub = subs[0]
        if "msm" in sub:
            msm_frame = sub["msm"][t]  # (C, H, W)
            p = base + "_msm.pgm"
            write_pgm(p, msm_frame.mean(axis=0))
            paths.append(p)
            p = base + "_msm.sifa"
            save_tensor(p, Tensor(msm_frame))
            paths.append(p)
        if "offsets" in sub:
            p = base + "_offsets.sifa"
            save_tensor(p, Tensor(sub["offsets"][t]))
            paths.append(p)

        if figures:
            from .report import save_attention_figure
            p = base + "_attention.png"
            save_attention_figure(clip.data, t, (x, y), rows, cols, weights,
                                  sub.get("msm"), p)
            paths.append(p)
    return paths
