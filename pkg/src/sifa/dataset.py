"""Synthetic-motion clips: a deforming square or bar translating in one of
eight directions, rendered with exact box coverage so sub-pixel motion is
well defined.

Clips are synthesized directly in feature space as a single channel in
[0,1] plus optional noise; the class label is the motion direction index.
The generator guarantees the object stays fully inside the grid for every
frame and rejects infeasible specs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, save_tensor, load_tensor

DIRECTIONS = ("up", "down", "left", "right",
              "upleft", "upright", "downleft", "downright")

# (row, col) unit steps; speed is applied per axis, so diagonals move
# `speed` pixels per frame along each axis
DIRECTION_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1),
                   (-1, -1), (-1, 1), (1, -1), (1, 1))

OBJECTS = ("square", "bar")


@dataclass
class SyntheticClipSpec:
    grid: int = 16
    frames: int = 8
    object_kind: str = "square"
    direction: int = 3          # index into DIRECTIONS
    speed: float = 1.0          # pixels/frame per moving axis
    deformation: float = 0.0    # per-frame scale jitter fraction
    noise: float = 0.0          # additive gaussian noise std

    def __post_init__(self):
        if self.object_kind not in OBJECTS:
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        if not 0 <= self.direction < len(DIRECTIONS):
            raise ValueError(f"direction index must be in [0,8), got {self.direction}")
        if self.grid < 4 or self.frames < 1:
            raise ValueError("grid must be >= 4 and frames >= 1")


class InfeasibleClip(ValueError):
    """No start position keeps the object fully inside the grid."""


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Overlap of [lo, hi] with each unit pixel cell [i, i+1)."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, i + 1.0) - np.maximum(lo, i), 0.0, 1.0)


def render_clip(spec: SyntheticClipSpec, start, half_rc, jitters,
                noise_rng=None) -> np.ndarray:
    """Render (1, L, H, W): box object at start, moving by speed*step per frame.

    `start` is the (row, col) center at t=0, `half_rc` the base half-sizes,
    `jitters` one scale factor offset per frame (half sizes scale by
    1+jitter). Raises InfeasibleClip if any frame would clip the object.
    """
    h = w = spec.grid
    l = spec.frames
    dr, dc = DIRECTION_STEPS[spec.direction]
    clip = np.zeros((1, l, h, w), dtype=np.float64)
    for t in range(l):
        cr = start[0] + t * spec.speed * dr
        cc = start[1] + t * spec.speed * dc
        s = 1.0 + jitters[t]
        hr = half_rc[0] * s
        hc = half_rc[1] * s
        if cr - hr < 0 or cr + hr > h or cc - hc < 0 or cc + hc > w:
            raise InfeasibleClip(
                f"object leaves the {h}x{w} grid at frame {t} "
                f"(center=({cr:.2f},{cc:.2f}), half=({hr:.2f},{hc:.2f}))")
        clip[0, t] = np.outer(_coverage_1d(cr - hr, cr + hr, h),
                              _coverage_1d(cc - hc, cc + hc, w))
    if spec.noise > 0 and noise_rng is not None:
        clip += noise_rng.normal(0.0, spec.noise, clip.shape)
    return clip.astype(np.float32)


def _base_halves(spec: SyntheticClipSpec, rng) -> tuple:
    if spec.object_kind == "square":
        half = rng.uniform(*spec.square_side) / 2.0
        return half, half
    short = rng.uniform(*spec.bar_short)
    long = spec.bar_aspect * short
    return (short / 2.0, long / 2.0) if rng.random() < 0.5 \
        else (long / 2.0, short / 2.0)


def sample_clip(spec: SyntheticClipSpec, rng) -> tuple:
    """Draw sizes, jitter and a feasible start; returns (clip, label)."""
    l = spec.frames
    dr, dc = DIRECTION_STEPS[spec.direction]
    for _ in range(64):
        half_rc = _base_halves(spec, rng)
        jitters = (rng.uniform(-spec.deformation, spec.deformation, l)
                   if spec.deformation > 0 else np.zeros(l))
        lo_r = lo_c = -np.inf
        hi_r = hi_c = np.inf
        for t in range(l):
            s = 1.0 + jitters[t]
            hr = half_rc[0] * s
            hc = half_rc[1] * s
            vr = t * spec.speed * dr
            vc = t * spec.speed * dc
            lo_r = max(lo_r, hr - vr)
            hi_r = min(hi_r, spec.grid - hr - vr)
            lo_c = max(lo_c, hc - vc)
            hi_c = min(hi_c, spec.grid - hc - vc)
        if lo_r > hi_r or lo_c > hi_c:
            continue
        start = (rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c))
        return render_clip(spec, start, half_rc, jitters, noise_rng=rng), spec.direction
    raise InfeasibleClip(
        f"no feasible start for speed={spec.speed}, frames={spec.frames}, "
        f"grid={spec.grid}")


@dataclass
class DatasetSpec:
    """Value ranges the generator draws each clip from."""

    grid: int = 16
    frames: int = 8
    speed: float = 1.0
    deformation: float = 0.0
    noise: float = 0.05
    objects: tuple = OBJECTS


def _gen_split(spec: DatasetSpec, n: int, rng, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    # round-robin over directions keeps class counts within +-1 of n/8
    for i in range(n):
        direction = i % len(DIRECTIONS)
        kind = spec.objects[int(rng.integers(len(spec.objects)))]
        cspec = SyntheticClipSpec(grid=spec.grid, frames=spec.frames,
                                  object_kind=kind, direction=direction,
                                  speed=spec.speed, deformation=spec.deformation,
                                  noise=spec.noise)
        clip, label = sample_clip(cspec, rng)
        name = f"clip_{i:05d}.sifa"
        save_tensor(os.path.join(out_dir, name), Tensor(clip))
        rows.append((name, label))
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="",
              encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["path", "label"])
        wr.writerows(rows)


def gen_dataset(spec: DatasetSpec, n_train: int, n_test: int, seed: int,
                out_dir) -> tuple:
    """Write train/ and test/ splits from disjoint RNG streams."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one clip per split")
    ss_train, ss_test = np.random.SeedSequence(seed).spawn(2)
    train_dir = os.path.join(out_dir, "train")
    test_dir = os.path.join(out_dir, "test")
    _gen_split(spec, n_train, np.random.default_rng(ss_train), train_dir)
    _gen_split(spec, n_test, np.random.default_rng(ss_test), test_dir)
    return train_dir, test_dir


def load_split(split_dir) -> tuple:
    """Read a split back as (clips (N,1,L,H,W) float32, labels (N,) int64)."""
    labels_path = os.path.join(split_dir, "labels.csv")
    clips = []
    labels = []
    with open(labels_path, newline="", encoding="utf-8") as f:
        rd = csv.reader(f)
        header = next(rd)
        if header != ["path", "label"]:
            raise ValueError(f"unexpected labels.csv header {header}")
        for path, label in rd:
            clips.append(load_tensor(os.path.join(split_dir, path)).data)
            labels.append(int(label))
    return np.stack(clips), np.asarray(labels, dtype=np.int64)
