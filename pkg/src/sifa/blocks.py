"""Full attention blocks over clips, ablation variants, and the demo classifier.

A block maps a (C, L, H, W) clip to a clip of the same shape: every
location of frame t is enhanced from a local (optionally deformed) window
of frame t+1, and the last frame attends to itself so the temporal length
is preserved. The `star` variant additionally pools a window from frame
t-1 under one joint normalization, with boundary frames substituting
themselves for the missing direction.

The forward is written entirely in `autodiff` primitives, so the same code
path serves inference (tape=None) and training.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .tensor import (Conv2dParams, ShapeError, Tensor, load_tensor,
                     save_tensor, _as_dtype)

VARIANTS = ("correlation_only", "regular_attention", "full", "star")
SAMPLINGS = ("regular", "deformable")
OFFSET_SOURCES = ("next_frame", "temporal_difference", "motion_saliency")
NORMS = ("raw", "softmax")

OFFSET_KERNEL = 3  # estimator kernel size; the output channel count 2*k*k
                   # is the contract, the kernel itself is a free choice


@dataclass
class SifaConfig:
    """Block configuration: region size, sampling mode, and ablation axes."""

    k: int = 3
    sampling: str = "deformable"
    offset_source: str = "motion_saliency"
    norm: str = "softmax"
    variant: str = "full"
    projection: bool = False  # optional 1x1 input projection, off by default

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd and >= 1, got {self.k}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.offset_source not in OFFSET_SOURCES:
            raise ValueError(f"unknown offset source {self.offset_source!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "correlation_only" and self.sampling != "regular":
            raise ValueError("correlation_only has no re-sampling; "
                             "sampling must be 'regular'")
        if self.variant == "regular_attention" and self.sampling != "regular":
            raise ValueError("regular_attention requires sampling='regular'")
        if self.variant == "full" and self.sampling != "deformable":
            raise ValueError("the full variant requires sampling='deformable'")

    @property
    def kk(self) -> int:
        return self.k * self.k

    @property
    def pool_size(self) -> int:
        """Neighbors pooled per query: k*k, or 2*k*k for the star variant."""
        return 2 * self.kk if self.variant == "star" else self.kk


@dataclass
class AffineParams:
    """Learned pointwise projection (a 1x1 convolution expressed as a matrix)."""

    weight: Tensor  # (out, in)
    bias: Tensor    # (out,)


@dataclass
class BlockParams:
    """Learnable state of one block; which fields exist depends on the config."""

    offset_estimator: Conv2dParams | None = None       # deformable sampling
    offset_estimator_prev: Conv2dParams | None = None  # star backward direction
    corr_projection: AffineParams | None = None        # correlation_only
    qkv_projection: AffineParams | None = None         # optional input projection


def _validate_block(cfg: SifaConfig, params: BlockParams, channels: int):
    need_est = cfg.sampling == "deformable"
    if need_est and params.offset_estimator is None:
        raise ValueError("deformable sampling needs an offset estimator")
    if not need_est and params.offset_estimator is not None:
        raise ValueError("regular sampling must not carry an offset estimator")
    if need_est:
        est = params.offset_estimator
        if est.out_channels != 2 * cfg.kk:
            raise ValueError(f"offset estimator must output {2 * cfg.kk} "
                             f"channels, got {est.out_channels}")
        if est.in_channels != channels:
            raise ValueError("offset estimator channel mismatch")
    if cfg.variant == "star" and need_est and params.offset_estimator_prev is None:
        raise ValueError("star variant needs a second estimator for the "
                         "previous-frame direction")
    if cfg.variant == "correlation_only":
        if params.corr_projection is None:
            raise ValueError("correlation_only needs a projection back to C")
        if params.corr_projection.weight.shape != (channels, channels + cfg.kk):
            raise ValueError("correlation projection must map C+k*k -> C")
    if cfg.projection and params.qkv_projection is None:
        raise ValueError("projection is enabled but no weights are present")


def zero_offset_estimator(channels: int, k: int, dtype=np.float32) -> Conv2dParams:
    """Estimator initialized to zero so training starts on the regular grid."""
    dt = _as_dtype(dtype)
    w = Tensor(np.zeros((2 * k * k, channels, OFFSET_KERNEL, OFFSET_KERNEL), dtype=dt))
    b = Tensor(np.zeros(2 * k * k, dtype=dt))
    return Conv2dParams(weight=w, bias=b, padding=(OFFSET_KERNEL - 1) // 2)


def make_block_params(cfg: SifaConfig, channels: int, dtype=np.float32) -> BlockParams:
    dt = _as_dtype(dtype)
    p = BlockParams()
    if cfg.sampling == "deformable":
        p.offset_estimator = zero_offset_estimator(channels, cfg.k, dt)
        if cfg.variant == "star":
            p.offset_estimator_prev = zero_offset_estimator(channels, cfg.k, dt)
    if cfg.variant == "correlation_only":
        w = np.zeros((channels, channels + cfg.kk), dtype=dt)
        w[:, :channels] = np.eye(channels, dtype=dt)
        p.corr_projection = AffineParams(weight=Tensor(w),
                                         bias=Tensor(np.zeros(channels, dtype=dt)))
    if cfg.projection:
        p.qkv_projection = AffineParams(weight=Tensor(np.eye(channels, dtype=dt)),
                                        bias=Tensor(np.zeros(channels, dtype=dt)))
    return p


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def bind_block(params: BlockParams) -> dict:
    """Wrap the block's parameter arrays in Vars (shared storage)."""
    out = {}
    if params.offset_estimator is not None:
        out["offset.weight"] = Var(params.offset_estimator.weight.data)
        out["offset.bias"] = Var(params.offset_estimator.bias.data)
    if params.offset_estimator_prev is not None:
        out["offset_prev.weight"] = Var(params.offset_estimator_prev.weight.data)
        out["offset_prev.bias"] = Var(params.offset_estimator_prev.bias.data)
    if params.corr_projection is not None:
        out["corr_proj.weight"] = Var(params.corr_projection.weight.data)
        out["corr_proj.bias"] = Var(params.corr_projection.bias.data)
    if params.qkv_projection is not None:
        out["qkv_proj.weight"] = Var(params.qkv_projection.weight.data)
        out["qkv_proj.bias"] = Var(params.qkv_projection.bias.data)
    return out


def _direction_samples(tape, q4: Var, n4: Var, cfg: SifaConfig,
                       est_w: Var | None, est_b: Var | None,
                       capture: dict | None) -> Var:
    """Sample one temporal direction's neighborhood -> (N, P, K, C)."""
    if cfg.sampling == "regular":
        return ad.grid_gather(tape, n4, cfg.k)
    if cfg.offset_source == "next_frame":
        src = n4
    elif cfg.offset_source == "temporal_difference":
        src = ad.sub(tape, n4, q4)
    else:  # motion_saliency
        delta = ad.sub(tape, n4, q4)
        src = ad.mul(tape, ad.sigmoid(tape, delta), n4)
    off = ad.conv2d(tape, src, est_w, est_b, (OFFSET_KERNEL - 1) // 2)
    rows, cols = ad.offsets_to_positions(tape, off, cfg.k)
    if capture is not None:
        capture["offsets"] = off.value
        capture["rows"] = rows.value
        capture["cols"] = cols.value
        if cfg.offset_source == "motion_saliency":
            capture["msm"] = src.value
    return ad.bilinear_gather(tape, n4, rows, cols)


def _capture_regular(capture, cfg, h, w, dtype):
    if capture is None or cfg.sampling != "regular":
        return
    br, bc = ad.base_grid(cfg.k, h, w, dtype)
    capture["rows"] = br
    capture["cols"] = bc


def block_apply(tape, x: Var, cfg: SifaConfig, params: BlockParams,
                capture: dict | None = None, leaves: dict | None = None):
    """Apply one block to a clip batch Var (B,C,L,H,W).

    Returns (output Var, leaf Var dict); the leaves wrap the parameter
    arrays so their grads can be read after backward. Pass a dict from
    `bind_block` to reuse leaf Vars across calls.
    """
    b, c, l, h, w = x.value.shape
    _validate_block(cfg, params, c)
    pv = leaves if leaves is not None else bind_block(params)

    if cfg.projection:
        xf = ad.pixels_of(tape, ad.frames_of(tape, x))
        xf = ad.pointwise_affine(tape, xf, pv["qkv_proj.weight"], pv["qkv_proj.bias"])
        x = ad.clip_of(tape, ad.planes_of(tape, xf, h, w), b, l)

    xn = ad.next_frames(tape, x)
    q4 = ad.frames_of(tape, x)
    n4 = ad.frames_of(tape, xn)
    qp = ad.pixels_of(tape, q4)

    if cfg.variant == "correlation_only":
        s = ad.grid_gather(tape, n4, cfg.k)
        _capture_regular(capture, cfg, h, w, x.value.dtype)
        wr = ad.correlate(tape, qp, s)
        wn = (ad.softmax(tape, wr, 1.0 / math.sqrt(c))
              if cfg.norm == "softmax" else wr)
        if capture is not None:
            capture["weights"] = wn.value
        feat = ad.concat(tape, [qp, wn], axis=2)
        yp = ad.pointwise_affine(tape, feat, pv["corr_proj.weight"],
                                 pv["corr_proj.bias"])
        return ad.clip_of(tape, ad.planes_of(tape, yp, h, w), b, l), pv

    if cfg.variant == "star":
        xp = ad.prev_frames(tape, x)
        p4 = ad.frames_of(tape, xp)
        cap_n = {} if capture is not None else None
        cap_p = {} if capture is not None else None
        s_next = _direction_samples(tape, q4, n4, cfg,
                                    pv.get("offset.weight"), pv.get("offset.bias"),
                                    cap_n)
        s_prev = _direction_samples(tape, q4, p4, cfg,
                                    pv.get("offset_prev.weight"),
                                    pv.get("offset_prev.bias"), cap_p)
        s = ad.concat(tape, [s_next, s_prev], axis=2)
        if capture is not None:
            _capture_regular(cap_n, cfg, h, w, x.value.dtype)
            _capture_regular(cap_p, cfg, h, w, x.value.dtype)
            capture["next"] = cap_n
            capture["prev"] = cap_p
    else:
        cap = capture if capture is not None else None
        s = _direction_samples(tape, q4, n4, cfg,
                               pv.get("offset.weight"), pv.get("offset.bias"), cap)
        _capture_regular(capture, cfg, h, w, x.value.dtype)

    wr = ad.correlate(tape, qp, s)
    wn = ad.softmax(tape, wr, 1.0 / math.sqrt(c)) if cfg.norm == "softmax" else wr
    if capture is not None:
        capture["weights"] = wn.value
    a = ad.aggregate(tape, wn, s)
    yp = ad.add(tape, qp, a)
    return ad.clip_of(tape, ad.planes_of(tape, yp, h, w), b, l), pv


def _as_batch_var(clip: Tensor) -> Var:
    if clip.rank != 4:
        raise ShapeError("clip must be rank 4 (C,L,H,W)")
    return Var(clip.data[None])


def block_forward(clip: Tensor, cfg: SifaConfig, params: BlockParams,
                  capture: dict | None = None) -> Tensor:
    """Single-clip block forward dispatching on the configured variant."""
    if cfg.variant == "star" and clip.shape[1] < 2:
        raise ShapeError("star variant needs at least 2 frames")
    y, _ = block_apply(None, _as_batch_var(clip), cfg, params, capture=capture)
    return Tensor(y.value[0])


def sifa_block_forward(clip: Tensor, cfg: SifaConfig, params: BlockParams) -> Tensor:
    """Forward-direction attention block (full deformable or regular)."""
    if cfg.variant not in ("full", "regular_attention"):
        raise ValueError(f"unexpected variant {cfg.variant!r} for sifa_block_forward")
    return block_forward(clip, cfg, params)


def sifa_c_forward(clip: Tensor, cfg: SifaConfig, params: BlockParams) -> Tensor:
    """Correlation-as-feature block: per-query correlations projected back to C."""
    if cfg.variant != "correlation_only":
        raise ValueError("sifa_c_forward requires variant='correlation_only'")
    return block_forward(clip, cfg, params)


def sifa_star_forward(clip: Tensor, cfg: SifaConfig, params: BlockParams) -> Tensor:
    """Bidirectional block: joint pool over previous- and next-frame windows."""
    if cfg.variant != "star":
        raise ValueError("sifa_star_forward requires variant='star'")
    return block_forward(clip, cfg, params)


def temporal_conv_baseline(clip: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise 3-tap temporal convolution, zero padded along t.

    `kernel` is (C, 3); tap j weights frame t-1+j, so [0,1,0] is the identity.
    """
    if clip.rank != 4:
        raise ShapeError("clip must be rank 4 (C,L,H,W)")
    c, l, h, w = clip.shape
    if kernel.shape != (c, 3):
        raise ShapeError(f"kernel must be ({c}, 3), got {kernel.shape}")
    x = clip.data
    xp = np.concatenate([np.zeros_like(x[:, :1]), x, np.zeros_like(x[:, :1])], axis=1)
    kv = kernel.data
    y = np.zeros_like(x)
    for j in range(3):
        y += kv[:, j][:, None, None, None] * xp[:, j:j + l]
    return Tensor(y)


# ---------------------------------------------------------------------------
# demo network
# ---------------------------------------------------------------------------

@dataclass
class DemoNetConfig:
    channels: int = 16
    num_classes: int = 8
    num_blocks: int = 2
    stem_kernel: int = 3
    sifa: SifaConfig = field(default_factory=SifaConfig)


@dataclass
class DemoNet:
    """Stem conv -> tanh -> (block -> tanh)* -> global mean pool -> affine.

    The tanh between stages is load-bearing: without a nonlinearity after
    temporal mixing the k=1 configuration collapses to an affine map of the
    clip, whose globally pooled features carry no motion-direction signal.
    """

    config: DemoNetConfig
    stem: Conv2dParams
    blocks: list  # [(SifaConfig, BlockParams)]
    classifier_w: Tensor
    classifier_b: Tensor

    @property
    def dtype(self):
        return self.stem.weight.dtype


def init_demo_net(cfg: DemoNetConfig, seed: int = 0, dtype=np.float32) -> DemoNet:
    dt = _as_dtype(dtype)
    rng = np.random.default_rng(np.random.SeedSequence([0xDE, seed]))
    c = cfg.channels
    kh = cfg.stem_kernel
    # 5/3 gain: keeps variance roughly unit through the tanh that follows
    stem_w = rng.normal(0.0, (5.0 / 3.0) / math.sqrt(kh * kh),
                        (c, 1, kh, kh)).astype(dt)
    stem = Conv2dParams(weight=Tensor(stem_w),
                        bias=Tensor(np.zeros(c, dtype=dt)),
                        padding=(kh - 1) // 2)
    blocks = [(replace(cfg.sifa), make_block_params(cfg.sifa, c, dt))
              for _ in range(cfg.num_blocks)]
    cls_w = rng.normal(0.0, 1.0 / math.sqrt(c), (cfg.num_classes, c)).astype(dt)
    return DemoNet(config=cfg, stem=stem, blocks=blocks,
                   classifier_w=Tensor(cls_w),
                   classifier_b=Tensor(np.zeros(cfg.num_classes, dtype=dt)))


def net_parameters(net: DemoNet):
    """Deterministically ordered (name, ndarray) pairs of all learnables."""
    out = [("stem.weight", net.stem.weight.data),
           ("stem.bias", net.stem.bias.data)]
    for i, (_, bp) in enumerate(net.blocks):
        pre = f"block{i}."
        if bp.offset_estimator is not None:
            out.append((pre + "offset.weight", bp.offset_estimator.weight.data))
            out.append((pre + "offset.bias", bp.offset_estimator.bias.data))
        if bp.offset_estimator_prev is not None:
            out.append((pre + "offset_prev.weight", bp.offset_estimator_prev.weight.data))
            out.append((pre + "offset_prev.bias", bp.offset_estimator_prev.bias.data))
        if bp.corr_projection is not None:
            out.append((pre + "corr_proj.weight", bp.corr_projection.weight.data))
            out.append((pre + "corr_proj.bias", bp.corr_projection.bias.data))
        if bp.qkv_projection is not None:
            out.append((pre + "qkv_proj.weight", bp.qkv_projection.weight.data))
            out.append((pre + "qkv_proj.bias", bp.qkv_projection.bias.data))
    out.append(("classifier.weight", net.classifier_w.data))
    out.append(("classifier.bias", net.classifier_b.data))
    return out


def bind_net(net: DemoNet) -> dict:
    """Stable leaf Vars for every parameter, shared across forward calls."""
    leaves = {"stem.weight": Var(net.stem.weight.data),
              "stem.bias": Var(net.stem.bias.data),
              "classifier.weight": Var(net.classifier_w.data),
              "classifier.bias": Var(net.classifier_b.data)}
    for i, (_, bp) in enumerate(net.blocks):
        for name, var in bind_block(bp).items():
            leaves[f"block{i}.{name}"] = var
    return leaves


def demo_forward(tape, x: Var, net: DemoNet, binding: dict | None = None,
                 capture: list | None = None):
    """Tape-level demo forward; returns (logits Var, leaf Var map)."""
    b, cin, l, h, w = x.value.shape
    if cin != net.stem.in_channels:
        raise ShapeError(f"expected {net.stem.in_channels} input channels, got {cin}")
    leaves = binding if binding is not None else bind_net(net)
    f4 = ad.conv2d(tape, ad.frames_of(tape, x), leaves["stem.weight"],
                   leaves["stem.bias"], net.stem.padding)
    f4 = ad.tanh(tape, f4)
    x5 = ad.clip_of(tape, f4, b, l)
    for i, (cfg, bp) in enumerate(net.blocks):
        cap = {} if capture is not None else None
        pre = f"block{i}."
        block_leaves = {k[len(pre):]: v for k, v in leaves.items()
                        if k.startswith(pre)}
        x5, _ = block_apply(tape, x5, cfg, bp, capture=cap,
                            leaves=block_leaves or None)
        x5 = ad.tanh(tape, x5)
        if capture is not None:
            capture.append(cap)
    pooled = ad.mean_pool(tape, x5)
    logits = ad.pointwise_affine(tape, pooled, leaves["classifier.weight"],
                                 leaves["classifier.bias"])
    return logits, leaves


def demo_net_forward(clip_batch, net: DemoNet) -> Tensor:
    """Logits for a batch of clips (list of rank-4 tensors, or an array)."""
    if isinstance(clip_batch, Tensor):
        x = clip_batch.data[None]
    elif isinstance(clip_batch, np.ndarray):
        x = clip_batch
    else:
        x = np.stack([c.data if isinstance(c, Tensor) else np.asarray(c)
                      for c in clip_batch])
    if x.ndim != 5:
        raise ShapeError("clip batch must stack to rank 5 (B,1,L,H,W)")
    logits, _ = demo_forward(None, Var(x.astype(net.dtype, copy=False)), net)
    return Tensor(logits.value)


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------

def flop_count(cfg: SifaConfig, c: int, l: int, h: int, w: int) -> int:
    """Multiply-accumulate count of one block applied to a (C,L,H,W) clip.

    Covers correlation (C*k*k per query), aggregation (same), the offset
    convolution, and bilinear sampling at 4 MACs per sampled scalar. The
    last frame attends to itself, so all L frames carry H*W queries; the
    star variant doubles every term. Regular-grid sampling reads stored
    values directly and costs no sampling MACs.
    """
    kk = cfg.kk
    queries = l * h * w
    dirs = 2 if cfg.variant == "star" else 1
    corr = dirs * queries * c * kk
    agg = 0 if cfg.variant == "correlation_only" else corr
    total = corr + agg
    if cfg.sampling == "deformable":
        total += dirs * l * h * w * (2 * kk) * (c * OFFSET_KERNEL * OFFSET_KERNEL)
        total += dirs * queries * kk * c * 4
    return total


# ---------------------------------------------------------------------------
# parameter serialization: tensor files + tab-separated manifest
# ---------------------------------------------------------------------------

_ROLES = {
    "stem.weight": "stem_weight", "stem.bias": "stem_bias",
    "offset.weight": "offset_weight", "offset.bias": "offset_bias",
    "offset_prev.weight": "offset_prev_weight", "offset_prev.bias": "offset_prev_bias",
    "corr_proj.weight": "corr_proj_weight", "corr_proj.bias": "corr_proj_bias",
    "qkv_proj.weight": "qkv_proj_weight", "qkv_proj.bias": "qkv_proj_bias",
    "classifier.weight": "classifier_weight", "classifier.bias": "classifier_bias",
}


def _role_of(name: str) -> str:
    tail = name.split(".", 1)[1] if name.startswith("block") else name
    return _ROLES[tail]


def save_net(net: DemoNet, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg = net.config
    meta = {
        "channels": cfg.channels,
        "num_classes": cfg.num_classes,
        "num_blocks": cfg.num_blocks,
        "stem_kernel": cfg.stem_kernel,
        "dtype": "f64" if np.dtype(net.dtype) == np.float64 else "f32",
        "sifa": {
            "k": cfg.sifa.k, "sampling": cfg.sifa.sampling,
            "offset_source": cfg.sifa.offset_source, "norm": cfg.sifa.norm,
            "variant": cfg.sifa.variant, "projection": cfg.sifa.projection,
        },
    }
    with open(os.path.join(out_dir, "net.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    lines = []
    for name, arr in net_parameters(net):
        fname = name.replace(".", "_") + ".sifa"
        save_tensor(os.path.join(out_dir, fname), Tensor(arr))
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{_role_of(name)}\t{shape}\t{fname}")
    with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_net(in_dir) -> DemoNet:
    with open(os.path.join(in_dir, "net.json"), encoding="utf-8") as f:
        meta = json.load(f)
    cfg = DemoNetConfig(channels=meta["channels"], num_classes=meta["num_classes"],
                        num_blocks=meta["num_blocks"], stem_kernel=meta["stem_kernel"],
                        sifa=SifaConfig(**meta["sifa"]))
    net = init_demo_net(cfg, seed=0, dtype=meta["dtype"])
    params = dict(net_parameters(net))
    with open(os.path.join(in_dir, "manifest.tsv"), encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            name, _role, shape, fname = line.split("\t")
            t = load_tensor(os.path.join(in_dir, fname))
            want = tuple(int(d) for d in shape.split("x"))
            if t.shape != want:
                raise ValueError(f"{name}: manifest shape {want} != file {t.shape}")
            if name not in params:
                raise ValueError(f"unexpected parameter {name} in manifest")
            np.copyto(params[name], t.data.astype(params[name].dtype))
    return net
