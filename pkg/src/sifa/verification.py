"""Fixture builders and check runners shared by the CLI and the test suite.

Three families:
  * randomized oracle-equivalence fixtures (optimized forward vs the scalar
    brute-force reference, both precisions, all variants),
  * finite-difference gradient suites (one per primitive, plus the full
    demo network),
  * the analytic-vs-instrumented FLOP count audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, finite_diff_check
from .blocks import (AffineParams, BlockParams, DemoNetConfig, SifaConfig,
                     bind_net, block_forward, demo_forward, flop_count,
                     init_demo_net, make_block_params, net_parameters)
from .oracle import OpCounter, oracle_forward
from .tensor import Conv2dParams, Tensor

SINGLE_TOL = 1e-5
DOUBLE_TOL = 1e-11


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    label: str
    max_abs_diff: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tol


def _random_estimator(rng, c, k, dtype) -> Conv2dParams:
    w = rng.normal(0, 0.15, (2 * k * k, c, 3, 3)).astype(dtype)
    b = rng.normal(0, 0.1, (2 * k * k,)).astype(dtype)
    return Conv2dParams(weight=Tensor(w), bias=Tensor(b), padding=1)


def random_block_params(rng, cfg: SifaConfig, c: int, dtype) -> BlockParams:
    """Block params with randomized learnables for the given config."""
    params = make_block_params(cfg, c, dtype)
    if cfg.sampling == "deformable":
        params.offset_estimator = _random_estimator(rng, c, cfg.k, dtype)
        if cfg.variant == "star":
            params.offset_estimator_prev = _random_estimator(rng, c, cfg.k, dtype)
    if cfg.variant == "correlation_only":
        params.corr_projection = AffineParams(
            weight=Tensor(rng.normal(0, 0.3, (c, c + cfg.kk)).astype(dtype)),
            bias=Tensor(rng.normal(0, 0.1, (c,)).astype(dtype)))
    return params


def random_block_fixture(rng, variant, norm, k, c, l, hw, dtype,
                         offset_source="motion_saliency"):
    """One (cfg, params, clip) triple with randomized learnables.

    Features are drawn at std 0.6: raw-mode weights are quadratic in the
    feature scale and their product with the values cubic, so unit-variance
    fixtures would push single-precision rounding right up against the
    equivalence tolerance for large k.
    """
    sampling = "deformable" if variant in ("full", "star") else "regular"
    cfg = SifaConfig(k=k, sampling=sampling, norm=norm, variant=variant,
                     offset_source=offset_source)
    params = random_block_params(rng, cfg, c, dtype)
    clip = Tensor(rng.normal(0, 0.4, (c, l, hw, hw)).astype(dtype))
    return cfg, params, clip


def oracle_fixture_specs(n: int = 50, seed: int = 2024):
    """Deterministic fixture list covering all variants/norms/k/precisions."""
    rng = np.random.default_rng(seed)
    variants = ("full", "regular_attention", "correlation_only", "star")
    norms = ("softmax", "raw")
    ks = (1, 3, 5)
    cs = (4, 16)
    ls = (1, 2, 4, 8)
    hws = (5, 8)
    sources = ("motion_saliency", "temporal_difference", "next_frame")
    specs = []
    for i in range(n):
        variant = variants[i % len(variants)]
        norm = norms[(i // 4) % 2]
        k = ks[int(rng.integers(len(ks)))]
        c = cs[int(rng.integers(len(cs)))]
        l = ls[int(rng.integers(len(ls)))]
        if variant == "star":
            l = max(l, 2)
        hw = hws[int(rng.integers(len(hws)))]
        dtype = np.float32 if i % 2 == 0 else np.float64
        source = sources[int(rng.integers(len(sources)))]
        specs.append(dict(variant=variant, norm=norm, k=k, c=c, l=l, hw=hw,
                          dtype=dtype, offset_source=source,
                          seed=int(rng.integers(2 ** 31))))
    return specs


def run_oracle_check(n: int = 50, seed: int = 2024):
    """Compare the optimized forward to the scalar oracle on n fixtures."""
    results = []
    for spec in oracle_fixture_specs(n, seed):
        rng = np.random.default_rng(spec["seed"])
        cfg, params, clip = random_block_fixture(
            rng, spec["variant"], spec["norm"], spec["k"], spec["c"],
            spec["l"], spec["hw"], spec["dtype"], spec["offset_source"])
        y_opt = block_forward(clip, cfg, params)
        y_ora = oracle_forward(clip, cfg, params)
        diff = float(np.abs(y_opt.data - y_ora.data.astype(y_opt.dtype)).max())
        tol = SINGLE_TOL if spec["dtype"] == np.float32 else DOUBLE_TOL
        label = (f"{spec['variant']}/{spec['norm']}/k{spec['k']}/C{spec['c']}"
                 f"/L{spec['l']}/{spec['hw']}x{spec['hw']}/"
                 f"{'f32' if spec['dtype'] == np.float32 else 'f64'}")
        results.append(OracleResult(label=label, max_abs_diff=diff, tol=tol))
    return results


# ---------------------------------------------------------------------------
# gradient suites
# ---------------------------------------------------------------------------

def _frac_positions(rng, shape, h, w, margin=0.1):
    """Positions at least `margin` from every integer, mostly in bounds."""
    base_r = rng.integers(-1, h, shape).astype(np.float64)
    base_c = rng.integers(-1, w, shape).astype(np.float64)
    fr = rng.uniform(margin, 1.0 - margin, shape)
    fc = rng.uniform(margin, 1.0 - margin, shape)
    return base_r + fr, base_c + fc


def primitive_gradchecks(seed: int = 0, tol: float = 1e-4, h: float = 3e-4):
    """Finite-difference checks for every continuous-input primitive."""
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, build, params, **kw):
        rs = finite_diff_check(build, params, h=h, tol=tol, seed=seed, **kw)
        for r in rs:
            r.parameter = f"{name}.{r.parameter}"
        reports.extend(rs)

    # elementwise, activations
    a = Var(rng.normal(0, 1, (3, 4)))
    b = Var(rng.normal(0, 1, (3, 4)))
    coeff = rng.normal(0, 1, (3, 4))
    for opname, op in (("add", ad.add), ("sub", ad.sub), ("mul", ad.mul)):
        check(opname, lambda t, op=op: ad.project_scalar(t, op(t, a, b), coeff),
              [("a", a), ("b", b)])
    x = Var(rng.normal(0, 2, (3, 4)))
    check("sigmoid", lambda t: ad.project_scalar(t, ad.sigmoid(t, x), coeff),
          [("x", x)])
    check("tanh", lambda t: ad.project_scalar(t, ad.tanh(t, x), coeff),
          [("x", x)])

    # conv2d
    xc = Var(rng.normal(0, 1, (2, 3, 5, 5)))
    wc = Var(rng.normal(0, 0.5, (4, 3, 3, 3)))
    bc = Var(rng.normal(0, 0.5, (4,)))
    cc = rng.normal(0, 1, (2, 4, 5, 5))
    check("conv2d",
          lambda t: ad.project_scalar(t, ad.conv2d(t, xc, wc, bc, 1), cc),
          [("x", xc), ("weight", wc), ("bias", bc)])

    # pointwise affine
    xa = Var(rng.normal(0, 1, (2, 6, 3)))
    wa = Var(rng.normal(0, 0.5, (5, 3)))
    ba = Var(rng.normal(0, 0.5, (5,)))
    ca = rng.normal(0, 1, (2, 6, 5))
    check("pointwise_affine",
          lambda t: ad.project_scalar(t, ad.pointwise_affine(t, xa, wa, ba), ca),
          [("x", xa), ("weight", wa), ("bias", ba)])

    # bilinear sampling: frames and positions
    n, ch, hgt, wid, p, k = 2, 3, 6, 6, 4, 3
    frames = Var(rng.normal(0, 1, (n, ch, hgt, wid)))
    rr, cv = _frac_positions(rng, (n, p, k), hgt, wid)
    rows = Var(rr)
    cols = Var(cv)
    cs = rng.normal(0, 1, (n, p, k, ch))
    check("bilinear_gather",
          lambda t: ad.project_scalar(t, ad.bilinear_gather(t, frames, rows, cols), cs),
          [("frames", frames), ("rows", rows), ("cols", cols)])

    # regular grid extraction
    cg = rng.normal(0, 1, (n, hgt * wid, 9, ch))
    check("grid_gather",
          lambda t: ad.project_scalar(t, ad.grid_gather(t, frames, 3), cg),
          [("frames", frames)])

    # correlation, softmax, aggregation
    q = Var(rng.normal(0, 1, (2, 5, 4)))
    s = Var(rng.normal(0, 1, (2, 5, 9, 4)))
    cw = rng.normal(0, 1, (2, 5, 9))
    check("correlate",
          lambda t: ad.project_scalar(t, ad.correlate(t, q, s), cw),
          [("q", q), ("s", s)])
    logits = Var(rng.normal(0, 3, (2, 5, 9)))
    check("softmax",
          lambda t: ad.project_scalar(t, ad.softmax(t, logits, 0.5), cw),
          [("x", logits)])
    wts = Var(rng.normal(0, 1, (2, 5, 9)))
    cagg = rng.normal(0, 1, (2, 5, 4))
    check("aggregate",
          lambda t: ad.project_scalar(t, ad.aggregate(t, wts, s), cagg),
          [("w", wts), ("s", s)])

    # temporal shifts and pooling
    x5 = Var(rng.normal(0, 1, (2, 3, 4, 3, 3)))
    c5 = rng.normal(0, 1, (2, 3, 4, 3, 3))
    check("next_frames",
          lambda t: ad.project_scalar(t, ad.next_frames(t, x5), c5), [("x", x5)])
    check("prev_frames",
          lambda t: ad.project_scalar(t, ad.prev_frames(t, x5), c5), [("x", x5)])
    cp = rng.normal(0, 1, (2, 3))
    check("mean_pool",
          lambda t: ad.project_scalar(t, ad.mean_pool(t, x5), cp), [("x", x5)])

    # concat
    p1 = Var(rng.normal(0, 1, (2, 3, 2)))
    p2 = Var(rng.normal(0, 1, (2, 3, 5)))
    ccat = rng.normal(0, 1, (2, 3, 7))
    check("concat",
          lambda t: ad.project_scalar(t, ad.concat(t, [p1, p2], 2), ccat),
          [("a", p1), ("b", p2)])

    # loss
    lg = Var(rng.normal(0, 2, (4, 5)))
    lbl = rng.integers(0, 5, 4)
    check("cross_entropy",
          lambda t: ad.cross_entropy(t, lg, lbl), [("logits", lg)])
    return reports


def demo_gradcheck_fixture(seed: int = 0, k: int = 3, variant: str = "full",
                           offset_source: str = "motion_saliency",
                           norm: str = "softmax", channels: int = 5,
                           num_blocks: int = 2):
    """A small f64 demo net plus input whose sampling positions keep a safe
    distance from integer coordinates (where bilinear sampling is not
    differentiable): offset weights are tiny and biases clearly fractional.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x6AD, seed]))
    sampling = "deformable" if variant in ("full", "star") else "regular"
    cfg = DemoNetConfig(
        channels=channels, num_classes=4, num_blocks=num_blocks,
        sifa=SifaConfig(k=k, sampling=sampling, offset_source=offset_source,
                        norm=norm, variant=variant))
    net = init_demo_net(cfg, seed=seed, dtype=np.float64)
    for name, arr in net_parameters(net):
        if name.endswith("offset.weight") or name.endswith("offset_prev.weight"):
            arr += rng.normal(0, 1e-3, arr.shape)
        elif name.endswith("offset.bias") or name.endswith("offset_prev.bias"):
            arr += rng.uniform(0.25, 0.45, arr.shape) * rng.choice([-1.0, 1.0], arr.shape)
        elif name.endswith("corr_proj.weight"):
            arr += rng.normal(0, 0.1, arr.shape)
    x = rng.normal(0, 1.0, (2, 1, 3, 7, 7))
    labels = rng.integers(0, 4, 2)
    return net, x, labels


def demo_gradcheck(seed: int = 0, tol: float = 1e-4, max_coords: int = 96,
                   h: float = 3e-5, check_input: bool = True, **fixture_kw):
    """Finite-difference reports for every parameter of a small demo net."""
    net, x, labels = demo_gradcheck_fixture(seed=seed, **fixture_kw)
    xvar = Var(x)
    binding = bind_net(net)

    def build(tape):
        logits, _ = demo_forward(tape, xvar, net, binding=binding)
        return ad.cross_entropy(tape, logits, labels)

    params = sorted(binding.items())
    if check_input:
        params = params + [("input", xvar)]
    return finite_diff_check(build, params, h=h, tol=tol,
                             max_coords=max_coords, seed=seed)


def min_integer_distance(net, x) -> float:
    """Smallest distance of any sampling position from an integer coordinate."""
    capture = []
    demo_forward(None, Var(x), net, capture=capture)
    dmin = np.inf
    for cap in capture:
        subs = [cap] if "weights" in cap and "next" not in cap else \
            [cap.get("next", {}), cap.get("prev", {})]
        for sub in subs:
            for key in ("rows", "cols"):
                if key in sub and sub[key].ndim == 3:
                    v = sub[key]
                    dmin = min(dmin, float(np.abs(v - np.round(v)).min()))
    return dmin


# ---------------------------------------------------------------------------
# FLOP audit
# ---------------------------------------------------------------------------

def flop_audit(cfg: SifaConfig, c: int = 3, l: int = 2, hw: int = 5,
               seed: int = 11):
    """Analytic MAC count vs the oracle's instrumented counter."""
    rng = np.random.default_rng(seed)
    l_eff = max(l, 2) if cfg.variant == "star" else l
    params = random_block_params(rng, cfg, c, np.float64)
    clip = Tensor(rng.normal(0, 1, (c, l_eff, hw, hw)))
    counter = OpCounter()
    oracle_forward(clip, cfg, params, counter=counter)
    analytic = flop_count(cfg, c, l_eff, hw, hw)
    return analytic, counter
