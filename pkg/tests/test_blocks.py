import os
import sys

import numpy as np
import pytest

from sifa.blocks import (AffineParams, BlockParams, DemoNetConfig, SifaConfig,
                         block_forward, demo_net_forward, flop_count,
                         init_demo_net, load_net, make_block_params,
                         net_parameters, save_net, sifa_block_forward,
                         sifa_c_forward, sifa_star_forward,
                         temporal_conv_baseline, zero_offset_estimator)
from sifa.oracle import oracle_forward
from sifa.tensor import Conv2dParams, ShapeError, Tensor, load_tensor

sys.path.insert(0, os.path.dirname(__file__))
from golden_common import golden_fixture, oracle_demo_logits  # noqa: E402

RNG = np.random.default_rng(123)


def _clip(c, l, h, w, dtype=np.float32, rng=RNG):
    return Tensor(rng.normal(0, 1, (c, l, h, w)).astype(dtype))


def _rand_estimator(c, k, rng=RNG, dtype=np.float32, scale=0.3):
    w = rng.normal(0, scale, (2 * k * k, c, 3, 3)).astype(dtype)
    b = rng.normal(0, 0.1, (2 * k * k,)).astype(dtype)
    return Conv2dParams(weight=Tensor(w), bias=Tensor(b), padding=1)


def _full_cfg(k=3, norm="softmax", source="motion_saliency"):
    return SifaConfig(k=k, sampling="deformable", variant="full",
                      offset_source=source, norm=norm)


def _reg_cfg(k=3, norm="softmax"):
    return SifaConfig(k=k, sampling="regular", variant="regular_attention",
                      norm=norm)


# --- config validation -------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        SifaConfig(k=2)
    with pytest.raises(ValueError):
        SifaConfig(variant="correlation_only", sampling="deformable")
    with pytest.raises(ValueError):
        SifaConfig(variant="regular_attention", sampling="deformable")
    with pytest.raises(ValueError):
        SifaConfig(variant="full", sampling="regular")
    assert SifaConfig(variant="star", sampling="regular", k=1).pool_size == 2
    assert SifaConfig(k=3).pool_size == 9


def test_block_params_validation():
    cfg = _full_cfg()
    params = make_block_params(cfg, channels=4)
    clip = _clip(4, 2, 5, 5)
    bad = BlockParams()  # deformable without estimator
    with pytest.raises(ValueError):
        block_forward(clip, cfg, bad)
    wrong_k = BlockParams(offset_estimator=zero_offset_estimator(4, 5))
    with pytest.raises(ValueError):
        block_forward(clip, cfg, wrong_k)
    assert block_forward(clip, cfg, params).shape == clip.shape


# --- sifa_block_forward ------------------------------------------------------

def test_single_frame_attends_to_itself():
    cfg = _full_cfg()
    c = 4
    params = make_block_params(cfg, c)
    clip = _clip(c, 1, 5, 5)
    out = sifa_block_forward(clip, cfg, params)
    ref = oracle_forward(clip, cfg, params)
    assert np.abs(out.data - ref.data.astype(np.float32)).max() < 1e-5
    # zero offsets + softmax: every location gains its own neighborhood average
    assert not np.array_equal(out.data, clip.data)


def test_zero_clip_zero_output():
    cfg = _full_cfg()
    params = make_block_params(cfg, 3)
    clip = Tensor(np.zeros((3, 4, 5, 5), np.float32))
    out = sifa_block_forward(clip, cfg, params)
    assert np.array_equal(out.data, np.zeros((3, 4, 5, 5), np.float32))


def test_zero_offset_estimator_equals_regular_exactly():
    c = 5
    clip = _clip(c, 3, 6, 6)
    out_def = sifa_block_forward(clip, _full_cfg(), make_block_params(_full_cfg(), c))
    out_reg = sifa_block_forward(clip, _reg_cfg(), make_block_params(_reg_cfg(), c))
    assert np.array_equal(out_def.data, out_reg.data)


def test_variant_dispatch_guards():
    cfg = _reg_cfg()
    params = make_block_params(cfg, 3)
    clip = _clip(3, 2, 5, 5)
    with pytest.raises(ValueError):
        sifa_c_forward(clip, cfg, params)
    with pytest.raises(ValueError):
        sifa_star_forward(clip, cfg, params)
    ccfg = SifaConfig(variant="correlation_only", sampling="regular")
    with pytest.raises(ValueError):
        sifa_block_forward(clip, ccfg, make_block_params(ccfg, 3))


# --- correlation-only --------------------------------------------------------

def test_sifa_c_static_flat_region_constant_correlations():
    cfg = SifaConfig(variant="correlation_only", sampling="regular", k=3,
                     norm="raw")
    c = 4
    params = make_block_params(cfg, c)
    # identical frames, constant feature plane: every grid correlation equal
    frame = np.ones((c, 7, 7), np.float32) * 0.7
    clip = Tensor(np.stack([frame, frame], axis=1))
    capture = {}
    out = block_forward(clip, cfg, params, capture=capture)
    w = capture["weights"]  # (N, P, 9)
    center = w[0, 3 * 7 + 3]  # interior query of frame 0
    assert np.allclose(center, center[0], atol=1e-6)
    assert out.shape == clip.shape


def test_sifa_c_zero_clip():
    cfg = SifaConfig(variant="correlation_only", sampling="regular", k=3,
                     norm="raw")
    params = make_block_params(cfg, 4)
    clip = Tensor(np.zeros((4, 2, 5, 5), np.float32))
    out = sifa_c_forward(clip, cfg, params)
    assert np.array_equal(out.data, np.zeros_like(clip.data))


def test_sifa_c_matches_oracle():
    cfg = SifaConfig(variant="correlation_only", sampling="regular", k=3,
                     norm="softmax")
    c = 6
    params = make_block_params(cfg, c)
    params.corr_projection = AffineParams(
        weight=Tensor(RNG.normal(0, 0.3, (c, c + 9)).astype(np.float32)),
        bias=Tensor(RNG.normal(0, 0.1, (c,)).astype(np.float32)))
    clip = _clip(c, 4, 6, 6)
    out = sifa_c_forward(clip, cfg, params)
    ref = oracle_forward(clip, cfg, params)
    assert np.abs(out.data - ref.data.astype(np.float32)).max() < 1e-5


def test_sifa_c_identity_at_init():
    cfg = SifaConfig(variant="correlation_only", sampling="regular", k=3)
    c = 4
    params = make_block_params(cfg, c)  # projection initialized to [I | 0]
    clip = _clip(c, 3, 5, 5)
    out = sifa_c_forward(clip, cfg, params)
    assert np.array_equal(out.data, clip.data)


# --- star --------------------------------------------------------------------

def test_star_uniform_weights_on_equal_keys():
    cfg = SifaConfig(variant="star", sampling="regular", k=3, norm="softmax")
    c = 3
    params = make_block_params(cfg, c)
    frame = RNG.normal(0, 1, (c, 1, 1)).astype(np.float32)
    # constant-per-channel clip: all 2k*k in-bounds keys identical at interior
    clip = Tensor(np.tile(frame[:, None], (1, 3, 7, 7)))
    capture = {}
    block_forward(clip, cfg, params, capture=capture)
    w = capture["weights"]  # (N, P, 18)
    interior = w[1, 3 * 7 + 3]  # middle frame, interior query
    assert interior.shape == (18,)
    assert np.allclose(interior, 1.0 / 18, atol=1e-6)


def test_star_boundary_rule_l2():
    cfg = SifaConfig(variant="star", sampling="regular", k=1, norm="raw")
    c = 3
    params = make_block_params(cfg, c)
    clip = _clip(c, 2, 4, 4)
    out = sifa_star_forward(clip, cfg, params)
    f0 = clip.data[:, 0]
    f1 = clip.data[:, 1]
    # frame 0 pools {next=f1, prev=self}; frame 1 pools {next=self, prev=f0}
    for x in range(4):
        for y in range(4):
            q0 = f0[:, x, y]
            expect0 = q0 + float(q0 @ f1[:, x, y]) * f1[:, x, y] \
                + float(q0 @ q0) * q0
            assert np.allclose(out.data[:, 0, x, y], expect0, atol=1e-4)
            q1 = f1[:, x, y]
            expect1 = q1 + float(q1 @ q1) * q1 \
                + float(q1 @ f0[:, x, y]) * f0[:, x, y]
            assert np.allclose(out.data[:, 1, x, y], expect1, atol=1e-4)


def test_star_requires_two_frames():
    cfg = SifaConfig(variant="star", sampling="regular", k=1)
    params = make_block_params(cfg, 3)
    with pytest.raises(ShapeError):
        sifa_star_forward(_clip(3, 1, 4, 4), cfg, params)


def test_star_matches_oracle():
    cfg = SifaConfig(variant="star", sampling="deformable", k=3,
                     norm="softmax", offset_source="temporal_difference")
    c = 4
    params = make_block_params(cfg, c)
    params.offset_estimator = _rand_estimator(c, 3)
    params.offset_estimator_prev = _rand_estimator(c, 3)
    clip = _clip(c, 3, 6, 6)
    out = sifa_star_forward(clip, cfg, params)
    ref = oracle_forward(clip, cfg, params)
    assert np.abs(out.data - ref.data.astype(np.float32)).max() < 1e-5


# --- temporal conv baseline --------------------------------------------------

def test_temporal_conv_delta_kernel_identity():
    clip = _clip(3, 5, 4, 4)
    kern = Tensor(np.tile(np.array([0.0, 1.0, 0.0], np.float32), (3, 1)))
    out = temporal_conv_baseline(clip, kern)
    assert np.array_equal(out.data, clip.data)


def test_temporal_conv_averaging_on_constant_clip():
    c, l = 2, 6
    clip = Tensor(np.ones((c, l, 3, 3), np.float32))
    kern = Tensor(np.full((c, 3), 1.0 / 3, np.float32))
    out = temporal_conv_baseline(clip, kern)
    assert np.allclose(out.data[:, 1:-1], 1.0, atol=1e-6)   # interior unchanged
    assert np.allclose(out.data[:, 0], 2.0 / 3, atol=1e-6)  # zero-padded ends
    assert np.allclose(out.data[:, -1], 2.0 / 3, atol=1e-6)


def test_temporal_conv_matches_loop():
    rng = np.random.default_rng(77)
    c, l, h, w = 3, 5, 4, 4
    clip = rng.normal(size=(c, l, h, w)).astype(np.float32)
    kern = rng.normal(size=(c, 3)).astype(np.float32)
    out = temporal_conv_baseline(Tensor(clip), Tensor(kern))
    ref = np.zeros_like(clip)
    for ci in range(c):
        for t in range(l):
            for j in range(3):
                tt = t - 1 + j
                if 0 <= tt < l:
                    ref[ci, t] += kern[ci, j] * clip[ci, tt]
    assert np.abs(out.data - ref).max() < 1e-6


# --- demo net ----------------------------------------------------------------

def test_demo_net_zero_classifier_gives_bias():
    cfg = DemoNetConfig(channels=8, num_blocks=1)
    net = init_demo_net(cfg, seed=3)
    net.classifier_w.data[:] = 0.0
    net.classifier_b.data[:] = np.arange(8, dtype=np.float32)
    clips = [Tensor(RNG.normal(0, 1, (1, 3, 8, 8)).astype(np.float32))
             for _ in range(2)]
    logits = demo_net_forward(clips, net)
    assert np.allclose(logits.data, np.arange(8, dtype=np.float32)[None], atol=0)


def test_demo_net_identical_clips_identical_logits():
    cfg = DemoNetConfig(channels=8, num_blocks=2)
    net = init_demo_net(cfg, seed=4)
    clip = RNG.normal(0, 1, (1, 3, 8, 8)).astype(np.float32)
    batch = np.stack([clip, clip, clip])
    logits = demo_net_forward(batch, net).data
    assert np.array_equal(logits[0], logits[1])
    assert np.array_equal(logits[0], logits[2])


def test_demo_net_matches_golden_file():
    net, clips = golden_fixture()
    golden = load_tensor(os.path.join(os.path.dirname(__file__), "data",
                                      "demo_logits_golden.sifa"))
    logits = demo_net_forward(clips, net)
    assert np.abs(logits.data - golden.data).max() < 1e-5


def test_demo_net_golden_file_matches_oracle_path():
    # regenerating the golden values via the oracle path reproduces the file
    net, clips = golden_fixture()
    golden = load_tensor(os.path.join(os.path.dirname(__file__), "data",
                                      "demo_logits_golden.sifa"))
    ref = oracle_demo_logits(net, clips)
    assert np.abs(ref - golden.data).max() < 1e-12


# --- shape preservation and locality ----------------------------------------

def _all_variant_fixtures(c=4, l=4, h=5, w=5):
    out = []
    for variant in ("full", "regular_attention", "correlation_only", "star"):
        sampling = "deformable" if variant in ("full", "star") else "regular"
        cfg = SifaConfig(k=3, sampling=sampling, variant=variant, norm="softmax")
        params = make_block_params(cfg, c)
        if sampling == "deformable":
            params.offset_estimator = _rand_estimator(c, 3)
            if variant == "star":
                params.offset_estimator_prev = _rand_estimator(c, 3)
        if variant == "correlation_only":
            params.corr_projection = AffineParams(
                weight=Tensor(RNG.normal(0, 0.3, (c, c + 9)).astype(np.float32)),
                bias=Tensor(np.zeros(c, np.float32)))
        out.append((cfg, params))
    return out


def test_shape_preserved_all_variants():
    clip = _clip(4, 4, 5, 5)
    for cfg, params in _all_variant_fixtures():
        assert block_forward(clip, cfg, params).shape == clip.shape


def test_temporal_locality_non_star():
    clip = _clip(4, 5, 5, 5)
    for cfg, params in _all_variant_fixtures():
        base = block_forward(clip, cfg, params).data
        bumped = clip.data.copy()
        bumped[:, 3] += RNG.normal(0, 1, (4, 5, 5)).astype(np.float32)  # frame t+2 for t=1
        out = block_forward(Tensor(bumped), cfg, params).data
        if cfg.variant == "star":
            # full dependence set of frame 1 is frames {0, 1, 2}
            assert np.array_equal(out[:, 1], base[:, 1])
            assert not np.array_equal(out[:, 2], base[:, 2])
        else:
            assert np.array_equal(out[:, 1], base[:, 1])
            assert np.array_equal(out[:, 0], base[:, 0])
            assert not np.array_equal(out[:, 2], base[:, 2])


def test_last_frame_independent_of_others():
    clip = _clip(4, 5, 5, 5)
    for cfg, params in _all_variant_fixtures():
        if cfg.variant == "star":
            continue
        base = block_forward(clip, cfg, params).data
        bumped = clip.data.copy()
        bumped[:, :4] += RNG.normal(0, 1, (4, 4, 5, 5)).astype(np.float32)
        out = block_forward(Tensor(bumped), cfg, params).data
        assert np.array_equal(out[:, 4], base[:, 4])


# --- flop count --------------------------------------------------------------

def test_flop_count_k1_regular_closed_form():
    cfg = SifaConfig(k=1, sampling="regular", variant="regular_attention")
    c, l, h, w = 16, 8, 16, 16
    assert flop_count(cfg, c, l, h, w) == 2 * c * l * h * w


def test_flop_count_monotone_in_k():
    c, l, h, w = 16, 8, 16, 16
    counts = [flop_count(_full_cfg(k=k), c, l, h, w) for k in (1, 3, 5, 7, 9)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_flop_count_deformable_minus_regular_delta():
    c, l, h, w = 16, 4, 8, 8
    kk = 9
    delta = flop_count(_full_cfg(), c, l, h, w) - flop_count(_reg_cfg(), c, l, h, w)
    offset_macs = l * h * w * (2 * kk) * (c * 9)
    sampling_macs = 4 * c * kk * (h * w * l)
    assert delta == offset_macs + sampling_macs


# --- parameter serialization -------------------------------------------------

def test_net_save_load_roundtrip(tmp_path):
    cfg = DemoNetConfig(channels=6, num_blocks=2,
                        sifa=SifaConfig(k=3, sampling="deformable", variant="full"))
    net = init_demo_net(cfg, seed=9)
    for name, arr in net_parameters(net):
        arr += RNG.normal(0, 0.1, arr.shape).astype(arr.dtype)
    save_net(net, tmp_path / "params")
    manifest = (tmp_path / "params" / "manifest.tsv").read_text().strip().split("\n")
    assert all(len(line.split("\t")) == 4 for line in manifest)
    back = load_net(tmp_path / "params")
    for (n1, a1), (n2, a2) in zip(net_parameters(net), net_parameters(back)):
        assert n1 == n2
        assert np.array_equal(a1, a2)
    clip = _clip(1, 3, 8, 8)
    a = demo_net_forward([clip], net).data
    b = demo_net_forward([clip], back).data
    assert np.array_equal(a, b)
