import os
import subprocess
import sys

import numpy as np
import pytest

from sifa.blocks import DemoNetConfig, SifaConfig, init_demo_net
from sifa.dataset import (DIRECTIONS, DatasetSpec, InfeasibleClip,
                          SyntheticClipSpec, gen_dataset, load_split,
                          render_clip, sample_clip)
from sifa.export import export_attention, read_pgm, weights_to_grid, write_pgm
from sifa.tensor import Tensor, load_tensor
from sifa.training import TrainConfig, TrainingDiverged, evaluate, train


# --- synthetic clips ---------------------------------------------------------

def test_render_speed1_right_square_moves_one_column():
    spec = SyntheticClipSpec(grid=16, frames=6, object_kind="square",
                             direction=DIRECTIONS.index("right"), speed=1.0)
    clip = render_clip(spec, start=(4.5, 4.5), half_rc=(1.5, 1.5),
                       jitters=np.zeros(6))
    for t in range(5):
        # frame t+1 is frame t shifted one column right
        assert np.allclose(clip[0, t + 1, :, 1:], clip[0, t, :, :-1], atol=1e-12)
    col_mass = clip[0, 0].sum(axis=0)
    assert col_mass[3] > 0 and col_mass[6] == 0  # square spans columns 3..5


def test_static_clip_identical_frames():
    spec = SyntheticClipSpec(grid=16, frames=4, speed=0.0)
    clip = render_clip(spec, start=(8.0, 8.0), half_rc=(2.0, 2.0),
                       jitters=np.zeros(4))
    for t in range(1, 4):
        assert np.array_equal(clip[0, t], clip[0, 0])


def test_object_leaving_grid_rejected():
    spec = SyntheticClipSpec(grid=16, frames=8, direction=DIRECTIONS.index("right"),
                             speed=2.0)
    with pytest.raises(InfeasibleClip):
        render_clip(spec, start=(8.0, 8.0), half_rc=(2.0, 2.0), jitters=np.zeros(8))


def test_sample_clip_infeasible_spec_raises():
    # 8 frames at speed 2 travel 14 px; nothing fits inside a 16 px grid
    spec = SyntheticClipSpec(grid=16, frames=8, direction=3, speed=2.0)
    with pytest.raises(InfeasibleClip):
        sample_clip(spec, np.random.default_rng(0))


def test_dataset_deterministic_and_balanced(tmp_path):
    spec = DatasetSpec(grid=16, frames=4, speed=2.0, deformation=0.2, noise=0.05)
    gen_dataset(spec, 33, 16, seed=7, out_dir=tmp_path / "a")
    gen_dataset(spec, 33, 16, seed=7, out_dir=tmp_path / "b")
    for split in ("train", "test"):
        fa = sorted(os.listdir(tmp_path / "a" / split))
        assert fa == sorted(os.listdir(tmp_path / "b" / split))
        for f in fa:
            ba = (tmp_path / "a" / split / f).read_bytes()
            bb = (tmp_path / "b" / split / f).read_bytes()
            assert ba == bb
    clips, labels = load_split(tmp_path / "a" / "train")
    assert clips.shape == (33, 1, 4, 16, 16)
    counts = np.bincount(labels, minlength=8)
    assert counts.max() - counts.min() <= 1


def test_train_test_streams_disjoint(tmp_path):
    spec = DatasetSpec(grid=16, frames=4, speed=1.0, noise=0.05)
    gen_dataset(spec, 8, 8, seed=3, out_dir=tmp_path)
    a, _ = load_split(tmp_path / "train")
    b, _ = load_split(tmp_path / "test")
    assert not np.array_equal(a, b)


# --- training ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    spec = DatasetSpec(grid=12, frames=3, speed=1.0, deformation=0.1, noise=0.05)
    gen_dataset(spec, 48, 24, seed=11, out_dir=root)
    return root


def _tiny_netcfg(k=1):
    sifa = SifaConfig(k=k, sampling="regular", variant="regular_attention",
                      norm="raw")
    return DemoNetConfig(channels=6, num_blocks=1, sifa=sifa)


def test_zero_lr_keeps_parameters_and_accuracy(tiny_dataset):
    cfg = _tiny_netcfg()
    before = init_demo_net(cfg, seed=5)
    clips, labels = load_split(os.path.join(tiny_dataset, "test"))
    untrained_acc = evaluate(before, clips, labels)
    res = train(cfg, TrainConfig(epochs=1, batch_size=16, seed=5, lr=0.0),
                tiny_dataset)
    from sifa.blocks import net_parameters
    for (_, a), (_, b) in zip(net_parameters(before), net_parameters(res.net)):
        assert np.array_equal(a, b)
    assert res.rows[0][2] == pytest.approx(untrained_acc, abs=1e-12)


def test_untrained_accuracy_near_chance(tiny_dataset):
    clips, labels = load_split(os.path.join(tiny_dataset, "test"))
    accs = []
    for seed in range(5):
        net = init_demo_net(DemoNetConfig(channels=8, num_blocks=2), seed=seed)
        accs.append(evaluate(net, clips, labels))
    assert abs(float(np.mean(accs)) - 0.125) < 0.05


def test_divergence_aborts_with_diagnostic(tiny_dataset):
    # lr large enough to overflow float32 parameters outright
    cfg = _tiny_netcfg(k=3)
    with pytest.raises(TrainingDiverged, match="epoch"):
        train(cfg, TrainConfig(epochs=3, batch_size=16, seed=1, lr=1e40),
              tiny_dataset)


def test_metrics_log_format_and_artifacts(tiny_dataset, tmp_path):
    cfg = _tiny_netcfg()
    out = tmp_path / "run"
    res = train(cfg, TrainConfig(epochs=2, batch_size=16, seed=2, lr=0.01),
                tiny_dataset, out_dir=out)
    text = (out / "metrics.csv").read_text()
    lines = text.strip().split("\n")
    header_idx = [i for i, l in enumerate(lines) if not l.startswith("#")][0]
    assert lines[header_idx] == "epoch,train_loss,test_acc,lr,wall_ms"
    assert len(lines) == header_idx + 1 + 2
    first = lines[header_idx + 1].split(",")
    assert first[0] == "1" and len(first) == 5
    assert (out / "metrics.png").exists()
    assert (out / "params" / "manifest.tsv").exists()
    assert res.final_test_acc == float(lines[-1].split(",")[2])


def test_reproducible_metrics_without_walltime(tiny_dataset, tmp_path):
    cfg = _tiny_netcfg()
    tc = TrainConfig(epochs=2, batch_size=16, seed=9, lr=0.02,
                     record_walltime=False)
    a = train(cfg, tc, tiny_dataset).metrics_text
    b = train(cfg, tc, tiny_dataset).metrics_text
    assert a.encode() == b.encode()


# --- export ------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).normal(size=(5, 7))
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert back.shape == (5, 7)
    assert back.min() == 0 and back.max() == 255


def test_weights_to_grid_shapes():
    assert weights_to_grid(np.arange(9.0), 3).shape == (3, 3)
    assert weights_to_grid(np.arange(18.0), 3).shape == (3, 6)


def _demo_clip(frames=4, grid=16, speed=2.0, noise=0.0):
    spec = SyntheticClipSpec(grid=grid, frames=frames, direction=3, speed=speed,
                             deformation=0.0, noise=noise)
    data, _ = sample_clip(spec, np.random.default_rng(4))
    return Tensor(data)


def test_export_untrained_zero_offsets_regular_grid(tmp_path):
    net = init_demo_net(DemoNetConfig(channels=8, num_blocks=2), seed=0)
    clip = _demo_clip()
    paths = export_attention(net, clip, t=1, x=7, y=8, out_dir=tmp_path,
                             figures=False)
    import csv
    with open(tmp_path / "block0_attention.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 9
    grid = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1),
            (1, -1), (1, 0), (1, 1)]
    for row, (a, b) in zip(rows, grid):
        assert float(row["sample_row"]) == 7 + a
        assert float(row["sample_col"]) == 8 + b
    assert (tmp_path / "block0_offsets.sifa").exists()
    off = load_tensor(tmp_path / "block0_offsets.sifa")
    assert off.shape == (18, 16, 16)
    assert np.array_equal(off.data, np.zeros_like(off.data))


def test_export_static_clip_msm_is_half_next_frame(tmp_path):
    net = init_demo_net(DemoNetConfig(channels=8, num_blocks=1), seed=0)
    spec = SyntheticClipSpec(grid=12, frames=3, speed=0.0, deformation=0.0,
                             noise=0.0)
    clip = Tensor(render_clip(spec, (6.0, 6.0), (2.0, 2.0), np.zeros(3)))
    export_attention(net, clip, t=0, x=6, y=6, out_dir=tmp_path, figures=False)
    msm = load_tensor(tmp_path / "block0_msm.sifa").data
    # static clip: saliency is exactly half the (stem-mapped) next frame
    from sifa.autodiff import Var
    from sifa.blocks import demo_forward
    import sifa.autodiff as ad
    f4 = ad.conv2d(None, ad.frames_of(None, Var(clip.data[None])),
                   Var(net.stem.weight.data), Var(net.stem.bias.data), 1)
    feat = np.tanh(f4.value)
    assert np.allclose(msm, 0.5 * feat[1], atol=1e-6)


def test_export_out_of_range_query(tmp_path):
    net = init_demo_net(DemoNetConfig(channels=4, num_blocks=1), seed=0)
    clip = _demo_clip()
    from sifa.tensor import ShapeError
    with pytest.raises(ShapeError):
        export_attention(net, clip, t=9, x=0, y=0, out_dir=tmp_path)


def test_export_figures(tmp_path):
    net = init_demo_net(DemoNetConfig(channels=4, num_blocks=1), seed=0)
    clip = _demo_clip()
    export_attention(net, clip, t=0, x=8, y=8, out_dir=tmp_path, figures=True)
    assert (tmp_path / "block0_attention.png").exists()


# --- CLI ---------------------------------------------------------------------

def _cli(*args):
    return subprocess.run([sys.executable, "-m", "sifa.cli", *args],
                          capture_output=True, text=True)


def test_cli_no_arguments_usage_exit2():
    r = _cli()
    assert r.returncode == 2
    assert "usage" in r.stderr.lower()


def test_cli_unknown_flag_exit2():
    r = _cli("flops", "--bogus")
    assert r.returncode == 2
    assert "usage" in r.stderr.lower()


def test_cli_flops_trend():
    r3 = _cli("flops", "--k", "3")
    r9 = _cli("flops", "--k", "9")
    assert r3.returncode == 0 and r9.returncode == 0
    n3 = int(r3.stdout.strip().split()[-1])
    n9 = int(r9.stdout.strip().split()[-1])
    assert n9 > n3


def test_cli_invalid_config_exit2():
    r = _cli("flops", "--variant", "full", "--sampling", "regular")
    assert r.returncode == 2


def test_cli_pipeline(tmp_path):
    data = tmp_path / "data"
    r = _cli("gen-data", "--out", str(data), "--n-train", "24", "--n-test", "16",
             "--frames", "3", "--grid", "12", "--speed", "1", "--noise", "0.05",
             "--seed", "1")
    assert r.returncode == 0, r.stderr
    run_dir = tmp_path / "run"
    r = _cli("train", "--data", str(data), "--out", str(run_dir),
             "--epochs", "1", "--batch-size", "8", "--channels", "4",
             "--blocks", "1", "--variant", "r", "--k", "1", "--norm", "raw",
             "--seed", "1", "--no-walltime")
    assert r.returncode == 0, r.stderr
    assert (run_dir / "metrics.csv").exists()
    r = _cli("eval", "--params", str(run_dir / "params"), "--data", str(data))
    assert r.returncode == 0, r.stderr
    assert "accuracy" in r.stdout
    clip_file = data / "test" / "clip_00000.sifa"
    r = _cli("export-attn", "--params", str(run_dir / "params"),
             "--clip", str(clip_file), "--t", "0", "--x", "5", "--y", "5",
             "--out", str(tmp_path / "attn"), "--no-figures")
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "attn" / "block0_attention.csv").exists()


def test_cli_gradcheck_exit_code():
    r = _cli("gradcheck", "--max-coords", "8", "--k", "3")
    assert r.returncode == 0, r.stdout + r.stderr
    assert "gradient checks passed" in r.stdout


def test_cli_oracle_small():
    r = _cli("oracle", "--fixtures", "6")
    assert r.returncode == 0, r.stdout + r.stderr
    assert "matched the oracle" in r.stdout
