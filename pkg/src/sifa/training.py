"""SGD training of the demo classifier with a deterministic metrics log.

Given a seed and a config, initialization, batch order and therefore every
logged number are fully reproducible at a fixed thread count. Wall-clock
timing is the one inherently non-deterministic column; disable
`record_walltime` when byte-identical logs are required.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .blocks import DemoNet, DemoNetConfig, bind_net, demo_forward, init_demo_net, save_net
from .dataset import load_split


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch/batch where it happened."""


@dataclass
class TrainConfig:
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 64
    batch_size: int = 32
    seed: int = 0
    lr_patience: int = 2      # epochs without train-loss improvement before halving
    lr_threshold: float = 1e-3  # loss improvement below this counts as a plateau
    grad_clip: float = 0.0    # global-norm clip per batch; 0 disables
    record_walltime: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")


@dataclass
class TrainResult:
    net: DemoNet
    rows: list                 # (epoch, train_loss, test_acc, lr, wall_ms)
    metrics_text: str
    final_test_acc: float


def evaluate(net: DemoNet, clips: np.ndarray, labels: np.ndarray,
             batch_size: int = 128) -> float:
    hits = 0
    for i in range(0, len(clips), batch_size):
        xb = clips[i:i + batch_size].astype(net.dtype, copy=False)
        logits, _ = demo_forward(None, Var(xb), net)
        hits += int((logits.value.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return hits / len(clips)


def _metrics_header(net_cfg: DemoNetConfig, train_cfg: TrainConfig) -> str:
    cfg = {"net": {**asdict(net_cfg)}, "train": asdict(train_cfg)}
    lines = [
        "# demo-classifier training log",
        f"# config: {json.dumps(cfg, sort_keys=True)}",
        f"# lr schedule: constant, halved after {train_cfg.lr_patience} epochs "
        "without train-loss improvement",
        "# dropout: none",
        "epoch,train_loss,test_acc,lr,wall_ms",
    ]
    return "\n".join(lines) + "\n"


def train(net_cfg: DemoNetConfig, train_cfg: TrainConfig, data_dir,
          out_dir=None) -> TrainResult:
    """SGD with momentum on cross-entropy; returns the net and metrics log.

    Writes `metrics.csv`, serialized parameters, and a training-curve
    figure under `out_dir` when given. Aborts with TrainingDiverged if the
    loss goes non-finite.
    """
    train_clips, train_labels = load_split(os.path.join(data_dir, "train"))
    test_clips, test_labels = load_split(os.path.join(data_dir, "test"))

    net = init_demo_net(net_cfg, seed=train_cfg.seed)
    order_rng = np.random.default_rng(
        np.random.SeedSequence([0x08D, train_cfg.seed]))

    binding = bind_net(net)
    names = sorted(binding.keys())
    velocity = {n: np.zeros_like(binding[n].value) for n in names}

    lr = train_cfg.lr
    best_loss = np.inf
    stall = 0
    rows = []
    text = _metrics_header(net_cfg, train_cfg)

    n = len(train_clips)
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        losses = []
        for i in range(0, n, train_cfg.batch_size):
            idx = perm[i:i + train_cfg.batch_size]
            xb = train_clips[idx].astype(net.dtype, copy=False)
            yb = train_labels[idx]
            for v in binding.values():
                v.grad = None
            tape = Tape()
            logits, _ = demo_forward(tape, Var(xb), net, binding=binding)
            loss = ad.cross_entropy(tape, logits, yb)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {i // train_cfg.batch_size}"
                    f" (lr={lr}); try a smaller learning rate")
            tape.backward(loss)
            if lr != 0.0:
                scale = 1.0
                if train_cfg.grad_clip > 0.0:
                    sq = 0.0
                    for name in names:
                        g = binding[name].grad
                        if g is not None:
                            sq += float(np.sum(np.square(g, dtype=np.float64)))
                    gnorm = np.sqrt(sq)
                    if gnorm > train_cfg.grad_clip:
                        scale = train_cfg.grad_clip / gnorm
                for name in names:
                    var = binding[name]
                    g = var.grad if var.grad is not None else 0.0
                    v = velocity[name]
                    v *= train_cfg.momentum
                    v += scale * g + train_cfg.weight_decay * var.value
                    var.value -= lr * v
            losses.append(lv)
        train_loss = float(np.mean(losses))
        test_acc = evaluate(net, test_clips, test_labels)
        wall_ms = int(round((time.perf_counter() - t0) * 1000)) \
            if train_cfg.record_walltime else 0
        rows.append((epoch, train_loss, test_acc, lr, wall_ms))
        text += f"{epoch},{train_loss:.6f},{test_acc:.4f},{lr:.6f},{wall_ms}\n"

        if train_loss < best_loss - train_cfg.lr_threshold:
            best_loss = train_loss
            stall = 0
        else:
            stall += 1
            if stall >= train_cfg.lr_patience:
                lr *= 0.5
                stall = 0

    result = TrainResult(net=net, rows=rows, metrics_text=text,
                         final_test_acc=rows[-1][2])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w", encoding="utf-8") as f:
            f.write(text)
        save_net(net, os.path.join(out_dir, "params"))
        from .report import save_metrics_figure
        save_metrics_figure(metrics_path, os.path.join(out_dir, "metrics.png"))
    return result
