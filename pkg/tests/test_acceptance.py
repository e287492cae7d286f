"""Exit criteria: one test per criterion, each reporting a PASS/FAIL line."""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest
from damal import losses
from damal.distance import compute_weight_map
from damal.metrics import asd, dsc, evaluate_subject
from damal.network import (AtrousBlock, ChannelAttention, NetworkConfig, SpatialAttention,
                           build_model)
from damal.pipeline import (TrainConfig, file_sha256, load_config, predict_subject, train,
                            warm_restart_lr)
from damal.volume import LabelVolume, PhantomSpec, generate_phantom
from oracles import asd_brute, central_difference, relative_error, weight_map_brute
from test_distance import random_labels
from test_network import force_gate_open, zero_

CONFIGS = Path(__file__).parents[1] / "configs"
OVERFIT_STEPS = 400


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_weight_map_oracle():
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for seed in range(50):
        labels = random_labels(seed, 12)
        for c in range(labels.num_classes):
            if not (labels.data == c).any():
                continue
            err = np.max(np.abs(compute_weight_map(labels, c) - weight_map_brute(labels.data, c)))
            worst = max(worst, err)
            checked += 1
    elapsed = time.perf_counter() - start
    record(1, "weight-map oracle", worst < 1e-9 and elapsed < 60,
           f"{checked} maps over 50 volumes, max |err| {worst:.2e}, {elapsed:.1f}s")


def _loss_fns(t, w):
    return {
        "CE": lambda z: losses.cross_entropy(torch.softmax(z, 1), t),
        "Focal": lambda z: losses.focal_loss(torch.softmax(z, 1), t, 2.0),
        "Dice": lambda z: losses.dice_loss(torch.softmax(z, 1), t),
        "attention": lambda z: losses.attention_loss(torch.softmax(z, 1), t, w),
        "combined": lambda z: losses.combined_loss(torch.softmax(z, 1), t, w).total,
    }


def test_02_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(1, 4, 4, 4, 4, generator=g, dtype=torch.float64)
        t = torch.randint(0, 4, (1, 4, 4, 4), generator=g)
        w = torch.rand(1, 4, 4, 4, 4, generator=g, dtype=torch.float64)
        for name, fn in _loss_fns(t, w).items():
            z = logits.clone().requires_grad_(True)
            fn(z).backward()
            err = relative_error(central_difference(fn, logits), z.grad)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    record(2, "gradient suite", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (20 seeds, {elapsed:.1f}s)")


def test_03_attention_derivative():
    worst = 0.0
    for pv in np.round(np.arange(0.1, 0.91, 0.1), 10):
        for weight in (1.0, 0.25, 0.8):
            p = torch.tensor([[[1 - pv], [pv]]], dtype=torch.float64, requires_grad=True)
            loss = losses.attention_loss(p, torch.tensor([[1]]), torch.full_like(p, weight),
                                         reduction="sum")
            loss.backward()
            worst = max(worst, abs(p.grad[0, 1, 0].item() + 2 * weight * (1 - pv)))
    record(3, "attention derivative -2W(1-P)", worst < 1e-9, f"max |err| {worst:.1e} on P in 0.1..0.9")


def test_04_crossover():
    c2, c1 = losses.gradient_crossover(2), losses.gradient_crossover(1)
    ok = 0.29 <= c2 <= 0.31 and abs(c1 - 1 / math.e) < 1e-6
    record(4, "focal/CE crossover", ok, f"gamma=2 -> {c2:.6f}, gamma=1 -> {c1:.9f} (1/e={1 / math.e:.9f})")


def test_05_focal_ce_degeneracy():
    worst = 0.0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        p = torch.softmax(torch.randn(2, 4, 5, 5, 5, generator=g, dtype=torch.float64), 1)
        t = torch.randint(0, 4, (2, 5, 5, 5), generator=g)
        worst = max(worst, abs(losses.focal_loss(p, t, 0.0, alpha=[1] * 4).item()
                               - losses.cross_entropy(p, t).item()))
    record(5, "focal(gamma=0, alpha=1) == CE", worst < 1e-12, f"max |diff| {worst:.1e}")


def test_06_metrics_oracle():
    worst, n = 0.0, 0
    for seed in range(50):
        t = random_labels(seed, 12)
        r = np.random.default_rng(seed)
        p = LabelVolume(np.where(r.random(t.dims) < 0.15, r.integers(0, 4, t.dims), t.data).astype(np.uint8))
        for c in range(1, 4):
            if (t.data == c).any() and (p.data == c).any():
                worst = max(worst, abs(asd(t, p, c) - asd_brute(t.data, p.data, c)))
                assert asd(t, p, c) == asd(p, t, c)
                assert dsc(t, p, c) == dsc(p, t, c)
                n += 1
    a = np.zeros((4, 4, 4), np.uint8)
    a[0, :, 0] = 1
    b = np.zeros((4, 4, 4), np.uint8)
    b[0, 2:, 0] = 1
    b[3, :2, 3] = 1
    exact = (dsc(a, a, 1) == 1.0 and dsc(a, 1 - a, 1) == 0.0 and dsc(a, b, 1) == 0.5)
    record(6, "metrics oracle", worst < 1e-9 and exact,
           f"ASD max |err| {worst:.1e} over {n} class pairs; DSC identity/disjoint/half exact={exact}")


def test_07_architecture():
    start = time.perf_counter()
    model = build_model(NetworkConfig(), seed=0)
    with torch.no_grad():
        out = model(torch.randn(8, 2, 32, 32, 32))
    checks = {"forward (8,2,32,32,32)->(8,4,32,32,32)": tuple(out.shape) == (8, 4, 32, 32, 32)}
    x = torch.randn(2, 32, 8, 8, 8)
    blocks = {"SA": SpatialAttention(32, 3), "CA": ChannelAttention(32, 4), "atrous": AtrousBlock(32)}
    with torch.no_grad():
        for name, blk in blocks.items():
            checks[f"{name} shape"] = blk(x).shape == x.shape
        for name in ("SA", "CA"):
            checks[f"{name} zero-init 0.5x"] = torch.equal(zero_(blocks[name])(x), 0.5 * x)
            checks[f"{name} gate=1 identity"] = torch.equal(force_gate_open(blocks[name])(x), x)
    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    record(7, "architecture shapes and gates", not failed and elapsed < 120,
           f"{len(checks) - len(failed)}/{len(checks)} checks, {elapsed:.1f}s" + (f", failed: {failed}" if failed else ""))


@pytest.mark.slow
def test_08_overfit_phantom():
    start = time.perf_counter()
    phantom = generate_phantom(PhantomSpec(dims=(64, 64, 64), class_radii=(28, 20, 12),
                                           contrast_gap=0.5, noise_sigma=0.05), seed=0)
    cfg, net = load_config(CONFIGS / "desk.cfg", ["lambda_dice = 1.0", "loss = combined"])
    result = train(cfg, net, [phantom], max_steps=OVERFIT_STEPS)
    _, pred = predict_subject(result.model, phantom, cfg.patch_size)
    report = evaluate_subject(phantom.labels, pred, "overfit")
    elapsed = time.perf_counter() - start
    steps = result.state.global_step
    record(8, "overfit 64^3 phantom", report.mean_dsc >= 0.95 and steps <= 2000 and elapsed < 1800,
           f"mean tissue DSC {report.mean_dsc:.4f} "
           f"({', '.join(f'{k} {v:.4f}' for k, v in report.dsc.items())}), {steps} steps, {elapsed:.0f}s")


@pytest.mark.slow
def test_09_comparison_report(tmp_path):
    from damal.report import run_comparison, summarize_comparison, write_comparison

    out_dir = Path(os.environ.get("DAMAL_REPORT_DIR", tmp_path))
    rows = run_comparison(n_phantoms=5, seeds=(0, 1, 2), steps=60)
    paths = write_comparison(rows, out_dir)
    summary = summarize_comparison(rows)
    comb, dice = summary["combined"], summary["dice"]
    verdict = "combined ASD <= dice" if comb["mean_asd_mm"] <= dice["mean_asd_mm"] else "combined ASD > dice"
    for loss, vals in summary.items():
        print(f"    {loss:9s} mean DSC {vals['mean_dsc']:.4f}  mean ASD {vals['mean_asd_mm']:.3f} mm")
    ok = len(rows) == 5 * 3 * 2 * 3 and all(p.exists() for p in paths.values())
    record(9, "comparison report (informative)", ok,
           f"combined DSC {comb['mean_dsc']:.4f} / ASD {comb['mean_asd_mm']:.3f} mm vs "
           f"dice DSC {dice['mean_dsc']:.4f} / ASD {dice['mean_asd_mm']:.3f} mm; {verdict}; "
           f"table at {paths['summary']}")


def test_10_determinism(tmp_path):
    spec = PhantomSpec(dims=(32, 32, 32), class_radii=(14, 10, 6), noise_sigma=0.1, warp_amplitude=1.5)
    a, b = generate_phantom(spec, 11), generate_phantom(spec, 11)
    same_phantom = all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.modalities, b.modalities)) \
        and a.labels.data.tobytes() == b.labels.data.tobytes()
    cfg = TrainConfig(batch_size=2, steps_per_epoch=3, period_length=4, decay_every=2, num_periods=1,
                      checkpoint_every=0, seed=5)
    net = NetworkConfig(encoder_channels=(4, 8, 8, 8, 8))
    train(cfg, net, [a], out_dir=tmp_path / "r1")
    train(cfg, net, [a], out_dir=tmp_path / "r2")
    h1, h2 = file_sha256(tmp_path / "r1" / "final.ckpt"), file_sha256(tmp_path / "r2" / "final.ckpt")
    record(10, "determinism", same_phantom and h1 == h2,
           f"phantom bit-identical={same_phantom}, checkpoint sha256 {h1[:12]} vs {h2[:12]}")


def test_11_schedule():
    cfg = TrainConfig()
    expected = {0: 0.01, 39: 0.01, 40: 0.001, 199: 1e-6, 200: 0.01, 240: 0.001}
    got = {e: warm_restart_lr(e, cfg) for e in expected}
    ok = all(math.isclose(got[e], v, rel_tol=1e-12) for e, v in expected.items())
    record(11, "warm-restart schedule", ok, ", ".join(f"e{e}={got[e]:g}" for e in expected))
