"""
Report writers: slice images, matplotlib figures and the combined-vs-Dice
comparison experiment on low-contrast phantoms.
"""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .metrics import evaluate_subject  # noqa: E402
from .network import NetworkConfig  # noqa: E402
from .pipeline import TrainConfig, predict_subject, prepare_subject, train  # noqa: E402
from .volume import CLASS_NAMES, PhantomSpec, generate_phantom  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 110,
})


def _to_uint8(arr: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    lo = arr.min() if lo is None else lo
    hi = arr.max() if hi is None else hi
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.round(255 * np.clip((arr - lo) / (hi - lo), 0, 1)).astype(np.uint8)


def export_slices(volume: np.ndarray, out_dir, prefix: str, axis: int = 2,
                  indices: Optional[Iterable[int]] = None,
                  lo: Optional[float] = None, hi: Optional[float] = None) -> List[Path]:
    """Write grayscale PGM slices of a 3D array (default: the middle slice)."""
    volume = np.asarray(volume)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if indices is None:
        indices = [volume.shape[axis] // 2]
    lo = float(volume.min()) if lo is None else lo
    hi = float(volume.max()) if hi is None else hi
    paths = []
    for idx in indices:
        sl = np.take(volume, idx, axis=axis)
        path = out_dir / f"{prefix}_axis{axis}_{idx:03d}.pgm"
        Image.fromarray(_to_uint8(sl.T, lo, hi)).save(path)
        paths.append(path)
    return paths


def plot_weight_maps(subject, weight_maps, path, axis: int = 2) -> Path:
    """T1, T2, labels and the tissue weight maps on the middle slice."""
    mid = subject.dims[axis] // 2
    panels = [("T1", subject.modalities[0].data, "gray"),
              ("T2", subject.modalities[1].data, "gray")]
    if subject.labels is not None:
        panels.append(("labels", subject.labels.data, "viridis"))
    for c in range(1, len(weight_maps)):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        panels.append((f"W {name}", weight_maps[c], "magma"))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.1 * len(panels), 2.4))
    for ax, (title, vol, cmap) in zip(np.atleast_1d(axes), panels):
        ax.imshow(np.take(vol, mid, axis=axis).T, cmap=cmap, origin="lower")
        ax.set_title(title)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_gradient_curves(rows, crossovers: Dict[float, Optional[float]], path) -> Path:
    rows = np.asarray(rows, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    first = rows[rows[:, 0] == rows[0, 0]]
    ax.plot(first[:, 1], first[:, 2], "k-", label="CE")
    ax.plot(first[:, 1], first[:, 4], "k:", label="attention (W=1)")
    for gamma in sorted(set(rows[:, 0])):
        sel = rows[rows[:, 0] == gamma]
        (line,) = ax.plot(sel[:, 1], sel[:, 3], label=f"focal $\\gamma$={gamma:g}")
        cross = crossovers.get(gamma)
        if cross is not None:
            ax.axvline(cross, color=line.get_color(), lw=0.8, ls="--")
    ax.set_yscale("log")
    ax.set_xlabel("true-class probability P")
    ax.set_ylabel("|dL/dP|")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_training_log(history: Sequence[dict], path) -> Path:
    steps = [r["step"] for r in history]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(4.6, 4.0), sharex=True)
    for key, style in (("loss_total", "k-"), ("loss_attention", "C0-"), ("loss_dice", "C1-")):
        vals = np.array([r[key] for r in history], dtype=float)
        if np.isfinite(vals).any():
            ax.plot(steps, vals, style, lw=0.8, label=key.replace("loss_", ""))
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax_lr.plot(steps, [r["lr"] for r in history], "k-", lw=0.8)
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_metrics(reports, path) -> Path:
    names = list(reports[0].dsc)
    x = np.arange(len(names))
    width = 0.8 / len(reports)
    fig, (ax_d, ax_a) = plt.subplots(1, 2, figsize=(6.0, 2.8))
    for i, r in enumerate(reports):
        ax_d.bar(x + i * width, [r.dsc[n] for n in names], width, label=r.subject_id)
        ax_a.bar(x + i * width, [r.asd[n] for n in names], width)
    for ax, label in ((ax_d, "DSC"), (ax_a, "ASD (mm)")):
        ax.set_xticks(x + width * (len(reports) - 1) / 2, names)
        ax.set_ylabel(label)
    if len(reports) <= 8:
        ax_d.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# comparison experiment

LOW_CONTRAST = PhantomSpec(dims=(48, 48, 48), class_radii=(21.0, 15.0, 9.0),
                           contrast_gap=0.12, noise_sigma=0.1, warp_amplitude=2.5)
COMPARE_COLUMNS = ("phantom", "seed", "loss", "class", "dsc", "asd_mm")


def run_comparison(n_phantoms: int = 5, seeds: Sequence[int] = (0, 1, 2), steps: int = 60,
                   spec: PhantomSpec = LOW_CONTRAST,
                   train_cfg: Optional[TrainConfig] = None,
                   net_cfg: Optional[NetworkConfig] = None,
                   losses: Sequence[str] = ("combined", "dice")) -> List[tuple]:
    """Train each loss on each phantom and seed at an equal step budget.

    Each model is scored on a held-out phantom drawn from the same spec.
    """
    train_cfg = train_cfg or TrainConfig(batch_size=2, steps_per_epoch=10, period_length=200,
                                         decay_every=40, num_periods=1)
    net_cfg = net_cfg or NetworkConfig(encoder_channels=(8, 16, 32, 32, 32))
    rows = []
    for k in range(n_phantoms):
        train_subject = prepare_subject(generate_phantom(spec, 1000 + k, f"train-{k}"))
        test_subject = generate_phantom(spec, 2000 + k, f"test-{k}")
        for seed in seeds:
            for loss in losses:
                cfg = dataclasses.replace(train_cfg, seed=seed, loss=loss)
                result = train(cfg, net_cfg, [train_subject], max_steps=steps, prepared=True)
                _, pred = predict_subject(result.model, test_subject, cfg.patch_size)
                report = evaluate_subject(test_subject.labels, pred, test_subject.id)
                for name in report.dsc:
                    rows.append((k, seed, loss, name, report.dsc[name], report.asd[name]))
    return rows


def summarize_comparison(rows) -> Dict[str, Dict[str, float]]:
    out = {}
    for loss in sorted({r[2] for r in rows}):
        sel = [r for r in rows if r[2] == loss]
        out[loss] = {
            "mean_dsc": float(np.nanmean([r[4] for r in sel])),
            "mean_asd_mm": float(np.nanmean([r[5] for r in sel])),
        }
    return out


def write_comparison(rows, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_COLUMNS)
        w.writerows(rows)
    summary = summarize_comparison(rows)
    table_path = out_dir / "comparison_summary.csv"
    with open(table_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "mean_dsc", "mean_asd_mm"])
        for loss, vals in summary.items():
            w.writerow([loss, vals["mean_dsc"], vals["mean_asd_mm"]])

    classes = sorted({r[3] for r in rows}, key=lambda n: CLASS_NAMES.index(n))
    loss_names = sorted(summary)
    fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.8))
    for ax, col, label in ((axes[0], 4, "DSC"), (axes[1], 5, "ASD (mm)")):
        data = [[r[col] for r in rows if r[2] == loss and r[3] == c and np.isfinite(r[col])]
                for c in classes for loss in loss_names]
        pos = [i * (len(loss_names) + 1) + j for i in range(len(classes)) for j in range(len(loss_names))]
        ax.boxplot(data, positions=pos, widths=0.7)
        ax.set_xticks([i * (len(loss_names) + 1) + (len(loss_names) - 1) / 2 for i in range(len(classes))],
                      classes)
        ax.set_ylabel(label)
    axes[0].set_title(" | ".join(f"{i % len(loss_names) + 1}={n}" for i, n in enumerate(loss_names)))
    fig.tight_layout()
    fig_path = out_dir / "comparison.png"
    fig.savefig(fig_path)
    plt.close(fig)
    return {"csv": csv_path, "summary": table_path, "figure": fig_path}
