"""Command-line entry point (``damal``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import losses
from .distance import compute_all_weight_maps
from .metrics import evaluate_subject, write_reports
from .network import count_parameters
from .pipeline import (build_configs, load_checkpoint, load_config,
                       parse_assignments, predict_subject, train)
from .volume import (CLASS_NAMES, PhantomSpec, generate_phantom, load_labels, load_subject,
                     read_raw, save_labels, save_subject, write_raw)

log = logging.getLogger("damal")


def _triple(text, cast=float):
    parts = text.replace(",", " ").split()
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 values, got {text!r}")
    return tuple(cast(p) for p in parts)


def cmd_gen_phantom(args):
    spec = PhantomSpec(dims=_triple(args.dims, int), class_radii=_triple(args.radii),
                       contrast_gap=args.contrast_gap, noise_sigma=args.noise_sigma,
                       warp_amplitude=args.warp_amplitude)
    subject = generate_phantom(spec, args.seed, args.id)
    out = save_subject(subject, args.out)
    print(out)


def cmd_weights(args):
    from .report import export_slices, plot_weight_maps

    subject = load_subject(args.subject)
    if subject.labels is None:
        raise ValueError(f"subject {args.subject} has no label.raw")
    wm = compute_all_weight_maps(subject.labels)
    out = Path(args.out)
    for c in range(len(wm)):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        write_raw(out / f"W_{name}.raw", wm[c], "f32", subject.spacing_mm)
        export_slices(wm[c], out / "slices", f"W_{name}", axis=args.axis, lo=0.0, hi=1.0)
    plot_weight_maps(subject, wm, out / "weight_maps.png", axis=args.axis)
    for note in wm.warnings:
        print(f"warning: {note}", file=sys.stderr)
    print(out)


def cmd_export_slices(args):
    from .report import export_slices

    arr, _, _ = read_raw(args.volume)
    indices = [int(i) for i in args.index] if args.index else None
    for p in export_slices(arr, args.out, Path(args.volume).stem, args.axis, indices):
        print(p)


def _subject_dirs(data_dir):
    data_dir = Path(data_dir)
    if (data_dir / "T1.raw").is_file():
        return [data_dir]
    dirs = sorted(p for p in data_dir.iterdir() if (p / "T1.raw").is_file())
    if not dirs:
        raise FileNotFoundError(f"no subject directories under {data_dir}")
    return dirs


def cmd_train(args):
    from .report import plot_training_log

    if args.config:
        train_cfg, net_cfg = load_config(args.config, args.set)
    else:
        train_cfg, net_cfg = build_configs(parse_assignments(args.set, "<override>"))
    subjects = [load_subject(d) for d in _subject_dirs(args.data)]
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(train_cfg, net_cfg, subjects, out_dir=args.out, resume=resume,
                   max_steps=args.max_steps)
    if result.history:
        plot_training_log(result.history, Path(args.out) / "train_log.png")
    print(result.checkpoint)


def cmd_predict(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    subject = load_subject(args.subject, role="test")
    patch = ckpt.train_cfg.patch_size if ckpt.train_cfg else (32, 32, 32)
    stride = args.stride or (ckpt.train_cfg.inference_stride if ckpt.train_cfg else None)
    _, labels = predict_subject(model, subject, patch, stride)
    save_labels(args.out, labels)
    print(args.out)


def cmd_evaluate(args):
    from .report import plot_metrics

    gt = load_labels(args.gt)
    pred = load_labels(args.pred)
    report = evaluate_subject(gt, pred, args.subject_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports([report], out / "metrics.csv", out / "metrics.json")
    plot_metrics([report], out / "metrics.png")
    for row in report.rows():
        print(",".join(str(v) for v in row))


def cmd_analyze_loss(args):
    from .report import plot_gradient_curves

    gammas = args.gamma or [2.0]
    rows = losses.gradient_table(gammas, args.points)
    crossovers = {g: losses.gradient_crossover(g) for g in gammas}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "p", "abs_grad_ce", "abs_grad_focal", "abs_grad_attention"])
        w.writerows(rows)
    with open(out.with_name(out.stem + "_crossover.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "crossover"])
        for g, c in crossovers.items():
            w.writerow([g, "none" if c is None else repr(c)])
    plot_gradient_curves(rows, crossovers, out.with_suffix(".png"))
    for g, c in crossovers.items():
        print(f"gamma={g:g} crossover={'none' if c is None else f'{c:.6f}'}")


def cmd_info(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    info = {
        "network_config": ckpt.net_cfg.to_dict(),
        "train_config": ckpt.train_cfg.to_dict() if ckpt.train_cfg else None,
        "epoch": ckpt.state.epoch,
        "global_step": ckpt.state.global_step,
        "current_lr": ckpt.state.current_lr,
        "parameters": count_parameters(model),
    }
    print(json.dumps(info, indent=2))


def cmd_compare(args):
    from .report import run_comparison, summarize_comparison, write_comparison

    rows = run_comparison(args.phantoms, list(range(args.seeds)), args.steps)
    paths = write_comparison(rows, args.out)
    for loss, vals in summarize_comparison(rows).items():
        print(f"{loss}: mean_dsc={vals['mean_dsc']:.4f} mean_asd_mm={vals['mean_asd_mm']:.4f}")
    print(paths["csv"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="damal", description="Dilated attention segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantom", help="write a synthetic nested-shell subject")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--id", default=None)
    g.add_argument("--dims", default="64")
    g.add_argument("--radii", default="28 20 12")
    g.add_argument("--contrast-gap", type=float, default=0.5)
    g.add_argument("--noise-sigma", type=float, default=0.05)
    g.add_argument("--warp-amplitude", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_phantom)

    w = sub.add_parser("weights", help="surface attention weight maps + slice images")
    w.add_argument("subject")
    w.add_argument("--out", required=True)
    w.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    w.set_defaults(func=cmd_weights)

    e = sub.add_parser("export-slices", help="PGM slices of a raw volume")
    e.add_argument("volume")
    e.add_argument("--out", required=True)
    e.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    e.add_argument("--index", action="append")
    e.set_defaults(func=cmd_export_slices)

    t = sub.add_parser("train", help="train from a config file and a data directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="sliding-window segmentation of one subject")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--subject", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--stride", type=int)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="DSC/ASD report for a prediction")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--subject-id", default="subject")
    ev.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze-loss", help="CE/focal/attention gradient magnitudes and crossover")
    a.add_argument("--gamma", type=float, action="append")
    a.add_argument("--points", type=int, default=99)
    a.add_argument("--out", default="loss_gradients.csv")
    a.set_defaults(func=cmd_analyze_loss)

    i = sub.add_parser("info", help="config and parameter count of a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_info)

    c = sub.add_parser("compare", help="combined vs Dice-only on low-contrast phantoms")
    c.add_argument("--out", required=True)
    c.add_argument("--phantoms", type=int, default=5)
    c.add_argument("--seeds", type=int, default=3)
    c.add_argument("--steps", type=int, default=60)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
