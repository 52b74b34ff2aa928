"""Command-line entry point: ``sqswin <command> [--config F] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for invalid input or configuration and 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, ContractError, IngestionError, ShapeError, ValidationError
from .evaluate import (datasets_for, eval_spec, evaluate_model, export_attention, predict_image,
                       run_ablation, synthetic_split, train_run)
from .gradcheck import run_suite
from .patches import (LabeledImage, SyntheticSpec, extract_patches, generate_synthetic, load_dataset,
                      read_image, read_manifest, write_image, write_patch_cache)

INPUT_ERRORS = (ConfigError, ContractError, IngestionError, ShapeError, ValidationError)
GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "sqswin_out"}


def _ints(text):
    return tuple(int(s) for s in text.split(","))


def load_config(args):
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = RunConfig.from_text(fh.read())
        except OSError as err:
            raise IngestionError(f"cannot read config {args.config}: {err}") from err
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, data_seed=args.seed)
    return cfg


def _out(args, *parts):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, *parts)


def _images(cfg, data_dir):
    if data_dir:
        return load_dataset(data_dir, cfg.corpus.train_fraction, cfg.data_seed)
    return synthetic_split(cfg)


def cmd_train(args, cfg):
    train_imgs, test_imgs = _images(cfg, args.data)
    train_set, test_set = datasets_for(cfg, train_imgs, test_imgs)
    with open(_out(args, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    report_path = _out(args, "report.csv")
    if os.path.exists(report_path):
        os.remove(report_path)
    model, report = train_run(cfg, train_set, test_set, report_path)
    save_checkpoint(model, _out(args, "model.qswn"))
    final = report.final("test") or report.final("train")
    print(f"trained {cfg.schedule.total_epochs} epochs; final {final['split']} MAE {final['mae']:.4f} "
          f"PCC {final['pcc']:.4f}; outputs in {args.out}")


def cmd_evaluate(args, cfg):
    model = load_checkpoint(args.checkpoint)
    cfg = dataclasses.replace(cfg, model=model.cfg)
    _, test_imgs = _images(cfg, args.data)
    if not test_imgs:
        raise ContractError("no held-out images to evaluate")
    _, test_set = datasets_for(cfg, [], test_imgs)
    rows = evaluate_model(model, test_set, _out(args, "evaluation.csv"))
    for r in rows:
        print(f"{r['level']:>9}: n={r['n']} MAE {r['mae']:.4f} MSE {r['mse']:.4f} PCC {r['pcc']:.4f}")


def cmd_predict(args, cfg):
    model = load_checkpoint(args.checkpoint)
    spec = dataclasses.replace(eval_spec(cfg), target_size=model.cfg.input_resolution)
    path = _out(args, "predictions.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "score"])
        for image_path in args.images:
            img = LabeledImage(read_image(image_path), 0.0, "real", image_path)
            score = predict_image(model, img, spec, cfg.seed)
            writer.writerow([os.path.basename(image_path), repr(score)])
            print(f"{image_path}: {score:.4f}")


def cmd_extract(args, cfg):
    spec = dataclasses.replace(
        cfg.patches,
        scales=_ints(args.scales) if args.scales else cfg.patches.scales,
        patches_per_image=args.count or cfg.patches.patches_per_image,
        target_size=args.target_size or cfg.patches.target_size,
    )
    labels = read_manifest(os.path.join(args.input, "labels.csv"))
    patches = []
    for i, name in enumerate(sorted(labels)):
        img = LabeledImage(read_image(os.path.join(args.input, name)), labels[name], "real", name)
        patches += extract_patches(img, spec, cfg.data_seed ^ i)
    write_patch_cache(patches, args.out)
    print(f"wrote {len(patches)} patches to {args.out}")


def cmd_synthesize(args, cfg):
    c = cfg.corpus
    rng = np.random.default_rng(cfg.data_seed)
    path = _out(args, "labels.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for i in range(args.n or c.n_images):
            p, s = float(rng.uniform()), int(rng.integers(0, 2 ** 31))
            img = generate_synthetic(SyntheticSpec(c.canvas, c.grid, p, c.noise, seed=s))
            name = f"synthetic_{i:05d}.png"
            write_image(_out(args, name), img.pixels)
            writer.writerow([name, repr(img.label)])
    print(f"wrote synthetic corpus to {args.out}")


def cmd_gradcheck(args, cfg):
    path = _out(args, "gradcheck.csv")
    ok = True
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "max_rel_error", "tolerance", "passed"])
        for name, result, tol in run_suite(cfg.seed):
            passed = result.passed(tol)
            ok &= passed
            writer.writerow([name, repr(result.max_rel_error), tol, passed])
            print(f"{name:>16}: max rel error {result.max_rel_error:.2e} (tol {tol:g}) "
                  f"{'ok' if passed else 'FAIL'}")
    if not ok:
        raise RuntimeError("gradient check failed")


def cmd_ablate(args, cfg):
    seeds = _ints(args.seeds) if args.seeds else (cfg.seed,)
    table = run_ablation(cfg, seeds, progress=lambda rung, seed, m: print(f"{rung} seed {seed}: MAE {m.mae:.4f}"))
    table.write_csv(_out(args, "ablation.csv"))
    for r in table.rows:
        print(f"{r['rung']:<32} MAE {r['mae']:.4f}  boost {r['boost']:+.4f}")


def cmd_export_attention(args, cfg):
    model = load_checkpoint(args.checkpoint)
    img = LabeledImage(read_image(args.image), 0.0, "real", args.image)
    paths = export_attention(model, img, args.out, args.upscale)
    print(f"wrote {len(paths)} files to {args.out}")


def build_parser():
    # Global flags are accepted before or after the command; SUPPRESS keeps a
    # subcommand's parser from overwriting a value given before it.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the run and data seeds")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: sqswin_out)")

    parser = argparse.ArgumentParser(prog="sqswin", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("train", cmd_train, "train on a labeled image directory or the synthetic corpus")
    p.add_argument("--data", help="directory with images and labels.csv (default: synthetic corpus)")
    p = add("evaluate", cmd_evaluate, "per-patch and per-image metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p = add("predict", cmd_predict, "multi-patch averaged score for each image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p = add("extract-patches", cmd_extract, "write a multi-scale patch cache")
    p.add_argument("--input", required=True, help="directory with images and labels.csv")
    p.add_argument("--scales", help="comma-separated crop sizes")
    p.add_argument("--count", type=int, help="patches per image")
    p.add_argument("--target-size", type=int)
    p = add("synthesize", cmd_synthesize, "write a synthetic browning corpus")
    p.add_argument("--n", type=int)
    add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p = add("ablate", cmd_ablate, "train the toggle ladder and tabulate MAE per rung")
    p.add_argument("--seeds", help="comma-separated seeds")
    p = add("export-attention", cmd_export_attention, "attention heatmaps and CSVs for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--upscale", type=int, default=1)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    try:
        cfg = load_config(args)
        args.fn(args, cfg)
    except INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
