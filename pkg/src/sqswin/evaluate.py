"""Evaluation, multi-patch inference, attention export and the ablation ladder."""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, Toggles
from .errors import ContractError, IngestionError
from .model import QSwinModel
from .patches import PatchSpec, build_dataset, extract_patches, synthetic_corpus, whole_image, write_image
from .reptile import TrainOptions, evaluate_dataset, train

PRETRAIN_NOTE = "warmup epochs stand in for ImageNet pretraining"


# ------------------------------------------------------------------- data

def split_images(images, train_fraction, seed):
    order = np.random.default_rng(seed).permutation(len(images))
    n_train = int(round(train_fraction * len(images)))
    return [images[i] for i in order[:n_train]], [images[i] for i in order[n_train:]]


def eval_spec(cfg):
    p = cfg.patches
    return PatchSpec(p.scales, cfg.eval_patches_per_image, p.target_size, p.balanced, p.augmentations)


def datasets_for(cfg, train_images, test_images):
    """Model-ready train/test sets; whole-image resizing when multi-scale is off."""
    size = cfg.model.input_resolution
    train_spec = test_spec = None
    if cfg.toggles.multi_scale:
        train_spec, test_spec = cfg.patches, eval_spec(cfg)
    build = lambda imgs, spec, seed: build_dataset(imgs, size, spec, seed) if imgs else None  # noqa: E731
    return build(train_images, train_spec, cfg.data_seed), build(test_images, test_spec, cfg.data_seed + 1)


def synthetic_split(cfg):
    c = cfg.corpus
    images = synthetic_corpus(c.n_images, cfg.data_seed, c.canvas, c.grid, c.noise)
    return split_images(images, c.train_fraction, cfg.data_seed)


# --------------------------------------------------------------- training

def train_options(cfg):
    t = cfg.toggles
    return TrainOptions(alpha=cfg.alpha, siamese=t.siamese, augmentations=cfg.patches.augmentations,
                        warmup_epochs=cfg.warmup_epochs if t.warmup else 0, eval_every=cfg.eval_every,
                        clip_norm=cfg.clip_norm or None)


def train_run(cfg, train_set, test_set=None, report_path=None, callback=None):
    """Build a model from ``cfg`` and train it; returns ``(model, report)``."""
    model = QSwinModel(cfg.model_config(), seed=cfg.seed)
    reptile = cfg.reptile if cfg.toggles.reptile else None
    report = train(model, train_set, cfg.schedule, reptile, seed=cfg.seed, options=train_options(cfg),
                   test=test_set, report_path=report_path, callback=callback)
    return model, report


# -------------------------------------------------------------- inference

def predict_image(model, image, spec, seed=0):
    """Average score over ``spec.patches_per_image`` random multi-scale patches."""
    patches = extract_patches(image, spec, seed)
    scores = model.predict(np.stack([p.as_float() for p in patches]))
    return float(np.mean(scores))


EVAL_COLUMNS = ("level", "n", "mae", "mse", "pcc")


def evaluate_model(model, dataset, path=None):
    """Metrics per patch and per image (patch-averaged), optionally as CSV."""
    per_patch, per_image, _ = evaluate_dataset(model, dataset)
    rows = [dict(level="per_patch", **dataclasses.asdict(per_patch)),
            dict(level="per_image", **dataclasses.asdict(per_image))]
    if path:
        _write_csv(path, EVAL_COLUMNS, rows)
    return rows


def _write_csv(path, columns, rows):
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for r in rows:
                writer.writerow({k: repr(float(r[k])) if isinstance(r[k], (float, np.floating)) else r[k]
                                 for k in columns})
    except OSError as err:
        raise IngestionError(f"cannot write {path}: {err}") from err
    return path


# -------------------------------------------------------------- attention

def attention_maps(model, image):
    """``{(stage, block, head): window-averaged attention}`` for one image."""
    pixels = image
    if hasattr(image, "pixels"):
        pixels = whole_image(image, model.cfg.input_resolution).as_float()
    pixels = np.asarray(pixels, dtype=np.float32)
    with model.recording() as records:
        model.predict(pixels[None])
    groups = {}
    for r in records:
        groups.setdefault((r.stage, r.block, r.head), []).append(r.matrix.astype(np.float64))
    return {key: np.mean(mats, axis=0) for key, mats in sorted(groups.items())}


def heatmap(matrix):
    """Min-max gray levels; a constant map is drawn white."""
    lo, hi = matrix.min(), matrix.max()
    if hi - lo <= 0:
        return np.full(matrix.shape, 255, dtype=np.uint8)
    return np.rint((matrix - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_attention(model, image, out_dir, upscale=1):
    """Write a PNG heatmap and a raw CSV per (stage, block, head); return the paths."""
    maps = attention_maps(model, image)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as err:
        raise IngestionError(f"cannot create {out_dir}: {err}") from err
    paths = []
    for (s, b, h), mat in maps.items():
        rows = mat.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-6):
            raise ContractError(f"attention rows of stage {s} block {b} head {h} do not sum to 1")
        stem = os.path.join(out_dir, f"attn_s{s}_b{b}_h{h}")
        img = heatmap(mat)
        if upscale > 1:
            img = np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))
        try:
            write_image(stem + ".png", img)
            np.savetxt(stem + ".csv", mat, delimiter=",", fmt="%.9g")
        except OSError as err:
            raise IngestionError(f"cannot write {stem}: {err}") from err
        paths += [stem + ".png", stem + ".csv"]
    return paths


# --------------------------------------------------------------- ablation

@dataclass
class Rung:
    name: str
    toggles: Toggles


LADDER = (
    Rung("none", Toggles(False, False, False, False, False)),
    Rung("+multi-scale", Toggles(True, False, False, False, False)),
    Rung("+warmup (pretrain substitute)", Toggles(True, True, False, False, False)),
    Rung("+siamese", Toggles(True, True, True, False, False)),
    Rung("+reptile", Toggles(True, True, True, True, False)),
    Rung("+quadratic", Toggles(True, True, True, True, True)),
)

ABLATION_COLUMNS = ("rung", "multi_scale", "warmup", "siamese", "reptile", "quadratic",
                    "mae", "mse", "pcc", "boost", "seed_maes", "note")


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)

    def mae(self, rung):
        return next(r["mae"] for r in self.rows if r["rung"] == rung)

    def write_csv(self, path):
        return _write_csv(path, ABLATION_COLUMNS, self.rows)


def run_ablation(base, seeds=(0,), rungs=LADDER, progress=None):
    """Train every rung for every seed and tabulate mean held-out per-image metrics.

    ``boost`` is the MAE drop from the previous rung, so the boosts add up to
    the first rung's MAE minus the last rung's.
    """
    base = base or RunConfig()
    table = AblationTable()
    prev = None
    for rung in rungs:
        results = []
        for seed in seeds:
            cfg = dataclasses.replace(base, toggles=rung.toggles, seed=seed, data_seed=seed)
            train_imgs, test_imgs = synthetic_split(cfg)
            train_set, test_set = datasets_for(cfg, train_imgs, test_imgs)
            model, _ = train_run(cfg, train_set)
            _, per_image, _ = evaluate_dataset(model, test_set)
            results.append(per_image)
            if progress:
                progress(rung.name, seed, per_image)
        mae = float(np.mean([r.mae for r in results]))
        t = rung.toggles
        table.rows.append(dict(
            rung=rung.name, multi_scale=t.multi_scale, warmup=t.warmup, siamese=t.siamese,
            reptile=t.reptile, quadratic=t.quadratic, mae=mae,
            mse=float(np.mean([r.mse for r in results])), pcc=float(np.mean([r.pcc for r in results])),
            boost=0.0 if prev is None else prev - mae,
            seed_maes=" ".join(f"{r.mae:.6f}" for r in results),
            note=PRETRAIN_NOTE if t.warmup else "",
        ))
        prev = mae
    return table
