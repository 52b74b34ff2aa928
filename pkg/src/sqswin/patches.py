"""Multi-scale patch extraction, dihedral augmentation, image I/O and a synthetic
browning-image generator.

Images are ``[H, W, 3]`` arrays, either float in [0, 1] or uint8.  Large
rasters can stay uint8; ``extract_patches`` only reads the rows and columns
that bilinear interpolation actually samples.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, IngestionError, ValidationError

LABEL_RANGE = (0.0, 3.0)
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")

GREEN = np.array([0.22, 0.62, 0.24])
BROWN = np.array([0.52, 0.33, 0.12])


def _check_label(label, where=""):
    lo, hi = LABEL_RANGE
    if not (lo <= label <= hi):
        raise ValidationError(f"label {label} outside [{lo}, {hi}]{where}")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: float
    provenance: str = "synthetic"
    source: str = ""
    box: tuple | None = None  # (row, col, size) of the crop in the parent image

    def __post_init__(self):
        _check_label(self.label, f" for {self.source or 'image'}")
        if self.provenance not in ("real", "synthetic"):
            raise ValidationError(f"provenance must be 'real' or 'synthetic', got {self.provenance!r}")

    def as_float(self):
        px = self.pixels
        if px.dtype == np.uint8:
            return px.astype(np.float32) / 255.0
        return px.astype(np.float32, copy=False)


@dataclass
class PatchSpec:
    scales: tuple = (1024, 2048, 3072, 4096)
    patches_per_image: int = 40
    target_size: int = 224
    balanced: bool = False
    augmentations: tuple = ("flip-ud", "flip-lr", "rot90", "rot180", "rot270")

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if self.target_size <= 0:
            raise ConfigError("target_size must be positive")
        if self.patches_per_image <= 0:
            raise ConfigError("patches_per_image must be positive")
        for op in self.augmentations:
            if op not in AUGMENTATIONS:
                raise ConfigError(f"unknown augmentation {op!r}")

    def check_fits(self, height, width):
        too_big = [s for s in self.scales if s > min(height, width)]
        if too_big:
            raise ConfigError(f"patch scales {too_big} do not fit inside a {width}x{height} image")


# ----------------------------------------------------------------- resizing

def _axis_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(img, target):
    """Half-pixel-centre (align_corners=False) bilinear resize to ``target x target``.

    Returns float64 in the input's value scale.
    """
    img = np.asarray(img)
    th, tw = (target, target) if np.isscalar(target) else target
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ContractError(f"bilinear_resize needs at least 2x2 input, got {h}x{w}")
    r0, r1, wr = _axis_weights(h, th)
    c0, c1, wc = _axis_weights(w, tw)
    extra = (1,) * (img.ndim - 2)
    top = img[r0].astype(np.float64)
    bot = img[r1].astype(np.float64)
    rows = top + (bot - top) * wr.reshape((-1, 1) + extra)
    left, right = rows[:, c0], rows[:, c1]
    return left + (right - left) * wc.reshape((1, -1) + extra)


def _resize_crop(img, row, col, size, target):
    """Bilinear resize of ``img[row:row+size, col:col+size]`` touching only sampled pixels."""
    r0, r1, wr = _axis_weights(size, target)
    c0, c1, wc = _axis_weights(size, target)
    rows_needed = np.unique(np.concatenate([r0, r1]))
    cols_needed = np.unique(np.concatenate([c0, c1]))
    sub = img[row + rows_needed][:, col + cols_needed].astype(np.float64)
    ri0, ri1 = np.searchsorted(rows_needed, r0), np.searchsorted(rows_needed, r1)
    ci0, ci1 = np.searchsorted(cols_needed, c0), np.searchsorted(cols_needed, c1)
    top, bot = sub[ri0], sub[ri1]
    rows = top + (bot - top) * wr[:, None, None]
    left, right = rows[:, ci0], rows[:, ci1]
    return left + (right - left) * wc[None, :, None]


# ------------------------------------------------------------- augmentation

AUGMENTATIONS = {
    "identity": lambda a: a,
    "flip-ud": lambda a: a[::-1],
    "flip-lr": lambda a: a[:, ::-1],
    "rot90": lambda a: np.rot90(a, 1),
    "rot180": lambda a: np.rot90(a, 2),
    "rot270": lambda a: np.rot90(a, 3),
    "transpose": lambda a: np.swapaxes(a, 0, 1),
    "anti-transpose": lambda a: np.rot90(a, 2).swapaxes(0, 1),
}
_NEEDS_SQUARE = {"rot90", "rot270", "transpose", "anti-transpose"}


def augment_pixels(pixels, op):
    if op not in AUGMENTATIONS:
        raise ConfigError(f"unknown augmentation {op!r}")
    if op in _NEEDS_SQUARE and pixels.shape[0] != pixels.shape[1]:
        raise ContractError(f"{op} needs a square image, got {pixels.shape[:2]}")
    return np.ascontiguousarray(AUGMENTATIONS[op](pixels))


def augment(img, op):
    """Exact (interpolation-free) flip/rotation; the label is carried over unchanged."""
    return LabeledImage(augment_pixels(img.pixels, op), img.label, img.provenance, img.source, img.box)


# --------------------------------------------------------------- extraction

def extract_patches(img, spec, seed):
    """Random multi-scale square crops, each resized to ``spec.target_size``."""
    h, w = img.pixels.shape[:2]
    spec.check_fits(h, w)
    rng = np.random.default_rng(seed)
    n = spec.patches_per_image
    if spec.balanced:
        sizes = np.resize(np.array(spec.scales), n)
        rng.shuffle(sizes)
    else:
        sizes = rng.choice(np.array(spec.scales), size=n)
    out = []
    for size in sizes:
        size = int(size)
        row = int(rng.integers(0, h - size + 1))
        col = int(rng.integers(0, w - size + 1))
        pix = _resize_crop(img.pixels, row, col, size, spec.target_size)
        if img.pixels.dtype == np.uint8:
            pix = pix / 255.0
        out.append(LabeledImage(pix.astype(np.float32), img.label, img.provenance, img.source,
                                (row, col, size)))
    return out


def whole_image(img, target_size):
    """The full image resized to ``target_size`` (single-scale input)."""
    pix = bilinear_resize(img.pixels, target_size)
    if img.pixels.dtype == np.uint8:
        pix = pix / 255.0
    h, w = img.pixels.shape[:2]
    return LabeledImage(pix.astype(np.float32), img.label, img.provenance, img.source, (0, 0, min(h, w)))


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    """Leaf pieces on a white background with a browned arc on each boundary band."""

    canvas: int = 64
    grid: int = 3
    browning: float = 0.5
    noise: float = 0.03
    band: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.browning <= 1.0:
            raise ContractError(f"browning fraction must lie in [0, 1], got {self.browning}")

    @property
    def n_blobs(self):
        return self.grid * self.grid


@dataclass
class SyntheticRender:
    image: LabeledImage
    leaf_mask: np.ndarray
    band_mask: np.ndarray
    brown_mask: np.ndarray
    blob_ids: np.ndarray = field(repr=False)


def render_synthetic(spec):
    """Render an image together with the masks it was drawn from."""
    rng = np.random.default_rng(spec.seed)
    size, g = spec.canvas, spec.grid
    cell = size / g
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    leaf = np.zeros((size, size), bool)
    band = np.zeros((size, size), bool)
    brown = np.zeros((size, size), bool)
    blob_ids = np.full((size, size), -1, np.int64)
    pixels = np.ones((size, size, 3))
    for i in range(g):
        for j in range(g):
            rx = cell * rng.uniform(0.28, 0.45)
            ry = cell * rng.uniform(0.28, 0.45)
            cx = (j + 0.5) * cell + rng.uniform(-1, 1) * (cell / 2 - rx)
            cy = (i + 0.5) * cell + rng.uniform(-1, 1) * (cell / 2 - ry)
            u, v = (xx - cx) / rx, (yy - cy) / ry
            r = np.sqrt(u * u + v * v)
            inside = r <= 1.0
            in_band = inside & (r >= 1.0 - spec.band)
            theta = np.arctan2(v, u)
            start = rng.uniform(-np.pi, np.pi)
            arc = np.mod(theta - start, 2 * np.pi) < 2 * np.pi * spec.browning
            shade = GREEN * rng.uniform(0.9, 1.1)
            leaf |= inside
            band |= in_band
            brown |= in_band & arc
            blob_ids[inside] = i * g + j
            pixels[inside] = shade
    pixels[brown] = BROWN
    if spec.noise > 0:
        pixels = pixels + rng.uniform(-spec.noise, spec.noise, pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    img = LabeledImage(pixels, 3.0 * spec.browning, "synthetic", f"synthetic-{spec.seed}")
    return SyntheticRender(img, leaf, band, brown, blob_ids)


def generate_synthetic(spec):
    return render_synthetic(spec).image


def synthetic_corpus(n, seed=0, canvas=64, grid=3, noise=0.03):
    """``n`` synthetic images with browning fraction drawn uniformly from [0, 1]."""
    rng = np.random.default_rng(seed)
    fractions = rng.uniform(0.0, 1.0, n)
    seeds = rng.integers(0, 2 ** 31, n)
    return [
        generate_synthetic(SyntheticSpec(canvas=canvas, grid=grid, browning=float(p), noise=noise, seed=int(s)))
        for p, s in zip(fractions, seeds)
    ]


# ---------------------------------------------------------------------- I/O

def read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, pixels):
    """Write float [0, 1] or uint8 pixels as PNG/PPM (format from the suffix)."""
    from PIL import Image

    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)
    return path


def read_manifest(path):
    labels = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            name = row[0].strip()
            if len(row) < 2:
                raise IngestionError(f"{path}:{lineno}: missing label for {name}")
            try:
                value = float(row[1])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise IngestionError(f"{path}:{lineno}: label {row[1]!r} for {name} is not a number") from None
            labels[name] = value
    return labels


def load_dataset(directory, train_fraction=0.8, seed=0, manifest="labels.csv"):
    """Load images listed in ``manifest`` and split them train/test by seed."""
    if not os.path.isdir(directory):
        raise IngestionError(f"not a directory: {directory}")
    files = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_SUFFIXES))
    if not files:
        raise IngestionError(f"no images found in {directory}")
    manifest_path = os.path.join(directory, manifest)
    if not os.path.exists(manifest_path):
        raise IngestionError(f"label manifest not found: {manifest_path}")
    labels = read_manifest(manifest_path)
    images = []
    for name in files:
        if name not in labels:
            raise IngestionError(f"no label for image {name} in {manifest_path}")
        _check_label(labels[name], f" for {name}")
        images.append(LabeledImage(read_image(os.path.join(directory, name)), labels[name], "real", name))
    order = np.random.default_rng(seed).permutation(len(images))
    n_train = int(round(train_fraction * len(images)))
    return [images[i] for i in order[:n_train]], [images[i] for i in order[n_train:]]


def write_patch_cache(patches, out_dir, suffix=".png"):
    """Write patches plus a ``labels.csv`` manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "labels.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        for i, p in enumerate(patches):
            name = f"patch_{i:05d}{suffix}"
            write_image(os.path.join(out_dir, name), p.pixels)
            writer.writerow([name, repr(float(p.label))])
    return manifest


# ----------------------------------------------------------- model datasets

@dataclass
class ArrayDataset:
    """Model-ready samples; ``groups`` maps each sample to its parent image."""

    images: np.ndarray
    labels: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.groups)):
            sizes = (len(self.images), len(self.labels), len(self.groups))
            raise ContractError(f"length mismatch: {sizes[0]} images vs {sizes[1]} labels vs {sizes[2]} groups")

    def __len__(self):
        return len(self.labels)

    def group_labels(self):
        ids = np.unique(self.groups)
        return ids, np.array([self.labels[self.groups == i][0] for i in ids])


def build_dataset(images, target_size, spec=None, seed=0):
    """Turn labeled images into an ArrayDataset.

    With a PatchSpec, each image contributes ``spec.patches_per_image`` random
    multi-scale crops (per-image seed ``seed ^ index``); without one, each image
    is resized whole.
    """
    pix, labels, groups = [], [], []
    for idx, img in enumerate(images):
        if spec is None:
            items = [whole_image(img, target_size)]
        else:
            items = extract_patches(img, spec, seed ^ idx)
        for item in items:
            pix.append(item.as_float())
            labels.append(item.label)
            groups.append(idx)
    return ArrayDataset(np.stack(pix), np.array(labels), np.array(groups))
