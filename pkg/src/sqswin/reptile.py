"""Reptile meta-optimization around an inner optimizer, with the two-track
(base / quadratic) learning-rate schedule.

One meta-step: snapshot the parameters ``phi``; for every task, restart from
``phi`` and take ``k`` inner optimizer steps to reach ``phi'``; average the
``phi'`` over tasks and move ``phi`` toward it by the interpolation step ``eta``.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .metrics import evaluate_metrics
from .optim import OPTIMIZERS, ParamGroup
from .patches import augment_pixels
from .quadratic import RelinearSchedule, lr_at, param_groups, set_quadratic_trainable
from .siamese import pair_batch_loss, pair_indices

REPORT_COLUMNS = (
    "epoch", "split", "prediction_loss", "siamese_loss", "total_loss",
    "mae", "mse", "pcc", "base_lr", "quad_lr", "wall_seconds",
)


@dataclass
class ReptileConfig:
    inner_steps: int = 4
    inner_batch: int = 32
    inner_lr: float | None = None  # None: use the schedule's base track
    meta_step: float = 0.6
    tasks_per_meta_batch: int | None = None  # None: every shard of the meta-batch
    inner_optimizer: str = "adam"
    reset_optimizer_state: bool = True

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.inner_batch < 1:
            raise ConfigError("inner_batch must be >= 1")
        if self.meta_step < 0:
            raise ConfigError(f"meta_step must be >= 0, got {self.meta_step}")
        if self.inner_optimizer not in OPTIMIZERS:
            raise ConfigError(f"inner_optimizer must be one of {sorted(OPTIMIZERS)}")


@dataclass
class TrainSchedule:
    total_epochs: int = 200
    meta_batch_size: int = 256
    base_lr_stages: tuple = ((0, 1e-4), (100, 2e-5), (150, 4e-6))
    quad_lr_stages: tuple = ((0, 1e-6), (100, 2e-7), (150, 4e-8))
    unfreeze_epoch: int = 50

    def __post_init__(self):
        if self.unfreeze_epoch >= self.total_epochs:
            raise ConfigError(
                f"unfreeze_epoch {self.unfreeze_epoch} must be below total_epochs {self.total_epochs}"
            )
        if self.meta_batch_size < 1:
            raise ConfigError("meta_batch_size must be >= 1")
        self.relinear = RelinearSchedule(self.unfreeze_epoch, self.quad_lr_stages, self.base_lr_stages)
        self.base_lr_stages = self.relinear.base_lr_stages
        self.quad_lr_stages = self.relinear.quad_lr_stages

    def base_lr(self, epoch):
        return lr_at(self.base_lr_stages, epoch)

    def quad_lr(self, epoch):
        return lr_at(self.quad_lr_stages, epoch)

    def quadratic_trainable(self, epoch):
        return epoch >= self.unfreeze_epoch


# ------------------------------------------------------------- reptile core

def inner_update(phi, task, loss_fn, cfg, optimizer):
    """Run ``cfg.inner_steps`` optimizer steps from a copy of ``phi``; return ``phi'``.

    ``optimizer`` owns the live parameter tensors (named as in ``phi``); they
    are overwritten with ``phi`` first, and ``phi`` itself is never modified.
    ``task`` is a non-empty list of batches, cycled if shorter than ``k``.
    ``loss_fn(batch, step)`` returns a scalar loss tensor.
    """
    if cfg.inner_steps < 1:
        raise ContractError("inner_steps must be >= 1")
    if not task:
        raise ContractError("task supplies no batches")
    params = optimizer.parameters()
    for name, t in params.items():
        np.copyto(t.data, phi[name])
    if cfg.reset_optimizer_state:
        optimizer.reset()
    for step in range(cfg.inner_steps):
        optimizer.zero_grad()
        loss = loss_fn(task[step % len(task)], step)
        ad.backward(loss)
        optimizer.step()
    return {name: t.data.copy() for name, t in params.items()}


def meta_update(phi, phi_prime, eta):
    """Element-wise ``phi + eta * (phi' - phi)``.

    eta = 0 and eta = 1 return exact copies of ``phi`` and ``phi'``.
    """
    out = {}
    for name, a in phi.items():
        b = phi_prime[name]
        if np.shape(a) != np.shape(b):
            raise ShapeError(f"{name}: shapes differ, {np.shape(a)} vs {np.shape(b)}")
        if eta == 0:
            out[name] = np.array(a, copy=True)
        elif eta == 1:
            out[name] = np.array(b, copy=True)
        else:
            # this form leaves phi bit-unchanged when phi' == phi
            a = np.asarray(a)
            out[name] = a + a.dtype.type(eta) * (np.asarray(b) - a)
    return out


def average_states(states):
    if len(states) == 1:
        return {k: v.copy() for k, v in states[0].items()}
    return {k: np.mean([s[k] for s in states], axis=0, dtype=np.float64).astype(states[0][k].dtype)
            for k in states[0]}


def sample_tasks(indices, cfg, seed):
    """Split a meta-batch into disjoint random shards of ``cfg.inner_batch`` samples.

    A single shard keeps the meta-batch order; each shard is otherwise sorted
    by meta-batch position.
    """
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ContractError("cannot sample tasks from an empty meta-batch")
    if indices.size <= cfg.inner_batch:
        return [indices.copy()]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(indices.size)
    n_tasks = -(-indices.size // cfg.inner_batch)
    shards = [np.sort(perm[i * cfg.inner_batch:(i + 1) * cfg.inner_batch]) for i in range(n_tasks)]
    if cfg.tasks_per_meta_batch:
        shards = shards[:cfg.tasks_per_meta_batch]
    return [indices[s] for s in shards]


# ------------------------------------------------------------------ reports

@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)
    path: str | None = None

    def append(self, row):
        self.rows.append(row)
        if self.path:
            new = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
            with open(self.path, "a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
                if new:
                    writer.writeheader()
                writer.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})

    def split(self, name):
        return [r for r in self.rows if r["split"] == name]

    def final(self, name="test"):
        rows = self.split(name)
        return rows[-1] if rows else None


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in REPORT_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


class TrainingDiverged(RuntimeError):
    def __init__(self, op, epoch):
        self.op, self.epoch = op, epoch
        super().__init__(f"non-finite loss at epoch {epoch}; first offending op: {op}")


# ----------------------------------------------------------------- training

@dataclass
class TrainOptions:
    alpha: float = 1.0
    siamese: bool = True
    augment: bool = True
    augmentations: tuple = ("flip-ud", "flip-lr", "rot90", "rot180", "rot270")
    warmup_epochs: int = 0
    eval_every: int = 1
    eval_batch: int = 128
    clip_norm: float | None = None


def predict_dataset(model, dataset, batch=128):
    return model.predict(dataset.images, batch)


def grouped_mean(values, groups):
    ids, inverse = np.unique(groups, return_inverse=True)
    sums = np.bincount(inverse, weights=values, minlength=len(ids))
    return ids, sums / np.bincount(inverse, minlength=len(ids))


def evaluate_dataset(model, dataset, batch=128):
    """Per-patch and per-image (patch-averaged) metrics."""
    pred = predict_dataset(model, dataset, batch)
    per_patch = evaluate_metrics(dataset.labels, pred)
    ids, img_pred = grouped_mean(pred, dataset.groups)
    _, img_true = grouped_mean(dataset.labels, dataset.groups)
    per_image = evaluate_metrics(img_true, img_pred)
    return per_patch, per_image, pred


def _augment_batch(images, rng, ops):
    choices = ("identity",) + tuple(ops)
    picks = rng.integers(len(choices), size=len(images))
    return np.stack([augment_pixels(img, choices[p]) for img, p in zip(images, picks)])


def _make_optimizer(model, schedule, epoch, optimizer_name, clip_norm=None):
    base, quad = param_groups(model)
    groups = [ParamGroup("base", base, schedule.base_lr(epoch))]
    if quad:
        groups.append(ParamGroup("quadratic", quad, schedule.quad_lr(epoch)))
    return OPTIMIZERS[optimizer_name](groups, clip_norm=clip_norm)


def _warmup_factor(epoch, step_frac, warmup_epochs):
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + step_frac) / warmup_epochs)


def train(model, dataset, schedule, reptile_cfg=None, seed=0, options=None, test=None,
          report_path=None, callback=None, optimizer_name="adam"):
    """Train ``model`` in place and return a TrainingReport.

    ``reptile_cfg=None`` trains with the plain optimizer: one step per
    meta-batch.  Otherwise each meta-batch is split into tasks and updated by
    Reptile.  Quadratic terms stay frozen until ``schedule.unfreeze_epoch`` and
    then follow the quadratic learning-rate track.  ``callback(epoch, model)``
    runs after every epoch.
    """
    opts = options or TrainOptions()
    report = TrainingReport(path=report_path)
    inner_name = reptile_cfg.inner_optimizer if reptile_cfg else optimizer_name
    optimizer = _make_optimizer(model, schedule, 0, inner_name, opts.clip_norm)
    n = len(dataset)
    if n < 2:
        raise ContractError("training needs at least 2 samples")
    start = time.perf_counter()

    for epoch in range(schedule.total_epochs):
        set_quadratic_trainable(model, schedule.quadratic_trainable(epoch))
        base_lr, quad_lr = schedule.base_lr(epoch), schedule.quad_lr(epoch)
        if reptile_cfg is not None and reptile_cfg.inner_lr is not None:
            # a fixed inner rate replaces the base track; the quadratic track keeps its ratio
            quad_lr = quad_lr * reptile_cfg.inner_lr / base_lr if base_lr else 0.0
            base_lr = reptile_cfg.inner_lr
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        batches = [order[i:i + schedule.meta_batch_size] for i in range(0, n, schedule.meta_batch_size)]
        bundles = []
        realized = (base_lr, quad_lr)

        for m, idx in enumerate(batches):
            if len(idx) < 2:
                continue
            warm = _warmup_factor(epoch, m / len(batches), opts.warmup_epochs)
            optimizer.set_lr("base", base_lr * warm)
            optimizer.set_lr("quadratic", quad_lr * warm)
            realized = (base_lr * warm, quad_lr * warm)
            brng = np.random.default_rng([seed, epoch, m, 1])
            images = dataset.images[idx]
            if opts.augment:
                images = _augment_batch(images, brng, opts.augmentations)
            labels = dataset.labels[idx]

            def task_loss(t, images=images, labels=labels, m=m):
                def loss_fn(positions, step):
                    prng = np.random.default_rng([seed, epoch, m, t, step, 2])
                    pairs = pair_indices(len(positions), prng)
                    a = positions[[i for i, _ in pairs]]
                    b = positions[[j for _, j in pairs]]
                    loss, bundle = pair_batch_loss(
                        model, images[a], labels[a], images[b], labels[b], opts.alpha, opts.siamese
                    )
                    if not np.isfinite(bundle.total):
                        _diagnose(model, images[a], labels[a], images[b], labels[b], opts, epoch)
                    bundles.append(bundle)
                    return loss
                return loss_fn

            positions = np.arange(len(idx))
            if reptile_cfg is None:
                optimizer.zero_grad()
                ad.backward(task_loss(0)(positions, 0))
                optimizer.step()
                continue

            phi = model.state_dict()
            tasks = sample_tasks(positions, reptile_cfg, [seed, epoch, m, 3])
            results = [inner_update(phi, [task], task_loss(t), reptile_cfg, optimizer)
                       for t, task in enumerate(tasks)]
            model.load_state_dict(meta_update(phi, average_states(results), reptile_cfg.meta_step))

        if bundles:
            train_row = dict(
                prediction_loss=float(np.mean([b.prediction_loss for b in bundles])),
                siamese_loss=float(np.mean([b.siamese_loss for b in bundles])),
                total_loss=float(np.mean([b.total for b in bundles])),
            )
        else:
            train_row = dict(prediction_loss=0.0, siamese_loss=0.0, total_loss=0.0)
        last = epoch == schedule.total_epochs - 1
        do_eval = opts.eval_every and ((epoch + 1) % opts.eval_every == 0 or last)
        metrics = (float("nan"),) * 3
        if do_eval:
            _, per_image, _ = evaluate_dataset(model, dataset, opts.eval_batch)
            metrics = (per_image.mae, per_image.mse, per_image.pcc)
        report.append(dict(epoch=epoch, split="train", **train_row, mae=metrics[0], mse=metrics[1],
                           pcc=metrics[2], base_lr=realized[0], quad_lr=realized[1],
                           wall_seconds=time.perf_counter() - start))
        if test is not None and do_eval:
            report.append(_test_row(model, test, opts, epoch, *realized, start, seed))
        if callback is not None:
            callback(epoch, model)
    return report


def _test_row(model, test, opts, epoch, base_lr, quad_lr, start, seed):
    _, per_image, pred = evaluate_dataset(model, test, opts.eval_batch)
    lp = ls = 0.0
    if len(test) >= 2:
        pairs = pair_indices(len(test), np.random.default_rng([seed, 99]))
        a = np.array([i for i, _ in pairs])
        b = np.array([j for _, j in pairs])
        with ad.no_grad():
            _, bundle = pair_batch_loss(model, test.images[a], test.labels[a], test.images[b],
                                        test.labels[b], opts.alpha, opts.siamese)
        lp, ls = bundle.prediction_loss, bundle.siamese_loss
    return dict(epoch=epoch, split="test", prediction_loss=lp, siamese_loss=ls,
                total_loss=lp + opts.alpha * ls if opts.siamese else lp,
                mae=per_image.mae, mse=per_image.mse, pcc=per_image.pcc,
                base_lr=base_lr, quad_lr=quad_lr, wall_seconds=time.perf_counter() - start)


def _diagnose(model, x0, y0, x1, y1, opts, epoch):
    """Re-run the failing forward with op-level checks to name the first bad op."""
    try:
        with ad.debug_mode(), ad.no_grad():
            pair_batch_loss(model, x0, y0, x1, y1, opts.alpha, opts.siamese)
    except NonFiniteError as err:
        raise TrainingDiverged(err.op, epoch) from err
    raise TrainingDiverged("input (non-finite data or parameters)", epoch)
