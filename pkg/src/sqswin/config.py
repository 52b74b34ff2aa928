"""Run configuration: every module's settings plus ablation toggles, with a
``key = value`` text form.

Keys are dotted (``model.embed_dim = 16``).  Tuples are comma separated and
learning-rate stages are written ``epoch:lr`` (``0:0.01,24:0.002``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import QSwinConfig
from .patches import PatchSpec
from .reptile import ReptileConfig, TrainSchedule


@dataclass
class SyntheticCorpus:
    n_images: int = 400
    canvas: int = 64
    grid: int = 3
    noise: float = 0.03
    train_fraction: float = 0.8


@dataclass
class Toggles:
    multi_scale: bool = True
    warmup: bool = False  # stands in for the ImageNet-pretraining rung
    siamese: bool = True
    reptile: bool = True
    quadratic: bool = True


@dataclass
class RunConfig:
    model: QSwinConfig = field(default_factory=QSwinConfig.tiny)
    schedule: TrainSchedule = field(default_factory=lambda: desk_schedule(40))
    reptile: ReptileConfig = field(default_factory=lambda: ReptileConfig(inner_batch=32))
    patches: PatchSpec = field(default_factory=lambda: PatchSpec((32, 48, 64), 2, 32))
    eval_patches_per_image: int = 8
    eval_every: int = 10
    alpha: float = 1.0
    clip_norm: float = 5.0  # global gradient-norm clip; 0 disables
    warmup_epochs: int = 5
    seed: int = 0
    data_seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    corpus: SyntheticCorpus = field(default_factory=SyntheticCorpus)

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def published(cls, **kw):
        """Full-scale settings as published; far too slow for numpy training."""
        base = dict(
            model=QSwinConfig(),
            schedule=TrainSchedule(),
            reptile=ReptileConfig(inner_steps=4, inner_batch=32, meta_step=0.6),
            patches=PatchSpec(),
            eval_patches_per_image=40,
        )
        base.update(kw)
        return cls(**base)

    def model_config(self):
        """Model config with the quadratic toggle applied."""
        return dataclasses.replace(self.model, quadratic=self.toggles.quadratic)

    def to_text(self):
        return to_text(self)

    @classmethod
    def from_text(cls, text, base=None):
        return from_text(text, base or cls())


def desk_schedule(epochs=40, lr=1e-2, meta_batch=32, quad_ratio=0.01, unfreeze_frac=0.25):
    """Published-shape schedule (two x0.2 decays, at 60% and 85% of the run) shrunk to desk scale."""
    d1, d2 = int(epochs * 0.6), int(epochs * 0.85)

    def stages(r):
        # short runs can collapse decay points onto each other; the later rate wins
        table = dict(((0, r), (d1, r * 0.2), (d2, r * 0.04)))
        return tuple(sorted(table.items()))

    return TrainSchedule(epochs, meta_batch, stages(lr), stages(lr * quad_ratio), int(epochs * unfreeze_frac))


# ------------------------------------------------------------------ text io

def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{e}:{v!r}" for e, v in value)
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def _parse(raw, current, key):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if raw.lower() == "none":
            return None
        if isinstance(current, tuple):
            if not raw:
                return ()
            items = [s.strip() for s in raw.split(",")]
            if ":" in items[0]:
                return tuple((int(e), float(v)) for e, v in (s.split(":") for s in items))
            proto = current[0] if current else raw
            return tuple(_parse(s, proto, key) for s in items)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if current is None:
            for conv in (int, float):
                try:
                    return conv(raw)
                except ValueError:
                    pass
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, f"{prefix}{f.name}.")
        else:
            yield prefix + f.name, value


def to_text(obj):
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(obj))


def parse_pairs(text):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def from_text(text, base):
    """Apply ``key = value`` overrides to a copy of ``base`` and re-validate."""
    return apply_overrides(base, parse_pairs(text))


def apply_overrides(base, pairs):
    pairs = dict(pairs)

    def rebuild(obj, prefix):
        changes = {}
        for f in dataclasses.fields(obj):
            key = prefix + f.name
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                sub = rebuild(value, key + ".")
                if sub is not value:
                    changes[f.name] = sub
            elif key in pairs:
                changes[f.name] = _parse(pairs.pop(key), value, key)
        if not changes:
            return obj
        kwargs = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
        kwargs.update(changes)
        return type(obj)(**kwargs)

    out = rebuild(base, "")
    if pairs:
        raise ConfigError(f"unknown config keys: {sorted(pairs)}")
    return out
