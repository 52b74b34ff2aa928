"""Small run configurations shared by the slower tests."""

from sqswin.config import RunConfig, SyntheticCorpus, desk_schedule
from sqswin.patches import PatchSpec
from sqswin.reptile import ReptileConfig


def quick_config(**kw):
    base = dict(
        schedule=desk_schedule(2, meta_batch=16),
        reptile=ReptileConfig(inner_steps=2, inner_batch=8),
        patches=PatchSpec((16, 24, 32), 2, 32),
        eval_patches_per_image=2,
        eval_every=1,
        corpus=SyntheticCorpus(n_images=20, canvas=32),
    )
    base.update(kw)
    return RunConfig(**base)
