"""
Training on synthetic browning images
=====================================

The synthetic generator draws green leaf pieces on a white background and
browns a fraction ``p`` of each piece's rim.  The label is ``3 p``, matching
the 0 (fresh) to 3 (heavy brown) scale.

This script trains the tiny model with every feature switched on, then scores a few fresh images with multi-patch averaging.
A shorter budget than the desk preset keeps it to a minute or two.
"""

import numpy as np

from sqswin.config import RunConfig, SyntheticCorpus, desk_schedule
from sqswin.evaluate import datasets_for, eval_spec, evaluate_model, predict_image, synthetic_split, train_run
from sqswin.patches import SyntheticSpec, generate_synthetic

cfg = RunConfig(corpus=SyntheticCorpus(n_images=160), schedule=desk_schedule(20), eval_every=5)
train_images, test_images = synthetic_split(cfg)
train_set, test_set = datasets_for(cfg, train_images, test_images)
print(f"{len(train_images)} training images -> {len(train_set)} patches; {len(test_images)} held out")


def progress(epoch, model):
    if (epoch + 1) % 5 == 0:
        print(f"  epoch {epoch + 1} done")


model, report = train_run(cfg, train_set, test_set, callback=progress)

# %%
# The report has one row per epoch for the training split and one per
# evaluation for the held-out split.

for row in report.split("test"):
    print(f"epoch {row['epoch']:>2}: held-out MAE {row['mae']:.3f}  PCC {row['pcc']:.3f}")

for row in evaluate_model(model, test_set):
    print(f"{row['level']}: MAE {row['mae']:.3f}  MSE {row['mse']:.4f}  PCC {row['pcc']:.3f}  (n={row['n']})")

# %%
# Multi-patch inference on images the model has never seen.

spec = eval_spec(cfg)
for p in (0.0, 0.3, 0.7, 1.0):
    img = generate_synthetic(SyntheticSpec(browning=p, seed=1234))
    print(f"true {img.label:.2f}  predicted {predict_image(model, img, spec, seed=0):.2f}")

baseline = np.mean([abs(i.label - np.mean([t.label for t in train_images])) for i in test_images])
print(f"\nmean-predictor MAE on the held-out images: {baseline:.3f}")
