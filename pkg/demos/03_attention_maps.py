"""
Looking at attention
====================

Every block records its softmax attention when the model runs inside
``model.recording()``.  ``export_attention`` averages the maps over windows
and writes one gray PNG plus the raw CSV per (stage, block, head).
"""

import os
import sys

import numpy as np

from sqswin.evaluate import attention_maps, export_attention
from sqswin.model import QSwinConfig, QSwinModel
from sqswin.patches import SyntheticSpec, generate_synthetic

out_dir = sys.argv[1] if len(sys.argv) > 1 else "attention_demo"
model = QSwinModel(QSwinConfig.tiny(), seed=0)
leaf = generate_synthetic(SyntheticSpec(browning=0.6, seed=3))

maps = attention_maps(model, leaf)
for (stage, block, head), mat in maps.items():
    print(f"stage {stage} block {block} head {head}: {mat.shape[0]} tokens per window, "
          f"row sums within {np.abs(mat.sum(axis=1) - 1).max():.1e} of 1")

# %%
# Heatmaps are min-max scaled per map; the CSVs keep the raw weights.

paths = export_attention(model, leaf, out_dir, upscale=8)
print(f"\nwrote {len(paths)} files to {os.path.abspath(out_dir)}")
