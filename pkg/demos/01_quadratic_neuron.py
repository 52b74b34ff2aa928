"""
Quadratic neurons and the Relinear start
========================================

A quadratic layer computes ``(x W_r + b_r) * (x W_g + b_g) + (x * x) W_b + b_b``.
Right after Relinear initialization the gate is all ones and the squared
branch is zero, so the layer is exactly the linear map ``x W_r + b_r``.
"""

import numpy as np

from sqswin import autodiff as ad
from sqswin.model import QSwinConfig, QSwinModel, count_params, linear_twin, qkv_weight_count
from sqswin.quadratic import QuadraticLinear

rng = np.random.default_rng(0)
layer = QuadraticLinear(6, 4, rng)
x = rng.normal(size=(3, 6)).astype(np.float32)

quad = layer(ad.Tensor(x)).data
lin = x @ layer.W_r.data + layer.b_r.data
print("max |quadratic - linear| at init:", np.abs(quad - lin).max())

# Nudge the gate and the squared branch away from their initial values and
# the two maps part ways.
layer.W_g.data += 0.1 * rng.normal(size=layer.W_g.shape).astype(np.float32)
layer.W_b.data += 0.1 * rng.normal(size=layer.W_b.shape).astype(np.float32)
print("after a perturbation:             ", np.abs(layer(ad.Tensor(x)).data - lin).max())

# %%
# The same holds for a whole model: with every Q/K/V projection at Relinear
# init the quadratic Swin equals a linear Swin that shares its weights.

model = QSwinModel(QSwinConfig.tiny(), seed=0)
twin = linear_twin(model)
images = rng.uniform(size=(16, 32, 32, 3)).astype(np.float32)
print("\nmodel vs linear twin:", np.abs(model.predict(images) - twin.predict(images)).max())

# %%
# Each quadratic projection carries three weight matrices where a linear one
# has a single matrix.

for name, cfg in (("tiny", QSwinConfig.tiny()), ("default", QSwinConfig())):
    q = qkv_weight_count(QSwinModel(cfg))
    lin = qkv_weight_count(QSwinModel(QSwinConfig(**{**cfg.to_dict(), "quadratic": False})))
    total, n_quad, n_base = count_params(QSwinModel(cfg))
    print(f"{name:>8}: QKV weights {q} vs {lin} linear (x{q / lin:.0f}); "
          f"{total} parameters, {n_quad} in the quadratic terms")
