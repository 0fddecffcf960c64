"""Structural reparameterization: the training graph carries an identity
skip around each 7x7 depthwise conv and a BN after nearly every conv; at
inference both are folded into the conv weights.  Same function, fewer
tensors, fewer memory round trips.
"""

import time

import numpy as np

from rapidnet.model import build_model, default_config
from rapidnet.reparam import count_batchnorms, recalibrate_bn, reparameterize_model
from rapidnet.tensor import Rng

model = build_model(default_config("ti"))
recalibrate_bn(model, Rng(1).normal((4, 3, 224, 224)))

fused, rep = reparameterize_model(model)
print(f"fused identity skips : {rep.fused_skips}")
print(f"folded BN layers     : {rep.folded_bns}")
print(f"built-in check diff  : {rep.max_abs_logit_diff:.3e}")
print(f"BN layers remaining  : {count_batchnorms(fused)}")

n_before = len(model.iter_params()) + len(model.iter_buffers())
n_after = len(fused.iter_params()) + len(fused.iter_buffers())
print(f"stored tensors       : {n_before} -> {n_after}")

x = Rng(2).normal((1, 3, 224, 224))
a, b = model.forward(x), fused.forward(x)
print(f"max-abs logit diff   : {np.max(np.abs(a - b)):.3e} (f32)")

# wall time is reported, not asserted: the tolerance of a laptop is not a spec
for label, m in (("unfused", model), ("fused", fused)):
    t0 = time.perf_counter()
    for _ in range(3):
        m.forward(x)
    print(f"{label:>8} forward    : {(time.perf_counter() - t0) / 3 * 1e3:8.1f} ms")
