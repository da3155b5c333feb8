"""
Autodiff engine and the dual-axis tensor
========================================

A tour of the numpy engine underneath the model: gradients against finite
differences, then one forward pass showing how the representation keeps
its (rows, columns, d) layout while attention alternates axes.
"""

import numpy as np

from duett.gradcheck import check_grad
from duett.model import DuETT, ModelConfig
from duett.rng import make_rng
from duett.tensor import Tensor, grad, precision, softmax

# d/dx of x^2 at x=3 is 6
x = Tensor(np.array(3.0), requires_grad=True)
print("d(x^2)/dx at 3:", grad(x * x, [x])[0])

# softmax followed by a weighted sum, checked in float64 against central differences
with precision("float64"):
    rng = make_rng(0, "demo")
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = rng.normal(size=(4, 5))
    err = check_grad(lambda: (softmax(a, axis=-1) * w).sum(), [a])
print(f"softmax relative gradient error: {err:.2e}")

# 3 event types, 6 time bins, width 4, two layers
cfg = ModelConfig(n_events=3, n_bins=6, n_static=2, d=4, n_layers=2, n_heads=2, ffn_hidden=16)
model = DuETT(cfg, seed=0).eval()
m = rng.integers(0, 3, size=(1, 3, 6))       # per-bin observation counts
vals = rng.normal(size=(1, 3, 6)) * (m > 0)  # aggregated values, zero where unobserved
static = rng.normal(size=(1, 2))
times = np.append(np.arange(1, 7) / 3, 2.0)[None]  # bin ends plus the [REP] column
z, _ = model.encode(vals, m, static, times)

# one extra row for static features, one extra column for [REP]
print("Z shape:", z.shape)
for kind, dims in zip(model.last_counters.kinds, model.last_counters.attention_dims):
    print(f"  {kind:5s} sublayer attention matrix {dims}")
print("parameters per block:", model.parameter_report())
