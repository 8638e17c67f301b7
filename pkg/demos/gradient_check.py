"""Checking the hand-written backward pass against finite differences.

Run: python demos/gradient_check.py
"""

import numpy as np

from sensorcal.model import CalibrationModel, ModelConfig, param_shapes
from sensorcal.numerics import finite_diff_grad

config = ModelConfig(n=12, d=8, heads=2)
rng = np.random.default_rng(0)
params = {k: rng.normal(scale=0.5, size=s) for k, s in param_shapes(config).items()}
model = CalibrationModel(config, params, None)

windows = rng.normal(size=(4, 12))
targets = rng.normal(size=4)
loss, grads, _ = model.loss_and_grads(windows, targets)
print(f"loss on a random batch: {loss:.6f}")

for name, p in params.items():

    def f(t):
        saved = model.params[name]
        model.params[name] = t
        value = model.loss_and_grads(windows, targets)[0]
        model.params[name] = saved
        return value

    fd = finite_diff_grad(f, p.copy(), 1e-5)
    rel = np.max(np.abs(grads[name] - fd)) / max(np.max(np.abs(fd)), 1e-12)
    print(f"{name:>9} {str(p.shape):>8}  max relative error {rel:.2e}")
