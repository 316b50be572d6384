"""A short tour of the tape-based autodiff engine.

Builds a tiny expression, pulls gradients out of it, then checks them
against central finite differences. Run: python3 demos/01_autodiff_tour.py
"""
import numpy as np

from comet_eeg import diffengine as de

rng = np.random.default_rng(0)

# leaves opt in to gradients; every op records itself on the output
x = de.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = de.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
y = de.sum_(de.gelu(de.matmul(x, w)))
print("forward value:", float(y.data))

grads = de.grad(y, [x, w])
print("dy/dw:\n", grads[1])

# the same gradients through finite differences
err = de.grad_check(lambda a, b: de.sum_(de.gelu(de.matmul(a, b))), [x.data, w.data])
print(f"max relative error vs finite differences: {err:.2e}")

# softmax rows sum to one, and layernorm whitens the last axis
s = de.softmax(de.Tensor(rng.normal(size=(2, 5))))
print("softmax row sums:", s.data.sum(-1))
ln = de.layernorm(de.Tensor(rng.normal(3.0, 2.0, size=(2, 64))), eps=0.0)
print("layernorm mean/var:", ln.data.mean(-1).round(12), ln.data.var(-1).round(12))

# a kink is visible to the checker: |x| at 0
print("grad_check of |x| at 0:", de.grad_check(lambda a: de.sum_(de.abs_(a)), [np.zeros(1)]))

# shape mismatches are reported with both shapes
try:
    de.matmul(de.Tensor(np.ones((2, 3))), de.Tensor(np.ones((2, 3))))
except de.ShapeError as exc:
    print("ShapeError:", exc)
