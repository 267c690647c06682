"""
Checking gradients by finite differences
========================================

The models are built from a small reverse-mode engine. Each backward rule
can be compared against central differences in 64-bit mode.

    python demos/gradients.py
"""

import numpy as np

from arnca import autodiff as ad
from arnca.autodiff import ParamStore, Tensor
from arnca.verify import step_gradcheck

# a tiny two-layer network, checked coordinate by coordinate
with ad.precision(np.float64):
    rng = np.random.default_rng(0)
    store = ParamStore()
    store.add("W1", rng.standard_normal((3, 5)))
    store.add("b1", np.zeros(5))
    store.add("W2", rng.standard_normal((5, 1)))
    x = Tensor(rng.standard_normal((8, 3)))
    y = (rng.random((8, 1)) < 0.5).astype(float)

    def loss():
        hidden = ad.tanh(ad.linear(x, store["W1"], store["b1"]))
        return ad.bce_loss(ad.sigmoid(ad.linear(hidden, store["W2"])), y)

    print(f"two-layer net: max relative error {ad.grad_check(loss, store):.2e}")

# the same check through one full step of each cellular model
for kind in ("arnca", "attention_ca", "convlstm_ca"):
    print(f"{kind:>13} step: max relative error {step_gradcheck(kind):.2e}")

# and what a broken backward looks like: the derivative of x**2 doubled
with ad.precision(np.float64):
    store = ParamStore()
    w = store.add("w", np.array([0.3, -1.2, 2.0]))
    wrong = lambda: ad.sum(ad._make(w.data ** 2, (w,), lambda g: (g * 4 * w.data,)))
    print(f"doubled derivative: error {ad.grad_check(wrong, store):.3f} (1/3 expected)")
