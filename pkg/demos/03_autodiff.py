"""The tape-based differentiation engine and its finite-difference oracle.

Every kernel the model uses (matmul, softmax, layer norm, LSTM gates, the
biaffine product) records itself on a tape; ``backward`` replays it.  The
same numbers can be obtained by perturbing inputs, which is how the
analytic gradients are checked.
"""

import numpy as np

from formlink import autodiff as ad

store = ad.ParameterStore(np.float64, seed=0)
w = store.uniform("w", (4, 3))
x = ad.constant(np.random.default_rng(1).normal(size=(5, 4)))


def loss():
    h = ad.tanh(ad.matmul(x, w))
    return ad.scale(ad.sum(ad.mul(ad.softmax(h, axis=-1), h)), 1 / h.data.size)


out = loss()
out.backward()
print("loss", float(out.data))
print("dL/dw\n", np.round(w.grad, 5))
print("max relative error vs central differences:", ad.grad_check(loss, [w], num_coords=12))
