"""
Reverse-mode autodiff on the tape
=================================

Build a small expression, pull gradients back through it, and check
them against central finite differences.
"""

import numpy as np

import vine.tensor as vt
from vine.tensor import Tape

# Every differentiable computation starts from leaves registered on a
# tape.  The tape records one entry per primitive, in execution order.
tape = Tape()
rng = np.random.default_rng(0)
w = tape.leaf(rng.normal(size=(4, 3)))
x = tape.leaf(rng.normal(size=(3, 5)))

# Compose primitives as plain function calls; each returns a Tensor.
h = vt.relu(vt.matmul(w, x))
loss = vt.scale(vt.sum_all(vt.mul(h, h)), 1.0 / h.data.size)
print("loss:", float(loss.data))

# backward() sweeps the tape once, strictly in reverse order, and
# returns a handle that maps any leaf to its gradient.
grads = tape.backward(loss)
gw = grads.wrt(w)
print("dloss/dw shape:", gw.shape)

# Central finite differences on one entry agree to ~1e-10.
eps = 1e-6
probe = w.data.copy()


def loss_at(arr):
    t2 = Tape()
    w2 = t2.leaf(arr)
    x2 = t2.leaf(x.data)
    h2 = vt.relu(vt.matmul(w2, x2))
    return float(vt.scale(vt.sum_all(vt.mul(h2, h2)), 1.0 / h2.data.size).data)


probe[1, 2] += eps
up = loss_at(probe)
probe[1, 2] -= 2 * eps
down = loss_at(probe)
fd = (up - down) / (2 * eps)
print(f"analytic {gw[1, 2]:+.10f}  finite-diff {fd:+.10f}")

# Custom primitives plug in through from_op: supply the forward value,
# the source tensors, and a closure producing source gradients.
y = vt.from_op(np.tanh(h.data), (h,), lambda g: (g * (1 - np.tanh(h.data) ** 2),))
out = vt.scale(vt.sum_all(y), 1.0 / y.data.size)
gh = tape.backward(out).wrt(w)
print("custom-op gradient flows:", np.abs(gh).max() > 0)
