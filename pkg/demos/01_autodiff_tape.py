#!/usr/bin/env python3
"""Tour of the tape-based autodiff engine.

Every trainable computation in this package runs on a Tape: a flat,
append-only record of tensor operations. Calling backward() walks the
tape once in reverse and fills in gradients. This script builds a few
graphs by hand and checks the gradients against central finite
differences, the same oracle the test suite uses.
"""

import numpy as np

from ttt_omics import autodiff as ad

# -- a tiny expression graph -------------------------------------------------
# loss = sum((A @ B)^2) for 2x2 matrices

tape = ad.Tape()
A = tape.param([[1.0, 2.0], [3.0, 4.0]])
B = tape.param([[0.5, -1.0], [1.5, 0.25]])
loss = ad.sum_all(ad.square(ad.matmul(A, B)))
print(f"forward value: {loss.values:.6f}")

ad.backward(tape, loss)
print("dloss/dA:\n", A.grad)
print("dloss/dB:\n", B.grad)

# -- verify against finite differences ---------------------------------------


def loss_of_a(a_flat):
    t = ad.Tape()
    a = t.param(a_flat.reshape(2, 2))
    b = t.tensor(B.values)
    return float(ad.sum_all(ad.square(ad.matmul(a, b))).values)


fd = ad.finite_difference_gradient(loss_of_a, A.values.ravel(), h=1e-5).reshape(2, 2)
print("finite differences agree:", np.allclose(A.grad, fd, rtol=1e-6))

# -- the kernels the model is made of ----------------------------------------
# RMSNorm rescales each row to unit root-mean-square before a learnable gain;
# its backward has a rank-one correction that is easy to get wrong, so check it.

rng = np.random.default_rng(0)
x0 = rng.uniform(-1, 1, (4, 3))

tape = ad.Tape()
x = tape.param(x0)
gain = tape.tensor(np.ones(3))
root = ad.sum_all(ad.square(ad.rms_norm(x, gain)))
ad.backward(tape, root)


def rms_loss(p):
    t = ad.Tape()
    return float(ad.sum_all(ad.square(ad.rms_norm(t.param(p.reshape(4, 3)),
                                                  t.tensor(np.ones(3))))).values)


fd = ad.finite_difference_gradient(rms_loss, x0.ravel()).reshape(4, 3)
rel = np.max(np.abs(x.grad - fd)) / np.max(np.abs(fd))
print(f"rms_norm gradient vs finite differences: rel err {rel:.2e}")

# Batched sequences are first-class: a [batch, n, d] stack flows through the
# same kernels, so one tape can train a whole minibatch of cells.
tape = ad.Tape()
batch = tape.param(rng.uniform(-1, 1, (8, 5, 3)))
w = tape.param(rng.uniform(-1, 1, (3, 3)))
out = ad.matmul(batch, w)
print("batched matmul output shape:", out.values.shape)
ad.backward(tape, ad.sum_all(ad.square(out)))
print("shared weight accumulated gradient shape:", w.grad.shape)
