"""
A short tour of the tensor tape
===============================

Builds a tiny 3D conv -> pool -> dense classifier by hand, runs one backward
pass and compares the analytic gradient with central differences.
"""

import numpy as np

from phinet import ops
from phinet.gradcheck import finite_diff_check
from phinet.tensor import Tensor, backward

rng = np.random.default_rng(0)

# a batch of two 1-channel 6^3 volumes
x = Tensor(rng.standard_normal((2, 1, 6, 6, 6)))
w = Tensor(rng.uniform(-0.5, 0.5, (3, 1, 3, 3, 3)), requires_grad=True, name="w")
b = Tensor(np.zeros(3), requires_grad=True, name="b")
fc = Tensor(rng.uniform(-0.5, 0.5, (3, 2)), requires_grad=True, name="fc")
fc_b = Tensor(np.zeros(2), requires_grad=True, name="fc_b")
labels = np.array([0, 1])
conv = ops.ConvSpec(1, 3, 3, 1, 1)


def loss():
    h = ops.relu(ops.conv3d(x, w, b, conv))
    h = ops.global_avg_pool(ops.max_pool3d(h, 2, 2))
    return ops.softmax_cross_entropy(ops.dense(h, fc, fc_b), labels)


value = loss()
print("loss", float(value.data))
backward(value)
print("conv weight grad norm", np.linalg.norm(w.grad))

# central differences; ReLU and max-pool kinks keep this from being exact
err = finite_diff_check(loss, [w, b, fc, fc_b], h=1e-6)
print("max relative error vs finite differences: %.2e" % err)
