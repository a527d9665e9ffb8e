"""
Gradients from scratch
======================

Build a tiny graph by hand, backpropagate through it, and confirm the result
with central finite differences.
"""

import numpy as np

from stmbr import ops
from stmbr.gradcheck import grad_check, run_suite
from stmbr.ops import ConvSpec
from stmbr.tensor import Tensor, backward

rng = np.random.default_rng(0)

# a 3x3 dilated convolution followed by relu and a global mean
x = Tensor(rng.standard_normal((1, 2, 9, 9)), requires_grad=True)
kernel = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
bias = Tensor(np.zeros(4), requires_grad=True)
spec = ConvSpec(kernel, bias, stride=1, dilation=2, padding=ops.same_padding(3, 2))

y = ops.mean(ops.relu(ops.conv2d(x, spec)))
backward(y)
print("loss", float(y.data))
print("input grad shape", x.grad.shape, "kernel grad norm", np.linalg.norm(kernel.grad))

# the same gradients, estimated numerically on a random subset of coordinates
err = grad_check(lambda a, k, b: ops.mean(ops.relu(ops.conv2d(a, ConvSpec(k, b, 1, 2, ops.same_padding(3, 2))))),
                 [x, kernel, bias])
print(f"worst relative error {err:.2e}")

# every op and block in the library, one seed
for name, e in run_suite(seeds=(0,)).items():
    print(f"  {name:24s} {e:.1e}")
