"""
Reverse-mode differentiation on a small tape
=============================================

Every operation records its parents and a backward closure. Calling
``backward`` on a scalar walks the tape in reverse and accumulates
gradients into the leaves.
"""

import numpy as np

from flowcast import autodiff as ad

# two leaves and a scalar built from them
x = ad.parameter(np.array([[1.0, -2.0, 0.5]]))
w = ad.parameter(np.array([[0.3], [0.1], [-0.4]]))
y = ad.tanh(ad.matmul(x, w))
loss = ad.tensor_sum(ad.mul(y, y))
loss.backward()
print("loss", loss.item())
print("dloss/dw", w.grad.ravel())

# gradients accumulate until they are reset
loss = ad.tensor_sum(ad.mul(ad.tanh(ad.matmul(x, w)), ad.tanh(ad.matmul(x, w))))
loss.backward()
print("after a second backward", w.grad.ravel())
w.zero_grad()

# central differences agree with the tape
rng = np.random.default_rng(0)
img = ad.parameter(rng.uniform(-1, 1, (1, 3, 12)))
kern = ad.parameter(rng.uniform(-1, 1, (8, 1, 3, 3)))
err = ad.grad_check(lambda: ad.tensor_sum(ad.relu(ad.conv2d(img, kern, padding=1))), [img, kern])
print(f"conv2d gradient check: max relative error {err:.2e}")

# softmax rows always sum to one
s = ad.softmax(rng.normal(size=(3, 3)) * 20, axis=-1).data
print("softmax row sums", s.sum(axis=1))
