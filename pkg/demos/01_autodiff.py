"""
Reverse-mode gradients through a tiny conv net
==============================================

Build a two-layer network by hand, backpropagate a scalar loss and compare
one gradient entry with a central finite difference.
"""

import numpy as np

from hierseg.autodiff import Tensor, backward, conv2d, finite_diff_check, relu, softmax_channels

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 4, 6, 6)))
w1 = Tensor(rng.normal(size=(3, 4, 3, 3)) * 0.3, requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 3, 1, 1)) * 0.3, requires_grad=True)

# forward: conv -> relu -> 1x1 conv -> softmax, then the mean log-probability of class 0
q = softmax_channels(conv2d(relu(conv2d(x, w1, padding=1)), w2))
loss = -q[:, 0].log().mean()
grads = backward(loss)
print("loss", loss.item())
print("dL/dw1 shape", grads[w1].shape, "norm", np.linalg.norm(grads[w1]))


def build(a, b):
    q = softmax_channels(conv2d(relu(conv2d(x, a, padding=1)), b))
    return -q[:, 0].log().mean()


# relative error between analytic and numeric gradients, worst entry
print("finite-difference error", finite_diff_check(build, [w1.data, w2.data]))
