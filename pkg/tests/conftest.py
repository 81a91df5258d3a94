import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv2d_loops(x, w, stride=1, padding=0):
    """Direct nested-loop cross-correlation, independent of the im2col path."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


def tconv2d_loops(x, w, stride):
    """Scatter form of the transposed convolution with an (I, O, K, K) kernel."""
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    out = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for b in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    out[b, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[b, ic, i, j] * w[ic]
    return out
