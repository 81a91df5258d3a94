"""
Bilinear upsampling with a transposed convolution
=================================================

A K = 2s transposed convolution initialised with the bilinear kernel
reproduces a constant image away from the border, and a ramp stays a ramp.
"""

import numpy as np

from hierseg.autodiff import BilinearSpec, Tensor, bilinear_kernel, bilinear_weights_1d, transposed_conv2d

for k in (2, 3, 4, 8):
    print(k, np.round(bilinear_weights_1d(k), 4))

stride = 2
kernel = Tensor(bilinear_kernel(BilinearSpec(2 * stride, stride), channels=1))

flat = transposed_conv2d(Tensor(np.full((1, 1, 5, 5), 3.0)), kernel, stride).data[0, 0]
print("constant input, interior of output:")
print(flat[stride:-stride, stride:-stride])

ramp = np.tile(np.arange(5.0), (5, 1))[None, None]
up = transposed_conv2d(Tensor(ramp), kernel, stride).data[0, 0]
# interior columns step by 1/stride
print("ramp row:", np.round(up[4, stride:-stride], 3))
