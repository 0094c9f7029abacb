"""
Deformable hint block
=====================

Three convolutions lift the embedding map, a deformable convolution samples
its input at learned, clamped offsets, and a zero-initialised 1x1
convolution makes the whole block output zeros until training moves it.
All backward passes are hand-written and checked with finite differences.
"""

import numpy as np

from panodiff.deform import DeformableConv2d, HintBlock
from panodiff.gradcheck import check_deformable, check_hint_block
from panodiff.layers import conv2d

rng = np.random.default_rng(0)

# with zero offsets the deformable layer is an ordinary convolution
layer = DeformableConv2d.init(3, 4, k=3, k_d=0.1, rng=rng)
x = rng.normal(size=(3, 8, 16))
print("zero offsets == plain conv:",
      np.allclose(layer(x), conv2d(x[None], layer.base.weight, layer.base.bias)[0], atol=1e-12))

block = HintBlock.init(c_e=16, c_z=1, rng=rng)
print("fresh hint block output is all zeros:", not np.any(block(rng.normal(size=(16, 8, 16)))))

for seed in range(3):
    errs = check_deformable(seed, saturate=seed == 2)
    print(f"deformable seed {seed}: worst relative error {max(errs.values()):.1e}")
print(f"hint block: worst relative error {max(check_hint_block(0).values()):.1e}")
