"""
Rotating panoramas on the sphere
================================

Every pixel of an equirectangular image is a direction on the unit sphere.
Rotating the sphere and resampling with the nearest pixel gives a rotated
panorama; a pure yaw by whole columns is just a circular shift.
"""

import numpy as np

from panodiff.geometry import (
    ErpGrid, NfovSpec, RotationAngles, frustum_solid_angle, nfov_mask, pixel_to_direction,
    rotate_image, yaw_shift,
)
from panodiff.synth import synth_panorama

grid = ErpGrid(32, 64)
print("pixel (0, 0) looks along", pixel_to_direction(grid, 0, 0).round(4))

pano = synth_panorama(grid, channels=1, budget=3, seed=0)

# 45 degrees of yaw is exactly 8 of the 64 columns
turned = rotate_image(pano, (45, 0, 0))
print("45 deg yaw equals an 8-column roll:", np.array_equal(turned, yaw_shift(pano, 8)))

# pitch and roll move content between latitudes too
tilted = rotate_image(pano, RotationAngles(30, 10, -5))
print("pixels changed by a (30, 10, -5) rotation:", int(np.sum(tilted != pano)), "of", pano.size)

# a narrow perspective view covers only part of the sphere
spec = NfovSpec(fov_h=90, aspect=2.0)
mask = nfov_mask(ErpGrid(128, 256), spec)
w = ErpGrid(128, 256).solid_angle_weights()
print(f"90 deg view: {float((mask * w).sum() / w.sum()):.4f} of the sphere "
      f"(closed form {frustum_solid_angle(spec) / (4 * np.pi):.4f})")
