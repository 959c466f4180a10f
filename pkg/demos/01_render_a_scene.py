"""
Rendering a hand-built Gaussian scene
=====================================

Builds a three-Gaussian scene by hand, renders it from a few viewpoints,
and exports a short turntable of PNG frames.
"""

import numpy as np

from splatgen import CameraPose, GaussianCloud, render
from splatgen.gaussians import SH_C0
from splatgen.io import render_turntable

# Three colored blobs: red at the origin, green to the right, blue above.
# Colors enter through the constant spherical-harmonic band, which maps a
# coefficient c to the channel value 0.5 + SH_C0 * c.
colors = np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.3, 0.9]])
cloud = GaussianCloud(
    positions=np.array([[0.0, 0.0, 0.0], [0.45, 0.0, 0.0], [0.0, 0.0, 0.45]]),
    rotations=np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)),
    log_scales=np.log(np.full((3, 3), 0.18)),
    opacity_logits=np.full(3, 2.0),
    sh_coeffs=((colors - 0.5) / SH_C0)[:, None, :],
)

# A camera is a pose on the viewing sphere: azimuth 0 looks at the scene
# from the -y axis, elevation tilts up, and the camera always faces the
# origin.
camera = CameraPose(azimuth=30.0, elevation=15.0, distance=3.0,
                    fov_deg=40.0, width=96, height=96)
out = render(cloud, camera, background=(1.0, 1.0, 1.0))
print("rgb shape:", out.rgb.shape)
print("object coverage:", round(float(out.alpha.mean()), 4))

# The alpha map is the accumulated opacity -- the object's silhouette.
for azimuth in (0.0, 90.0, 180.0, 270.0):
    cam = CameraPose(azimuth, 0.0, 3.0, 40.0, 64, 64)
    a = render(cloud, cam, background=(0.0, 0.0, 0.0)).alpha
    print(f"azimuth {azimuth:5.1f}: coverage {a.mean():.4f}")

# Export eight frames at evenly spaced azimuths (white background, 8-bit PNG).
paths = render_turntable(cloud, "demo_frames", frames=8, width=96, height=96)
print("wrote", len(paths), "frames, first:", paths[0])
