"""From a depth image to the network's input.

A synthetic hand is rendered to a depth map, written to disk in the .dpth
format and read back. It is then back-projected with the camera intrinsics,
rotated into its oriented bounding box, subsampled to 1024 points and given
surface normals.
"""
import tempfile
from pathlib import Path

import numpy as np

from handfold.preprocess import foreground_mask, preprocess_depth, read_depth, write_depth
from handfold.skeleton import ICVL
from handfold.synth import render_hand

hand = render_hand(np.random.default_rng(0), ICVL)
print(f"depth image {hand.depth.shape}, {int((hand.depth > 0).sum())} hand pixels, "
      f"intrinsics fx={hand.intrinsics.fx} cx={hand.intrinsics.cx}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "hand.dpth"
    write_depth(path, hand.depth)
    depth = read_depth(path)
assert (depth == hand.depth).all()

# keep depths within 150 mm of the hand's annotated mean depth
mask = foreground_mask(depth, center_depth=float(hand.joints_mm[:, 2].mean()))
frame = preprocess_depth(depth, hand.intrinsics, mask, n_points=1024, seed=0, joints_mm=hand.joints_mm)

tf = frame.transform
print(f"normalized cloud {frame.points.shape}, extent per axis {np.ptp(frame.points, axis=0).round(3)}")
print(f"OBB rotation det {np.linalg.det(tf.rotation):+.6f}, {tf.scale:.1f} mm per normalized unit")
print(f"normals are unit length: {np.allclose(np.linalg.norm(frame.normals, axis=1), 1)}")

# joints go through the same transform and come back exactly
back = tf.denormalize(frame.gt_joints)
print(f"joint round-trip error {np.abs(back - hand.joints_mm).max():.2e} mm")
