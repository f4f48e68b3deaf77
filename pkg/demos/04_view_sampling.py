"""Pick camera frames that cover a scan instead of bunching up.

A scan's frames come with poses.  Taking every k-th frame follows the
camera path, while farthest-pose sampling greedily adds the frame whose
pose (position plus sign-free rotation) is farthest from those already
chosen.  The printout compares how far the worst uncovered frame is from
the selection under both strategies.

    python demos/04_view_sampling.py
"""

import numpy as np

from crossalign.viewsample import canonical_poses, farthest_pose_sample, uniform_stride_sample

rng = np.random.default_rng(0)
# a camera that dwells in one corner for most of the scan, then sweeps the room
t = np.concatenate([rng.uniform(0.0, 0.15, 80), np.linspace(0.15, 1.0, 20)])
positions = np.stack([4 * np.cos(2 * np.pi * t), 3 * np.sin(2 * np.pi * t), 1.5 + 0.1 * rng.normal(size=t.size)], 1)
yaw = 2 * np.pi * t + 0.2 * rng.normal(size=t.size)
quats = np.stack([np.cos(yaw / 2), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(yaw / 2)], 1)
poses = np.concatenate([quats, positions], axis=1)
P = canonical_poses(poses)


def coverage_gap(chosen):
    return np.linalg.norm(P[:, None] - P[None, chosen], axis=-1).min(axis=1).max()


for n in (4, 8, 12):
    fps = farthest_pose_sample(poses, n, seed=0)
    stride = uniform_stride_sample(len(poses), n)
    print(f"n={n:2d}  farthest-pose gap {coverage_gap(fps):.2f}   uniform-stride gap {coverage_gap(stride):.2f}")
print("farthest-pose picks for n=8:", farthest_pose_sample(poses, 8, seed=0))
