"""Rotations, rigid transforms, and twist splines.

Walks through the building blocks every trajectory in this package rests
on: the SO(3)/SE(3) exponential and logarithm maps, and keyframed twist
splines that interpolate exactly and keep their momentum past the last
keyframe.
"""

import numpy as np

from skysplat.liealg import (
    RigidTransform,
    TwistSpline,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
    spline_eval,
)

rng = np.random.default_rng(0)

print("== exponential / logarithm round trips ==")
w = np.array([0.3, -0.5, 0.8])
R = so3_exp(w)
print("axis-angle", w, "-> rotation, det =", np.linalg.det(R))
print("log(exp(w)) =", so3_log(R), " (matches the input)")

xi = np.array([0.2, 0.1, -0.4, 1.0, 2.0, 3.0])
T = se3_exp(xi)
print("\ntwist", xi)
print("pose translation:", T.translation)
print("log(exp(xi)) =", np.round(se3_log(T), 12))

print("\n== pure translation: zero rotation makes the coupling trivial ==")
T = se3_exp([0, 0, 0, 1.0, 2.0, 3.0])
print("translation:", T.translation, "rotation is identity:",
      np.allclose(T.rotation, np.eye(3)))

print("\n== a keyframed trajectory ==")
# a vehicle accelerating along +x while slowly yawing
times = np.array([0.0, 1.0, 2.0, 3.0])
twists = np.zeros((4, 6))
twists[:, 3] = [0.0, 1.0, 3.0, 6.0]   # x position
twists[:, 2] = [0.0, 0.1, 0.2, 0.3]   # yaw
spline = TwistSpline(times, twists)
for t in [0.0, 0.5, 1.5, 3.0]:
    pose = spline_eval(spline, t)
    print(f"t={t:3.1f}  x={pose.translation[0]:6.3f}  "
          f"yaw={np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0]):.3f}")

print("\nbeyond the last keyframe the twist continues linearly (momentum):")
for t in [3.5, 4.0, 5.0]:
    pose = spline_eval(spline, t)
    print(f"t={t:3.1f}  x={pose.translation[0]:6.3f}")

print("\nkeyframe poses are reproduced exactly:")
err = max(np.abs(spline_eval(spline, t).matrix() - se3_exp(xi_k).matrix()).max()
          for t, xi_k in zip(times, twists))
print("max keyframe reconstruction error:", err)
