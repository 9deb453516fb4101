"""Projecting and rasterizing Gaussians, step by step.

Builds a miniature scene by hand (a patch of ground-level Gaussians and
one moving object), renders it from an aerial camera, and pokes at the
outputs: the image, the alpha map, the dynamic-coverage mask, and the
gradient flow back to 3D parameters.
"""

from pathlib import Path

import numpy as np

from skysplat.appearance import AppearanceField, HashGridEncoding
from skysplat.liealg import RigidTransform, TwistSpline
from skysplat.render import render_backward, render_scene
from skysplat.scene import (
    Camera, DynamicObject, GaussianSet, GroundPlane, Scene,
)
from skysplat.sceneio import save_png

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)
rng = np.random.default_rng(3)

# ground patch: a loose grid of flat Gaussians at z=0
gx, gy = np.meshgrid(np.linspace(-8, 8, 17), np.linspace(-8, 8, 17))
n = gx.size
means = np.stack([gx.ravel(), gy.ravel(), np.zeros(n)], axis=1)
statics = GaussianSet(means,
                      np.full((n, 3), np.log(0.6)),
                      np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                      np.full(n, 1.0))

# one box-shaped object sliding across the patch
canon = GaussianSet(rng.uniform(-0.5, 0.5, size=(12, 3)) * [1.0, 2.0, 0.5],
                    np.full((12, 3), np.log(0.35)),
                    np.tile([1.0, 0.0, 0.0, 0.0], (12, 1)),
                    np.full(12, 2.0))
times = np.array([0.0, 1.0, 2.0])
twists = np.zeros((3, 6))
twists[:, 3] = [-4.0, 0.0, 4.0]
twists[:, 5] = 0.5
obj = DynamicObject(id=1, gaussians=canon, dims=(1.0, 2.0, 1.0),
                    trajectory=TwistSpline(times, twists))
obj.embedding[:] = rng.normal(size=8)

# straight-down camera at 20 m
K = np.array([[96.0, 0.0, 47.5], [0.0, 96.0, 47.5], [0.0, 0.0, 1.0]])
Rcam = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
cams = [Camera(K=K, pose=RigidTransform(Rcam, -Rcam @ [0, 0, 20.0]),
               width=96, height=96) for _ in times]
scene = Scene(static_gaussians=statics, objects=[obj], cameras=cams,
              ground=GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0),
              frame_times=times)

field = AppearanceField(grid=HashGridEncoding(rng=np.random.default_rng(1)), seed=1)
field.w2[:] = np.random.default_rng(2).normal(size=field.w2.shape) * 0.4

print("rendering the object at three times...")
for i in range(3):
    out = render_scene(scene, field, frame_index=i)
    save_png(OUT / f"splat_t{i}.png", out.image)
    cov = out.dynamic_coverage.sum()
    print(f"  t={times[i]:.0f}: alpha mean {out.alpha.mean():.3f}, "
          f"dynamic pixels {cov}")

print("\ngradients flow to every parameter group:")
out, cache = render_scene(scene, field, frame_index=1, with_cache=True)
grads = {name: np.zeros_like(arr) for name, arr in field.param_items()}
grads.update({
    "static.means": np.zeros_like(statics.means),
    "static.log_scales": np.zeros_like(statics.log_scales),
    "static.quats": np.zeros_like(statics.quats),
    "static.opacity_logits": np.zeros_like(statics.opacity_logits),
    "object.1.means": np.zeros_like(canon.means),
    "object.1.log_scales": np.zeros_like(canon.log_scales),
    "object.1.quats": np.zeros_like(canon.quats),
    "object.1.opacity_logits": np.zeros_like(canon.opacity_logits),
    "object.1.trajectory": np.zeros_like(obj.trajectory.twists),
    "object.1.residuals": np.zeros_like(obj.residuals),
    "object.1.embedding": np.zeros_like(obj.embedding),
    "camera.residuals": np.zeros((3, 6)),
})
render_backward(scene, field, cache, np.ones_like(out.image), grads)
for name in ("static.means", "object.1.trajectory", "camera.residuals",
             "appearance.w0", "object.1.embedding"):
    print(f"  |grad {name}| = {np.abs(grads[name]).max():.3e}")
print(f"\nimages written to {OUT}/splat_t*.png")
