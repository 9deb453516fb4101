"""Monocular geometry lifting: from frame bundles to an initialized scene.

Shows the lifting stages on synthetic input: ratio-field depth
refinement under a known scale bias, PCA box fitting, the 3 m motion
threshold, and the assembled scene with grounded object trajectories.
"""

import numpy as np

from skysplat.lift import initialize_scene, refine_depth
from skysplat.scene import object_center
from skysplat.synthgen import CameraPath, SynthSpec, VehicleSpec, generate

spec = SynthSpec(
    vehicles=[
        # fast mover: clearly dynamic
        VehicleSpec(class_name="car", dims=(2.0, 4.4, 1.6),
                    path=("line", (-12.0, 5.0), (6.0, 0.0))),
        # parked: should fold into the static background
        VehicleSpec(class_name="truck", dims=(2.4, 8.0, 2.8),
                    path=("line", (8.0, -8.0), (0.0, 0.0)), heading0=1.1),
    ],
    camera=CameraPath(start_xy=(-5.0, 0.0), velocity_xy=(3.0, 0.0), altitude=50.0),
    n_frames=30, image_size=(160, 160), focal_px=176.0, n_tracks=500,
    depth_scale=0.7,  # global monocular scale bias on the stored depth
)
frames, gt = generate(spec, seed=7)

print("== depth refinement ==")
f = frames[10]
true_depth = f.depth / 0.7
refined, info = refine_depth(f.depth, f.tracks)
before = np.sqrt(np.mean((f.depth - true_depth) ** 2))
after = np.sqrt(np.mean((refined - true_depth) ** 2))
print(f"mode {info['mode']}: RMS depth error {before:.2f} m -> {after:.2e} m "
      "(constant bias corrects exactly)")

print("\n== scene initialization ==")
scene = initialize_scene(frames, pixel_stride=2, seed=0)
print(f"static gaussians: {len(scene.static_gaussians)}")
print(f"ground normal: {np.round(scene.ground.normal, 5)} "
      f"(error {np.degrees(np.arccos(min(scene.ground.normal @ [0, 0, 1.0], 1.0))):.3f} deg)")
print(f"dynamic objects: {[o.id for o in scene.objects]} "
      "(the parked truck was classified static)")

obj = scene.objects[0]
print(f"\nobject 1 footprint estimate: "
      f"({obj.dims[0]:.2f}, {obj.dims[1]:.2f}) m vs true (2.0, 4.4)")
errs = [np.linalg.norm(object_center(obj, float(t)) - gt.centers[1][i])
        for i, t in enumerate(gt.frame_times)]
print(f"trajectory RMS vs ground truth: {np.sqrt(np.mean(np.square(errs))):.3f} m")
print(f"canonical gaussians inside the box: "
      f"{bool(np.all(np.abs(obj.gaussians.means) <= np.array(obj.dims) / 2 + 1e-9))}")
