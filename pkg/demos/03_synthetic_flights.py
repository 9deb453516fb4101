"""The synthetic aerial generator as a ground-truth oracle.

Generates a short monocular flight over textured terrain with moving box
vehicles, writes a frame-bundle directory, and demonstrates the
corruption knobs (depth scale bias, mask erosion, id swaps) that stand
in for imperfect upstream perception.
"""

from pathlib import Path

import numpy as np

from skysplat.sceneio import save_frames, save_png
from skysplat.synthgen import CameraPath, SynthSpec, VehicleSpec, generate

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

spec = SynthSpec(
    vehicles=[
        VehicleSpec(class_name="car", dims=(2.0, 4.4, 1.6),
                    path=("line", (-15.0, 6.0), (5.0, 0.0))),
        VehicleSpec(class_name="bus", dims=(2.5, 11.0, 3.2),
                    path=("line", (10.0, -18.0), (0.0, 3.0))),
        VehicleSpec(class_name="truck", dims=(2.4, 8.0, 2.8),
                    path=("arc", (0.0, 0.0), 14.0, 0.0, 0.25)),
    ],
    camera=CameraPath(start_xy=(-6.0, 0.0), velocity_xy=(3.0, 0.0),
                      altitude=60.0, pitch_deg=5.0),
    n_frames=24, image_size=(160, 160), focal_px=160.0,
    brightness=(1.0, 0.85),   # evening light fading over the sequence
)
frames, gt = generate(spec, seed=42)

print(f"generated {len(frames)} frames at {spec.image_size}")
f = frames[12]
print(f"frame 12: depth range [{f.depth[f.depth > 0].min():.1f}, "
      f"{f.depth.max():.1f}] m, instances {sorted(set(f.masks.ravel()) - {0})}, "
      f"{len(f.tracks)} visible tracks")
save_png(OUT / "flight_mid.png", f.image)
# depth visualization: invert and normalize
d = f.depth.copy()
d[d == 0] = d.max()
dv = (d.max() - d) / max(d.max() - d.min(), 1e-9)
save_png(OUT / "flight_mid_depth.png", np.stack([dv] * 3, axis=2))

print("\nground truth carries exact 6-DoF object states:")
for oid in gt.object_ids:
    c0, c1 = gt.centers[oid][0], gt.centers[oid][-1]
    moved = np.linalg.norm(c1 - c0)
    print(f"  {gt.classes[oid]:>5} (id {oid}): moved {moved:.1f} m, "
          f"dims {gt.dims[oid]}")

print("\ncorruptions apply to the stored inputs, never the ground truth:")
spec.depth_scale = ("halves", 0.8, 1.2)
spec.mask_erosion_px = 1
spec.id_swaps = [(6, 1, 2)]
corrupted, _ = generate(spec, seed=42)
g = corrupted[12]
ratio_left = g.depth[80, 20] / frames[12].depth[80, 20]
ratio_right = g.depth[80, 140] / frames[12].depth[80, 140]
print(f"  stored depth scaled by {ratio_left:.2f} (left) / {ratio_right:.2f} (right)")
print(f"  mask pixels: {int((frames[12].masks > 0).sum())} -> "
      f"{int((g.masks > 0).sum())} after erosion")
print(f"  tracks keep the true geometric depth: "
      f"{np.allclose(g.tracks, frames[12].tracks)}")

save_frames(OUT / "flight_bundle", frames[:4])
print(f"\nwrote a frame-bundle directory to {OUT}/flight_bundle")
