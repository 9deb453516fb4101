"""Shared builders for small hand-checkable scenes."""

import numpy as np

from skysplat.appearance import AppearanceField, HashGridEncoding
from skysplat.liealg import RigidTransform, TwistSpline, so3_exp
from skysplat.scene import Camera, DynamicObject, GaussianSet, GroundPlane, Scene


def look_down_camera(height_m=20.0, width=16,
                     image_height=16, focal=None, offset=(0.0, 0.0)):
    """Camera at altitude looking straight down the -z world axis.

    World frame: z up.  Camera frame: z forward (toward the ground),
    x right (world +x), y down-in-image (world -y).
    """
    f = focal if focal is not None else width * 1.2
    K = np.array([[f, 0.0, (width - 1) / 2.0],
                  [0.0, f, (image_height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    R = np.array([[1.0, 0.0, 0.0],
                  [0.0, -1.0, 0.0],
                  [0.0, 0.0, -1.0]])
    center = np.array([offset[0], offset[1], height_m])
    t = -R @ center
    return Camera(K=K, pose=RigidTransform(R, t), width=width, height=image_height)


def random_gaussians(rng, n, center=(0.0, 0.0, 0.0), spread=2.0, scale=-0.5):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    means = rng.normal(size=(n, 3)) * spread + np.asarray(center)
    return GaussianSet(means,
                       rng.normal(size=(n, 3)) * 0.1 + scale,
                       q,
                       rng.normal(size=n) * 0.3 + 0.5)


def small_scene(rng, n_static=10, n_objects=2, n_frames=3, image=16):
    """Desk-size scene: static cluster near the ground plus moving objects."""
    objects = []
    for i in range(n_objects):
        times = np.linspace(0.0, float(n_frames - 1), n_frames)
        twists = np.zeros((n_frames, 6))
        twists[:, 3] = np.linspace(-1.0, 1.0, n_frames) + 2.0 * i
        twists[:, 4] = 1.5 * i - 1.0
        twists[:, 5] = 0.8
        twists[:, 2] = np.linspace(0.0, 0.3, n_frames)
        obj = DynamicObject(
            id=i + 1,
            gaussians=random_gaussians(rng, 3, spread=0.3, scale=-0.8),
            dims=(1.0, 2.0, 0.8),
            trajectory=TwistSpline(times, twists),
        )
        obj.embedding[:] = rng.normal(size=obj.embedding.shape) * 0.3
        objects.append(obj)
    statics = random_gaussians(rng, n_static, center=(0, 0, 0.2), spread=2.5)
    cams = [look_down_camera(20.0, image, image) for _ in range(n_frames)]
    scene = Scene(static_gaussians=statics, objects=objects, cameras=cams,
                  ground=GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0),
                  frame_times=np.linspace(0.0, float(n_frames - 1), n_frames),
                  bounds=np.array([[-12.0, -12.0, -2.0], [12.0, 12.0, 22.0]]))
    return scene


def small_field(seed=0):
    grid = HashGridEncoding(n_levels=4, base_resolution=4, growth=2.0,
                            log2_table_size=10, n_features=2,
                            rng=np.random.default_rng(seed + 100))
    field = AppearanceField(grid=grid, seed=seed)
    rng = np.random.default_rng(seed + 7)
    field.w2[:] = rng.normal(size=field.w2.shape) * 0.3
    field.b2[:] = rng.normal(size=3) * 0.2
    return field
