"""Synthetic aerial scene generator and ground-truth oracle.

Renders flat textured terrain plus box vehicles with an independent
ray caster (plane and oriented-slab intersections, Lambertian shading,
procedural value-noise albedo) -- no Gaussians anywhere in this path,
so its output can serve as an oracle for the splatting renderer.
Produces frame bundles (image, exact depth, instance masks, background
tracks with true depths, camera) and the exact scene state; requested
corruptions (depth scale bias, mask erosion, id swaps) are applied only
after the ground truth is recorded.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .liealg import RigidTransform, TwistSpline
from .lift import HEIGHT_PRIOR_M, FrameBundle
from .metrics import dyn_psnr, psnr, ssim
from .scene import Camera, DynamicObject, GroundPlane, Scene, object_pose

SKY = np.array([0.55, 0.68, 0.88])
SUN = np.array([0.35, 0.25, -0.9]) / np.linalg.norm([0.35, 0.25, -0.9])
AMBIENT = 0.25

DEFAULT_DIMS = {"car": (1.9, 4.4, 1.6), "bus": (2.5, 11.0, 3.2),
                "truck": (2.4, 8.0, 2.8)}


@dataclass
class VehicleSpec:
    """Box vehicle on a parametric ground path.

    path is ("line", (x0, y0), (vx, vy)) with heading along the motion,
    or ("arc", (cx, cy), radius, phase0, angular_speed).  A zero-speed
    line keeps the given heading.
    """

    class_name: str = "car"
    dims: tuple = None
    path: tuple = ("line", (0.0, 0.0), (0.0, 0.0))
    heading0: float = 0.0

    def __post_init__(self):
        if self.dims is None:
            self.dims = DEFAULT_DIMS[self.class_name]

    def state(self, t):
        """(center_xy, heading) at time t."""
        kind = self.path[0]
        if kind == "line":
            p0 = np.asarray(self.path[1], dtype=float)
            v = np.asarray(self.path[2], dtype=float)
            c = p0 + v * t
            heading = np.arctan2(v[1], v[0]) if np.linalg.norm(v) > 1e-9 else self.heading0
            return c, float(heading)
        if kind == "arc":
            (cx, cy), radius, phase0, w = self.path[1:]
            a = phase0 + w * t
            c = np.array([cx + radius * np.cos(a), cy + radius * np.sin(a)])
            heading = a + np.pi / 2.0 * np.sign(w if w != 0 else 1.0)
            return c, float(heading)
        raise ValueError(f"unknown path kind {kind!r}")


@dataclass
class CameraPath:
    start_xy: tuple = (0.0, 0.0)
    velocity_xy: tuple = (1.5, 0.0)
    altitude: float = 60.0
    pitch_deg: float = 0.0  # 0 = nadir; positive tips the view forward

    def pose(self, t):
        """World->camera rigid transform and camera center at time t."""
        c = np.array([self.start_xy[0] + self.velocity_xy[0] * t,
                      self.start_xy[1] + self.velocity_xy[1] * t,
                      self.altitude])
        v = np.asarray(self.velocity_xy, dtype=float)
        yaw = np.arctan2(v[1], v[0]) if np.linalg.norm(v) > 1e-9 else 0.0
        cy, sy = np.cos(yaw), np.sin(yaw)
        ahead = np.array([cy, sy, 0.0])
        right = np.array([sy, -cy, 0.0])
        p = np.radians(self.pitch_deg)
        forward = np.array([ahead[0] * np.sin(p), ahead[1] * np.sin(p), -np.cos(p)])
        down_img = np.cross(forward, right)
        R = np.stack([right, down_img, forward])  # rows: camera axes in world
        return RigidTransform(R, -R @ c), c


@dataclass
class SynthSpec:
    terrain_half_extent: float = 60.0
    texture_seed: int = 1
    vehicles: list = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    n_frames: int = 30
    fps: float = 15.0
    image_size: tuple = (128, 128)
    focal_px: float = None  # default: width * altitude-normalized coverage
    n_tracks: int = 120
    brightness: tuple = (1.0, 1.0)  # global illumination ramp over the sequence
    depth_scale: object = None      # None | float | ("halves", left, right)
    mask_erosion_px: int = 0
    id_swaps: list = field(default_factory=list)  # (frame, id_a, id_b)

    def validate(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        hmax = max([HEIGHT_PRIOR_M["car"]] + [v.dims[2] for v in self.vehicles])
        if self.camera.altitude <= hmax:
            raise ValueError("camera altitude must exceed object heights")
        duration = (self.n_frames - 1) / self.fps
        for v in self.vehicles:
            for t in np.linspace(0.0, duration, 8):
                c, _ = v.state(t)
                if np.any(np.abs(c) > self.terrain_half_extent):
                    raise ValueError(f"vehicle leaves the terrain at t={t:.2f}")


@dataclass
class GroundTruth:
    cameras: list
    frame_times: np.ndarray
    ground: GroundPlane
    object_ids: list
    classes: dict
    dims: dict
    centers: dict    # id -> (F, 3)
    headings: dict   # id -> (F,)


# ---------------------------------------------------------------------------
# procedural texture (integer-hash value noise; deterministic everywhere)


def _hash01(ix, iy, seed):
    seed_mix = np.uint32((int(seed) * 0xC2B2AE3D) & 0xFFFFFFFF)
    h = (ix.astype(np.uint32) * np.uint32(0x9E3779B1)
         ^ iy.astype(np.uint32) * np.uint32(0x85EBCA77)
         ^ seed_mix)
    h ^= h >> np.uint32(15)
    h *= np.uint32(0x2C1B3C6D)
    h ^= h >> np.uint32(12)
    h *= np.uint32(0x297A2D39)
    h ^= h >> np.uint32(15)
    return h.astype(np.float64) / float(2 ** 32)


def _value_noise(x, y, scale, seed):
    u = x / scale
    v = y / scale
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    fu = u - iu
    fv = v - iv
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    h00 = _hash01(iu, iv, seed)
    h10 = _hash01(iu + 1, iv, seed)
    h01 = _hash01(iu, iv + 1, seed)
    h11 = _hash01(iu + 1, iv + 1, seed)
    return (h00 * (1 - fu) * (1 - fv) + h10 * fu * (1 - fv)
            + h01 * (1 - fu) * fv + h11 * fu * fv)


def ground_albedo(x, y, seed):
    """Smooth multi-octave ground texture, RGB in roughly [0.25, 0.85]."""
    base = (0.55 * _value_noise(x, y, 16.0, seed)
            + 0.3 * _value_noise(x, y, 6.0, seed + 11)
            + 0.15 * _value_noise(x, y, 2.5, seed + 23))
    tint = _value_noise(x, y, 24.0, seed + 37)
    r = 0.3 + 0.5 * base
    g = 0.32 + 0.45 * base + 0.08 * tint
    b = 0.28 + 0.4 * base - 0.05 * tint
    return np.stack([r, g, b], axis=-1).clip(0.05, 0.95)


_CLASS_TINT = {"car": np.array([0.75, 0.2, 0.2]),
               "bus": np.array([0.85, 0.65, 0.15]),
               "truck": np.array([0.25, 0.4, 0.75])}


def vehicle_albedo(face_u, face_v, class_name, vid, seed):
    tint = _CLASS_TINT.get(class_name, _CLASS_TINT["car"])
    swirl = _value_noise(face_u * 4.0, face_v * 4.0, 1.0, seed + 101 * vid)
    return (tint[None, :] * (0.7 + 0.3 * swirl[:, None])).clip(0.05, 0.95)


# ---------------------------------------------------------------------------
# ray casting


def _vehicle_pose(vehicle, t):
    c2, heading = vehicle.state(t)
    angle = heading - np.pi / 2.0  # canonical +y is the long axis
    ca, sa = np.cos(angle), np.sin(angle)
    R = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([c2[0], c2[1], vehicle.dims[2] / 2.0])
    return R, center, heading


def _ray_box(o, d, half):
    """Slab intersection: entry parameter and face axis, vectorized over rays."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t1 = (-half[None, :] - o[None, :]) * inv
    t2 = (half[None, :] - o[None, :]) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (near <= far) & (near > 1e-6)
    return np.where(hit, near, np.inf), axis


def _render_frame(spec, t, cam_pose, cam_center, K):
    w, h = spec.image_size
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    pix = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=0)
    rays_cam = np.linalg.solve(K, pix).T           # camera z component == 1
    rays_w = rays_cam @ cam_pose.rotation          # R^T applied to rows
    o = cam_center

    depth = np.full(h * w, np.inf)
    hit_id = np.zeros(h * w, dtype=np.int32)       # 0 ground, -1 sky, k vehicle
    with np.errstate(divide="ignore", invalid="ignore"):
        s_plane = -o[2] / rays_w[:, 2]
    ok = (rays_w[:, 2] < 0) & (s_plane > 0)
    depth[ok] = s_plane[ok]
    hit_id[~ok] = -1

    face_axis = np.zeros(h * w, dtype=np.int64)
    poses = []
    for k, veh in enumerate(spec.vehicles, start=1):
        R, c, heading = _vehicle_pose(veh, t)
        poses.append((R, c, heading))
        half = np.array(veh.dims) / 2.0
        ob = (o - c) @ R
        db = rays_w @ R
        s_box, axis = _ray_box(ob, db, half)
        closer = s_box < depth
        depth[closer] = s_box[closer]
        hit_id[closer] = k
        face_axis[closer] = axis[closer]

    color = np.empty((h * w, 3))
    sky = hit_id == -1
    color[sky] = SKY
    gsel = hit_id == 0
    if gsel.any():
        p = o[None, :] + depth[gsel, None] * rays_w[gsel]
        alb = ground_albedo(p[:, 0], p[:, 1], spec.texture_seed)
        shade = max(-SUN[2], 0.0) * (1.0 - AMBIENT) + AMBIENT
        color[gsel] = alb * shade
    for k, veh in enumerate(spec.vehicles, start=1):
        sel = hit_id == k
        if not sel.any():
            continue
        R, c, heading = poses[k - 1]
        p = o[None, :] + depth[sel, None] * rays_w[sel]
        local = (p - c) @ R
        axis = face_axis[sel]
        n_local = np.zeros((sel.sum(), 3))
        rows = np.arange(sel.sum())
        n_local[rows, axis] = np.sign(local[rows, axis])
        n_world = n_local @ R.T
        lam = np.maximum(-(n_world @ SUN), 0.0) * (1.0 - AMBIENT) + AMBIENT
        fu = local[rows, (axis + 1) % 3]
        fv = local[rows, (axis + 2) % 3]
        alb = vehicle_albedo(fu, fv, veh.class_name, k, spec.texture_seed)
        color[sel] = alb * lam[:, None]
    b0, b1 = spec.brightness
    duration = max((spec.n_frames - 1) / spec.fps, 1e-9)
    bright = b0 + (b1 - b0) * (t / duration)
    image = (color * bright).clip(0.0, 1.0).reshape(h, w, 3)
    depth_map = np.where(np.isfinite(depth), depth, 0.0).reshape(h, w)
    masks = np.where(hit_id > 0, hit_id, 0).astype(np.uint16).reshape(h, w)
    return image, depth_map, masks


def _corrupt_depth(depth, spec):
    if spec.depth_scale is None:
        return depth
    if np.isscalar(spec.depth_scale):
        return depth * float(spec.depth_scale)
    kind = spec.depth_scale[0]
    if kind == "halves":
        _, left, right = spec.depth_scale
        out = depth.copy()
        half = depth.shape[1] // 2
        out[:, :half] *= left
        out[:, half:] *= right
        return out
    raise ValueError(f"unknown depth corruption {spec.depth_scale!r}")


def generate(spec, seed=0):
    """Frame bundles plus exact ground truth for a synthetic flight."""
    spec.validate()
    w, h = spec.image_size
    focal = spec.focal_px if spec.focal_px is not None else w * 1.0
    K = np.array([[focal, 0.0, (w - 1) / 2.0],
                  [0.0, focal, (h - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    times = np.arange(spec.n_frames) / spec.fps
    rng = np.random.default_rng([seed, spec.texture_seed])
    n_side = max(int(np.sqrt(spec.n_tracks)), 1)
    gx, gy = np.meshgrid(np.linspace(-0.9, 0.9, n_side), np.linspace(-0.9, 0.9, n_side))
    track_pts = np.stack([gx.ravel(), gy.ravel()], axis=1) * spec.terrain_half_extent
    track_pts += rng.uniform(-1.0, 1.0, size=track_pts.shape)
    track_pts = np.concatenate([track_pts, np.zeros((len(track_pts), 1))], axis=1)

    frames = []
    cams = []
    centers = {k: [] for k in range(1, len(spec.vehicles) + 1)}
    headings = {k: [] for k in range(1, len(spec.vehicles) + 1)}
    classes = {k: v.class_name for k, v in enumerate(spec.vehicles, start=1)}
    for f, t in enumerate(times):
        pose, cam_center = spec.camera.pose(t)
        cam = Camera(K=K.copy(), pose=pose, width=w, height=h)
        cams.append(cam)
        image, depth, masks = _render_frame(spec, t, pose, cam_center, K)
        for k, veh in enumerate(spec.vehicles, start=1):
            _, c, heading = _vehicle_pose(veh, t)
            centers[k].append(c)
            headings[k].append(heading)

        # background tracks: project, keep unoccluded in-image points
        Xc = track_pts @ pose.rotation.T + pose.translation
        z = Xc[:, 2]
        valid = z > 0.1
        uv = np.zeros((len(track_pts), 2))
        uv[valid] = (Xc[valid] / z[valid, None]) @ K.T[:, :2]
        px = np.round(uv).astype(int)
        inside = valid & (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
        vis = inside.copy()
        vis[inside] &= masks[px[inside, 1], px[inside, 0]] == 0
        tracks = np.stack([np.nonzero(vis)[0].astype(float),
                           uv[vis, 0], uv[vis, 1], z[vis]], axis=1)

        # corruptions (ground truth above is already recorded)
        stored_depth = _corrupt_depth(depth, spec)
        stored_masks = masks.copy()
        if spec.mask_erosion_px > 0:
            out = np.zeros_like(stored_masks)
            for mid in np.unique(stored_masks):
                if mid == 0:
                    continue
                er = ndimage.binary_erosion(stored_masks == mid,
                                            iterations=spec.mask_erosion_px)
                out[er] = mid
            stored_masks = out
        for (sf, a, b) in spec.id_swaps:
            if sf == f:
                sa, sb = stored_masks == a, stored_masks == b
                stored_masks[sa] = b
                stored_masks[sb] = a
        frames.append(FrameBundle(index=f, time=float(t), image=image,
                                  depth=stored_depth, masks=stored_masks,
                                  camera=cam, tracks=tracks,
                                  classes=dict(classes)))
    gt = GroundTruth(
        cameras=cams,
        frame_times=times,
        ground=GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0),
        object_ids=list(range(1, len(spec.vehicles) + 1)),
        classes=classes,
        dims={k: tuple(v.dims) for k, v in enumerate(spec.vehicles, start=1)},
        centers={k: np.stack(v) for k, v in centers.items() if v},
        headings={k: np.asarray(v) for k, v in headings.items() if v},
    )
    return frames, gt


# ---------------------------------------------------------------------------
# oracle metrics


def _wrap_pi(x):
    return (x + np.pi) % (2.0 * np.pi) - np.pi


def heading_of_pose(R):
    """World angle of the canonical long axis (+y) under rotation R."""
    return float(np.arctan2(R[1, 1], R[0, 1]))


def ground_truth_scene(gt):
    """Scene with the exact object trajectories (no Gaussians).

    Useful as an oracle reference: keyframes sit at every frame time, so
    spline evaluation reproduces the true poses exactly there.
    """
    from .lift import yaw_center_twist
    from .scene import GaussianSet

    objects = []
    for oid in gt.object_ids:
        headings = np.unwrap(gt.headings[oid])
        twists = np.stack([yaw_center_twist(h - np.pi / 2.0, c)
                           for h, c in zip(headings, gt.centers[oid])])
        spline = TwistSpline(gt.frame_times, twists)
        objects.append(DynamicObject(id=oid, gaussians=GaussianSet.empty(),
                                     dims=gt.dims[oid], trajectory=spline,
                                     class_name=gt.classes[oid]))
    return Scene(static_gaussians=GaussianSet.empty(), objects=objects,
                 cameras=list(gt.cameras), ground=gt.ground,
                 frame_times=gt.frame_times.copy())


def oracle_metrics(scene, gt, field=None, frames=None, frame_indices=None):
    """Reconstruction-vs-truth report.

    Trajectory RMS (m), yaw error mod 180 degrees, tilt (degrees from the
    ground normal), camera residual magnitudes; optionally per-frame
    PSNR/SSIM/Dyn-PSNR of rendered frames against ground-truth images.
    """
    report = {"objects": {}, "unmatched_gt": [], "unmatched_rec": []}
    rec_by_id = {o.id: o for o in scene.objects}
    for oid in gt.object_ids:
        if oid not in rec_by_id:
            report["unmatched_gt"].append(oid)
            continue
        obj = rec_by_id[oid]
        errs = []
        yaw_errs = []
        tilts = []
        for fi, t in enumerate(gt.frame_times):
            pose = object_pose(obj, float(t))
            errs.append(np.linalg.norm(pose.translation - gt.centers[oid][fi]))
            lam = heading_of_pose(pose.rotation)
            d = abs(_wrap_pi(lam - gt.headings[oid][fi]))
            yaw_errs.append(min(d, np.pi - d))
            up = pose.rotation[:, 2]
            tilts.append(np.degrees(np.arccos(np.clip(up @ gt.ground.normal, -1, 1))))
        report["objects"][oid] = {
            "traj_rms_m": float(np.sqrt(np.mean(np.square(errs)))),
            "yaw_err_deg": float(np.degrees(np.mean(yaw_errs))),
            "tilt_deg_mean": float(np.mean(tilts)),
            "tilt_deg_max": float(np.max(tilts)),
        }
    for oid in rec_by_id:
        if oid not in gt.object_ids:
            report["unmatched_rec"].append(oid)
    report["camera_residual_rot_deg"] = [
        float(np.degrees(np.linalg.norm(c.pose_residual[:3]))) for c in scene.cameras]
    report["camera_residual_trans_m"] = [
        float(np.linalg.norm(c.pose_residual[3:])) for c in scene.cameras]
    if field is not None and frames is not None:
        from .render import render_scene

        idx = frame_indices if frame_indices is not None else range(len(frames))
        ps, ss, dp = [], [], []
        for i in idx:
            out = render_scene(scene, field, frame_index=i)
            target = frames[i].image
            ps.append(psnr(out.image, target))
            ss.append(ssim(out.image, target))
            mask = frames[i].masks > 0
            if mask.any():
                dp.append(dyn_psnr(out.image, target, mask))
        report["psnr"] = float(np.mean(ps))
        report["ssim"] = float(np.mean(ss))
        report["dyn_psnr"] = float(np.mean(dp)) if dp else np.nan
    return report
