"""Composed 4D scene model.

A scene is a static Gaussian set, dynamic objects carried in canonical
object frames, one camera per frame (with a learnable pose-residual
twist), and a global ground plane.  An object's world pose at time t is

    T'(t) = exp(residual_twist(t)) . exp(trajectory_twist(t))

with both twists interpolated by the same cubic spline over shared
keyframe times.  Covariances are stored factored (log-scale + unit
quaternion) so they stay SPD under unconstrained optimization; rigid
composition rotates them with the pose.
"""

from dataclasses import dataclass, field

import numpy as np

from .liealg import (
    RigidTransform,
    TwistSpline,
    se3_exp,
    se3_exp_jacobian,
    spline_eval,
)

EMBED_DIM = 8


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GaussianPrimitive:
    """One anisotropic 3D Gaussian.

    covariance = R(q) diag(exp(2 log_scale)) R(q)^T, opacity = sigmoid(logit).
    The appearance latent is the embedding slot fed to the appearance
    field; inside a scene it is bound to the owning object's embedding
    (or the shared static embedding).
    """

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    appearance_latent: np.ndarray = field(default_factory=lambda: np.zeros(EMBED_DIM))

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    def covariance(self):
        R = _quats_to_R(np.asarray(self.rotation)[None])[0]
        D = np.diag(np.exp(2.0 * np.asarray(self.log_scale, dtype=float)))
        return R @ D @ R.T


class GaussianSet:
    """Array-of-fields container for N Gaussians (the engine representation)."""

    def __init__(self, means, log_scales, quats, opacity_logits):
        self.means = np.atleast_2d(np.asarray(means, dtype=float)).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(log_scales, dtype=float).reshape(n, 3)
        self.quats = np.asarray(quats, dtype=float).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=float).reshape(n)

    def __len__(self):
        return len(self.means)

    @staticmethod
    def empty():
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @staticmethod
    def from_primitives(prims):
        if not prims:
            return GaussianSet.empty()
        return GaussianSet(
            np.array([p.mean for p in prims]),
            np.array([p.log_scale for p in prims]),
            np.array([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
        )

    def to_primitives(self):
        return [
            GaussianPrimitive(self.means[i].copy(), self.log_scales[i].copy(),
                              self.quats[i].copy(), float(self.opacity_logits[i]))
            for i in range(len(self))
        ]

    def copy(self):
        return GaussianSet(self.means.copy(), self.log_scales.copy(),
                           self.quats.copy(), self.opacity_logits.copy())


@dataclass
class DynamicObject:
    """Rigid object: canonical Gaussians inside a (w, l, h) box plus a
    keyframed SE(3) trajectory with per-keyframe residual corrections."""

    id: int
    gaussians: GaussianSet
    dims: tuple  # (w, l, h) meters
    trajectory: TwistSpline
    residuals: np.ndarray = None  # (K, 6), zero-initialized
    embedding: np.ndarray = None  # e_o, learnable
    class_name: str = "car"
    rigid: bool = True

    def __post_init__(self):
        k = len(self.trajectory.times)
        if self.residuals is None:
            self.residuals = np.zeros((k, 6))
        self.residuals = np.asarray(self.residuals, dtype=float).reshape(k, 6)
        if self.embedding is None:
            self.embedding = np.zeros(EMBED_DIM)
        self.embedding = np.asarray(self.embedding, dtype=float)


@dataclass
class Camera:
    """Pinhole camera with a learnable world->camera pose residual twist."""

    K: np.ndarray
    pose: RigidTransform  # world -> camera
    width: int
    height: int
    pose_residual: np.ndarray = None  # (6,) twist, learnable

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        if self.pose_residual is None:
            self.pose_residual = np.zeros(6)
        self.pose_residual = np.asarray(self.pose_residual, dtype=float).reshape(6)
        if not (self.K[0, 0] > 0 and self.K[1, 1] > 0):
            raise ValueError("camera focal lengths must be positive")
        if abs(self.K[1, 0]) > 1e-12 or abs(self.K[2, 0]) > 1e-12 or abs(self.K[2, 1]) > 1e-12:
            raise ValueError("intrinsics must be upper-triangular")

    def effective_pose(self):
        return se3_exp(self.pose_residual).compose(self.pose)

    def center(self):
        """Camera center in world coordinates (of the effective pose)."""
        P = self.effective_pose()
        return -P.rotation.T @ P.translation


@dataclass
class GroundPlane:
    """Plane {x : normal . x = offset} with the normal pointing up."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ground normal must be unit length")

    def signed_distance(self, points):
        return np.asarray(points) @ self.normal - self.offset


@dataclass
class Scene:
    static_gaussians: GaussianSet
    objects: list
    cameras: list  # one Camera per frame index
    ground: GroundPlane
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    frame_times: np.ndarray = None  # seconds, one per frame
    bounds: np.ndarray = None  # (2, 3) scene AABB used by the appearance encoding

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        if self.frame_times is None:
            self.frame_times = np.arange(len(self.cameras), dtype=float)
        self.frame_times = np.asarray(self.frame_times, dtype=float)
        if len(self.frame_times) != len(self.cameras):
            raise ValueError("need exactly one camera per frame")
        if self.bounds is None:
            self.bounds = default_bounds(self)
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(2, 3)

    def normalized_time(self, t):
        t0, t1 = self.frame_times[0], self.frame_times[-1]
        if t1 <= t0:
            return 0.0
        return float(np.clip((t - t0) / (t1 - t0), 0.0, 1.0))


def default_bounds(scene, margin=2.0):
    """Axis-aligned bounds of the static set (fallback box if empty)."""
    pts = [scene.static_gaussians.means] if len(scene.static_gaussians) else []
    for obj in scene.objects:
        for t in scene.frame_times[:: max(1, len(scene.frame_times) // 4)]:
            c = object_center(obj, t)
            pts.append(c[None])
    if not pts:
        return np.array([[-10.0, -10.0, -10.0], [10.0, 10.0, 10.0]])
    allpts = np.vstack(pts)
    return np.stack([allpts.min(axis=0) - margin, allpts.max(axis=0) + margin])


# ---------------------------------------------------------------------------
# object poses


class ObjectPoseEval:
    """Object pose at one time with everything needed for the backward pass.

    backward(gR, gt, ...) scatters loss gradients w.r.t. the composed
    rotation/translation into the trajectory and residual keyframe twists.
    """

    def __init__(self, obj, t):
        self.obj = obj
        self.weights = obj.trajectory.weights(t)
        self.xi_traj = self.weights @ obj.trajectory.twists
        self.xi_res = self.weights @ obj.residuals
        T_traj = se3_exp(self.xi_traj)
        T_res = se3_exp(self.xi_res)
        self._dR_traj, self._dt_traj = se3_exp_jacobian(self.xi_traj)
        self._dR_res, self._dt_res = se3_exp_jacobian(self.xi_res)
        self.R_traj, self.t_traj = T_traj.rotation, T_traj.translation
        self.R_res, self.t_res = T_res.rotation, T_res.translation
        self.R = self.R_res @ self.R_traj
        self.t = self.R_res @ self.t_traj + self.t_res

    @property
    def transform(self):
        return RigidTransform(self.R, self.t)

    def backward(self, gR, gt):
        """Returns (grad_trajectory (K,6), grad_residuals (K,6))."""
        gR_res = gR @ self.R_traj.T + np.outer(gt, self.t_traj)
        gR_traj = self.R_res.T @ gR
        gt_traj = self.R_res.T @ gt
        gt_res = gt
        g_xi_traj = (np.einsum("ij,ijk->k", gR_traj, self._dR_traj)
                     + gt_traj @ self._dt_traj)
        g_xi_res = (np.einsum("ij,ijk->k", gR_res, self._dR_res)
                    + gt_res @ self._dt_res)
        return np.outer(self.weights, g_xi_traj), np.outer(self.weights, g_xi_res)


def object_pose(obj, t):
    """World pose T'(t) = exp(residual(t)) . exp(trajectory(t))."""
    base = spline_eval(obj.trajectory, t)
    xi_res = obj.trajectory.weights(t) @ obj.residuals
    return se3_exp(xi_res).compose(base)


def object_center(obj, t):
    return object_pose(obj, t).translation


def object_up_axis(obj, t):
    """Canonical +z mapped by the pose rotation; unit by construction."""
    return object_pose(obj, t).rotation[:, 2].copy()


# ---------------------------------------------------------------------------
# quaternion batches (internal)


def _quats_to_R(q):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _quats_R_jacobian(q):
    """Batched dR/dq (N, 3, 3, 4) including normalization."""
    n = np.linalg.norm(q, axis=1, keepdims=True)
    u = q / n
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    N = len(q)
    dRu = np.zeros((N, 3, 3, 4))
    zero = np.zeros(N)
    dRu[:, :, :, 0] = 2 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], axis=1)
    dRu[:, :, :, 1] = 2 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], axis=1)
    dRu[:, :, :, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1)], axis=1)
    dRu[:, :, :, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1)], axis=1)
    dudq = (np.eye(4)[None] - np.einsum("ni,nj->nij", u, u)) / n[:, :, None]
    return np.einsum("nabk,nkq->nabq", dRu, dudq)


# ---------------------------------------------------------------------------
# composition


class ComposedGaussians:
    """World-frame Gaussians at one time, tagged by source.

    tags[i] == -1 for static Gaussians, else the owning object id.
    rotations are full world rotation matrices (pose rotation composed
    with the canonical quaternion rotation); log-scales are untouched by
    the rigid motion.
    """

    def __init__(self, scene, t):
        segs = []
        self.scene = scene
        self.t = t
        self.pose_evals = {}
        static = scene.static_gaussians
        means = [static.means]
        quats = [static.quats]
        log_scales = [static.log_scales]
        logits = [static.opacity_logits]
        tags = [np.full(len(static), -1, dtype=int)]
        rots = [_quats_to_R(static.quats)] if len(static) else [np.zeros((0, 3, 3))]
        segs.append(("static", 0, len(static)))
        offset = len(static)
        for obj in scene.objects:
            pe = ObjectPoseEval(obj, t)
            self.pose_evals[obj.id] = pe
            g = obj.gaussians
            Rc = _quats_to_R(g.quats) if len(g) else np.zeros((0, 3, 3))
            means.append(g.means @ pe.R.T + pe.t)
            rots.append(np.einsum("ij,njk->nik", pe.R, Rc))
            quats.append(g.quats)
            log_scales.append(g.log_scales)
            logits.append(g.opacity_logits)
            tags.append(np.full(len(g), obj.id, dtype=int))
            segs.append((obj.id, offset, offset + len(g)))
            offset += len(g)
        self.means = np.vstack(means)
        self.rotations = np.concatenate(rots, axis=0)
        self.canonical_quats = np.vstack(quats)
        self.log_scales = np.vstack(log_scales)
        self.opacity_logits = np.concatenate(logits)
        self.tags = np.concatenate(tags)
        self.segments = segs

    def __len__(self):
        return len(self.means)

    def covariances(self):
        D = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", self.rotations, D, self.rotations)

    def backward(self, g_means, g_rotations, g_log_scales, g_logits, grads):
        """Scatter world-frame gradients into parameter gradient buffers.

        grads is a dict of named arrays (see optim.ParamSet); entries are
        accumulated in place.
        """
        for tag, a, b in self.segments:
            gm = g_means[a:b]
            gR = g_rotations[a:b]
            if tag == "static":
                src = self.scene.static_gaussians
                if len(src) == 0:
                    continue
                grads["static.means"] += gm
                grads["static.log_scales"] += g_log_scales[a:b]
                grads["static.opacity_logits"] += g_logits[a:b]
                dRdq = _quats_R_jacobian(src.quats)
                grads["static.quats"] += np.einsum("nij,nijq->nq", gR, dRdq)
            else:
                obj = next(o for o in self.scene.objects if o.id == tag)
                pe = self.pose_evals[tag]
                key = f"object.{tag}"
                if len(obj.gaussians):
                    grads[key + ".means"] += gm @ pe.R
                    grads[key + ".log_scales"] += g_log_scales[a:b]
                    grads[key + ".opacity_logits"] += g_logits[a:b]
                    Rc = _quats_to_R(obj.gaussians.quats)
                    gRc = np.einsum("ji,njk->nik", pe.R, gR)
                    dRdq = _quats_R_jacobian(obj.gaussians.quats)
                    grads[key + ".quats"] += np.einsum("nij,nijq->nq", gRc, dRdq)
                    gR_pose = (np.einsum("ni,nj->ij", gm, obj.gaussians.means)
                               + np.einsum("nij,nkj->ik", gR, Rc))
                    gt_pose = gm.sum(axis=0)
                else:
                    gR_pose = np.zeros((3, 3))
                    gt_pose = np.zeros(3)
                g_traj, g_res = pe.backward(gR_pose, gt_pose)
                grads[key + ".trajectory"] += g_traj
                grads[key + ".residuals"] += g_res


def compose_scene(scene, t):
    """World-frame Gaussians of the whole scene at time t, tagged by source."""
    return ComposedGaussians(scene, t)


def camera_pose_backward(camera, g_R_eff, g_t_eff):
    """Gradient of the effective pose w.r.t. the camera's residual twist."""
    from .liealg import se3_exp_jacobian

    dRd, dtd = se3_exp_jacobian(camera.pose_residual)
    R_p, t_p = camera.pose.rotation, camera.pose.translation
    g_Rd = g_R_eff @ R_p.T + np.outer(g_t_eff, t_p)
    return np.einsum("ij,ijk->k", g_Rd, dRd) + g_t_eff @ dtd


def camera_center_backward(camera, g_center):
    """Gradient of the camera center (-R^T t) w.r.t. the residual twist."""
    P = camera.effective_pose()
    g_t_eff = -P.rotation @ g_center
    g_R_eff = -np.outer(P.translation, g_center)
    return camera_pose_backward(camera, g_R_eff, g_t_eff)


def ray_ground_intersect(camera_center, ray, ground):
    """Intersection of a ray with the ground plane, or None.

    None means the constraint is inactive for this frame: the ray is
    within 1e-6 of parallel, or the intersection lies behind the camera.
    """
    o = np.asarray(camera_center, dtype=float)
    r = np.asarray(ray, dtype=float)
    denom = float(ground.normal @ r)
    if abs(denom) <= 1e-6:
        return None
    s = (ground.offset - ground.normal @ o) / denom
    if s <= 0.0:
        return None
    return o + s * r
