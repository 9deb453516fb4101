"""Rotation and rigid-transform algebra on SO(3)/SE(3).

Twists are 6-vectors (wx, wy, wz, vx, vy, vz): rotational part first,
translational part second.  exp/log follow the standard closed forms

    R = I + A [w]x + B [w]x^2          A = sin(t)/t,  B = (1-cos(t))/t^2
    T = (R, V v)                       V = I + B [w]x + C [w]x^2
    C = (t - sin(t))/t^3

with Taylor branches below SMALL_ANGLE to avoid 0/0.  Trajectories are
cubic splines applied componentwise in twist coordinates and mapped
through se3_exp; outside the keyframe range they extrapolate linearly
in twist coordinates (slope of the boundary segment), so objects keep
their motion momentum when leaving the observed window.
"""

from dataclasses import dataclass, field

import numpy as np

# Below this angle the closed forms ((1-cos t)/t^2 and friends) lose up to
# half their digits to cancellation while the quartic Taylor series is
# already exact to machine precision, so the branch switches here.
SMALL_ANGLE = 1e-2
MAX_SPLINE_ANGLE = np.pi - 1e-3


def skew(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def _vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _abc(theta):
    """Rodrigues coefficients A, B and the V-matrix coefficient C."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        t4 = t2 * t2
        return (1.0 - t2 / 6.0 + t4 / 120.0,
                0.5 - t2 / 24.0 + t4 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / t2
    c = (theta - np.sin(theta)) / (t2 * theta)
    return a, b, c


def so3_exp(w):
    """Rotation matrix for the axis-angle vector w (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    a, b, _ = _abc(theta)
    S = skew(w)
    return np.eye(3) + a * S + b * (S @ S)


def so3_log(R):
    """Principal logarithm of a rotation matrix, norm in [0, pi].

    Goes through the (w, x, y, z) quaternion: angle = 2 atan2(|v|, w),
    axis = v/|v|, which stays fully accurate at both the zero-angle and
    the antipodal limit (Shepperd's conversion never cancels).  At
    exactly pi the axis sign follows Shepperd's largest-diagonal branch,
    a fixed deterministic convention.
    """
    q = rotmat_to_quat(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-9:
        # theta/sin(theta/2) ~ 2/w for tiny half-angle
        return v * (2.0 / q[0])
    theta = 2.0 * np.arctan2(s, q[0])
    return v * (theta / s)


def se3_exp(xi):
    """RigidTransform for a twist (w, v): R = exp([w]x), t = V(w) v."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    a, b, c = _abc(theta)
    S = skew(w)
    S2 = S @ S
    R = np.eye(3) + a * S + b * S2
    V = np.eye(3) + b * S + c * S2
    return RigidTransform(R, V @ v)


def se3_log(T):
    """Twist whose exponential is T.  Raises for angles >= pi - 1e-6."""
    w = so3_log(T.rotation)
    theta = np.linalg.norm(w)
    if theta >= np.pi - 1e-6:
        raise ValueError(f"se3_log undefined near pi (angle {theta:.9f})")
    S = skew(w)
    S2 = S @ S
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a, b, _ = _abc(theta)
        d = (1.0 - a / (2.0 * b)) / t2
    Vinv = np.eye(3) - 0.5 * S + d * S2
    return np.concatenate([w, Vinv @ T.translation])


def se3_exp_jacobian(xi):
    """Derivatives of se3_exp w.r.t. the twist components.

    Returns (dR, dt): dR[:, :, k] = dR/dxi_k with shape (3, 3, 6) and
    dt[:, k] = dt/dxi_k with shape (3, 6).
    """
    xi = np.asarray(xi, dtype=float)
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    a, b, c = _abc(theta)
    S = skew(w)
    S2 = S @ S
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        t4 = t2 * t2
        da = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0   # A'(theta)/theta
        db = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0
        dc = -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0
    else:
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        da = (theta * cos_t - sin_t) / (t2 * theta)
        db = (theta * sin_t - 2.0 * (1.0 - cos_t)) / (t2 * t2)
        dc = (theta * (1.0 - cos_t) - 3.0 * (theta - sin_t)) / (t2 * t2 * theta)
    V = np.eye(3) + b * S + c * S2
    dR = np.zeros((3, 3, 6))
    dt = np.zeros((3, 6))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        Ek = skew(e)
        mix = Ek @ S + S @ Ek
        dR[:, :, k] = (da * w[k]) * S + a * Ek + (db * w[k]) * S2 + b * mix
        dV = (db * w[k]) * S + b * Ek + (dc * w[k]) * S2 + c * mix
        dt[:, k] = dV @ v
    dt[:, 3:] = V
    return dR, dt


@dataclass
class RigidTransform:
    """SE(3) element: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other):
        """self . other (apply other first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def quat_to_rotmat(q):
    """Rotation matrix from a (w, x, y, z) quaternion; normalizes first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R):
    """(w, x, y, z) quaternion with w >= 0 (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_rotmat_jacobian(q):
    """dR/dq (3, 3, 4) including the internal normalization of q."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    u = q / n
    w, x, y, z = u
    # dR/du for the unit quaternion u
    dRu = np.zeros((3, 3, 4))
    dRu[:, :, 0] = 2 * np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    dRu[:, :, 1] = 2 * np.array([[0.0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRu[:, :, 2] = 2 * np.array([[-2 * y, x, w], [x, 0.0, z], [-w, z, -2 * y]])
    dRu[:, :, 3] = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0.0]])
    # chain through u = q / |q|:  du/dq = (I - u u^T) / |q|
    dudq = (np.eye(4) - np.outer(u, u)) / n
    return np.einsum("abk,kq->abq", dRu, dudq)


class TwistSpline:
    """Keyframed twists with natural-cubic interpolation per component.

    Keyframe times are fixed at construction; twist values may be
    rewritten in place by the optimizer (interpolation is linear in the
    values, so the cached weight machinery depends only on the times).
    """

    def __init__(self, times, twists):
        times = np.asarray(times, dtype=float)
        twists = np.asarray(twists, dtype=float).reshape(len(times), 6)
        if len(times) == 0:
            raise ValueError("spline needs at least one keyframe")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("keyframe times must be strictly increasing")
        self.times = times
        self.twists = twists
        self._curvature = self._build_curvature(times)

    @staticmethod
    def _build_curvature(times):
        """Matrix S with spline second derivatives M = S @ values."""
        k = len(times)
        if k < 3:
            return np.zeros((k, k))
        h = np.diff(times)
        n = k - 2
        A = np.zeros((n, n))
        B = np.zeros((n, k))
        for i in range(n):
            A[i, i] = (h[i] + h[i + 1]) / 3.0
            if i > 0:
                A[i, i - 1] = h[i] / 6.0
            if i < n - 1:
                A[i, i + 1] = h[i + 1] / 6.0
            B[i, i] = 1.0 / h[i]
            B[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            B[i, i + 2] = 1.0 / h[i + 1]
        S = np.zeros((k, k))
        S[1:-1] = np.linalg.solve(A, B)
        return S

    def _segment_weights(self, t):
        times = self.times
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        h = times[i + 1] - times[i]
        a = (times[i + 1] - t) / h
        b = (t - times[i]) / h
        w = np.zeros(len(times))
        w[i] += a
        w[i + 1] += b
        w += (a ** 3 - a) * h * h / 6.0 * self._curvature[i]
        w += (b ** 3 - b) * h * h / 6.0 * self._curvature[i + 1]
        return w

    def _segment_deriv_weights(self, t):
        times = self.times
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        h = times[i + 1] - times[i]
        a = (times[i + 1] - t) / h
        b = (t - times[i]) / h
        w = np.zeros(len(times))
        w[i] -= 1.0 / h
        w[i + 1] += 1.0 / h
        w -= (3 * a * a - 1.0) * h / 6.0 * self._curvature[i]
        w += (3 * b * b - 1.0) * h / 6.0 * self._curvature[i + 1]
        return w

    def weights(self, t):
        """Row vector w(t) with interpolated twist = w(t) @ twists."""
        k = len(self.times)
        if k == 1:
            return np.ones(1)
        t0, t1 = self.times[0], self.times[-1]
        if t < t0:
            return self._segment_weights(t0) + (t - t0) * self._segment_deriv_weights(t0)
        if t > t1:
            return self._segment_weights(t1) + (t - t1) * self._segment_deriv_weights(t1)
        return self._segment_weights(t)

    def eval_twist(self, t):
        return self.weights(t) @ self.twists


def spline_eval(spline, t):
    """Pose exp(xi(t)) of the interpolated twist; raises near the pi singularity."""
    xi = spline.eval_twist(t)
    angle = np.linalg.norm(xi[:3])
    if angle >= MAX_SPLINE_ANGLE:
        raise ValueError(f"interpolated rotation angle {angle:.6f} too close to pi")
    return se3_exp(xi)
