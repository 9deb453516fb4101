"""Physics-guided optimization loop.

The total objective couples photometric supervision with three motion
priors evaluated on object poses:

    L = w_photo L_photo + w_sup L_support + w_upr L_upright + w_traj L_traj

L_photo mixes L1 and D-SSIM 0.8/0.2 with dynamic-region pixels upweighted
by a scheduled factor (1.0 before iteration 7000, ramping to 1.3 by
15000, while the three physics weights decay to half over the same
window).  L_support is a Huber penalty on the signed along-ray distance
between each object's bottom point and the ray-ground intersection;
L_upright aligns each object's vertical axis with the ground normal;
L_traj penalizes second differences of object centers at frame
timestamps.  Updates are standard Adam per parameter group, with
quaternions renormalized after every step.
"""

from dataclasses import dataclass, fields

import numpy as np

from .metrics import ssim_map, ssim_map_backward
from .render import render_backward, render_scene
from .scene import (
    ObjectPoseEval,
    camera_center_backward,
)

HUBER_DELTA_M = 0.5
L1_WEIGHT = 0.8
DSSIM_WEIGHT = 0.2


class NumericalAbort(RuntimeError):
    """Raised when the total loss stops being finite; carries a dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class LossWeights:
    photo: float = 1.0
    support: float = 0.05
    upright: float = 0.1
    traj: float = 0.02


@dataclass
class Schedule:
    """Piecewise-linear schedules keyed on the iteration index."""

    total_iters: int = 30000
    ramp_start: int = 7000
    ramp_end: int = 15000
    mask_weight_max: float = 1.3
    physics_decay: float = 0.5

    def _ramp(self, i, lo, hi):
        if i <= self.ramp_start:
            return lo
        if i >= self.ramp_end:
            return hi
        f = (i - self.ramp_start) / (self.ramp_end - self.ramp_start)
        return lo + (hi - lo) * f

    def mask_weight(self, i):
        return self._ramp(i, 1.0, self.mask_weight_max)

    def physics_scale(self, i):
        return self._ramp(i, 1.0, self.physics_decay)


def _huber(s, delta=HUBER_DELTA_M):
    a = abs(s)
    if a <= delta:
        return 0.5 * s * s
    return delta * (a - 0.5 * delta)


def _huber_grad(s, delta=HUBER_DELTA_M):
    if abs(s) <= delta:
        return s
    return delta * np.sign(s)


def loss_photometric(rendered, target, dyn_mask, mask_weight, with_grad=True):
    """0.8 L1 + 0.2 D-SSIM per pixel, dynamic pixels scaled by mask_weight.

    Returns (value, d(value)/d(rendered)); the mean is over all pixels,
    so the weighting raises the loss rather than renormalizing it.
    """
    rendered = np.asarray(rendered, dtype=float)
    target = np.asarray(target, dtype=float)
    h, w = rendered.shape[:2]
    npix = h * w
    wgt = np.ones((h, w))
    if dyn_mask is not None:
        wgt = wgt + (mask_weight - 1.0) * dyn_mask.astype(float)
    diff = rendered - target
    l1 = np.abs(diff).mean(axis=2)
    smap, cache = ssim_map(rendered, target, with_cache=True)
    dssim = (1.0 - smap) / 2.0
    value = float(np.mean(wgt * (L1_WEIGHT * l1 + DSSIM_WEIGHT * dssim)))
    if not with_grad:
        return value, None
    if value == 0.0:
        # exact global minimum: the true gradient is zero, and the
        # cancellation dust the SSIM chain would leave (~1e-19) must not
        # reach Adam, whose 1e-15 epsilon rescales any dust to a full step
        return value, np.zeros_like(rendered)
    g_img = (L1_WEIGHT * wgt[:, :, None] * np.sign(diff) / (3.0 * npix))
    g_map = -0.5 * DSSIM_WEIGHT * wgt / npix
    g_img = g_img + ssim_map_backward(cache, g_map)
    return value, g_img


def _accumulate_pose_grads(obj, pe, gR, gt, grads, weight):
    g_traj, g_res = pe.backward(weight * gR, weight * gt)
    grads[f"object.{obj.id}.trajectory"] += g_traj
    grads[f"object.{obj.id}.residuals"] += g_res


def _nearest_frame(scene, t):
    return int(np.argmin(np.abs(scene.frame_times - t)))


def loss_support(scene, t, frame_index=None, grads=None, weight=1.0):
    """Huber penalty on the along-ray distance from box bottom to ground.

    The bottom proxy sits half the box height below the object center
    along the ground normal (a resting pose puts its center at h/2 over
    the plane); the penalty measures the signed distance from that point
    to the ground intersection of its viewing ray, projected on the ray
    toward the object center.  Keeping the offset along the normal
    rather than the object's own axis leaves the same zero set for
    upright objects but decouples the term from orientation: tilting
    cannot fake ground contact, so this prior never fights the upright
    one.  Degenerate rays (parallel to the plane or intersecting behind
    the camera) contribute zero.
    """
    if not scene.objects:
        return 0.0
    if frame_index is None:
        frame_index = _nearest_frame(scene, t)
    cam = scene.cameras[frame_index]
    n = scene.ground.normal
    d0 = scene.ground.offset
    o = cam.center()
    total = 0.0
    count = len(scene.objects)
    for obj in scene.objects:
        pe = ObjectPoseEval(obj, t)
        c = pe.t
        h = obj.dims[2]
        e = c - o
        ne = np.linalg.norm(e)
        if ne < 1e-9:
            continue
        r = e / ne
        cb = c - 0.5 * h * n
        eb = cb - o
        nb = np.linalg.norm(eb)
        if nb < 1e-9:
            continue
        db = eb / nb
        denom = float(n @ db)
        if abs(denom) <= 1e-6:
            continue
        k = d0 - float(n @ o)
        sg = k / denom
        if sg <= 0.0:
            continue
        chat = o + sg * db
        s = float(r @ (cb - chat))
        total += _huber(s)
        if grads is not None:
            gs = weight * _huber_grad(s) / count
            g_r = gs * (cb - chat)
            g_cb = gs * r
            g_sg = -gs * float(r @ db)
            g_db = -gs * sg * r + g_sg * (-k / denom ** 2) * n
            g_o_direct = -gs * r + g_sg * (-n / denom)
            g_e = (g_r - r * float(r @ g_r)) / ne
            g_eb = (g_db - db * float(db @ g_db)) / nb
            g_c = g_e + g_cb + g_eb
            g_o = -g_e - g_eb + g_o_direct
            _accumulate_pose_grads(obj, pe, np.zeros((3, 3)), g_c, grads, 1.0)
            grads["camera.residuals"][frame_index] += camera_center_backward(cam, g_o)
    return total / count


def loss_upright(scene, t, grads=None, weight=1.0):
    """Mean over objects of 1 - |vertical axis . ground normal|."""
    if not scene.objects:
        return 0.0
    v = scene.ground.normal
    total = 0.0
    count = len(scene.objects)
    for obj in scene.objects:
        pe = ObjectPoseEval(obj, t)
        u = pe.R[:, 2]
        dot = float(u @ v)
        total += 1.0 - abs(dot)
        if grads is not None:
            gR = np.zeros((3, 3))
            gR[:, 2] = -np.sign(dot) * v * (weight / count)
            _accumulate_pose_grads(obj, pe, gR, np.zeros(3), grads, 1.0)
    return total / count


def loss_traj(scene, times, grads=None, weight=1.0):
    """Second-difference penalty on object centers at frame timestamps."""
    times = np.sort(np.asarray(times, dtype=float))
    if len(times) < 3 or not scene.objects:
        return 0.0
    total = 0.0
    count = len(scene.objects) * (len(times) - 2)
    for obj in scene.objects:
        evals = [ObjectPoseEval(obj, float(t)) for t in times]
        centers = [pe.t for pe in evals]
        g_centers = [np.zeros(3) for _ in evals]
        for i in range(1, len(times) - 1):
            d = centers[i + 1] - 2.0 * centers[i] + centers[i - 1]
            total += float(d @ d)
            if grads is not None:
                g = 2.0 * d * weight / count
                g_centers[i + 1] += g
                g_centers[i] -= 2.0 * g
                g_centers[i - 1] += g
        if grads is not None:
            for pe, gc in zip(evals, g_centers):
                _accumulate_pose_grads(obj, pe, np.zeros((3, 3)), gc, grads, 1.0)
    return total / count


def _stencil(n_frames, i):
    """Three consecutive frame indices centered on i, shifted at the ends."""
    if n_frames < 3:
        return list(range(n_frames))
    lo = int(np.clip(i - 1, 0, n_frames - 3))
    return [lo, lo + 1, lo + 2]


def total_loss(scene, field, frames, frame_index, weights, schedule, iteration,
               grads=None, disable=(), background=None, precision="double"):
    """Scheduled total objective at one training frame.

    Returns (total, terms) where terms holds raw per-term values and the
    effective weights used (for the log).  Gradients for every parameter
    group are accumulated into `grads` when provided.
    """
    mask_w = 1.0 if "mask_weight" in disable else schedule.mask_weight(iteration)
    phys = schedule.physics_scale(iteration)
    w_sup = 0.0 if "support" in disable else weights.support * phys
    w_upr = 0.0 if "upright" in disable else weights.upright * phys
    w_traj = 0.0 if "traj" in disable else weights.traj * phys

    out, cache = render_scene(scene, field, frame_index=frame_index,
                              background=background, with_cache=True,
                              precision=precision)
    fb = frames[frame_index]
    photo, g_img = loss_photometric(out.image, fb.image, fb.dynamic_mask(), mask_w,
                                    with_grad=grads is not None)
    if grads is not None:
        render_backward(scene, field, cache, weights.photo * g_img, grads)

    sten = _stencil(len(scene.frame_times), frame_index)
    times = scene.frame_times[sten]
    sup = upr = traj = 0.0
    if "support" not in disable:
        vals = [loss_support(scene, float(t), fi, grads, w_sup / len(sten))
                for fi, t in zip(sten, times)]
        sup = float(np.mean(vals)) if vals else 0.0
    if "upright" not in disable:
        vals = [loss_upright(scene, float(t), grads, w_upr / len(sten))
                for t in times]
        upr = float(np.mean(vals)) if vals else 0.0
    if "traj" not in disable:
        traj = loss_traj(scene, times, grads, w_traj)

    total = (weights.photo * photo + w_sup * sup + w_upr * upr + w_traj * traj)
    terms = {"photo": photo, "support": sup, "upright": upr, "traj": traj,
             "w_mask": mask_w, "w_sup": w_sup, "w_upr": w_upr, "w_traj": w_traj,
             "render": out}
    return total, terms


# ---------------------------------------------------------------------------
# parameters and Adam


class ParamSet:
    """Named learnable arrays with per-group learning rates.

    Camera residuals are rebound onto one stacked (F, 6) array so they
    can be updated as a single group; every other entry aliases the
    scene/field storage directly.
    """

    def __init__(self, scene, field, lrs):
        self.lrs = lrs
        cam_res = np.stack([c.pose_residual for c in scene.cameras])
        for i, cam in enumerate(scene.cameras):
            cam.pose_residual = cam_res[i]
        self.entries = []
        g = scene.static_gaussians
        self._add("static.means", g.means)
        self._add("static.log_scales", g.log_scales)
        self._add("static.quats", g.quats)
        self._add("static.opacity_logits", g.opacity_logits)
        for obj in scene.objects:
            key = f"object.{obj.id}"
            self._add(key + ".means", obj.gaussians.means)
            self._add(key + ".log_scales", obj.gaussians.log_scales)
            self._add(key + ".quats", obj.gaussians.quats)
            self._add(key + ".opacity_logits", obj.gaussians.opacity_logits)
            self._add(key + ".trajectory", obj.trajectory.twists)
            self._add(key + ".residuals", obj.residuals)
            self._add(key + ".embedding", obj.embedding)
        for name, arr in field.param_items():
            self._add(name, arr)
        self._add("camera.residuals", cam_res)

    def _lr_for(self, name):
        lrs = self.lrs
        if name.endswith(".means"):
            return lrs["means"]
        if name.endswith(".log_scales"):
            return lrs["log_scales"]
        if name.endswith(".quats"):
            return lrs["quats"]
        if name.endswith(".opacity_logits"):
            return lrs["opacity"]
        if name.startswith("appearance.") or name.endswith(".embedding"):
            return lrs["appearance"]
        if name.endswith(".trajectory") or name.endswith(".residuals"):
            return lrs["twists"]
        if name == "camera.residuals":
            return lrs["camera"]
        raise KeyError(f"no learning-rate group for {name}")

    def _add(self, name, arr):
        self.entries.append((name, arr, self._lr_for(name), name.endswith(".quats")))

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr, _, _ in self.entries}


class AdamState:
    def __init__(self, params):
        self.m = {name: np.zeros_like(arr) for name, arr, _, _ in params.entries}
        self.v = {name: np.zeros_like(arr) for name, arr, _, _ in params.entries}
        self.step = 0
        self.skipped = 0


def adam_step(params, grads, state, beta1=0.9, beta2=0.999, eps=1e-15):
    """One Adam update over every group; quaternions renormalized after.

    Groups with non-finite gradients are skipped for the step and the
    skip counter incremented.
    """
    state.step += 1
    t = state.step
    b1c = 1.0 - beta1 ** t
    b2c = 1.0 - beta2 ** t
    for name, arr, lr, is_quat in params.entries:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        arr -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
        if is_quat and arr.size and np.any(g != 0.0):
            arr /= np.linalg.norm(arr, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iters: int = 30000
    seed: int = 0
    lr_means: float = 1.6e-4
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_appearance: float = 1e-2
    lr_twists: float = 1e-3
    lr_camera: float = 1e-4
    w_photo: float = 1.0
    w_support: float = 0.05
    w_upright: float = 0.1
    w_traj: float = 0.02
    ramp_start: int = 7000
    ramp_end: int = 15000
    mask_weight_max: float = 1.3
    physics_decay: float = 0.5
    disable_support: bool = False
    disable_upright: bool = False
    disable_traj: bool = False
    disable_mask_weight: bool = False
    holdout_every: int = 5
    val_every: int = 500
    checkpoint_every: int = 5000
    background: float = 0.0
    precision: str = "single"  # tile rasterization dtype during training

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key: {key}")
            cur = getattr(cls(), key)
            if isinstance(cur, bool):
                val = str(raw).strip().lower() in ("1", "true", "yes", "on") \
                    if not isinstance(raw, bool) else raw
            elif isinstance(cur, int):
                val = int(raw)
            elif isinstance(cur, str):
                val = str(raw).strip()
            else:
                val = float(raw)
            kwargs[key] = val
        return cls(**kwargs)

    def lrs(self):
        return {"means": self.lr_means, "log_scales": self.lr_log_scales,
                "quats": self.lr_quats, "opacity": self.lr_opacity,
                "appearance": self.lr_appearance, "twists": self.lr_twists,
                "camera": self.lr_camera}

    def weights(self):
        return LossWeights(self.w_photo, self.w_support, self.w_upright, self.w_traj)

    def schedule(self):
        return Schedule(self.iters, self.ramp_start, self.ramp_end,
                        self.mask_weight_max, self.physics_decay)

    def disabled(self):
        out = []
        if self.disable_support:
            out.append("support")
        if self.disable_upright:
            out.append("upright")
        if self.disable_traj:
            out.append("traj")
        if self.disable_mask_weight:
            out.append("mask_weight")
        return out


def split_frames(n_frames, holdout_every=5):
    """(train, val) frame indices: every holdout_every-th frame held out."""
    val = [i for i in range(n_frames) if (i + 1) % holdout_every == 0]
    train = [i for i in range(n_frames) if (i + 1) % holdout_every != 0]
    return train, val


def _fmt(x):
    return f"{x:.9g}"


def train(scene, field, frames, config, on_checkpoint=None):
    """Run the optimization; returns the per-iteration log lines.

    The scene and field are updated in place.  Frames are sampled
    round-robin over the training split; every val_every iterations the
    log line carries PSNR on a rotating held-out frame.
    """
    from .metrics import psnr

    weights = config.weights()
    schedule = config.schedule()
    disable = tuple(config.disabled())
    params = ParamSet(scene, field, config.lrs())
    state = AdamState(params)
    train_idx, val_idx = split_frames(len(frames), config.holdout_every)
    if not train_idx:
        raise ValueError("no training frames")
    bg = np.full(3, config.background)
    log = []
    for i in range(config.iters):
        fi = train_idx[i % len(train_idx)]
        grads = params.zero_grads()
        total, terms = total_loss(scene, field, frames, fi, weights, schedule, i,
                                  grads=grads, disable=disable, background=bg,
                                  precision=config.precision)
        if not np.isfinite(total):
            dump = {k: v for k, v in terms.items() if k != "render"}
            raise NumericalAbort(f"non-finite loss at iteration {i}", dump)
        adam_step(params, grads, state)
        line = (f"iter={i} total={_fmt(total)} photo={_fmt(terms['photo'])} "
                f"sup={_fmt(terms['support'])} upr={_fmt(terms['upright'])} "
                f"traj={_fmt(terms['traj'])} w_mask={_fmt(terms['w_mask'])} "
                f"w_sup={_fmt(terms['w_sup'])} w_upr={_fmt(terms['w_upr'])} "
                f"w_traj={_fmt(terms['w_traj'])} skipped={state.skipped}")
        if val_idx and config.val_every > 0 and i % config.val_every == 0:
            vi = val_idx[(i // config.val_every) % len(val_idx)]
            out = render_scene(scene, field, frame_index=vi, background=bg,
                               precision=config.precision)
            line += f" val_frame={vi} val_psnr={_fmt(psnr(out.image, frames[vi].image))}"
        log.append(line)
        if on_checkpoint and config.checkpoint_every > 0 \
                and (i + 1) % config.checkpoint_every == 0:
            on_checkpoint(i + 1, scene, field, log)
    return log
