"""File formats: scene files, frame-bundle directories, configs, checkpoints.

Scene file (versioned text, floats printed with %.17g so they round-trip
float64 exactly):

    skysplat-scene 1
    gravity gx gy gz
    ground nx ny nz offset
    bounds xmin ymin zmin xmax ymax zmax
    frame_times t0 t1 ...
    static N
    <N lines: mx my mz sx sy sz qw qx qy qz logit>
    object ID CLASS W L H
    embedding e0 ... e7
    keyframes K
    <K lines: t wx wy wz vx vy vz>
    residuals K
    <K lines: t wx wy wz vx vy vz>
    gaussians M
    <M lines as static>
    camera FRAME fx fy cx cy WIDTH HEIGHT
    pose wx wy wz vx vy vz          (exp of the twist = world->camera)
    pose_rt r00 ... r22 tx ty tz    (fallback when the twist form is singular)
    residual wx wy wz vx vy vz

Frame-bundle directory, one frame per index NNNN:

    NNNN.png        8-bit RGB image
    NNNN.rgb.f32    float32 planar dump (3 planes of H*W, row-major, LE)
    NNNN.depth.f32  float32 depth, row-major, meters
    NNNN.mask.png   16-bit instance ids, 0 = background
    NNNN.cam.txt    K row-major; pose (twist or pose_rt); residual; size; time
    tracks.txt      id frame x y geometric_depth
    classes.txt     instance-id class-name (optional)

Appearance checkpoint: little-endian binary, magic "SKYSPLAF", version,
integer header (lmax, n_frequencies, hidden, embed_dim, n_levels,
n_features, table_size, per-level resolutions and entry counts), then the
arrays as float64 in a fixed order (tables by level, w0, b0, w1, b1, w2,
b2, static embedding).

Config files are `key = value` lines with # comments; repeated keys form
lists (used by the synth spec for vehicles and id swaps).
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .appearance import AppearanceField, HashGridEncoding
from .liealg import RigidTransform, TwistSpline, se3_exp, se3_log, so3_log
from .lift import FrameBundle
from .scene import Camera, DynamicObject, GaussianSet, GroundPlane, Scene
from .synthgen import CameraPath, SynthSpec, VehicleSpec

SCENE_MAGIC = "skysplat-scene"
SCENE_VERSION = 1
CKPT_MAGIC = b"SKYSPLAF"
CKPT_VERSION = 1


class FileFormatError(ValueError):
    """Malformed input file; message carries path and line number."""


def _fmt(x):
    return f"{float(x):.17g}"


def _fmt_vec(v):
    return " ".join(_fmt(x) for x in np.asarray(v).ravel())


# ---------------------------------------------------------------------------
# images


def save_png(path, image):
    """8-bit RGB PNG from a float image in [0, 1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)

def load_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0


def save_f32(path, image):
    """Planar float32 dump: channel planes of row-major H*W, little-endian."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 3:
        arr = np.moveaxis(arr, 2, 0)
    Path(path).write_bytes(arr.tobytes())


def load_f32(path, height, width, channels=3):
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if channels == 1:
        return raw.reshape(height, width).astype(float)
    return np.moveaxis(raw.reshape(channels, height, width), 0, 2).astype(float)


def save_mask_png(path, mask):
    Image.fromarray(np.asarray(mask, dtype=np.uint16)).save(path)


def load_mask_png(path):
    return np.asarray(Image.open(path), dtype=np.int64)


# ---------------------------------------------------------------------------
# scene files


def _gaussian_lines(gs):
    out = []
    for i in range(len(gs)):
        out.append(" ".join([_fmt_vec(gs.means[i]), _fmt_vec(gs.log_scales[i]),
                             _fmt_vec(gs.quats[i]), _fmt(gs.opacity_logits[i])]))
    return out


def _pose_lines(pose):
    angle = np.linalg.norm(so3_log(pose.rotation))
    if angle < np.pi - 1e-3:
        return ["pose " + _fmt_vec(se3_log(pose))]
    return ["pose_rt " + _fmt_vec(pose.rotation) + " " + _fmt_vec(pose.translation)]


def save_scene(path, scene):
    lines = [f"{SCENE_MAGIC} {SCENE_VERSION}",
             "gravity " + _fmt_vec(scene.gravity),
             "ground " + _fmt_vec(scene.ground.normal) + " " + _fmt(scene.ground.offset),
             "bounds " + _fmt_vec(scene.bounds),
             "frame_times " + _fmt_vec(scene.frame_times),
             f"static {len(scene.static_gaussians)}"]
    lines += _gaussian_lines(scene.static_gaussians)
    for obj in scene.objects:
        w, l, h = obj.dims
        lines.append(f"object {obj.id} {obj.class_name} {_fmt(w)} {_fmt(l)} {_fmt(h)}")
        lines.append("embedding " + _fmt_vec(obj.embedding))
        lines.append(f"keyframes {len(obj.trajectory.times)}")
        for t, xi in zip(obj.trajectory.times, obj.trajectory.twists):
            lines.append(_fmt(t) + " " + _fmt_vec(xi))
        lines.append(f"residuals {len(obj.residuals)}")
        for t, xi in zip(obj.trajectory.times, obj.residuals):
            lines.append(_fmt(t) + " " + _fmt_vec(xi))
        lines.append(f"gaussians {len(obj.gaussians)}")
        lines += _gaussian_lines(obj.gaussians)
    for i, cam in enumerate(scene.cameras):
        K = cam.K
        lines.append(f"camera {i} {_fmt(K[0, 0])} {_fmt(K[1, 1])} "
                     f"{_fmt(K[0, 2])} {_fmt(K[1, 2])} {cam.width} {cam.height}")
        lines += _pose_lines(cam.pose)
        lines.append("residual " + _fmt_vec(cam.pose_residual))
    Path(path).write_text("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, path):
        self.path = str(path)
        self.lines = Path(path).read_text().splitlines()
        self.i = 0

    def error(self, msg):
        raise FileFormatError(f"{self.path}:{self.i}: {msg}")

    def peek(self):
        return self.lines[self.i] if self.i < len(self.lines) else None

    def next(self, expect=None):
        if self.i >= len(self.lines):
            self.error("unexpected end of file"
                       + (f" (expected {expect})" if expect else ""))
        line = self.lines[self.i]
        self.i += 1
        return line

    def floats(self, line, n, what):
        parts = line.split()
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            self.error(f"bad number in {what}")
        if len(vals) != n:
            self.error(f"expected {n} numbers for {what}, got {len(vals)}")
        return np.array(vals)

    def keyed(self, key, n):
        line = self.next(key)
        if not line.startswith(key + " "):
            self.error(f"expected '{key}'")
        return self.floats(line[len(key) + 1:], n, key)


def _read_gaussians(r, n):
    means = np.zeros((n, 3))
    log_scales = np.zeros((n, 3))
    quats = np.zeros((n, 4))
    logits = np.zeros(n)
    for i in range(n):
        vals = r.floats(r.next("gaussian record"), 11, "gaussian record")
        means[i] = vals[:3]
        log_scales[i] = vals[3:6]
        quats[i] = vals[6:10]
        logits[i] = vals[10]
    return GaussianSet(means, log_scales, quats, logits)


def _read_pose(r):
    line = r.next("pose")
    if line.startswith("pose_rt "):
        vals = r.floats(line[8:], 12, "pose_rt")
        return RigidTransform(vals[:9].reshape(3, 3), vals[9:])
    if line.startswith("pose "):
        return se3_exp(r.floats(line[5:], 6, "pose"))
    r.error("expected 'pose' or 'pose_rt'")


def load_scene(path):
    r = _Reader(path)
    header = r.next("header").split()
    if len(header) != 2 or header[0] != SCENE_MAGIC:
        r.error(f"not a scene file (expected '{SCENE_MAGIC} <version>')")
    if int(header[1]) != SCENE_VERSION:
        r.error(f"unsupported scene version {header[1]}")
    gravity = r.keyed("gravity", 3)
    gvals = r.keyed("ground", 4)
    bounds = r.keyed("bounds", 6).reshape(2, 3)
    ft_line = r.next("frame_times")
    if not ft_line.startswith("frame_times"):
        r.error("expected 'frame_times'")
    frame_times = np.array([float(p) for p in ft_line.split()[1:]])
    sline = r.next("static").split()
    if sline[0] != "static":
        r.error("expected 'static'")
    statics = _read_gaussians(r, int(sline[1]))
    objects = []
    cameras = []
    while r.peek() is not None:
        line = r.next()
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "object":
            oid = int(parts[1])
            cname = parts[2]
            dims = tuple(float(p) for p in parts[3:6])
            emb = r.keyed("embedding", 8)
            kline = r.next("keyframes").split()
            if kline[0] != "keyframes":
                r.error("expected 'keyframes'")
            k = int(kline[1])
            times = np.zeros(k)
            twists = np.zeros((k, 6))
            for i in range(k):
                vals = r.floats(r.next("keyframe"), 7, "keyframe")
                times[i] = vals[0]
                twists[i] = vals[1:]
            rline = r.next("residuals").split()
            if rline[0] != "residuals":
                r.error("expected 'residuals'")
            res = np.zeros((int(rline[1]), 6))
            for i in range(int(rline[1])):
                vals = r.floats(r.next("residual keyframe"), 7, "residual keyframe")
                res[i] = vals[1:]
            gline = r.next("gaussians").split()
            if gline[0] != "gaussians":
                r.error("expected 'gaussians'")
            gs = _read_gaussians(r, int(gline[1]))
            objects.append(DynamicObject(id=oid, gaussians=gs, dims=dims,
                                         trajectory=TwistSpline(times, twists),
                                         residuals=res, embedding=emb,
                                         class_name=cname))
        elif parts[0] == "camera":
            fx, fy, cx, cy = (float(p) for p in parts[2:6])
            width, height = int(parts[6]), int(parts[7])
            K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
            pose = _read_pose(r)
            res_line = r.next("residual")
            if not res_line.startswith("residual "):
                r.error("expected 'residual'")
            residual = r.floats(res_line[9:], 6, "residual")
            cameras.append(Camera(K=K, pose=pose, width=width, height=height,
                                  pose_residual=residual))
        else:
            r.error(f"unexpected record '{parts[0]}'")
    return Scene(static_gaussians=statics, objects=objects, cameras=cameras,
                 ground=GroundPlane(gvals[:3], float(gvals[3])), gravity=gravity,
                 frame_times=frame_times, bounds=bounds)


# ---------------------------------------------------------------------------
# frame bundles


def save_frames(dirpath, frames):
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    track_lines = []
    classes = {}
    for f in frames:
        stem = f"{f.index:04d}"
        save_png(d / f"{stem}.png", f.image)
        save_f32(d / f"{stem}.rgb.f32", f.image)
        save_f32(d / f"{stem}.depth.f32", f.depth)
        save_mask_png(d / f"{stem}.mask.png", f.masks)
        cam = f.camera
        lines = ["K " + _fmt_vec(cam.K),
                 *_pose_lines(cam.pose),
                 "residual " + _fmt_vec(cam.pose_residual),
                 f"size {cam.width} {cam.height}",
                 "time " + _fmt(f.time)]
        (d / f"{stem}.cam.txt").write_text("\n".join(lines) + "\n")
        for (tid, x, y, depth) in f.tracks:
            track_lines.append(f"{int(tid)} {f.index} {_fmt(x)} {_fmt(y)} {_fmt(depth)}")
        classes.update(f.classes)
    (d / "tracks.txt").write_text("\n".join(track_lines) + "\n")
    if classes:
        (d / "classes.txt").write_text(
            "\n".join(f"{k} {v}" for k, v in sorted(classes.items())) + "\n")


def load_frames(dirpath):
    d = Path(dirpath)
    cam_files = sorted(d.glob("[0-9][0-9][0-9][0-9].cam.txt"))
    if not cam_files:
        raise FileFormatError(f"{d}: no frame bundles found")
    tracks_by_frame = {}
    tracks_path = d / "tracks.txt"
    if tracks_path.exists():
        for ln, line in enumerate(tracks_path.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise FileFormatError(f"{tracks_path}:{ln}: expected 5 fields")
            tid, fidx, x, y, depth = parts
            tracks_by_frame.setdefault(int(fidx), []).append(
                [float(tid), float(x), float(y), float(depth)])
    classes = {}
    cpath = d / "classes.txt"
    if cpath.exists():
        for ln, line in enumerate(cpath.read_text().splitlines(), 1):
            parts = line.split()
            if parts:
                classes[int(parts[0])] = parts[1]
    frames = []
    for cam_file in cam_files:
        idx = int(cam_file.name[:4])
        r = _Reader(cam_file)
        K = r.keyed("K", 9).reshape(3, 3)
        pose = _read_pose(r)
        res_line = r.next("residual")
        residual = r.floats(res_line[9:], 6, "residual")
        size = r.next("size").split()
        width, height = int(size[1]), int(size[2])
        time = float(r.next("time").split()[1])
        cam = Camera(K=K, pose=pose, width=width, height=height,
                     pose_residual=residual)
        stem = cam_file.name[:4]
        image = load_png(d / f"{stem}.png")
        depth = load_f32(d / f"{stem}.depth.f32", height, width, channels=1)
        masks = load_mask_png(d / f"{stem}.mask.png")
        tr = np.array(tracks_by_frame.get(idx, []), dtype=float).reshape(-1, 4)
        frames.append(FrameBundle(index=idx, time=time, image=image, depth=depth,
                                  masks=masks, camera=cam, tracks=tr,
                                  classes=dict(classes)))
    return frames


# ---------------------------------------------------------------------------
# appearance checkpoints


def save_appearance(path, field):
    grid = field.grid
    head = struct.pack("<8sI", CKPT_MAGIC, CKPT_VERSION)
    ints = [field.lmax, field.n_frequencies, field.w0.shape[1], field.embed_dim,
            grid.n_levels, grid.n_features, grid.table_size]
    head += struct.pack(f"<{len(ints)}I", *ints)
    head += struct.pack(f"<{grid.n_levels}I", *grid.resolutions)
    head += struct.pack(f"<{grid.n_levels}I", *(len(t) for t in grid.tables))
    blobs = [t.astype("<f8").tobytes() for t in grid.tables]
    for arr in (field.w0, field.b0, field.w1, field.b1, field.w2, field.b2,
                field.static_embedding):
        blobs.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(head + b"".join(blobs))


def load_appearance(path):
    raw = Path(path).read_bytes()
    magic, version = struct.unpack_from("<8sI", raw, 0)
    if magic != CKPT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    off = 12
    lmax, n_freq, hidden, embed_dim, n_levels, n_feat, table_size = \
        struct.unpack_from("<7I", raw, off)
    off += 28
    resolutions = list(struct.unpack_from(f"<{n_levels}I", raw, off))
    off += 4 * n_levels
    counts = list(struct.unpack_from(f"<{n_levels}I", raw, off))
    off += 4 * n_levels

    grid = HashGridEncoding.__new__(HashGridEncoding)
    grid.n_levels = n_levels
    grid.n_features = n_feat
    grid.table_size = table_size
    grid.resolutions = resolutions
    grid.dense = [(res + 1) ** 3 <= table_size for res in resolutions]
    grid.tables = []
    for cnt in counts:
        n = cnt * n_feat
        grid.tables.append(np.frombuffer(raw, "<f8", n, off).reshape(cnt, n_feat).copy())
        off += 8 * n
    field = AppearanceField.__new__(AppearanceField)
    field.grid = grid
    field.lmax = lmax
    field.n_frequencies = n_freq
    field.embed_dim = embed_dim
    d_in = grid.n_levels * n_feat + (lmax + 1) ** 2 + 2 * n_freq + embed_dim
    field.d_in = d_in

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, "<f8", n, off).reshape(shape).copy()
        off += 8 * n
        return arr

    field.w0 = take((d_in, hidden))
    field.b0 = take((hidden,))
    field.w1 = take((hidden, hidden))
    field.b1 = take((hidden,))
    field.w2 = take((hidden, 3))
    field.b2 = take((3,))
    field.static_embedding = take((embed_dim,))
    if off != len(raw):
        raise FileFormatError(f"{path}: trailing bytes ({len(raw) - off})")
    return field


# ---------------------------------------------------------------------------
# key-value configs


def parse_keyvalues(path):
    """`key = value` lines; '#' starts a comment; repeated keys make lists."""
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FileFormatError(f"{path}:{ln}: expected 'key = value'")
        key, val = (s.strip() for s in body.split("=", 1))
        if key in out:
            if not isinstance(out[key], list):
                out[key] = [out[key]]
            out[key].append(val)
        else:
            out[key] = val
    return out


_SYNTH_KEYS = {"terrain_half_extent", "texture_seed", "n_frames", "fps",
               "image_size", "focal_px", "n_tracks", "brightness",
               "depth_scale", "mask_erosion_px", "id_swap", "vehicle",
               "camera_start", "camera_velocity", "camera_altitude",
               "camera_pitch_deg"}


def parse_synth_spec(path):
    """SynthSpec from a key-value file; unknown keys are rejected by name."""
    kv = parse_keyvalues(path)
    for key in kv:
        if key not in _SYNTH_KEYS:
            raise FileFormatError(f"{path}: unknown synth key: {key}")
    spec = SynthSpec()

    def single(key):
        v = kv[key]
        if isinstance(v, list):
            raise FileFormatError(f"{path}: key '{key}' given more than once")
        return v

    if "terrain_half_extent" in kv:
        spec.terrain_half_extent = float(single("terrain_half_extent"))
    if "texture_seed" in kv:
        spec.texture_seed = int(single("texture_seed"))
    if "n_frames" in kv:
        spec.n_frames = int(single("n_frames"))
    if "fps" in kv:
        spec.fps = float(single("fps"))
    if "image_size" in kv:
        parts = single("image_size").split()
        spec.image_size = (int(parts[0]), int(parts[-1]))
    if "focal_px" in kv:
        spec.focal_px = float(single("focal_px"))
    if "n_tracks" in kv:
        spec.n_tracks = int(single("n_tracks"))
    if "brightness" in kv:
        parts = single("brightness").split()
        spec.brightness = (float(parts[0]), float(parts[-1]))
    if "mask_erosion_px" in kv:
        spec.mask_erosion_px = int(single("mask_erosion_px"))
    if "depth_scale" in kv:
        val = single("depth_scale")
        if val.startswith("halves:"):
            _, left, right = val.split(":")
            spec.depth_scale = ("halves", float(left), float(right))
        else:
            spec.depth_scale = float(val)
    cam = CameraPath()
    if "camera_start" in kv:
        parts = single("camera_start").split()
        cam.start_xy = (float(parts[0]), float(parts[1]))
    if "camera_velocity" in kv:
        parts = single("camera_velocity").split()
        cam.velocity_xy = (float(parts[0]), float(parts[1]))
    if "camera_altitude" in kv:
        cam.altitude = float(single("camera_altitude"))
    if "camera_pitch_deg" in kv:
        cam.pitch_deg = float(single("camera_pitch_deg"))
    spec.camera = cam
    swaps = kv.get("id_swap", [])
    if not isinstance(swaps, list):
        swaps = [swaps]
    for s in swaps:
        f, a, b = s.split(":")
        spec.id_swaps.append((int(f), int(a), int(b)))
    vehicles = kv.get("vehicle", [])
    if not isinstance(vehicles, list):
        vehicles = [vehicles]
    for v in vehicles:
        spec.vehicles.append(_parse_vehicle(v, path))
    return spec


def _parse_vehicle(text, path):
    # e.g. "car dims 1.9 4.4 1.6 line -8 4 2.5 0 [heading 0.3]"
    parts = text.split()
    try:
        cls = parts[0]
        dims = None
        i = 1
        if parts[i] == "dims":
            dims = (float(parts[i + 1]), float(parts[i + 2]), float(parts[i + 3]))
            i += 4
        kind = parts[i]
        heading0 = 0.0
        if kind == "line":
            p0 = (float(parts[i + 1]), float(parts[i + 2]))
            vel = (float(parts[i + 3]), float(parts[i + 4]))
            i += 5
            if i < len(parts) and parts[i] == "heading":
                heading0 = float(parts[i + 1])
            path_spec = ("line", p0, vel)
        elif kind == "arc":
            path_spec = ("arc", (float(parts[i + 1]), float(parts[i + 2])),
                         float(parts[i + 3]), float(parts[i + 4]), float(parts[i + 5]))
        else:
            raise ValueError(kind)
    except (IndexError, ValueError) as e:
        raise FileFormatError(f"{path}: bad vehicle spec {text!r}") from e
    return VehicleSpec(class_name=cls, dims=dims, path=path_spec, heading0=heading0)
