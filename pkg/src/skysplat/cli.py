"""Command-line pipeline: synth / lift / train / render / eval.

    skysplat synth  --spec spec.txt --out frames/
    skysplat lift   --frames frames/ --out scene.txt
    skysplat train  --frames frames/ --scene scene.txt --out run/
    skysplat render --scene run/scene_final.txt --appearance run/appearance_final.bin \
                    --out renders/ [--frames 4,9,14 | --fixed-view 0]
    skysplat eval   --renders renders/ --gt frames/

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical abort.  Every
subcommand accepts --seed; runs with equal inputs and seed are
byte-identical.
"""

import argparse
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="skysplat", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic frame-bundle directory")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--image-size", type=int, default=None,
                    help="override the spec's square image size")

    lp = sub.add_parser("lift", help="initialize a scene from frame bundles")
    lp.add_argument("--frames", required=True)
    lp.add_argument("--out", required=True)
    lp.add_argument("--seed", type=int, default=0)
    lp.add_argument("--pixel-stride", type=int, default=2)
    lp.add_argument("--motion-threshold", type=float, default=3.0)

    tp = sub.add_parser("train", help="optimize a scene against its frames")
    tp.add_argument("--frames", required=True)
    tp.add_argument("--scene", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--iters", type=int, default=None)
    tp.add_argument("--seed", type=int, default=None)
    for switch in ("disable_support", "disable_upright", "disable_traj",
                   "disable_mask_weight"):
        tp.add_argument(f"--{switch}", action="store_true")

    rp = sub.add_parser("render", help="render frames from a trained scene")
    rp.add_argument("--scene", required=True)
    rp.add_argument("--appearance", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--frames", default="all",
                    help="'all' or comma-separated frame indices")
    rp.add_argument("--fixed-view", type=int, default=None,
                    help="render every timestamp from this frame's camera")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--background", type=float, default=0.0)

    ep = sub.add_parser("eval", help="PSNR/SSIM/Dyn-PSNR table against ground truth")
    ep.add_argument("--renders", required=True)
    ep.add_argument("--gt", required=True)
    ep.add_argument("--out", default=None)
    ep.add_argument("--seed", type=int, default=0)
    return p


def cmd_synth(args):
    from .sceneio import parse_synth_spec, save_frames, save_scene
    from .synthgen import generate, ground_truth_scene

    spec = parse_synth_spec(args.spec)
    if args.image_size is not None:
        spec.image_size = (args.image_size, args.image_size)
    frames, gt = generate(spec, seed=args.seed)
    out = Path(args.out)
    save_frames(out, frames)
    save_scene(out / "ground_truth.scene", ground_truth_scene(gt))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_lift(args):
    from .lift import initialize_scene
    from .sceneio import load_frames, save_scene

    frames = load_frames(args.frames)
    scene = initialize_scene(frames, pixel_stride=args.pixel_stride,
                             motion_threshold=args.motion_threshold,
                             seed=args.seed)
    save_scene(args.out, scene)
    print(f"wrote scene with {len(scene.static_gaussians)} static gaussians, "
          f"{len(scene.objects)} objects to {args.out}")
    return 0


def cmd_train(args):
    from .appearance import AppearanceField
    from .optim import TrainConfig, train
    from .sceneio import (load_frames, load_scene, parse_keyvalues,
                          save_appearance, save_scene)

    mapping = parse_keyvalues(args.config) if args.config else {}
    config = TrainConfig.from_mapping(mapping)
    if args.iters is not None:
        config.iters = args.iters
    if args.seed is not None:
        config.seed = args.seed
    for switch in ("disable_support", "disable_upright", "disable_traj",
                   "disable_mask_weight"):
        if getattr(args, switch):
            setattr(config, switch, True)
    frames = load_frames(args.frames)
    scene = load_scene(args.scene)
    field = AppearanceField(seed=config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_checkpoint(iteration, scene_, field_, log_):
        save_scene(out / f"scene_{iteration:06d}.txt", scene_)
        save_appearance(out / f"appearance_{iteration:06d}.bin", field_)
        (out / "train.log").write_text("\n".join(log_) + "\n")

    log = train(scene, field, frames, config, on_checkpoint=on_checkpoint)
    save_scene(out / "scene_final.txt", scene)
    save_appearance(out / "appearance_final.bin", field)
    (out / "train.log").write_text("\n".join(log) + "\n")
    print(f"trained {config.iters} iterations; artifacts in {out}")
    return 0


def cmd_render(args):
    from .render import render_scene
    from .sceneio import load_appearance, load_scene, save_f32, save_png

    scene = load_scene(args.scene)
    field = load_appearance(args.appearance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.frames == "all":
        indices = list(range(len(scene.cameras)))
    else:
        indices = [int(s) for s in args.frames.split(",") if s]
    bg = np.full(3, args.background)
    for i in indices:
        camera = scene.cameras[args.fixed_view] if args.fixed_view is not None \
            else scene.cameras[i]
        res = render_scene(scene, field, frame_index=i, camera=camera,
                           background=bg)
        save_png(out / f"{i:04d}.png", res.image)
        save_f32(out / f"{i:04d}.rgb.f32", res.image)
    print(f"rendered {len(indices)} frames to {out}")
    return 0


def _load_image_any(dirpath, stem, height=None, width=None):
    from .sceneio import load_f32, load_png

    f32 = dirpath / f"{stem}.rgb.f32"
    png = dirpath / f"{stem}.png"
    if f32.exists():
        if height is None:
            im = load_png(png)
            height, width = im.shape[:2]
        return load_f32(f32, height, width)
    return load_png(png)


def cmd_eval(args):
    from .metrics import dyn_psnr, psnr, ssim
    from .sceneio import load_mask_png

    rdir, gdir = Path(args.renders), Path(args.gt)
    stems = sorted(p.name[:4] for p in rdir.glob("[0-9][0-9][0-9][0-9].png"))
    if not stems:
        print(f"no rendered frames in {rdir}", file=sys.stderr)
        return 2
    rows = []
    for stem in stems:
        ren = _load_image_any(rdir, stem)
        gt = _load_image_any(gdir, stem, *ren.shape[:2])
        mask_path = gdir / f"{stem}.mask.png"
        mask = load_mask_png(mask_path) > 0 if mask_path.exists() else None
        p = psnr(ren, gt)
        s = ssim(ren, gt)
        d = dyn_psnr(ren, gt, mask) if mask is not None and mask.any() else np.nan
        rows.append((stem, p, s, d))
    lines = [f"{'frame':>5} {'PSNR':>10} {'SSIM':>8} {'Dyn-PSNR':>10}"]
    for stem, p, s, d in rows:
        lines.append(f"{stem:>5} {p:>10.4f} {s:>8.5f} {d:>10.4f}")
    ps = [r[1] for r in rows]
    ss = [r[2] for r in rows]
    ds = [r[3] for r in rows if np.isfinite(r[3])]
    lines.append(f"{'mean':>5} {np.mean(ps):>10.4f} {np.mean(ss):>8.5f} "
                 f"{(np.mean(ds) if ds else float('nan')):>10.4f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    from .optim import NumericalAbort
    from .sceneio import FileFormatError

    handlers = {"synth": cmd_synth, "lift": cmd_lift, "train": cmd_train,
                "render": cmd_render, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NumericalAbort as e:
        print(f"numerical abort: {e}; dump: {e.dump}", file=sys.stderr)
        return 3
    except (FileFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
