"""Command-line entry point: ``drksplat {fit,render,convert,metrics,gradcheck,evalsort}``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .errors import DrkError
from .geometry import Camera
from .kernel import KernelConfig, activate
from .optimize import DENSITY_PRESETS, TrainConfig, init_random, psnr, ssim
from .raster import SORT_EVAL_MODES, eval_sorting, render

IMAGE_SUFFIXES = (".png", ".ppm")
GRADCHECK_TOL = 1e-2


class StageError(Exception):
    def __init__(self, stage, path, cause):
        self.stage, self.path, self.cause = stage, path, cause
        where = f" [{path}]" if path else ""
        super().__init__(f"{stage} failed{where}: {type(cause).__name__}: {cause}")


@contextlib.contextmanager
def stage(name, path=None):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # annotate anything with where it happened
        raise StageError(name, path, exc) from exc


def _rgb(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r,g,b floats, got '{text}'") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("background needs three comma-separated values")
    return tuple(vals)


def _positive(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _is_image(path) -> bool:
    return Path(path).suffix.lower() in IMAGE_SUFFIXES


def _front_camera(width, height):
    f = float(max(width, height))
    return Camera(f, f, width / 2, height / 2, width, height)


def _load_views(source, split, background):
    """(views, background, camera-list, names) from an image or a manifest."""
    if _is_image(source):
        bg = background or io.WHITE
        with stage("read image", source):
            img = io.read_image(source, bg)
        cam = _front_camera(img.shape[1], img.shape[0])
        return [(img, cam)], bg, [Path(source).stem], True
    with stage("load manifest", source):
        ds = io.load_dataset(source, split=split, background=background)
    views = []
    for fr in ds.frames:
        with stage("read image", fr.image_path):
            views.append((io.read_image(fr.image_path, ds.background), fr.camera))
    return views, ds.background, [fr.image_path.stem for fr in ds.frames], False


def _write_csv(path, header, rows):
    text = ",".join(header) + "\n" + "".join(",".join(str(v) for v in r) + "\n" for r in rows)
    with stage("write csv", path):
        Path(path).write_text(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args):
    from .optimize import _sh_degree, train
    from .synthetic import image_fit_config, planar_init

    views, bg, _, single = _load_views(args.dataset, args.split, args.background)
    rng = np.random.default_rng(args.seed)
    kcfg = KernelConfig(K=args.K)
    sh_degree = args.sh_degree if args.sh_degree is not None else (0 if single else 3)
    with stage("initialise", args.init_scene):
        if args.init_scene:
            raw = io.load_scene(args.init_scene, expect_K=args.K)
        elif single:
            img, cam = views[0]
            half = 0.45 * max(img.shape[:2]) / cam.fx
            raw = planar_init(args.primitives, rng, K=args.K, half=half, target=img, cam=cam)
        else:
            raw = init_random(args.primitives, args.bbox[:3], args.bbox[3:], rng, K=args.K,
                              sh_degree=sh_degree)
    sched = {k: v for k, v in (("densify_start_step", args.densify_from),
                               ("densify_stop_step", args.densify_until),
                               ("densify_interval", args.densify_every)) if v is not None}
    if single:
        cfg = image_fit_config(args.steps, args.seed, args.density,
                               densify=args.densify_from is not None, background=bg, **sched)
    else:
        g, o = DENSITY_PRESETS[args.density]
        cfg = TrainConfig(steps=args.steps, seed=args.seed, densify_grad_threshold=g,
                          prune_opacity_threshold=o, background=bg, max_sh_degree=sh_degree,
                          **sched)
    t0 = time.perf_counter()

    def checkpoint(step, _value, current):
        if args.checkpoint_every and step % args.checkpoint_every == 0 and step < cfg.steps:
            path = f"{args.out_scene}.step{step}"
            with stage("save checkpoint", path):
                io.save_scene(current, path)

    with stage("fit", args.dataset):
        raw, tlog = train(views, raw, cfg, kcfg, callback=checkpoint)
    final_deg = _sh_degree(cfg, cfg.steps, raw)
    raw.sh = raw.sh[:, :(final_deg + 1) ** 2].copy()
    with stage("save scene", args.out_scene):
        io.save_scene(raw, args.out_scene)
    if args.log:
        with stage("write log", args.log):
            Path(args.log).write_text(tlog.as_csv())
    if args.report:
        from .plotting import training_curves
        rep = Path(args.report)
        with stage("write report", rep):
            rep.mkdir(parents=True, exist_ok=True)
            (rep / "train_log.csv").write_text(tlog.as_csv())
            training_curves(tlog.rows, rep / "training.png", title=f"density={args.density}")
    print("metric,value")
    print(f"final_psnr,{tlog.final_psnr:.9f}")
    print(f"primitives,{len(raw)}")
    print(f"seconds,{time.perf_counter() - t0:.2f}")
    return 0


def _camera_from_json(path):
    with stage("read camera", path):
        d = json.loads(Path(path).read_text())
        return Camera(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                      np.asarray(d.get("rotation", np.eye(3).tolist())),
                      np.asarray(d.get("translation", [0.0, 0.0, 0.0])))


def cmd_render(args, parser):
    from .plotting import depth_to_rgb, normal_to_rgb

    sources = [s for s in (args.manifest, args.image, args.camera) if s is not None]
    if len(sources) != 1:
        parser.error("render needs exactly one of --manifest, --image, --camera")
    with stage("load scene", args.scene):
        raw = io.load_scene(args.scene)
    if args.camera:
        cams = [_camera_from_json(args.camera)]
        names, targets, bg = [Path(args.camera).stem], [None], args.background or io.BLACK
    else:
        views, bg, names, _ = _load_views(args.manifest or args.image, args.split, args.background)
        cams = [c for _, c in views]
        targets = [img for img, _ in views]
    out = Path(args.out_dir)
    with stage("create output directory", out):
        out.mkdir(parents=True, exist_ok=True)
    prims = activate(raw)
    kcfg = KernelConfig(K=raw.K)
    rows = []
    for name, cam, tgt in zip(names, cams, targets):
        with stage("render", name):
            fb = render(prims, cam, kcfg, background=bg)
        with stage("write image", out / f"{name}.png"):
            io.write_image(out / f"{name}.png", fb.color)
            if args.depth:
                d = np.where(fb.alpha > 1e-6, fb.depth / np.maximum(fb.alpha, 1e-12), 0.0)
                io.write_image(out / f"{name}_depth.png", depth_to_rgb(d, fb.alpha))
            if args.normal:
                io.write_image(out / f"{name}_normal.png", normal_to_rgb(fb.normal))
        if tgt is not None:
            rows.append((name, f"{psnr(fb.color, tgt):.9f}"))
    if rows:
        print("view,psnr")
        for r in rows:
            print(",".join(r))
        print(f"mean,{np.mean([float(r[1]) for r in rows]):.9f}")
    else:
        print(f"wrote {len(cams)} image(s) to {out}")
    return 0


def cmd_convert(args):
    from .mesh2drk import convert, load_mesh, shade_lambert

    with stage("load mesh", args.obj):
        mesh = load_mesh(args.obj)
    t0 = time.perf_counter()
    with stage("convert", args.obj):
        raw = convert(mesh, K=args.K)
        if args.shade is not None:
            raw = shade_lambert(raw, args.shade[:3], args.shade[3])
    dt = time.perf_counter() - t0
    with stage("save scene", args.out_scene):
        io.save_scene(raw, args.out_scene)
    if args.preview:
        v = np.asarray(mesh.vertices)
        centre = 0.5 * (v.min(axis=0) + v.max(axis=0))
        radius = max(np.linalg.norm(v - centre, axis=1).max(), 1e-6)
        eye = centre + radius * np.array([1.6, -1.2, 2.0])
        up = np.array([0.0, -1.0, 0.0])
        cam = Camera.look_at(eye, centre, up, args.size * 1.2, args.size * 1.2, args.size, args.size)
        with stage("render preview", args.preview):
            fb = render(activate(raw), cam, KernelConfig(K=args.K), background=io.WHITE)
            io.write_image(args.preview, fb.color)
    print("metric,value")
    print(f"faces,{len(mesh.faces)}")
    print(f"primitives,{len(raw)}")
    print(f"seconds,{dt:.4f}")
    return 0


def _images_in(folder):
    return {p.stem: p for p in sorted(Path(folder).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def cmd_metrics(args):
    for d in (args.rendered_dir, args.target_dir):
        if not Path(d).is_dir():
            raise StageError("list images", d, NotADirectoryError("not a directory"))
    rendered, targets = _images_in(args.rendered_dir), _images_in(args.target_dir)
    names = [n for n in rendered if n in targets]
    if not names:
        raise StageError("match images", args.rendered_dir,
                         FileNotFoundError("no file names shared with the target directory"))
    rows = []
    for n in names:
        with stage("compare", rendered[n]):
            a = io.read_image(rendered[n], args.background or io.BLACK)
            b = io.read_image(targets[n], args.background or io.BLACK)
            rows.append((n, psnr(a, b), ssim(a, b)))
    table = [(n, f"{p:.6f}", f"{s:.6f}") for n, p, s in rows]
    table.append(("mean", f"{np.mean([r[1] for r in rows]):.6f}",
                  f"{np.mean([r[2] for r in rows]):.6f}"))
    print("image,psnr,ssim")
    for r in table:
        print(",".join(r))
    if args.csv:
        _write_csv(args.csv, ("image", "psnr", "ssim"), table)
    if args.figure:
        from .plotting import metric_bars
        with stage("write figure", args.figure):
            metric_bars(names, [r[1] for r in rows], [r[2] for r in rows], args.figure)
    return 0


def cmd_gradcheck(args):
    from .grad import PARAM_CLASSES, finite_diff_check
    from .synthetic import gradcheck_scene

    print("seed," + ",".join(PARAM_CLASSES) + ",checked,masked")
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        raw, cam = gradcheck_scene(seed, n=args.primitives, size=args.size)
        with stage("gradient check", f"seed {seed}"):
            rep = finite_diff_check(raw, cam, seed=seed)
        worst = max([worst] + [rep[k] for k in PARAM_CLASSES])
        print(f"{seed}," + ",".join(f"{rep[k]:.3e}" for k in PARAM_CLASSES)
              + f",{rep['checked']},{rep['masked']}")
    if worst >= args.tol:
        print(f"drksplat gradcheck: max relative error {worst:.3e} exceeds {args.tol:g}",
              file=sys.stderr)
        return 1
    return 0


def sorting_table(seeds, n, size, first_seed=0):
    from .synthetic import sorting_scene

    acc = {m: [] for m in SORT_EVAL_MODES}
    for seed in range(first_seed, first_seed + seeds):
        raw, cam = sorting_scene(seed, n=n, size=size)
        prims = activate(raw)
        for m in SORT_EVAL_MODES:
            acc[m].append(eval_sorting(prims, cam, m))
    return {m: tuple(np.mean(v, axis=0)) for m, v in acc.items()}


def cmd_evalsort(args):
    with stage("evaluate sorting"):
        table = sorting_table(args.seeds, args.primitives, args.size, args.seed)
    rows = [(m, f"{a:.6f}", f"{t:.6f}", f"{e:.6e}") for m, (a, t, e) in table.items()]
    print("mode,accuracy,kendall_tau,mae")
    for r in rows:
        print(",".join(r))
    if args.csv:
        _write_csv(args.csv, ("mode", "accuracy", "kendall_tau", "mae"), rows)
    if args.figure:
        from .plotting import sorting_table as plot_table
        with stage("write figure", args.figure):
            plot_table(table, args.figure)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drksplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="optimise primitives against posed images or a single image")
    f.add_argument("dataset", help="transforms manifest (file or directory) or one PNG/PPM image")
    f.add_argument("out_scene")
    f.add_argument("--density", choices=sorted(DENSITY_PRESETS), default="default")
    f.add_argument("--steps", type=_positive, default=3000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--primitives", type=_positive, default=100, help="initial primitive count")
    f.add_argument("--init-scene", help="start from a saved scene instead of random primitives")
    f.add_argument("--K", type=int, default=8)
    f.add_argument("--sh-degree", type=int, choices=range(4))
    f.add_argument("--background", type=_rgb)
    f.add_argument("--split", default="train")
    f.add_argument("--bbox", type=float, nargs=6, default=[-1.5, -1.5, -1.5, 1.5, 1.5, 1.5],
                   metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    f.add_argument("--densify-from", type=int)
    f.add_argument("--densify-until", type=int)
    f.add_argument("--densify-every", type=_positive)
    f.add_argument("--checkpoint-every", type=_positive, metavar="N",
                   help="also save the scene every N steps next to OUT_SCENE")
    f.add_argument("--log", help="write the per-step log as CSV")
    f.add_argument("--report", help="directory for the log CSV and training figure")

    r = sub.add_parser("render", help="render a saved scene")
    r.add_argument("scene")
    r.add_argument("out_dir")
    r.add_argument("--manifest")
    r.add_argument("--image", help="render through the frontal camera of a fitted image")
    r.add_argument("--camera", help="JSON with fx, fy, cx, cy, width, height, rotation, translation")
    r.add_argument("--split", default="train")
    r.add_argument("--background", type=_rgb)
    r.add_argument("--depth", action="store_true")
    r.add_argument("--normal", action="store_true")

    c = sub.add_parser("convert", help="convert an OBJ mesh to primitives without training")
    c.add_argument("obj")
    c.add_argument("out_scene")
    c.add_argument("--shade", type=float, nargs=4, metavar=("LX", "LY", "LZ", "AMBIENT"))
    c.add_argument("--K", type=int, default=8)
    c.add_argument("--preview", help="also render a preview PNG")
    c.add_argument("--size", type=_positive, default=256)

    m = sub.add_parser("metrics", help="PSNR/SSIM between two image folders")
    m.add_argument("rendered_dir")
    m.add_argument("target_dir")
    m.add_argument("--background", type=_rgb)
    m.add_argument("--csv")
    m.add_argument("--figure")

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--seeds", type=_positive, default=1)
    g.add_argument("--primitives", type=_positive, default=3)
    g.add_argument("--size", type=_positive, default=8)
    g.add_argument("--tol", type=float, default=GRADCHECK_TOL)

    e = sub.add_parser("evalsort", help="blend-order quality per sorting mode")
    e.add_argument("--seeds", type=_positive, default=20)
    e.add_argument("--seed", type=int, default=0, help="first seed")
    e.add_argument("--primitives", type=_positive, default=60)
    e.add_argument("--size", type=_positive, default=64)
    e.add_argument("--csv")
    e.add_argument("--figure")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "K", 8) < 3:
        parser.print_usage(sys.stderr)
        print("drksplat: error: --K must be at least 3", file=sys.stderr)
        return 2
    try:
        if args.command == "render":
            return cmd_render(args, parser)
        return {"fit": cmd_fit, "convert": cmd_convert, "metrics": cmd_metrics,
                "gradcheck": cmd_gradcheck, "evalsort": cmd_evalsort}[args.command](args)
    except SystemExit as exc:  # parser.error inside a subcommand
        return int(exc.code or 0)
    except StageError as exc:
        print(f"drksplat {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DrkError, OSError, ValueError) as exc:
        print(f"drksplat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
