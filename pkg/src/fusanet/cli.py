"""Command line entry points.

Subcommands: synth, keypoints, loss, gbr, train, eval, gradcheck.  Every
subcommand takes --seed and --config; outputs default into a timestamped
run directory unless --out is given.  Exit codes: 0 success, 1 usage error,
2 numerical failure.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import fileio, losses, metrics, synth, train
from . import tensor as T
from .config import RunConfig
from .model import FuSaNet
from .saliency import GuidingPointSet, detect_keypoints

USAGE_ERROR, NUMERIC_ERROR = 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_ERROR)


def _run_dir(given, command):
    if given:
        os.makedirs(given, exist_ok=True)
        return given
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = f"runs/{command}-{stamp}-{os.getpid()}"
    os.makedirs(path, exist_ok=False)
    return path


def _load_config(args):
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = RunConfig.from_json(f.read())
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _scene_spec(cfg):
    return synth.SceneSpec(
        n_planes=cfg.data.n_planes,
        n_spheres=cfg.data.n_spheres,
        n_boxes=cfg.data.n_boxes,
        depth_range=(cfg.data.depth_min, cfg.data.depth_max),
    )


def cmd_synth(args):
    cfg = _load_config(args)
    out = _run_dir(args.out, "synth")
    spec = _scene_spec(cfg)
    for i in range(args.n):
        scene = synth.generate(cfg.seed * 100003 + i, cfg.data.height, cfg.data.width, spec)
        fileio.scene_save(out, scene, f"scene_{i:04d}")
    print(f"wrote {args.n} scenes to {out}")
    return 0


def cmd_keypoints(args):
    img, _ = fileio.pfm_read(args.image)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    kps = detect_keypoints(img)
    out = args.out or "keypoints.csv"
    lines = ["row,col,scale,response"]
    for kp in kps:
        lines.append(f"{kp.row:.6g},{kp.col:.6g},{kp.scale:.6g},{kp.response:.9g}")
    fileio._atomic_write(out, ("\n".join(lines) + "\n").encode())
    print(f"{len(kps)} keypoints -> {out}")
    return 0


def cmd_loss(args):
    cfg = _load_config(args)
    pred, pvalid = fileio.depth_read(args.pred)
    gt, gvalid = fileio.depth_read(args.gt)
    valid = pvalid & gvalid
    points = fileio.points_read(args.points) if args.points else GuidingPointSet.empty()
    weights = cfg.loss
    preds = [T.Tensor(pred.reshape((1, 1) + pred.shape))]
    for _ in range(weights.n_scales - 1):
        preds.append(T.downsample2x_avg(preds[-1]))
    report = losses.loss_total(preds, gt, None, points, weights,
                               epoch=args.epoch, valid=valid)
    text = "\n".join(report.to_lines())
    print(text)
    if args.out:
        fileio._atomic_write(args.out, (text + "\n").encode())
    return 0


def cmd_gbr(args):
    depth, valid = fileio.depth_read(args.input)
    if args.a == 0:
        print("error: --a 0 flattens the scene", file=sys.stderr)
        return USAGE_ERROR
    out = synth.gbr_transform(depth, args.a, args.b, args.c, args.e)
    fileio.depth_write(args.out, out, valid)
    print(f"wrote {args.out}")
    return 0


def _emit_history_csv(path, history):
    keys = ["epoch", "lr", "seconds", "l_total"]
    extra = sorted(k for k in history[0] if k not in keys)
    cols = keys + extra
    lines = [",".join(cols)]
    for rec in history:
        lines.append(",".join(f"{rec.get(k, 0):.10g}" for k in cols))
    fileio._atomic_write(path, ("\n".join(lines) + "\n").encode())


def cmd_train(args):
    cfg = _load_config(args)
    out = _run_dir(args.out, "train")
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    spec = _scene_spec(cfg)
    scenes = [synth.generate(cfg.seed * 100003 + i, cfg.data.height, cfg.data.width, spec)
              for i in range(cfg.data.n_train)]
    print(f"training on {len(scenes)} scenes for {cfg.train.epochs} epochs")
    try:
        net, state, history = train.train(
            scenes, cfg,
            log=lambda r: print(f"epoch {r['epoch']:3d} lr {r['lr']:.3e} "
                                f"loss {r['l_total']:.4f} ({r['seconds']:.0f}s)", flush=True),
        )
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(cfg.to_json())
    _emit_history_csv(os.path.join(out, "loss_log.csv"), history)
    fileio.checkpoint_save(os.path.join(out, "checkpoint.ckpt"), state)
    print(f"run artifacts in {out}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out = _run_dir(args.out, "eval")
    state = fileio.checkpoint_load(args.checkpoint, cfg.digest() if args.config else None)
    net = FuSaNet(cfg.model, np.random.default_rng([cfg.seed, 0x1157]))
    train.load_into(net, state)
    spec = _scene_spec(cfg)
    rows = []
    for i in range(args.n):
        scene = synth.generate(cfg.seed * 900007 + i, cfg.data.height, cfg.data.width, spec)
        rgb_t = T.Tensor(scene.rgb.transpose(2, 0, 1)[None])
        with T.no_grad():
            res = net.two_pass(rgb_t, GuidingPointSet.empty())
        pred = res["final"]["depths"][0].data[0, 0]
        conf = res["final"]["confs"][0].data[0, 0]
        rows.append(metrics.evaluate(pred, scene.depth, cap=args.cap, valid=scene.valid))
        stem = os.path.join(out, f"eval_{i:04d}")
        fileio.pfm_write(f"{stem}.pred.pfm", pred)
        fileio.pfm_write(f"{stem}.conf.pfm", conf)
        if res["saliency_map"] is not None:
            fileio.pfm_write(f"{stem}.saliency.pfm", res["saliency_map"].data[0, 0])
    lines = [metrics.MetricReport.csv_header()]
    lines += [r.csv_row() for r in rows]
    fileio._atomic_write(os.path.join(out, "metrics.csv"), ("\n".join(lines) + "\n").encode())
    mean_rmse = float(np.mean([r.rmse for r in rows]))
    mean_d1 = float(np.mean([r.delta1 for r in rows]))
    print(f"eval over {args.n} scenes: rmse {mean_rmse:.4f} delta1 {mean_d1:.4f} -> {out}")
    return 0


def cmd_gradcheck(args):
    from . import filters, nconv
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    failures = []

    def check(name, f, x, tol=1e-3):
        rep = T.gradcheck(f, T.Tensor(x), tol=tol)
        status = "pass" if rep.passed else "FAIL"
        print(f"{name:24s} {status}  max rel err {rep.max_rel_error:.3e}")
        if not rep.passed:
            failures.append(name)

    gt = T.Tensor(rng.uniform(1.0, 3.0, (12, 12)))
    bank = filters.build_bank(0.7)
    check("loss_hessian", lambda x: losses.loss_hessian(x, gt, bank), gt.data + 0.3 * rng.standard_normal((12, 12)))
    pts = GuidingPointSet.from_arrays([2, 7, 9], [3, 4, 10], [1.5, 2.5, 2.0])
    check("loss_sparse", lambda x: losses.loss_sparse(x, gt, pts), gt.data + 0.2 * rng.standard_normal((12, 12)))
    check("loss_log", lambda x: losses.loss_log(x, gt), gt.data + 0.2 + 0.1 * rng.standard_normal((12, 12)))
    check("loss_grad", lambda x: losses.loss_grad(x, gt), gt.data + 0.3 * rng.uniform(0.5, 1.0, (12, 12)))
    check("loss_normal", lambda x: losses.loss_normal(x, gt), gt.data + 0.2 * rng.standard_normal((12, 12)))
    conf = T.Tensor(rng.uniform(0.1, 0.9, (12, 12)))
    check("loss_confidence",
          lambda x: losses.loss_confidence(conf, x, gt, 2), gt.data + 0.25 * rng.standard_normal((12, 12)))
    layer = nconv.NConv2d(2, 3, 3, rng)
    cmap = T.Tensor(rng.uniform(0.2, 0.9, (1, 1, 8, 8)))
    check("nconv_forward",
          lambda x: nconv.nconv_forward(x, cmap, layer)[0].rms(),
          rng.standard_normal((1, 2, 8, 8)))
    w = T.Tensor(0.4 * rng.standard_normal((2, 2, 3, 3)))
    check("conv2d", lambda x: T.conv2d(x, w, padding=1).rms(), rng.standard_normal((1, 2, 8, 8)))
    check("resample-down", lambda x: T.downsample2x_avg(x).rms(), rng.standard_normal((1, 1, 8, 8)))
    check("resample-up", lambda x: T.upsample2x_bilinear(x).rms(), rng.standard_normal((1, 1, 8, 8)))
    check("hessian_field", lambda x: filters.hessian_field(x, bank).rms(), rng.standard_normal((12, 12)))
    check("surface_normals", lambda x: filters.surface_normals(x).rms(), 2.0 + 0.3 * rng.standard_normal((10, 10)))
    if failures:
        print(f"gradcheck failures: {', '.join(failures)}")
        return NUMERIC_ERROR
    print("all gradchecks passed")
    return 0


def build_parser():
    parser = _Parser(prog="fusanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    common(p)
    p.add_argument("--n", type=int, default=4)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("keypoints", help="detect keypoints in a PFM image")
    common(p)
    p.add_argument("--image", required=True)
    p.set_defaults(fn=cmd_keypoints)

    p = sub.add_parser("loss", help="loss report for a prediction/target pair")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--points", default=None)
    p.add_argument("--epoch", type=int, default=1)
    p.set_defaults(fn=cmd_loss)

    p = sub.add_parser("gbr", help="apply a depth scaling/shear transform")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--e", type=float, default=0.0)
    p.set_defaults(fn=cmd_gbr, out_required=True)

    p = sub.add_parser("train", help="train on built-in synthetic scenes")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on synthetic scenes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--cap", type=float, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the numerical gradient suite")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    if getattr(args, "out_required", False) and not args.out:
        print("error: --out is required for this command", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
