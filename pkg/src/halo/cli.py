"""Command-line entry points.

Every subcommand draws all randomness from --seed, echoes its resolved
configuration next to the outputs, and exits with:
  0 success, 2 parse/input errors, 3 configuration mismatch, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from . import diffcore as dc
from . import occupancy as oc
from . import training as tr
from .canonicalization import _canonicalize, canonicalization_transforms
from .capsule import capsule_oracle
from .errors import HaloError
from .grasp import object_from_json, refine_translation, translate_skeleton
from .skeleton import (Skeleton, load_skeleton_csv, load_skeleton_json,
                       save_skeleton_json)
from .surface import grid_for_bounds, marching_cubes, iou, save_obj

EXIT_PARSE = 2
EXIT_MISMATCH = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_skeleton(path) -> Skeleton:
    try:
        if str(path).endswith(".csv"):
            return load_skeleton_csv(path)
        return load_skeleton_json(path)
    except FileNotFoundError:
        raise CliError(f"skeleton file not found: {path}", EXIT_PARSE)
    except (json.JSONDecodeError, KeyError, ValueError, HaloError) as e:
        raise CliError(f"cannot parse skeleton {path}: {e}", EXIT_PARSE)


def _load_model(path) -> oc.HandOccupancyModel:
    try:
        return oc.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}", EXIT_PARSE)
    except (ValueError, json.JSONDecodeError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}", EXIT_PARSE)


def _echo_config(args, path):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    try:
        with open(path, "w") as f:
            json.dump(cfg, f, indent=1, default=str)
    except OSError as e:
        raise CliError(f"cannot write config echo {path}: {e}", EXIT_IO)


def _occupancy_field(model, skeleton):
    res = _canonicalize(np.asarray(skeleton.joints))
    mats, pose_flat, d16 = oc.hand_inputs(res, model.cfg.reference_point)
    hand = tr._HandData(R=mats[:, :3, :3].copy(), t=mats[:, :3, 3].copy(),
                        pose_flat=pose_flat, d16=d16, points=None,
                        labels=None, surf_points=None, skin_weights=None)
    return lambda p: tr.predict_occupancy(model, hand, p)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_canonicalize(args):
    s = _load_skeleton(args.skel)
    transforms, angles = canonicalization_transforms(s)
    out = {
        "flexion": angles.flexion.tolist(),
        "abduction": angles.abduction.tolist(),
        "spread": angles.spread.tolist(),
        "plane": angles.plane.tolist(),
        "inv": np.asarray(transforms.inv).tolist(),
        "fwd": np.asarray(transforms.fwd).tolist(),
    }
    text = json.dumps(out, indent=1)
    if args.out:
        try:
            with open(args.out, "w") as f:
                f.write(text)
        except OSError as e:
            raise CliError(f"cannot write {args.out}: {e}", EXIT_IO)
    else:
        print(text)
    return 0


def cmd_surface(args):
    s = _load_skeleton(args.skel)
    model = _load_model(args.ckpt)
    field = _occupancy_field(model, s)
    lo = s.joints.min(axis=0)
    hi = s.joints.max(axis=0)
    grid = grid_for_bounds(lo, hi, margin=args.margin,
                           resolution=args.resolution)
    mesh = marching_cubes(field, grid)
    part_ids = None
    if args.color_parts:
        from .occupancy import part_occupancies
        vals = part_occupancies(model, s, mesh.vertices)
        part_ids = np.argmax(vals, axis=0)
    try:
        save_obj(mesh, args.out, part_of_vertex=part_ids)
        _echo_config(args, str(args.out) + ".config.json")
    except OSError as e:
        raise CliError(f"cannot write {args.out}: {e}", EXIT_IO)
    print(f"wrote {args.out}: {len(mesh.vertices)} vertices, "
          f"{len(mesh.faces)} faces")
    if args.oracle:
        oracle = capsule_oracle(s)
        rng = np.random.default_rng(args.seed)
        blo, bhi = oracle.bbox(10.0)
        pts = rng.uniform(blo, bhi, size=(args.iou_points, 3))
        score = iou(field(pts) > 0.5, oracle.contains(pts))
        print(f"iou_vs_oracle {score:.4f}")
    return 0


def cmd_gen_corpus(args):
    if args.poses <= 0:
        raise CliError("--poses must be positive", EXIT_PARSE)
    rng = np.random.default_rng(args.seed)
    samples = tr.generate_corpus(args.poses, args.shapes,
                                 args.points_per_pose, rng, sigma=args.sigma)
    try:
        tr.save_corpus(samples, args.out)
        _echo_config(args, f"{args.out}/config.json")
    except OSError as e:
        raise CliError(f"cannot write corpus to {args.out}: {e}", EXIT_IO)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _train_config(args) -> tr.TrainConfig:
    base = {}
    if args.config:
        try:
            with open(args.config) as f:
                base = json.load(f)
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}", EXIT_PARSE)
        except json.JSONDecodeError as e:
            raise CliError(f"cannot parse config {args.config}: {e}", EXIT_PARSE)
    for name in ("steps", "lr", "batch_hands", "stop_at_iou"):
        v = getattr(args, name)
        if v is not None:
            base[name] = v
    known = {f.name for f in dataclasses.fields(tr.TrainConfig)}
    bad = set(base) - known
    if bad:
        raise CliError(f"unknown TrainConfig fields: {sorted(bad)}", EXIT_MISMATCH)
    try:
        return tr.TrainConfig(**base)
    except ValueError as e:
        raise CliError(f"invalid training config: {e}", EXIT_MISMATCH)


def cmd_train(args):
    try:
        corpus = tr.load_corpus(args.corpus)
    except FileNotFoundError:
        raise CliError(f"corpus not found: {args.corpus}", EXIT_PARSE)
    cfg = _train_config(args)
    if args.mode not in oc.MODES:
        raise CliError(f"unknown mode {args.mode}", EXIT_MISMATCH)
    model = oc.init_model(oc.OccupancyConfig(mode=args.mode, width=args.width),
                          seed=args.seed)
    rng = np.random.default_rng(args.seed)
    model, log = tr.train(model, corpus, cfg, rng)
    try:
        oc.save_checkpoint(model, args.out)
        _echo_config(args, str(args.out) + ".config.json")
        with open(str(args.out) + ".log.json", "w") as f:
            json.dump(log, f)
    except OSError as e:
        raise CliError(f"cannot write {args.out}: {e}", EXIT_IO)
    evals = [e for e in log if "val_iou" in e]
    last = evals[-1]["val_iou"] if evals else float("nan")
    print(f"trained {len(log)} steps, final val_iou {last:.4f}, "
          f"saved {args.out}")
    return 0


def cmd_eval(args):
    try:
        corpus = tr.load_corpus(args.corpus)
    except FileNotFoundError:
        raise CliError(f"corpus not found: {args.corpus}", EXIT_PARSE)
    rows = []
    rng = np.random.default_rng(args.seed)
    if args.oracle:
        rows.append(("ORACLE", 1.0, 0.0, 1.0))
    for path in args.ckpt or []:
        model = _load_model(path)
        if args.mode != "all" and model.cfg.mode != args.mode:
            raise CliError(
                f"checkpoint {path} has mode {model.cfg.mode}, "
                f"requested {args.mode}", EXIT_MISMATCH)
        score = tr.evaluate_iou(model, corpus, max_points=args.max_points)
        cham, norm = _mesh_metrics(model, corpus[:args.mesh_samples], rng)
        rows.append((model.cfg.mode, score, cham, norm))
    writer = csv.writer(open(args.out, "w", newline="")
                        if args.out else sys.stdout)
    writer.writerow(["mode", "iou", "chamfer_mm", "normal_consistency"])
    for r in rows:
        writer.writerow([r[0], f"{r[1]:.4f}", f"{r[2]:.4f}", f"{r[3]:.4f}"])
    return 0


def _mesh_metrics(model, samples, rng, resolution=64):
    from .surface import chamfer_l1, normal_consistency
    chams, norms = [], []
    for s in samples:
        oracle = capsule_oracle(s.skeleton, s.radii)
        lo, hi = oracle.bbox()
        grid = grid_for_bounds(lo, hi, margin=5.0, resolution=resolution)
        field = _occupancy_field(model, s.skeleton)
        try:
            pred_mesh = marching_cubes(field, grid)
        except HaloError:
            continue
        gt_mesh = marching_cubes(lambda p: 0.5 - oracle.sdf(p), grid)
        seed = int(rng.integers(2 ** 63))
        chams.append(chamfer_l1(pred_mesh, gt_mesh, n=4000,
                                rng=np.random.default_rng(seed)))
        norms.append(normal_consistency(pred_mesh, gt_mesh, n=4000,
                                        rng=np.random.default_rng(seed)))
    if not chams:
        return float("nan"), float("nan")
    return float(np.mean(chams)), float(np.mean(norms))


def cmd_refine(args):
    s = _load_skeleton(args.skel)
    model = _load_model(args.model)
    try:
        obj = object_from_json(args.object)
    except FileNotFoundError:
        raise CliError(f"object file not found: {args.object}", EXIT_PARSE)
    except (json.JSONDecodeError, KeyError, HaloError) as e:
        raise CliError(f"cannot parse object {args.object}: {e}", EXIT_PARSE)
    rng = np.random.default_rng(args.seed)
    t, trace = refine_translation(model, s, obj, steps=args.steps, rng=rng)
    refined = translate_skeleton(s, t)
    try:
        save_skeleton_json(refined, args.out_skel)
        if args.trace:
            with open(args.trace, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["step", "loss"])
                for i, v in enumerate(trace):
                    w.writerow([i, f"{v:.6f}"])
    except OSError as e:
        raise CliError(f"cannot write outputs: {e}", EXIT_IO)
    print(f"translation_mm {t[0]:.3f} {t[1]:.3f} {t[2]:.3f} "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return 0


def cmd_gradcheck(args):
    s = _load_skeleton(args.skel)
    rng = np.random.default_rng(args.seed)
    w = rng.normal(size=(20, 4, 4))

    def canon_scalar(flat):
        res = _canonicalize(dc.reshape(flat, (21, 3)))
        return dc.sum_(res.inv * w) if isinstance(res.inv, dc.Var) \
            else float(np.sum(res.inv * w))
    err = dc.finite_diff_check(canon_scalar, s.joints.ravel().copy())
    print(f"canonicalization_grad_max_rel_err {err:.3e}")
    worst = err
    if args.ckpt:
        model = _load_model(args.ckpt)
        pts = rng.uniform(s.joints.min(0) - 20, s.joints.max(0) + 20, (32, 3))

        def occ_scalar(flat):
            vals = oc.query_occupancy(model, dc.reshape(flat, (21, 3)), pts)
            return dc.mean_(vals) if isinstance(vals, dc.Var) \
                else float(np.mean(vals))
        err2 = dc.finite_diff_check(occ_scalar, s.joints.ravel().copy())
        print(f"occupancy_grad_max_rel_err {err2:.3e}")
        worst = max(worst, err2)
    ok = worst < args.tolerance
    print("gradcheck", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_noise_sweep(args):
    s = _load_skeleton(args.skel)
    model = _load_model(args.ckpt)
    rng = np.random.default_rng(args.seed)
    amplitudes = [float(a) for a in args.amplitudes.split(",")]
    clean_field = _occupancy_field(model, s)
    lo = s.joints.min(axis=0) - 20.0
    hi = s.joints.max(axis=0) + 20.0
    pts = rng.uniform(lo, hi, size=(args.points, 3))
    clean = clean_field(pts) > 0.5
    rows = []
    for amp in amplitudes:
        scores = []
        for _ in range(args.trials):
            noise = rng.uniform(-amp, amp, size=(21, 3))
            noisy = Skeleton(joints=s.joints + noise)
            noisy_field = _occupancy_field(model, noisy)
            scores.append(iou(noisy_field(pts) > 0.5, clean))
        rows.append((amp, float(np.mean(scores))))
    writer = csv.writer(open(args.out, "w", newline="")
                        if args.out else sys.stdout)
    writer.writerow(["amplitude_mm", "mean_iou_vs_clean"])
    for amp, score in rows:
        writer.writerow([f"{amp:g}", f"{score:.4f}"])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="halo",
                                description="hand occupancy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("canonicalize", cmd_canonicalize,
             help="extract transforms and angles from a skeleton")
    sp.add_argument("--skel", required=True)
    sp.add_argument("--out")

    sp = add("surface", cmd_surface, help="extract an occupancy isosurface")
    sp.add_argument("--skel", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--margin", type=float, default=10.0)
    sp.add_argument("--color-parts", action="store_true")
    sp.add_argument("--oracle", action="store_true",
                    help="print IoU against the default capsule oracle")
    sp.add_argument("--iou-points", type=int, default=20000)

    sp = add("gen-corpus", cmd_gen_corpus, help="generate a capsule corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--poses", type=int, required=True)
    sp.add_argument("--shapes", type=int, default=5)
    sp.add_argument("--points-per-pose", type=int, default=20000)
    sp.add_argument("--sigma", type=float, default=5.0)

    sp = add("train", cmd_train, help="train an occupancy model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", default=oc.HALO_FULL)
    sp.add_argument("--width", type=int, default=40)
    sp.add_argument("--config", help="JSON file with TrainConfig fields")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-hands", type=int, dest="batch_hands")
    sp.add_argument("--stop-at-iou", type=float, dest="stop_at_iou")

    sp = add("eval", cmd_eval, help="evaluate checkpoints on a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ckpt", action="append")
    sp.add_argument("--mode", default="all")
    sp.add_argument("--oracle", action="store_true",
                    help="include the analytic oracle as a row")
    sp.add_argument("--out")
    sp.add_argument("--max-points", type=int, default=20000)
    sp.add_argument("--mesh-samples", type=int, default=3)

    sp = add("refine", cmd_refine, help="translation refinement of a grasp")
    sp.add_argument("--model", required=True)
    sp.add_argument("--skel", required=True)
    sp.add_argument("--object", required=True)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--out-skel", required=True)
    sp.add_argument("--trace")

    sp = add("gradcheck", cmd_gradcheck, help="finite-difference gradient check")
    sp.add_argument("--skel", required=True)
    sp.add_argument("--ckpt")
    sp.add_argument("--tolerance", type=float, default=1e-4)

    sp = add("noise-sweep", cmd_noise_sweep,
             help="IoU degradation under keypoint noise")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--skel", required=True)
    sp.add_argument("--amplitudes", default="0,2,5")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--points", type=int, default=20000)
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on parse errors already
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except HaloError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
