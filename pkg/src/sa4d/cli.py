"""Command-line entry point.

Exit codes: 0 on success, 2 for usage/data errors, 3 for numerical failures.
Every command writes a run manifest next to its primary output so a run can
be reproduced from its seeds and configuration alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import editing, report, synth
from .deformation import MotionError, export_scene
from .editing import EditScript, EditScriptError, render_anything_mask
from .evaluation import evaluate
from .field import CheckpointError, FieldNumericalError, load_checkpoint, save_checkpoint
from .images import write_mask_pgm, write_pgm16, write_ppm
from .losses import LossConfig, LossDataError
from .pipeline import (IdentityTable, PipelineError, RefinementConfig, build_table,
                       classify_gaussians, lookup, prune_boundary, remove_outliers,
                       train)
from .scene import SceneError
from .splatting import compute_plan

USAGE_ERRORS = (SceneError, MotionError, LossDataError, EditScriptError,
                CheckpointError, FileNotFoundError, PipelineError, ValueError,
                KeyError, json.JSONDecodeError)


def _write_manifest(path, command: str, args: dict):
    config = {k: v for k, v in args.items()
              if k not in ("func", "command") and not callable(v)}
    manifest = {"command": command, "config": config,
                "threads": _thread_cap(args.get("threads"))}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)


def _thread_cap(flag_value):
    if flag_value:
        return int(flag_value)
    env = os.environ.get("SA4D_THREADS")
    return int(env) if env else 1


def cmd_gen_scene(args):
    noise = synth.NoiseModel(void_dropout=args.void_dropout,
                             boundary_flip=args.boundary_flip,
                             wrong_id=args.wrong_id, seed=args.seed)
    spec = synth.SceneSpec(object_count=args.objects,
                           gaussians_per_object=args.gaussians_per_object,
                           drift_cohort=args.drift_cohort,
                           drift_time=args.drift_time,
                           drift_blend=args.drift_blend,
                           frame_count=args.frames, image_size=args.size,
                           seed=args.seed, noise=noise)
    ds = synth.generate_scene(spec)
    out = Path(args.out)
    synth.save_dataset(out, ds)
    _write_manifest(out / "run_manifest.json", "gen-scene", vars(args))
    print(f"wrote dataset to {out} (seed {args.seed})")
    return 0


def cmd_train(args):
    ds = synth.load_dataset(args.data)
    cfg = LossConfig(lambda_2d=args.lambda_2d, lambda_3d=args.lambda_3d,
                     k=args.k, sample_count=args.samples)
    result = train(ds.canonical, ds.motion, ds.frames, cfg=cfg,
                   iterations=args.iters, seed=args.seed, lr=args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, result.state)
    trace_path = out.with_suffix(".trace.csv")
    report.write_loss_trace(trace_path, result.trace)
    report.plot_loss_trace(out.with_suffix(".loss.png"), result.trace)
    _write_manifest(out.with_suffix(".manifest.json"), "train", vars(args))
    if len(result.trace):
        print(f"final loss {result.trace[-1, 3]:.6f} after {args.iters} iterations")
    print(f"checkpoint written to {out}")
    return 0


def cmd_refine(args):
    ds = synth.load_dataset(args.data)
    params, _ = load_checkpoint(args.ckpt)
    cfg = RefinementConfig(stride=args.interval, lambda_proj=args.lambda_proj,
                           k_out=args.k_out, sigma_mult=args.sigma_mult,
                           invert_prune_sign=args.invert_prune_sign)
    table = build_table(params, ds.canonical, ds.motion, ds.frames, cfg)
    table.save(args.out)
    _write_manifest(Path(args.out).with_suffix(".manifest.json"), "refine", vars(args))
    print(f"refinement took {table.meta['build_seconds']:.3f} s "
          f"over {len(table.timestamps)} timestamps (interval {args.interval})")
    return 0


def cmd_render(args):
    ds = synth.load_dataset(args.data)
    cam = ds.cameras[args.camera]
    deformed = export_scene(ds.canonical, ds.motion, args.t)
    plan = compute_plan(deformed, cam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rgb = plan.apply(np.array([g.color for g in deformed.gaussians]))
    write_ppm(f"{out}.ppm", rgb)
    wrote = [f"{out}.ppm"]
    if args.table:
        table = IdentityTable.load(args.table)
        ids, _ = render_anything_mask(deformed, table, cam, args.t)
        write_pgm16(f"{out}.ids.pgm", ids)
        write_ppm(f"{out}.ids.ppm", editing.colorize_ids(ids))
        wrote += [f"{out}.ids.pgm", f"{out}.ids.ppm"]
    if args.object is not None:
        if not args.table:
            raise EditScriptError("--object requires --table")
        table = IdentityTable.load(args.table)
        members = lookup(table, args.t, args.object)
        payload = np.zeros((len(deformed), 1))
        payload[sorted(members), 0] = 1.0
        write_mask_pgm(f"{out}.obj{args.object}.pgm", plan.apply(payload)[:, :, 0])
        wrote.append(f"{out}.obj{args.object}.pgm")
    print("wrote " + ", ".join(wrote))
    return 0


def cmd_segment(args):
    ds = synth.load_dataset(args.data)
    params, _ = load_checkpoint(args.ckpt)
    labels = classify_gaussians(params, ds.canonical, args.t)
    for oid in range(1, ds.canonical.object_count + 1):
        print(f"object {oid}: {int(np.sum(labels == oid))} gaussians")
    print(f"void/other: {int(np.sum((labels == 0) | (labels > ds.canonical.object_count)))}")
    return 0


def cmd_edit(args):
    ds = synth.load_dataset(args.data)
    table = IdentityTable.load(args.table)
    if args.script:
        script = EditScript.load(args.script)
    else:
        edits = []
        for oid in args.remove or []:
            edits.append(editing.Edit(op="remove", object_id=oid))
        for spec_str in args.recolor or []:
            oid, rgb = spec_str.split(":")
            edits.append(editing.Edit(op="recolor", object_id=int(oid),
                                      rgb=np.array([float(v) for v in rgb.split(",")])))
        for spec_str in args.copy or []:
            oid, vec = spec_str.split(":")
            edits.append(editing.Edit(op="copy", object_id=int(oid),
                                      translation=np.array([float(v) for v in vec.split(",")])))
        script = EditScript(edits=tuple(edits))
    edited = editing.apply_edits(ds.canonical, ds.motion, table, script, args.t)
    plan = compute_plan(edited, ds.cameras[args.camera])
    rgb = plan.apply(np.array([g.color for g in edited.gaussians]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, rgb)
    print(f"wrote {out} ({len(edited.gaussians)} gaussians after edits)")
    return 0


def cmd_eval(args):
    ds = synth.load_dataset(args.data)
    table = IdentityTable.load(args.table)
    cam = ds.train_camera
    preds, gts = [], []
    for fr, gt in zip(ds.frames, ds.gt_masks):
        deformed = export_scene(ds.canonical, ds.motion, fr.timestamp)
        plan = compute_plan(deformed, cam)
        masks = editing.object_mask_values(deformed, table, cam, fr.timestamp, plan=plan)
        preds.append(masks)
        gts.append(gt)
    rep = evaluate(preds, gts, threshold=args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    report.write_metrics_csv(out.with_suffix(".csv"), rep)
    report.plot_metrics(out.with_suffix(".png"), rep)
    _write_manifest(out.with_suffix(".manifest.json"), "eval", vars(args))
    print(f"mIoU {rep.mean_iou:.4f}  mAcc {rep.mean_acc:.4f}")
    return 0


def cmd_bench(args):
    ds = synth.load_dataset(args.data)
    params, _ = load_checkpoint(args.ckpt)
    table = IdentityTable.load(args.table)
    cam = ds.train_camera
    cfg = RefinementConfig(lambda_proj=table.meta.get("lambda_proj", 1.0),
                           k_out=int(table.meta.get("k_out", 10)),
                           sigma_mult=table.meta.get("sigma_mult", 2.0))
    frames = ds.frames

    # geometry prep is shared by both paths and excluded from the comparison
    plans = []
    for fr in frames:
        deformed = export_scene(ds.canonical, ds.motion, fr.timestamp)
        plans.append((fr, deformed, compute_plan(deformed, cam)))

    t0 = time.perf_counter()
    lookup_masks = []
    for fr, deformed, plan in plans:
        ids, _ = render_anything_mask(deformed, table, cam, fr.timestamp, plan=plan)
        lookup_masks.append(ids)
    lookup_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    recompute_masks = []
    for fr, deformed, plan in plans:
        labels = classify_gaussians(params, ds.canonical, fr.timestamp)
        positions = deformed.positions()
        entry = {}
        for oid in range(1, ds.canonical.object_count + 1):
            raw = frozenset(np.nonzero(labels == oid)[0].tolist())
            refined = remove_outliers(raw, positions, cfg)
            entry[oid] = prune_boundary(refined, deformed, fr, oid, cfg, plan=plan)
        tmp = IdentityTable(timestamps=[fr.timestamp], entries=[entry])
        ids, _ = render_anything_mask(deformed, tmp, cam, fr.timestamp, plan=plan)
        recompute_masks.append(ids)
    recompute_s = time.perf_counter() - t0

    identical = all(np.array_equal(a, b) for a, b in zip(lookup_masks, recompute_masks))
    rows = [
        {"path": "table-lookup", "frames": len(frames), "seconds": lookup_s,
         "fps": len(frames) / lookup_s},
        {"path": "recompute", "frames": len(frames), "seconds": recompute_s,
         "fps": len(frames) / recompute_s},
    ]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump({"rows": rows, "identical_at_training_timestamps": identical,
                   "speedup": recompute_s / lookup_s}, fh, indent=2)
    report.write_bench_csv(out.with_suffix(".csv"), rows)
    report.plot_bench(out.with_suffix(".png"), rows)
    print(f"table-lookup {rows[0]['fps']:.2f} fps, recompute {rows[1]['fps']:.2f} fps, "
          f"speedup {recompute_s / lookup_s:.2f}x, identical={identical}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sa4d")
    p.add_argument("--threads", type=int, default=None,
                   help="worker pool cap (SA4D_THREADS as fallback)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    g.add_argument("--objects", type=int, default=2)
    g.add_argument("--gaussians-per-object", type=int, default=200)
    g.add_argument("--drift-cohort", type=int, default=0)
    g.add_argument("--drift-time", type=float, default=0.5)
    g.add_argument("--drift-blend", type=float, default=0.0)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--void-dropout", type=float, default=0.0)
    g.add_argument("--boundary-flip", type=float, default=0.0)
    g.add_argument("--wrong-id", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train the identity field")
    t.add_argument("--data", required=True)
    t.add_argument("--iters", type=int, default=5000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--lambda-2d", type=float, default=1.0)
    t.add_argument("--lambda-3d", type=float, default=2.0)
    t.add_argument("--k", type=int, default=5)
    t.add_argument("--samples", type=int, default=1000)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="build the Gaussian identity table")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--interval", type=int, default=1)
    r.add_argument("--lambda-proj", type=float, default=1.0)
    r.add_argument("--k-out", type=int, default=10)
    r.add_argument("--sigma-mult", type=float, default=2.0)
    r.add_argument("--invert-prune-sign", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_refine)

    rn = sub.add_parser("render", help="render color / anything-mask images")
    rn.add_argument("--data", required=True)
    rn.add_argument("--t", type=float, required=True)
    rn.add_argument("--table", default=None)
    rn.add_argument("--object", type=int, default=None)
    rn.add_argument("--camera", type=int, default=0)
    rn.add_argument("--out", required=True)
    rn.set_defaults(func=cmd_render)

    s = sub.add_parser("segment", help="per-object gaussian counts at a timestamp")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--t", type=float, required=True)
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("edit", help="apply an edit script and render the result")
    e.add_argument("--data", required=True)
    e.add_argument("--table", required=True)
    e.add_argument("--t", type=float, required=True)
    e.add_argument("--script", default=None)
    e.add_argument("--remove", type=int, action="append")
    e.add_argument("--recolor", action="append", metavar="ID:R,G,B")
    e.add_argument("--copy", action="append", metavar="ID:DX,DY,DZ")
    e.add_argument("--camera", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_edit)

    ev = sub.add_parser("eval", help="mIoU/mAcc of table-based masks vs clean GT")
    ev.add_argument("--data", required=True)
    ev.add_argument("--table", required=True)
    ev.add_argument("--threshold", type=float, default=0.1)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="table-lookup vs recompute throughput")
    b.add_argument("--data", required=True)
    b.add_argument("--ckpt", required=True)
    b.add_argument("--table", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FieldNumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
