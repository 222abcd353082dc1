"""Command-line surface over the kernel library.

Exit codes: 0 success, 2 malformed file or shapes, 3 degenerate input,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import crp, flosp, gradcheck, grid as gridio, losses, metrics, synth
from .errors import (
    DegenerateInput,
    FormatError,
    NumericalError,
    ShapeError,
    SpecError,
)

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_DEGENERATE = 3
EXIT_NUMERICAL = 4

GRADCHECK_TOLERANCE = 1e-5


def _parse_dims(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise SpecError(f"dims must be DX,DY,DZ, got {text!r}")
    return tuple(int(p) for p in parts)


def cmd_gen(args) -> int:
    spec = synth.SceneSpec(
        seed=args.seed,
        dims=_parse_dims(args.dims),
        class_count=args.classes,
        n_boxes=args.boxes,
    )
    scene, camera = synth.generate_scene(spec)
    gridio.save_grid(scene, args.out)
    gridio.save_camera(camera, args.camera)
    return EXIT_OK


def cmd_mask_occluded(args) -> int:
    scene = gridio.load_grid(args.grid)
    camera = gridio.load_camera(args.camera)
    masked = synth.mask_occluded(scene, camera)
    gridio.save_grid(masked, args.out)
    return EXIT_OK


def cmd_flosp(args) -> int:
    pyramid = flosp.load_pyramid(args.pyramid)
    scene = gridio.load_grid(args.grid)
    camera = gridio.load_camera(args.camera)
    table = flosp.project_centroids(camera, scene)
    feat3d = flosp.flosp_forward(pyramid, table)
    with open(args.out, "wb") as fh:  # raw little-endian f32, N rows of E
        fh.write(feat3d.astype("<f4").tobytes())
    return EXIT_OK


def cmd_relations(args) -> int:
    scene = gridio.load_grid(args.grid)
    relations = crp.build_relation_ground_truth(scene, args.supervoxel)
    crp.save_relations(relations, args.out)
    return EXIT_OK


def cmd_loss(args) -> int:
    scene = gridio.load_grid(args.grid)
    probs = gridio.load_probs(args.probs)
    camera = gridio.load_camera(args.camera)
    if probs.dims != scene.dims or probs.class_count != scene.class_count:
        raise ShapeError("probability grid does not match the label grid")

    components = {}
    if not args.no_ce:
        weights = gridio.class_weights(gridio.class_frequencies(scene))
        components["ce"] = losses.weighted_cross_entropy(probs, scene, weights)[0]
    # no relation-prediction file format exists; score the relations realized
    # by the argmax semantics against the ground-truth relations instead
    if not args.no_rel:
        truth = crp.build_relation_ground_truth(scene, args.supervoxel)
        pred_labels = np.argmax(probs.values, axis=1).astype(np.uint8)
        pred_grid = gridio.SemanticGrid(
            scene.dims, scene.origin, scene.voxel_size, scene.class_count, pred_labels
        )
        pred_rel = crp.build_relation_ground_truth(pred_grid, args.supervoxel)
        pred_rel = crp.RelationSet(
            scene.dims,
            args.supervoxel,
            pred_rel.matrices * truth.mask[None, :, :],
            truth.mask,
        )
        components["rel"] = crp.relation_loss(pred_rel, truth)[0]
    if not args.no_scal_sem:
        components["scal_sem"] = losses.scal_loss(probs, scene)[0]
    if not args.no_scal_geo:
        components["scal_geo"] = losses.scal_geo_from_semantic(probs, scene)[0]
    if not args.no_fp:
        assign = losses.frustum_assignment(camera, scene, args.ell)
        components["fp"] = losses.frustum_proportion_loss(probs, scene, assign)[0]

    report = {"total": float(sum(components.values())), "components": components}
    json.dump(report, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = gridio.load_grid(args.pred)
    gt = gridio.load_grid(args.gt)
    camera = gridio.load_camera(args.camera)
    mask = metrics.scope_masks(camera, gt)[args.scope]
    report = metrics.iou_report(metrics.accumulate(pred, gt, mask))
    report["scope"] = args.scope
    json.dump(report, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_optimize(args) -> int:
    gt = gridio.load_grid(args.gt)
    camera = gridio.load_camera(args.camera)
    config = synth.OptimizeConfig(
        steps=args.steps,
        step_size=args.lr,
        ell=args.ell,
        supervoxel=args.supervoxel,
    )
    probs, trace = synth.optimize_logits(gt, camera, config)
    gridio.save_probs(probs, args.out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            json.dump(trace, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.seed, trials=args.trials)
    failed = False
    print(f"{'loss':<10} {'max rel err':>12}  status")
    for name, err in results.items():
        ok = err <= GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{name:<10} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    return EXIT_NUMERICAL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssckit",
        description="Scene-completion kernels: synthetic scenes, losses, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a deterministic synthetic scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dims", default="8,8,4")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--boxes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--camera", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("mask-occluded", help="blank occluded occupied voxels")
    p.add_argument("--grid", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_occluded)

    p = sub.add_parser("flosp", help="lift a 2D feature pyramid into the grid")
    p.add_argument("--pyramid", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flosp)

    p = sub.add_parser("relations", help="build relation ground-truth matrices")
    p.add_argument("--grid", required=True)
    p.add_argument("--supervoxel", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_relations)

    p = sub.add_parser("loss", help="evaluate losses for a probability grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--ell", type=int, default=2)
    p.add_argument("--supervoxel", type=int, default=2)
    p.add_argument("--no-ce", action="store_true")
    p.add_argument("--no-rel", action="store_true")
    p.add_argument("--no-scal-sem", action="store_true")
    p.add_argument("--no-scal-geo", action="store_true")
    p.add_argument("--no-fp", action="store_true")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("eval", help="IoU metrics for a predicted grid")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--scope", choices=["in_fov", "out_fov", "whole"], default="whole")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("optimize", help="gradient-descend logits against a scene")
    p.add_argument("--gt", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=100.0)
    p.add_argument("--ell", type=int, default=2)
    p.add_argument("--supervoxel", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ShapeError, SpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DegenerateInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
