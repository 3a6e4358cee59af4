"""Command-line driver: ``semfuse {synth,fuse,refine,eval,raycast}``.

Exit codes: 0 on success, 2 for bad input (missing or malformed files,
invalid configuration), 1 when fusion lost tracking on more than 20% of
the frames.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, pipeline, synth
from .config import RunConfig, load_config
from .evaluation import format_report
from .query import ProfileTable, SemanticHit, build_octree, interaction_response, raycast_many

log = logging.getLogger("semfuse")

LOST_LIMIT = 0.20


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).exists():
        raise InputError(f"config file {args.config} not found")
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    # every stage is single-threaded, so --threads is an upper bound already met
    return load_config(args.config, overrides)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} {p} not found")
    return p


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = synth.read_scene(_require(args.spec, "scene file"))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=cfg.seed)
    t0 = time.perf_counter()
    out = synth.export_sequence(spec, args.out)
    print(f"wrote {len(spec.trajectory)} frames to {out} in {time.perf_counter() - t0:.2f} s")
    return 0


def cmd_fuse(args, cfg: RunConfig) -> int:
    ds = io.Dataset(_require(args.dataset, "dataset directory"))
    if cfg.tracking_mode == "file" and not (ds.root / "poses.txt").exists():
        raise InputError(f"{ds.root / 'poses.txt'} not found (tracking.mode = file needs poses)")
    if ds.num_classes is None:
        raise InputError(f"{ds.root / 'classes.txt'} not found")
    res = pipeline.fuse_dataset(ds, cfg)
    if args.volume:
        io.save_volume(args.volume, res.volume)
    io.write_ply(args.mesh, res.mesh)

    print(f"frames: {len(res.poses)}  label-fusion events: {len(res.fusion_frames)}  "
          f"mesh: {len(res.mesh)} vertices, {len(res.mesh.faces)} faces")
    for stage, sec in res.timings.items():
        print(f"  {stage:<13s}{sec:8.2f} s")
    if res.low_confidence_frames:
        print(f"low-confidence tracking at frames {res.low_confidence_frames}")
    if res.lost_frames:
        print(f"tracking lost at frames {res.lost_frames}")
        if res.lost_fraction > LOST_LIMIT:
            print(f"error: tracking lost on {res.lost_fraction:.0%} of frames", file=sys.stderr)
            return 1
    return 0


def _read_mesh(path):
    return io.read_ply(_require(path, "mesh"))


def cmd_refine(args, cfg: RunConfig) -> int:
    mesh = _read_mesh(args.mesh)
    t0 = time.perf_counter()
    out, changed = pipeline.refine(mesh, cfg)
    io.write_ply(args.out, out)
    print(f"refined {len(mesh)} vertices in {time.perf_counter() - t0:.2f} s; "
          f"labels changed: {changed}")
    return 0


def _keyframes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"keyframes must be integers, got {text!r}") from None


def cmd_eval(args, cfg: RunConfig) -> int:
    keyframes = _keyframes(args.keyframes)
    if not keyframes:
        raise InputError("empty keyframe list")
    mesh = _read_mesh(args.mesh)
    ds = io.Dataset(_require(args.dataset, "dataset directory"))
    for fid in keyframes:
        if not ds.path("label", fid).exists():
            raise InputError(f"ground-truth labels for keyframe {fid} not found: {ds.path('label', fid)}")
    _, m = pipeline.evaluate_keyframes(mesh, ds, keyframes, cfg)
    print(format_report(m, ds.class_names or mesh.class_names, per_class=args.per_class))
    return 0


def _read_queries(path) -> np.ndarray:
    rows = []
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.split()]
            if len(vals) != 6 or not np.all(np.isfinite(vals)) or not any(vals[3:]):
                raise ValueError
        except ValueError:
            raise InputError(f"{path}:{no}: expected 'ox oy oz dx dy dz' with a non-zero direction") from None
        rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


def cmd_raycast(args, cfg: RunConfig) -> int:
    mesh = _read_mesh(args.mesh)
    profiles = io.read_profiles(_require(args.profiles, "profiles file")) if args.profiles else ProfileTable()
    queries = _read_queries(_require(args.queries, "queries file"))
    if len(queries) == 0:
        return 0
    names = mesh.class_names or [str(c) for c in range(mesh.num_classes)]
    idx = build_octree(mesh, cfg.octree_max_depth, cfg.octree_leaf_capacity)
    hits = raycast_many(idx, mesh, queries[:, :3], queries[:, 3:])
    out = sys.stdout
    for r in range(len(queries)):
        if not hits.hit[r]:
            out.write("miss\n")
            continue
        hit = SemanticHit(point=hits.point[r], normal=hits.normal[r], distance=float(hits.distance[r]),
                          label=int(hits.label[r]), confidence=float(hits.confidence[r]),
                          triangle=int(hits.triangle[r]),
                          direction=queries[r, 3:] / np.linalg.norm(queries[r, 3:]))
        resp = interaction_response(hit, profiles)
        x, y, z = hit.point
        out.write(f"{x:.6f} {y:.6f} {z:.6f} {hit.distance:.6f} {names[hit.label]} "
                  f"{hit.confidence:.4f} {resp.kind}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration file")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--threads", type=int, help="maximum worker threads")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    parser = argparse.ArgumentParser(prog="semfuse", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset from a scene file")
    p.add_argument("spec")
    p.add_argument("out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fuse", parents=[common], help="reconstruct and label-fuse a dataset")
    p.add_argument("dataset")
    p.add_argument("--mesh", required=True, help="output PLY")
    p.add_argument("--volume", help="output volume snapshot (.svol)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("refine", parents=[common], help="CRF refinement of a labeled mesh")
    p.add_argument("mesh")
    p.add_argument("out")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="evaluate mesh labels on keyframes")
    p.add_argument("mesh")
    p.add_argument("dataset")
    p.add_argument("--keyframes", required=True, help="frame ids, comma or space separated")
    p.add_argument("--per-class", action="store_true", help="also print per-class IU")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("raycast", parents=[common], help="semantic ray queries against a mesh")
    p.add_argument("mesh")
    p.add_argument("queries", help="one 'ox oy oz dx dy dz' per line")
    p.add_argument("--profiles", help="response profile file")
    p.set_defaults(func=cmd_raycast)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except (InputError, FileNotFoundError, ValueError) as exc:
        # ConfigError, SceneFormatError and FormatError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 2
