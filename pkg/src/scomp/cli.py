"""Command line front end.

One executable, ``scomp``, bundles the workflows the library supports:

    scomp synth --spec FILE --out DIR [--count N]    generate scenes
    scomp run   --frame DIR --config FILE --out DIR  complete one frame
    scomp eval  --run DIR --truth DIR --out FILE     score a run
    scomp grasp --scene DIR [--gripper FILE]         sample grasps
    scomp stage --manifest FILE                      inspect a stage job

Exit codes are shared across subcommands: 0 success, 2 partial result
or stage failure, 3 empty result, 4 configuration or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import meshio
from .bvh import TriangleBvh
from .errors import (ConfigError, StageFailure, UndefinedMetricError,
                     ValidationError)
from .grasp import (DEFAULT_GRASPS_PER_OBJECT, FREE_GRASP_CLEARANCE,
                    GripperModel, SupportPlane, gripper_collides,
                    sample_antipodal, save_grasps)
from .pipeline import (DEFAULT_ADAPTER_TIMEOUT, evaluate_run, invoke_adapter,
                       load_config, load_manifest, load_run, run_pipeline)
from .scene import transform_mesh
from .synth import SceneSpec, generate_scene, load_scene_bundle, make_frame, \
    save_scene_bundle

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_EMPTY = 3
EXIT_CONFIG = 4


# ------------------------------------------------------------- loaders ----

def _load_json_object(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot read {what}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: {what} must be a JSON object")
    return doc


def _from_fields(cls, doc: dict, path, what: str):
    """Build a dataclass from a JSON document, defaults for absent keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"{path}: unknown {what} keys {sorted(extra)}")
    try:
        return cls(**doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from None


def _load_scene_spec(path) -> SceneSpec:
    return _from_fields(SceneSpec, _load_json_object(path, "scene spec"),
                        path, "scene spec")


def _load_gripper(path) -> GripperModel:
    return _from_fields(GripperModel, _load_json_object(path, "gripper"),
                        path, "gripper")


# ------------------------------------------------------- subcommands ----

def _cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    spec = _load_scene_spec(args.spec)
    out = Path(args.out)
    for offset in range(args.count):
        one = dataclasses.replace(spec, seed=spec.seed + offset)
        scene = generate_scene(one)
        bundle = out / f"scene_{one.seed:04d}"
        save_scene_bundle(scene, bundle)
        (bundle / "spec.json").write_text(
            json.dumps(one.to_dict(), indent=2, sort_keys=True) + "\n")
        if args.noise > 0:
            frame = make_frame(scene, noise_sigma=args.noise,
                               noise_seed=one.seed)
            meshio.save_frame_dir(frame, bundle / "frame")
        print(f"wrote {bundle} ({len(scene)} objects)")
    return EXIT_OK


def _cmd_run(args) -> int:
    config = load_config(args.config)
    frame = meshio.load_frame_dir(args.frame)
    run = run_pipeline(frame, config, args.out)
    done = sum(1 for r in run.records if r["status"] == "ok")
    print(f"{len(run.records)} object(s): {done} completed, "
          f"{len(run.records) - done} failed")
    for record in run.records:
        if record["status"] == "ok":
            note = f"rmse {record['rmse']:.2e}"
            if record.get("pose_fallback"):
                note += " (fallback)"
        else:
            note = f"{record.get('stage', '?')}: {record.get('error', '')}"
        print(f"  [{record['index']:03d}] {record['status']:6s} "
              f"{record['prompt']!r}  {note}")
    print(f"run directory: {run.out_dir}")
    return run.exit_code


def _cmd_eval(args) -> int:
    run = load_run(args.run)
    json_path = Path(args.out)
    doc = evaluate_run(run, args.truth, json_path,
                       csv_path=json_path.with_suffix(".csv"),
                       grasp_count=args.grasps)
    if doc.get("empty"):
        print("empty reconstruction, miou 0")
        return EXIT_EMPTY
    gc = doc["gc"]
    print(f"miou {doc['miou']:.4f}  cd(x1e4) {doc['cd_x1e4']:.4f}  "
          f"mmd-emd(x1e2) {doc['mmd_emd_x1e2']:.4f}  gc {gc['rate']:.4f}")
    if gc["skipped"]:
        print(f"objects without a collision-free grasp: {gc['skipped']}")
    print(f"report: {json_path}")
    return EXIT_PARTIAL if run.partial else EXIT_OK


def _cmd_grasp(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    scene = load_scene_bundle(args.scene)
    gripper = _load_gripper(args.gripper) if args.gripper else GripperModel()
    out = Path(args.out) if args.out else Path(args.scene) / "grasps"
    out.mkdir(parents=True, exist_ok=True)

    posed = [transform_mesh(obj.mesh, obj.pose) for obj in scene.objects]
    bvhs = [TriangleBvh(m.vertices, m.faces) for m in posed]
    plane = SupportPlane(normal=np.array([0.0, 0.0, 1.0]),
                         offset=scene.table.height)

    empty_handed = []
    for index, mesh in enumerate(posed):
        free = []
        # resample a few rounds when screening rejects most of a batch
        for round_no in range(8):
            if len(free) >= args.count:
                break
            batch = sample_antipodal(mesh, gripper, args.count,
                                     seed=[args.seed, index, round_no],
                                     up=plane.normal)
            for grasp in batch:
                if len(free) >= args.count:
                    break
                if not gripper_collides(grasp, gripper, bvhs, exclude=index,
                                        clearance=FREE_GRASP_CLEARANCE,
                                        support_plane=plane):
                    free.append(grasp)
            if not batch:
                break
        save_grasps(free, out / f"grasps_obj_{index:03d}.json")
        print(f"  [{index:03d}] {scene.objects[index].label}: "
              f"{len(free)}/{args.count} collision-free")
        if not free:
            empty_handed.append(index)
    print(f"grasps written to {out}")
    return EXIT_PARTIAL if empty_handed else EXIT_OK


def _cmd_stage(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    job_dir = manifest_path.parent
    if args.command:
        manifest = invoke_adapter(manifest, job_dir, args.command,
                                  timeout=args.timeout)
    print(f"stage:   {manifest.stage}")
    print(f"status:  {manifest.status}")
    if manifest.diagnostics:
        print(f"details: {manifest.diagnostics}")
    print(f"params:  {json.dumps(manifest.params, sort_keys=True)}")
    missing = 0
    for kind, pairs in (("input", manifest.inputs),
                        ("output", manifest.outputs)):
        for role, rel in pairs:
            path = job_dir / rel
            if path.is_file():
                note = f"{path.stat().st_size} bytes"
            else:
                note = "MISSING"
                missing += 1
            print(f"  {kind:7s} {role:12s} {rel}  [{note}]")
    return EXIT_OK if manifest.status == "ok" and not missing else EXIT_PARTIAL


# ------------------------------------------------------------- parser ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scomp",
        description="single-view scene completion: synthesis, pipeline "
                    "runs, evaluation, grasp sampling")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("synth", help="generate synthetic scene bundles")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1,
                   help="number of scenes; seeds count up from the spec seed")
    p.add_argument("--noise", type=float, default=0.0,
                   help="depth noise sigma in meters; writes frame/ when > 0")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="complete every object in one frame")
    p.add_argument("--frame", required=True,
                   help="frame directory (rgb.png, depth.png, intrinsics.json)")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out", required=True, help="run directory to create")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score a run against ground truth")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--truth", required=True, help="scene bundle directory")
    p.add_argument("--out", required=True,
                   help="report JSON path (CSV written alongside)")
    p.add_argument("--grasps", type=int, default=DEFAULT_GRASPS_PER_OBJECT,
                   help="grasps sampled per object for the collision metric")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grasp", help="sample collision-free grasps per object")
    p.add_argument("--scene", required=True, help="scene bundle directory")
    p.add_argument("--gripper", help="gripper JSON file (default built-in)")
    p.add_argument("--count", type=int, default=DEFAULT_GRASPS_PER_OBJECT,
                   help="grasps requested per object")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", help="output directory (default SCENE/grasps)")
    p.set_defaults(func=_cmd_grasp)

    p = sub.add_parser("stage", help="inspect or re-run one stage job")
    p.add_argument("--manifest", required=True,
                   help="path to a job directory's manifest.json")
    p.add_argument("--command", help="adapter command to re-run the job with")
    p.add_argument("--timeout", type=float, default=DEFAULT_ADAPTER_TIMEOUT,
                   help="adapter timeout in seconds")
    p.set_defaults(func=_cmd_stage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    except UndefinedMetricError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
