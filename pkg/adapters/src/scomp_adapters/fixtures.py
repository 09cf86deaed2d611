"""Canned stage outputs for offline runs.

``write_fixtures`` materializes one directory per stage holding a
small, fully deterministic output set: same bytes on every call, every
platform.  ``replay`` copies a stage's files verbatim into a job
directory after validating them, which is all the adapter does when it
runs in fixture mode.

The canned content is synthetic but structurally real: the mesh is a
closed triangulated sphere, the masks segment plausible blobs at the
engine's frame size, descriptor grids are unit vectors.  It exists so
the full adapter path (spawn, read job, write outputs, manifest
bookkeeping) can run without any model or network.
"""

from __future__ import annotations

import json
import shutil
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .config import STAGES
from .errors import AdapterError, OutputInvalid
from .validate import VALIDATORS

# Frame geometry the canned masks and images are sized for.
FRAME_WIDTH = 640
FRAME_HEIGHT = 480

FIXTURE_SEED = 71  # descriptor noise stream key

_PROMPTS = ["red box", "green cylinder"]


def _save_png(arr: np.ndarray, path: Path, mode: str) -> None:
    Image.fromarray(arr, mode=mode).save(path)


def _masks() -> list[np.ndarray]:
    box = np.zeros((FRAME_HEIGHT, FRAME_WIDTH), dtype=np.uint8)
    box[140:300, 180:420] = 255
    disc = np.zeros_like(box)
    yy, xx = np.mgrid[:FRAME_HEIGHT, :FRAME_WIDTH]
    disc[(xx - 470) ** 2 + (yy - 250) ** 2 <= 70 ** 2] = 255
    return [box, disc]


def _inpainted() -> np.ndarray:
    """A smooth gradient with a filled disc where an object was removed."""
    x = np.linspace(0, 255, FRAME_WIDTH, dtype=np.float64)
    y = np.linspace(0, 255, FRAME_HEIGHT, dtype=np.float64)
    rgb = np.empty((FRAME_HEIGHT, FRAME_WIDTH, 3), dtype=np.uint8)
    rgb[..., 0] = np.rint(x)[None, :]
    rgb[..., 1] = np.rint(y)[:, None]
    rgb[..., 2] = 96
    yy, xx = np.mgrid[:FRAME_HEIGHT, :FRAME_WIDTH]
    hole = (xx - 320) ** 2 + (yy - 240) ** 2 <= 60 ** 2
    rgb[hole] = (188, 164, 142)
    return rgb


def _sphere_ply() -> bytes:
    """A latitude-longitude sphere, radius 5 cm, as binary LE PLY."""
    stacks, slices, radius = 12, 24, 0.05
    rows = []
    for i in range(1, stacks):
        phi = np.pi * i / stacks
        for j in range(slices):
            theta = 2.0 * np.pi * j / slices
            rows.append((radius * np.sin(phi) * np.cos(theta),
                         radius * np.sin(phi) * np.sin(theta),
                         radius * np.cos(phi)))
    verts = np.asarray([(0.0, 0.0, radius)] + rows + [(0.0, 0.0, -radius)],
                       dtype=np.float64)
    top, bottom = 0, len(verts) - 1

    def ring(i: int, j: int) -> int:
        return 1 + (i - 1) * slices + (j % slices)

    faces = []
    for j in range(slices):
        faces.append((top, ring(1, j), ring(1, j + 1)))
        faces.append((bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)))
    for i in range(1, stacks - 1):
        for j in range(slices):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))

    nv, nf = len(verts), len(faces)
    header = "\n".join([
        "ply", "format binary_little_endian 1.0",
        f"element vertex {nv}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {nf}",
        "property list uchar int vertex_indices",
        "end_header", ""]).encode("ascii")

    vdata = np.empty(nv, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    vdata["x"], vdata["y"], vdata["z"] = verts.T.astype(np.float32)
    vdata["red"], vdata["green"], vdata["blue"] = 196, 88, 60
    fdata = np.empty(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = np.asarray(faces, dtype=np.int32)
    return header + vdata.tobytes() + fdata.tobytes()


def _descriptor_bytes(h: int, w: int, depth: int, salt: int) -> bytes:
    rng = np.random.default_rng([FIXTURE_SEED, salt])
    grid = rng.standard_normal((h, w, depth))
    grid /= np.linalg.norm(grid, axis=2, keepdims=True)
    return struct.pack("<HHI", h, w, depth) + grid.astype("<f4").tobytes()


def _pose_doc() -> dict:
    # 90 degrees about +z; exactly orthonormal in floating point
    return {
        "rotation": [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        "translation": [0.02, -0.01, 0.45],
    }


def write_fixtures(out_dir) -> Path:
    """Create ``<out_dir>/<stage>/`` output sets for every stage."""
    out = Path(out_dir)
    describe = out / "describe"
    describe.mkdir(parents=True, exist_ok=True)
    (describe / "prompts.json").write_text(
        json.dumps(_PROMPTS, indent=2) + "\n")

    segment = out / "segment"
    segment.mkdir(exist_ok=True)
    entries = []
    for i, (mask, (prompt, conf)) in enumerate(
            zip(_masks(), [("red box", 0.91), ("green cylinder", 0.84)])):
        name = f"mask_{i:03d}.png"
        _save_png(mask, segment / name, "L")
        entries.append({"prompt": prompt, "confidence": conf, "mask": name})
    (segment / "candidates.json").write_text(
        json.dumps(entries, indent=2, sort_keys=True) + "\n")

    inpaint = out / "inpaint"
    inpaint.mkdir(exist_ok=True)
    _save_png(_inpainted(), inpaint / "inpainted.png", "RGB")

    mesh_dir = out / "image_to_3d"
    mesh_dir.mkdir(exist_ok=True)
    (mesh_dir / "mesh.ply").write_bytes(_sphere_ply())

    desc = out / "descriptors"
    desc.mkdir(exist_ok=True)
    (desc / "observed.desc").write_bytes(_descriptor_bytes(60, 80, 16, salt=0))
    (desc / "rendered.desc").write_bytes(_descriptor_bytes(64, 64, 16, salt=1))

    pose = out / "pose"
    pose.mkdir(exist_ok=True)
    (pose / "pose.json").write_text(
        json.dumps(_pose_doc(), indent=2, sort_keys=True) + "\n")
    return out


def replay(stage: str, fixture_dir, job_dir) -> None:
    """Copy the canned outputs for ``stage`` into a job directory.

    The source files are validated first and copied byte for byte, so
    repeated replays of the same fixture set are identical.
    """
    if stage not in STAGES:
        raise AdapterError(f"unknown stage {stage!r}")
    src = Path(fixture_dir) / stage
    if not src.is_dir():
        raise AdapterError(f"no fixture recorded for stage {stage!r} in {fixture_dir}")
    try:
        VALIDATORS[stage](src)
    except OutputInvalid as e:
        raise OutputInvalid(f"fixture for {stage!r} is unusable: {e}") from None
    job = Path(job_dir)
    for path in sorted(p for p in src.iterdir() if p.is_file()):
        shutil.copyfile(path, job / path.name)
