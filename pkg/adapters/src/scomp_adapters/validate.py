"""Structural validation of stage outputs.

Whatever the source (hosted model or fixture replay), the adapter
checks files before handing them to the caller: encodings parse, shapes
and ranges make sense, rotations are orthonormal.  The checks are
structural only; nobody here judges whether a mask segments the right
object.

Each ``validate_<stage>`` function inspects the stage's output files
inside one directory and raises :class:`OutputInvalid` on the first
problem.  Extra files in the directory (job inputs, manifests) are
ignored.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import OutputInvalid

_PLY_SIZES = {"char": 1, "uchar": 1, "short": 2, "ushort": 2,
              "int": 4, "uint": 4, "float": 4, "double": 8}

DESC_HEADER = struct.Struct("<HHI")


def _need(path: Path) -> Path:
    if not path.is_file():
        raise OutputInvalid(f"{path}: missing")
    return path


def _load_json(path: Path):
    try:
        return json.loads(_need(path).read_text())
    except json.JSONDecodeError as e:
        raise OutputInvalid(f"{path}: invalid JSON: {e}") from None


def _open_image(path: Path) -> Image.Image:
    try:
        with Image.open(_need(path)) as im:
            im.load()
            return im
    except UnidentifiedImageError:
        raise OutputInvalid(f"{path}: not a readable image") from None


def validate_prompts(job_dir: Path) -> None:
    path = Path(job_dir) / "prompts.json"
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise OutputInvalid(f"{path}: prompts must be a JSON list")
    for i, item in enumerate(doc):
        if not isinstance(item, str) or not item.strip():
            raise OutputInvalid(f"{path}: prompt {i} must be a non-empty string")


def validate_candidates(job_dir: Path) -> None:
    """candidates.json plus every mask it references.

    Masks must be same-size binary images living inside the directory.
    An empty candidate list is legal (nothing matched the prompts).
    """
    job_dir = Path(job_dir)
    path = job_dir / "candidates.json"
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise OutputInvalid(f"{path}: candidates must be a JSON list")
    size = None
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or not {"prompt", "confidence", "mask"} <= set(entry):
            raise OutputInvalid(
                f"{path}: entry {i} needs prompt, confidence and mask keys")
        conf = entry["confidence"]
        if not isinstance(conf, (int, float)) or not 0.0 <= float(conf) <= 1.0:
            raise OutputInvalid(f"{path}: entry {i} confidence {conf!r} not in [0, 1]")
        rel = entry["mask"]
        if not isinstance(rel, str) or rel.startswith(("/", "\\")) or ".." in Path(rel).parts:
            raise OutputInvalid(f"{path}: entry {i} mask path {rel!r} escapes the job")
        arr = np.asarray(_open_image(job_dir / rel).convert("L"))
        if not np.isin(arr, (0, 255)).all():
            raise OutputInvalid(f"{job_dir / rel}: mask is not binary")
        if size is None:
            size = arr.shape
        elif arr.shape != size:
            raise OutputInvalid(
                f"{job_dir / rel}: mask is {arr.shape}, others are {size}")


def validate_inpainted(job_dir: Path) -> None:
    path = Path(job_dir) / "inpainted.png"
    im = _open_image(path)
    if im.mode not in ("RGB", "RGBA", "L"):
        raise OutputInvalid(f"{path}: unexpected image mode {im.mode}")
    if im.width < 8 or im.height < 8:
        raise OutputInvalid(f"{path}: implausibly small ({im.width}x{im.height})")


def _ply_layout(path: Path, data: bytes):
    """Parse the header of a binary little-endian triangle PLY.

    Returns (vertex_count, face_count, body_offset, vertex_stride,
    xyz_offsets).  Only the layout this toolchain exchanges is
    accepted: scalar vertex properties including float x/y/z, then one
    face element holding a single uchar-counted integer index list.
    """
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise OutputInvalid(f"{path}: not a PLY file")
    vertex_count = face_count = None
    vertex_stride = 0
    offsets = {}
    fmt = None
    current = None
    for line in data[:end].decode("ascii", errors="replace").splitlines()[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                vertex_count = int(tok[2])
            elif current == "face":
                face_count = int(tok[2])
            else:
                raise OutputInvalid(f"{path}: unexpected element {current!r}")
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list":
                raise OutputInvalid(f"{path}: list property on vertices")
            if tok[1] not in _PLY_SIZES:
                raise OutputInvalid(f"{path}: unknown property type {tok[1]!r}")
            if tok[2] in ("x", "y", "z"):
                if tok[1] != "float":
                    raise OutputInvalid(f"{path}: {tok[2]} must be float32")
                offsets[tok[2]] = vertex_stride
            vertex_stride += _PLY_SIZES[tok[1]]
        elif tok[0] == "property" and current == "face":
            if tok[1] != "list" or tok[3] not in ("int", "uint"):
                raise OutputInvalid(f"{path}: faces must be integer index lists")
    if fmt != "binary_little_endian":
        raise OutputInvalid(f"{path}: format must be binary_little_endian, got {fmt}")
    if vertex_count is None or face_count is None:
        raise OutputInvalid(f"{path}: missing vertex or face element")
    if set(offsets) != {"x", "y", "z"}:
        raise OutputInvalid(f"{path}: vertex element lacks x/y/z")
    return vertex_count, face_count, end + len(b"end_header\n"), vertex_stride, offsets


def validate_mesh(job_dir: Path) -> None:
    path = Path(job_dir) / "mesh.ply"
    data = _need(path).read_bytes()
    nv, nf, offset, stride, xyz_at = _ply_layout(path, data)
    if nv < 3 or nf < 1:
        raise OutputInvalid(f"{path}: degenerate mesh ({nv} vertices, {nf} faces)")
    expect = offset + nv * stride + nf * (1 + 3 * 4)
    if len(data) != expect:
        raise OutputInvalid(
            f"{path}: size {len(data)} does not match header "
            f"(expected {expect} for triangles)")
    # spot-check the geometry: coordinates finite, indices in range
    verts = np.frombuffer(data, dtype=np.uint8, count=nv * stride,
                          offset=offset).reshape(nv, stride)
    for axis, at in xyz_at.items():
        coords = verts[:, at:at + 4].copy().view("<f4")
        if not np.isfinite(coords).all():
            raise OutputInvalid(f"{path}: non-finite {axis} coordinates")
    faces = np.frombuffer(data, dtype=np.uint8, count=nf * 13,
                          offset=offset + nv * stride).reshape(nf, 13)
    if not (faces[:, 0] == 3).all():
        raise OutputInvalid(f"{path}: non-triangular face")
    idx = faces[:, 1:].copy().view("<i4")
    if idx.min() < 0 or idx.max() >= nv:
        raise OutputInvalid(f"{path}: face index out of range")


def _validate_descriptor_file(path: Path) -> None:
    data = _need(path).read_bytes()
    if len(data) < DESC_HEADER.size:
        raise OutputInvalid(f"{path}: truncated header")
    h, w, d = DESC_HEADER.unpack_from(data)
    if h < 1 or w < 1 or d < 1:
        raise OutputInvalid(f"{path}: empty descriptor grid {h}x{w}x{d}")
    expect = DESC_HEADER.size + 4 * h * w * d
    if len(data) != expect:
        raise OutputInvalid(
            f"{path}: size {len(data)} does not match {h}x{w}x{d} float32")
    values = np.frombuffer(data, dtype="<f4", offset=DESC_HEADER.size)
    if not np.isfinite(values).all():
        raise OutputInvalid(f"{path}: non-finite descriptor values")


def validate_descriptors(job_dir: Path) -> None:
    job_dir = Path(job_dir)
    _validate_descriptor_file(job_dir / "observed.desc")
    _validate_descriptor_file(job_dir / "rendered.desc")


def validate_pose(job_dir: Path) -> None:
    path = Path(job_dir) / "pose.json"
    doc = _load_json(path)
    if not isinstance(doc, dict) or not {"rotation", "translation"} <= set(doc):
        raise OutputInvalid(f"{path}: pose needs rotation and translation")
    try:
        r = np.asarray(doc["rotation"], dtype=np.float64)
        t = np.asarray(doc["translation"], dtype=np.float64)
    except (TypeError, ValueError):
        raise OutputInvalid(f"{path}: pose entries must be numeric") from None
    if r.shape != (3, 3) or t.shape != (3,):
        raise OutputInvalid(f"{path}: rotation must be 3x3, translation length 3")
    if not (np.isfinite(r).all() and np.isfinite(t).all()):
        raise OutputInvalid(f"{path}: non-finite pose")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
        raise OutputInvalid(f"{path}: rotation not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > 1e-6:
        raise OutputInvalid(f"{path}: rotation determinant is not +1")


VALIDATORS = {
    "describe": validate_prompts,
    "segment": validate_candidates,
    "inpaint": validate_inpainted,
    "image_to_3d": validate_mesh,
    "descriptors": validate_descriptors,
    "pose": validate_pose,
}
