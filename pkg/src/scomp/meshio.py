"""File I/O: binary PLY, ASCII OBJ, PNG images, intrinsics JSON.

Depth images are 16-bit grayscale PNG in millimeters (0 = invalid) and are
converted to meters on load. Meshes are written with float32 positions, so a
save/load round trip is exact once coordinates are float32 representable.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .errors import DimensionMismatchError, MeshFormatError, ValidationError
from .scene import CameraIntrinsics, PointCloud, RgbdFrame, TexturedMesh

_PLY_SCALAR = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2",
    "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4",
    "int": "<i4", "int32": "<i4",
}


def save_mesh(mesh: TexturedMesh, path: str | os.PathLike) -> None:
    """Write PLY or OBJ depending on the file extension."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        _save_ply(mesh, path)
    elif ext == ".obj":
        _save_obj(mesh, path)
    else:
        raise MeshFormatError(f"unsupported mesh extension {ext!r}")


def load_mesh(path: str | os.PathLike) -> TexturedMesh:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        return _load_ply(path)
    if ext == ".obj":
        return _load_obj(path)
    raise MeshFormatError(f"unsupported mesh extension {ext!r}")


def _save_ply(mesh: TexturedMesh, path: str) -> None:
    nv, nf = len(mesh.vertices), len(mesh.faces)
    has_color = mesh.vertex_colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]

    vfields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vfields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vdata = np.empty(nv, dtype=vfields)
    vdata["x"] = mesh.vertices[:, 0]
    vdata["y"] = mesh.vertices[:, 1]
    vdata["z"] = mesh.vertices[:, 2]
    if has_color:
        vdata["red"] = mesh.vertex_colors[:, 0]
        vdata["green"] = mesh.vertex_colors[:, 1]
        vdata["blue"] = mesh.vertex_colors[:, 2]

    fdata = np.empty(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = mesh.faces

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vdata.tobytes())
        f.write(fdata.tobytes())


def _load_ply(path: str) -> TexturedMesh:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or ('list', count_dt, item_dt, name)])
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                elements[-1][2].append((tok[2], tok[1]))
    if fmt != "binary_little_endian":
        raise MeshFormatError(f"{path}: only binary little-endian PLY is supported, got {fmt}")

    verts = faces = colors = None
    offset = 0
    for name, count, props in elements:
        if all(p[0] != "list" for p in props):
            dtype = np.dtype([(p[0], _ply_dtype(path, p[1])) for p in props])
            raw = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            offset += dtype.itemsize * count
            if name == "vertex":
                fields = raw.dtype.names
                for need in ("x", "y", "z"):
                    if need not in fields:
                        raise MeshFormatError(f"{path}: vertex element missing {need}")
                verts = np.stack(
                    [raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float64)
                if all(c in fields for c in ("red", "green", "blue")):
                    colors = np.stack(
                        [raw["red"], raw["green"], raw["blue"]], axis=1).astype(np.uint8)
        else:
            if len(props) != 1 or props[0][0] != "list":
                raise MeshFormatError(f"{path}: unsupported mixed list element {name}")
            cnt_dt = np.dtype(_ply_dtype(path, props[0][1]))
            item_dt = np.dtype(_ply_dtype(path, props[0][2]))
            rows = []
            for _ in range(count):
                n = int(np.frombuffer(body, dtype=cnt_dt, count=1, offset=offset)[0])
                offset += cnt_dt.itemsize
                idx = np.frombuffer(body, dtype=item_dt, count=n, offset=offset)
                offset += item_dt.itemsize * n
                if n != 3:
                    raise MeshFormatError(f"{path}: non-triangular face with {n} vertices")
                rows.append(idx)
            if name == "face":
                faces = np.asarray(rows, dtype=np.int64).reshape(count, 3)

    if verts is None or faces is None:
        raise MeshFormatError(f"{path}: missing vertex or face element")
    return _build_loaded_mesh(path, verts, faces, colors)


def _ply_dtype(path: str, name: str) -> str:
    try:
        return _PLY_SCALAR[name]
    except KeyError:
        raise MeshFormatError(f"{path}: unknown PLY type {name!r}") from None


def _save_obj(mesh: TexturedMesh, path: str) -> None:
    lines = []
    if mesh.vertex_colors is None:
        for v in mesh.vertices:
            lines.append(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}")
    else:
        for v, c in zip(mesh.vertices, mesh.vertex_colors):
            lines.append(
                f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f} "
                f"{c[0] / 255.0:.9f} {c[1] / 255.0:.9f} {c[2] / 255.0:.9f}"
            )
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_obj(path: str) -> TexturedMesh:
    verts, faces, colors = [], [], []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
                if len(tok) >= 7:
                    colors.append([float(x) for x in tok[4:7]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) != 3:
                    raise MeshFormatError(f"{path}: non-triangular face")
                faces.append(idx)
    if not verts or not faces:
        raise MeshFormatError(f"{path}: missing vertices or faces")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    f = np.where(f < 0, f + len(v), f - 1)  # OBJ indices are 1-based, negatives relative
    c = None
    if colors:
        if len(colors) != len(verts):
            raise MeshFormatError(f"{path}: vertex colors on only some vertices")
        c = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    return _build_loaded_mesh(path, v, f, c)


def _build_loaded_mesh(path, verts, faces, colors):
    """Validate indices, drop zero-area faces, build the mesh."""
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshFormatError(
            f"{path}: face index out of range ({faces.min()}..{faces.max()} "
            f"with {len(verts)} vertices)"
        )
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    keep = areas >= 1e-14
    if not keep.all():
        faces = faces[keep]
    if len(faces) == 0:
        raise MeshFormatError(f"{path}: no non-degenerate faces")
    return TexturedMesh(verts, faces, colors)


def save_cloud(cloud: PointCloud, path) -> None:
    """Write a point cloud as vertex-only binary PLY (float32, optional colors)."""
    nv = len(cloud)
    has_color = cloud.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")

    vfields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        vfields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vdata = np.empty(nv, dtype=vfields)
    vdata["x"] = cloud.points[:, 0]
    vdata["y"] = cloud.points[:, 1]
    vdata["z"] = cloud.points[:, 2]
    if has_color:
        vdata["red"] = cloud.colors[:, 0]
        vdata["green"] = cloud.colors[:, 1]
        vdata["blue"] = cloud.colors[:, 2]

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vdata.tobytes())


def load_cloud(path) -> PointCloud:
    """Read the vertex element of a binary PLY as a point cloud.

    Face data, if present, is ignored; a mesh PLY loads as its vertex set.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if count is not None:
                break  # vertices come first; later elements don't matter here
            if tok[1] != "vertex":
                raise MeshFormatError(f"{path}: expected vertex element first, got {tok[1]}")
            count = int(tok[2])
        elif tok[0] == "property" and count is not None:
            if tok[1] == "list":
                raise MeshFormatError(f"{path}: list property inside vertex element")
            props.append((tok[2], tok[1]))
    if fmt != "binary_little_endian":
        raise MeshFormatError(f"{path}: only binary little-endian PLY is supported, got {fmt}")
    if count is None:
        raise MeshFormatError(f"{path}: no vertex element")

    dtype = np.dtype([(n, _ply_dtype(path, t)) for n, t in props])
    raw = np.frombuffer(body, dtype=dtype, count=count)
    fields = raw.dtype.names
    for need in ("x", "y", "z"):
        if need not in fields:
            raise MeshFormatError(f"{path}: vertex element missing {need}")
    points = np.stack([raw["x"], raw["y"], raw["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in fields for c in ("red", "green", "blue")):
        colors = np.stack([raw["red"], raw["green"], raw["blue"]], axis=1).astype(np.uint8)
    return PointCloud(points, colors)


# ---------------------------------------------------------------- images ----

def save_color_png(rgb: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def load_color_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_depth_png(depth_m: np.ndarray, path) -> None:
    """Depth in meters -> 16-bit millimeter PNG (clipped at 65.535 m)."""
    mm = np.clip(np.rint(np.asarray(depth_m, dtype=np.float64) * 1000.0), 0, 65535)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.dtype not in (np.uint16, np.int32, np.uint8):
        raise MeshFormatError(f"{path}: expected 16-bit grayscale depth, got dtype {raw.dtype}")
    if raw.ndim != 2:
        raise MeshFormatError(f"{path}: depth image must be single channel")
    return raw.astype(np.float64) / 1000.0


def save_id_png(ids: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(ids).astype(np.uint16)).save(path)


def load_id_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def save_mask_png(bits: np.ndarray, path) -> None:
    Image.fromarray(np.where(np.asarray(bits, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def save_intrinsics(intr: CameraIntrinsics, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump(intr.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path, "r", encoding="ascii") as f:
        return CameraIntrinsics.from_dict(json.load(f))


def load_rgbd(color_path, depth_path, intrinsics) -> RgbdFrame:
    """Build an RgbdFrame from a color PNG, a 16-bit depth PNG and intrinsics.

    `intrinsics` may be a CameraIntrinsics or a path to its JSON form.
    Dimension mismatches between the three sources are rejected.
    """
    if not isinstance(intrinsics, CameraIntrinsics):
        intrinsics = load_intrinsics(intrinsics)
    rgb = load_color_png(color_path)
    depth = load_depth_png(depth_path)
    if rgb.shape[:2] != depth.shape:
        raise DimensionMismatchError(
            f"color {rgb.shape[:2]} and depth {depth.shape} sizes differ")
    return RgbdFrame(rgb=rgb, depth=depth, intrinsics=intrinsics)


def load_frame_dir(path) -> RgbdFrame:
    """Load the {rgb.png, depth.png, intrinsics.json} frame layout."""
    path = os.fspath(path)
    return load_rgbd(os.path.join(path, "rgb.png"),
                     os.path.join(path, "depth.png"),
                     os.path.join(path, "intrinsics.json"))


def save_frame_dir(frame: RgbdFrame, path) -> None:
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    save_color_png(frame.rgb, os.path.join(path, "rgb.png"))
    save_depth_png(frame.depth, os.path.join(path, "depth.png"))
    save_intrinsics(frame.intrinsics, os.path.join(path, "intrinsics.json"))
