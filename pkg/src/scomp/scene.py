"""Core geometric types for RGB-D scenes and reconstructed objects.

Conventions used throughout the package:

* camera frame: +Z forward, +X right, +Y down (pinhole model)
* depth in meters, 0 marks an invalid pixel
* all object poses are expressed in the camera frame of the input view
* meshes store float64 vertices in meters with CCW outward-facing winding
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateGeometryError,
    DimensionMismatchError,
    ValidationError,
)

_ORTHO_TOL = 1e-6


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    """Contiguous read-only copy with the requested dtype."""
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; principal point must lie inside the image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal length must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class RgbdFrame:
    """A single registered color + depth view."""

    rgb: np.ndarray          # (H, W, 3) uint8
    depth: np.ndarray        # (H, W) float64 meters, 0 = invalid
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        depth = np.asarray(self.depth)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionMismatchError(f"rgb must be (H, W, 3), got {rgb.shape}")
        if depth.shape != rgb.shape[:2]:
            raise DimensionMismatchError(
                f"depth shape {depth.shape} does not match rgb {rgb.shape[:2]}"
            )
        h, w = depth.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise DimensionMismatchError(
                f"image is {w}x{h} but intrinsics declare "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        if np.any(depth < 0) or not np.all(np.isfinite(depth)):
            raise ValidationError("depth must be finite and non-negative")
        object.__setattr__(self, "rgb", _frozen(rgb, np.uint8))
        object.__setattr__(self, "depth", _frozen(depth, np.float64))


@dataclass(frozen=True)
class ObjectMask:
    """Binary segmentation mask for one object candidate."""

    bits: np.ndarray         # (H, W) bool
    confidence: float = 1.0
    prompt: str = ""

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DimensionMismatchError(f"mask must be 2-D, got shape {bits.shape}")
        bits = bits.astype(bool)
        if not bits.any():
            raise ValidationError("mask has no set pixels")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "bits", _frozen(bits, bool))

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def bbox(self) -> tuple[int, int, int, int]:
        """Inclusive (row0, row1, col0, col1) bounds of the set pixels."""
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


@dataclass(frozen=True)
class PointCloud:
    """Points in meters with optional per-point uint8 colors."""

    points: np.ndarray                    # (N, 3) float64
    colors: Optional[np.ndarray] = None   # (N, 3) uint8

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DimensionMismatchError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts, np.float64))
        if self.colors is not None:
            cols = np.asarray(self.colors)
            if cols.shape != pts.shape:
                raise DimensionMismatchError(
                    f"colors shape {cols.shape} does not match points {pts.shape}"
                )
            object.__setattr__(self, "colors", _frozen(cols, np.uint8))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class TexturedMesh:
    """Triangle mesh with optional per-vertex colors.

    Faces index into the vertex array, are within range and have
    nonzero area; both are enforced at construction time.
    """

    vertices: np.ndarray                        # (V, 3) float64
    faces: np.ndarray                           # (F, 3) int64
    vertex_colors: Optional[np.ndarray] = None  # (V, 3) uint8

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DimensionMismatchError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise DimensionMismatchError(f"faces must be (F, 3), got {faces.shape}")
        if not np.all(np.isfinite(verts)):
            raise ValidationError("vertex coordinates must be finite")
        faces = faces.astype(np.int64)
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ValidationError(
                f"face index out of range (have {len(verts)} vertices, "
                f"indices span [{faces.min()}, {faces.max()}])"
            )
        if faces.size:
            v = verts[faces]
            areas = 0.5 * np.linalg.norm(
                np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1
            )
            if np.any(areas < 1e-14):
                raise DegenerateGeometryError(
                    f"{int(np.sum(areas < 1e-14))} zero-area faces"
                )
        object.__setattr__(self, "vertices", _frozen(verts, np.float64))
        object.__setattr__(self, "faces", _frozen(faces, np.int64))
        if self.vertex_colors is not None:
            cols = np.asarray(self.vertex_colors)
            if cols.shape != verts.shape:
                raise DimensionMismatchError(
                    f"vertex_colors shape {cols.shape} does not match vertices {verts.shape}"
                )
            object.__setattr__(self, "vertex_colors", _frozen(cols, np.uint8))

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def centroid(self) -> np.ndarray:
        """Mean vertex position (not the area-weighted surface centroid)."""
        return self.vertices.mean(axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_radius(self) -> float:
        """Radius of the bounding sphere centered on the vertex centroid."""
        return float(np.linalg.norm(self.vertices - self.centroid(), axis=1).max())


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R x + t; R is orthonormal with det +1."""

    rotation: np.ndarray       # (3, 3)
    translation: np.ndarray    # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise DimensionMismatchError(f"rotation must be 3x3, got {r.shape}")
        drift = np.abs(r.T @ r - np.eye(3)).max()
        if drift > _ORTHO_TOL:
            raise ValidationError(f"rotation not orthonormal (drift {drift:.2e})")
        if abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ValidationError(f"rotation determinant {np.linalg.det(r):.6f}, expected +1")
        object.__setattr__(self, "rotation", _frozen(r, np.float64))
        object.__setattr__(self, "translation", _frozen(t, np.float64))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        r = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
            r = _polar_orthonormalize(r)
        return RigidTransform(r, t)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def to_dict(self) -> dict:
        return {
            "rotation": [[float(x) for x in row] for row in self.rotation],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["rotation"], dtype=np.float64),
                   np.asarray(d["translation"], dtype=np.float64))


def _polar_orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a . b (apply b first, then a)."""
    return a.compose(b)


def apply_transform(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    return PointCloud(t.apply(cloud.points), cloud.colors)


def transform_mesh(mesh: TexturedMesh, pose: RigidTransform) -> TexturedMesh:
    return TexturedMesh(pose.apply(mesh.vertices), mesh.faces, mesh.vertex_colors)


def scale_mesh(mesh: TexturedMesh, factor: float, center: Optional[np.ndarray] = None) -> TexturedMesh:
    """Uniformly scale about `center` (defaults to the vertex centroid)."""
    if factor <= 0:
        raise ValidationError(f"scale factor must be positive, got {factor}")
    c = mesh.centroid() if center is None else np.asarray(center, dtype=np.float64)
    return TexturedMesh(c + factor * (mesh.vertices - c), mesh.faces, mesh.vertex_colors)


def sample_surface(mesh: TexturedMesh, count: int, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples.

    Returns (points (count, 3), outward unit normals (count, 3), face indices).
    """
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise DegenerateGeometryError("mesh has no surface area")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    v = mesh.vertices[mesh.faces[tri]]
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    pts = a[:, None] * v[:, 0] + b[:, None] * v[:, 1] + c[:, None] * v[:, 2]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return pts, n, tri


def face_normals(mesh: TexturedMesh) -> np.ndarray:
    """Unit normals following the CCW winding of each face."""
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


@dataclass(frozen=True)
class ReconstructedObject:
    """One completed object: mesh in its own frame plus camera-frame pose."""

    mesh: TexturedMesh
    pose: RigidTransform
    prompt: str = ""


@dataclass(frozen=True)
class SceneReconstruction:
    """The assembled output of a completion run."""

    objects: tuple[ReconstructedObject, ...]
    frame: CameraIntrinsics

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def posed_meshes(self) -> list[TexturedMesh]:
        return [transform_mesh(o.mesh, o.pose) for o in self.objects]

    def __len__(self) -> int:
        return len(self.objects)
