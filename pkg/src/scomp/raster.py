"""Pinhole rendering and back-projection.

Rendering is per-pixel nearest-hit ray casting against a BVH over all
meshes, which gives z-buffer semantics without rasterization edge rules.
The pixel grid is addressed at integer coordinates: the ray for pixel
(u, v) passes through ((u - cx) / fx, (v - cy) / fy, 1), the exact
inverse of `backproject`, so a render/backproject round trip is lossless.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import meshio
from .bvh import TriangleBvh
from .errors import DegenerateGeometryError
from .scene import (
    CameraIntrinsics,
    ObjectMask,
    PointCloud,
    RgbdFrame,
    RigidTransform,
    TexturedMesh,
)

BACKGROUND_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class RenderedView:
    """Depth, color and per-pixel instance ids from one camera.

    instance_ids holds 1 + the index of the owning mesh, 0 for background;
    ids are nonzero exactly where depth is nonzero. camera_pose maps world
    coordinates into this camera's frame.
    """

    depth: np.ndarray          # (H, W) float64 meters, 0 = background
    color: np.ndarray          # (H, W, 3) uint8
    instance_ids: np.ndarray   # (H, W) int32
    camera_pose: RigidTransform
    intrinsics: CameraIntrinsics

    def mask_of(self, instance: int) -> np.ndarray:
        """Boolean mask of the pixels owned by mesh index `instance`."""
        return self.instance_ids == instance + 1


def _pixel_rays(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unnormalized ray directions with dz == 1, so ray t equals depth z."""
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    dirs = np.empty((intrinsics.height, intrinsics.width, 3))
    dirs[..., 0] = x[None, :]
    dirs[..., 1] = y[:, None]
    dirs[..., 2] = 1.0
    return dirs


def render(meshes: Sequence[tuple[TexturedMesh, RigidTransform]],
           intrinsics: CameraIntrinsics,
           camera_pose: Optional[RigidTransform] = None) -> RenderedView:
    """Render posed meshes into a depth / color / instance-id triplet.

    `camera_pose` transforms world points into the camera frame (identity
    means poses are already camera-frame). Colors are barycentric blends
    of the hit triangle's vertex colors; meshes without colors render
    mid-gray.
    """
    if camera_pose is None:
        camera_pose = RigidTransform.identity()
    h, w = intrinsics.height, intrinsics.width
    depth = np.zeros((h, w))
    color = np.full((h, w, 3), BACKGROUND_COLOR, dtype=np.uint8)
    ids = np.zeros((h, w), dtype=np.int32)
    if not meshes:
        return RenderedView(depth, color, ids, camera_pose, intrinsics)

    all_verts, all_faces, all_colors, owner = [], [], [], []
    offset = 0
    for mesh_index, (mesh, pose) in enumerate(meshes):
        cam = camera_pose.compose(pose)
        v = cam.apply(mesh.vertices)
        all_verts.append(v)
        all_faces.append(mesh.faces + offset)
        if mesh.vertex_colors is None:
            all_colors.append(np.full((len(v), 3), 128, dtype=np.uint8))
        else:
            all_colors.append(mesh.vertex_colors)
        owner.append(np.full(len(mesh.faces), mesh_index, dtype=np.int32))
        offset += len(v)
    verts = np.concatenate(all_verts)
    faces = np.concatenate(all_faces)
    vcolors = np.concatenate(all_colors)
    owner = np.concatenate(owner)

    bvh = TriangleBvh(verts, faces)
    dirs = _pixel_rays(intrinsics).reshape(-1, 3)
    origins = np.zeros_like(dirs)
    t, tri, bu, bv = bvh.raycast(origins, dirs, t_min=1e-6)

    hit = tri >= 0
    depth = np.where(hit, t, 0.0).reshape(h, w)
    ids.reshape(-1)[hit] = owner[tri[hit]] + 1

    fh = faces[tri[hit]]
    c0 = vcolors[fh[:, 0]].astype(np.float64)
    c1 = vcolors[fh[:, 1]].astype(np.float64)
    c2 = vcolors[fh[:, 2]].astype(np.float64)
    wu = bu[hit][:, None]
    wv = bv[hit][:, None]
    blend = (1.0 - wu - wv) * c0 + wu * c1 + wv * c2
    color.reshape(-1, 3)[hit] = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    return RenderedView(depth, color, ids, camera_pose, intrinsics)


def backproject(frame: RgbdFrame | RenderedView,
                mask: Optional[np.ndarray | ObjectMask] = None) -> PointCloud:
    """Lift valid depth pixels to camera-frame 3D points, row-major order.

    p = (d (u - cx) / fx, d (v - cy) / fy, d). Colors are carried along.
    """
    if isinstance(frame, RenderedView):
        depth, rgb, intr = frame.depth, frame.color, frame.intrinsics
    else:
        depth, rgb, intr = frame.depth, frame.rgb, frame.intrinsics
    keep = depth > 0
    if mask is not None:
        bits = mask.bits if isinstance(mask, ObjectMask) else np.asarray(mask, dtype=bool)
        keep = keep & bits
    v, u = np.nonzero(keep)
    d = depth[v, u]
    pts = np.empty((len(d), 3))
    pts[:, 0] = d * (u - intr.cx) / intr.fx
    pts[:, 1] = d * (v - intr.cy) / intr.fy
    pts[:, 2] = d
    return PointCloud(pts, rgb[v, u])


def pixel_to_point(u, v, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project scalar or array pixel coordinates at given depths."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    return np.stack([d * (u - intr.cx) / intr.fx,
                     d * (v - intr.cy) / intr.fy, d], axis=-1)


OBJECT_VIEW_SIZE = 518
_VIEW_DISTANCE_FACTOR = 2.2


def object_view_pose(mesh: TexturedMesh) -> RigidTransform:
    """Canonical inspection pose: camera on the mesh-frame -Z axis, looking
    at the vertex centroid from 2.2 bounding-sphere radii away."""
    radius = mesh.bounding_radius()
    if radius < 1e-9:
        raise DegenerateGeometryError("mesh has no spatial extent to frame")
    cam_pos = mesh.centroid() + np.array([0.0, 0.0, -_VIEW_DISTANCE_FACTOR * radius])
    return RigidTransform(np.eye(3), -cam_pos)


def object_view_intrinsics(size: int = OBJECT_VIEW_SIZE) -> CameraIntrinsics:
    # focal chosen so the 2.2-radius bounding sphere always fits with margin:
    # max angular half-extent is asin(1/2.2), tan of which is 1/sqrt(2.2^2-1)
    slope = 1.0 / np.sqrt(_VIEW_DISTANCE_FACTOR**2 - 1.0)
    f = (size / 2.0 - 8.0) / slope
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                            width=size, height=size)


def render_object_view(mesh: TexturedMesh, size: int = OBJECT_VIEW_SIZE,
                       camera_pose: Optional[RigidTransform] = None,
                       intrinsics: Optional[CameraIntrinsics] = None) -> RenderedView:
    """Render a lone mesh from the canonical viewpoint (or an override).

    Scaling the mesh uniformly about its centroid rescales the camera
    distance by the same factor, so the image is unchanged up to depth.
    """
    if camera_pose is None:
        camera_pose = object_view_pose(mesh)
    if intrinsics is None:
        intrinsics = object_view_intrinsics(size)
    return render([(mesh, RigidTransform.identity())], intrinsics, camera_pose)


def save_rendered_view(view: RenderedView, path) -> None:
    """Write the color/depth/ids PNG triplet plus intrinsics."""
    os.makedirs(path, exist_ok=True)
    meshio.save_color_png(view.color, os.path.join(path, "color.png"))
    meshio.save_depth_png(view.depth, os.path.join(path, "depth.png"))
    meshio.save_id_png(view.instance_ids, os.path.join(path, "ids.png"))
    meshio.save_intrinsics(view.intrinsics, os.path.join(path, "intrinsics.json"))
