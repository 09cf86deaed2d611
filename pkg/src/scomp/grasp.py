"""Antipodal grasp sampling, gripper collision checks and the
grasp-collision rate.

The collision rate asks a planning question rather than a geometric
one: of the grasps a reconstruction claims are collision-free, how
many would actually hit the true scene?  A reconstruction can look
excellent under chamfer distance yet still hide an obstacle exactly
where a planner wants to put a finger.

Grasps are parallel-jaw and purely kinematic: two opposed contacts
inside the friction cone, a box model of the gripper for collision
checks, no force-closure or dynamics.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .bvh import TriangleBvh
from .errors import DegenerateGeometryError, UndefinedMetricError, ValidationError
from .metrics import voxelize_watertight
from .scene import SceneReconstruction, TexturedMesh, face_normals, transform_mesh

# Collision-free screening keeps this margin (meters) around the gripper
# so sub-millimeter reconstruction error cannot flip a verdict; checks
# against ground truth run at zero clearance.
FREE_GRASP_CLEARANCE = 0.002
# Jaws open one extra centimeter beyond the grasp width before closing.
PRE_CLOSE_EXTRA = 0.01
DEFAULT_GRASPS_PER_OBJECT = 40
ATTEMPT_BUDGET_FACTOR = 100
_SAMPLING_ROUNDS = 8
_MATCH_RESOLUTION = 64


@dataclasses.dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper dimensions, Franka-like by default.

    ``palm_extents`` is the (closing, lateral, approach) size of the
    block sitting behind the fingers.  ``friction`` is the Coulomb
    coefficient shared by both finger pads.
    """

    max_width: float = 0.08
    finger_depth: float = 0.04
    finger_thickness: float = 0.01
    finger_height: float = 0.02
    palm_extents: tuple = (0.12, 0.04, 0.03)
    friction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "palm_extents",
                           tuple(float(e) for e in self.palm_extents))
        if len(self.palm_extents) != 3:
            raise ValidationError(
                f"palm_extents must have 3 entries, got {self.palm_extents}")
        extents = (self.max_width, self.finger_depth, self.finger_thickness,
                   self.finger_height, *self.palm_extents)
        if any(e <= 0 for e in extents):
            raise ValidationError(f"gripper extents must be positive: {self}")
        if self.friction < 0:
            raise ValidationError(
                f"friction must be >= 0, got {self.friction}")

    @property
    def friction_angle(self) -> float:
        """Half-angle of the contact friction cone, atan(mu)."""
        return math.atan(self.friction)


@dataclasses.dataclass(frozen=True)
class Grasp:
    """One parallel-jaw grasp.

    ``axis`` is the jaw closing direction; the contacts sit at
    ``center +- axis * width / 2``.  ``approach`` points from the
    contacts toward the palm (the gripper retreats along it), always
    orthogonal to the axis.  ``quality`` is the antipodal margin: 1 for
    perfectly opposed contact normals, 0 at the friction cone boundary.
    """

    center: np.ndarray
    axis: np.ndarray
    approach: np.ndarray
    width: float
    quality: float

    def __post_init__(self):
        for name in ("center", "axis", "approach"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValidationError("axis must be unit length")
        if abs(np.linalg.norm(self.approach) - 1.0) > 1e-9:
            raise ValidationError("approach must be unit length")
        if abs(float(self.axis @ self.approach)) > 1e-9:
            raise ValidationError("approach must be orthogonal to axis")
        if self.width <= 0:
            raise ValidationError(f"width must be positive, got {self.width}")
        if not 0.0 <= self.quality <= 1.0:
            raise ValidationError(
                f"quality must be in [0,1], got {self.quality}")

    @property
    def binormal(self) -> np.ndarray:
        return np.cross(self.axis, self.approach)

    def contacts(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.width * self.axis
        return self.center - half, self.center + half

    def to_dict(self) -> dict:
        return {"center": [float(x) for x in self.center],
                "axis": [float(x) for x in self.axis],
                "approach": [float(x) for x in self.approach],
                "width": float(self.width),
                "quality": float(self.quality)}

    @classmethod
    def from_dict(cls, data: dict) -> "Grasp":
        return cls(center=np.asarray(data["center"], dtype=np.float64),
                   axis=np.asarray(data["axis"], dtype=np.float64),
                   approach=np.asarray(data["approach"], dtype=np.float64),
                   width=float(data["width"]),
                   quality=float(data["quality"]))


def save_grasps(grasps, path) -> None:
    """Write grasps as a JSON array usable by external simulators."""
    payload = [g.to_dict() for g in grasps]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_grasps(path) -> list:
    payload = json.loads(Path(path).read_text())
    return [Grasp.from_dict(entry) for entry in payload]


@dataclasses.dataclass(frozen=True)
class SupportPlane:
    """Table half-space n . p = offset, normal pointing at the camera.

    Geometry with negative signed distance is below the table; the
    gripper is never allowed there.
    """

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3).copy()
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValidationError("plane normal must be unit length")

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.normal - self.offset


def fit_support_plane(points: np.ndarray, distance_threshold: float = 0.002,
                      iterations: int = 200, seed: int = 0) -> SupportPlane:
    """Dominant plane of a camera-frame cloud by seeded RANSAC.

    Three-point hypotheses, inlier count within ``distance_threshold``,
    then a least-squares refit on the winning inlier set.  The normal
    is oriented toward the camera origin so "above the table" is the
    positive side.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValidationError(f"plane fit needs >= 3 points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_inliers = None
    for _ in range(iterations):
        a, b, c = pts[rng.choice(len(pts), size=3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = np.abs(pts @ normal - normal @ a)
        inliers = dist <= distance_threshold
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None:
        raise DegenerateGeometryError("no non-collinear point triple found")
    support = pts[best_inliers]
    centroid = support.mean(axis=0)
    _, _, vh = np.linalg.svd(support - centroid, full_matrices=False)
    normal = vh[2]
    offset = float(normal @ centroid)
    if offset > 0:
        normal, offset = -normal, -offset
    return SupportPlane(normal=normal, offset=offset)


# ------------------------------------------------------------ sampling ----

def _seed_list(seed) -> list:
    entries = np.atleast_1d(np.asarray(seed))
    if entries.ndim != 1:
        raise ValidationError(f"seed must be an integer or a flat list: {seed}")
    out = [int(x) for x in entries]
    if any(x < 0 for x in out):
        raise ValidationError(f"seed entries must be non-negative: {out}")
    return out


def _plane_basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Any orthonormal basis of the plane perpendicular to a unit vector."""
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(direction)))] = 1.0
    e1 = np.cross(direction, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(direction, e1)
    e2 /= np.linalg.norm(e2)
    return e1, e2


def sample_antipodal(mesh: TexturedMesh, gripper: GripperModel, count: int,
                     seed, up: np.ndarray | None = None) -> list:
    """Sample antipodal grasps on one mesh.

    Attempts draw an area-weighted surface point and cast a ray along
    the inward normal; every exit hit whose contact normal lies inside
    the friction cone and whose span fits the jaws yields a grasp.  The
    approach direction is drawn uniformly in the plane perpendicular to
    the jaw axis, flipped toward ``up`` (e.g. the support plane normal)
    when one is given.

    Each attempt runs on its own rng stream keyed by (seed, attempt),
    so results do not depend on how attempts are batched.  Stops at
    ``count`` grasps or after 100 x count attempts; a hostile mesh can
    therefore return fewer grasps than asked, or none.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if len(mesh.faces) == 0:
        raise ValidationError("cannot sample grasps on an empty mesh")
    base_seed = _seed_list(seed)
    up_vec = None
    if up is not None:
        up_vec = np.asarray(up, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(up_vec)
        if norm < 1e-12:
            raise ValidationError("up direction must be nonzero")
        up_vec = up_vec / norm

    bvh = TriangleBvh(mesh.vertices, mesh.faces)
    normals = face_normals(mesh)
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if total <= 0:
        raise DegenerateGeometryError("mesh has no surface area")
    cum = np.cumsum(areas)
    cone = gripper.friction_angle

    grasps = []
    for attempt in range(ATTEMPT_BUDGET_FACTOR * count):
        if len(grasps) >= count:
            break
        rng = np.random.default_rng(base_seed + [attempt])
        tri = min(int(np.searchsorted(cum, rng.random() * total, side="right")),
                  len(cum) - 1)
        v = mesh.vertices[mesh.faces[tri]]
        r1 = math.sqrt(rng.random())
        r2 = rng.random()
        p1 = (1.0 - r1) * v[0] + r1 * (1.0 - r2) * v[1] + r1 * r2 * v[2]
        axis = -normals[tri]
        ts, tris = bvh.raycast_all(p1, axis, t_min=1e-7)
        for t, hit_tri in zip(ts, tris):
            if t > gripper.max_width:
                break
            n2 = normals[hit_tri]
            cos_exit = float(n2 @ axis)
            if cos_exit <= 1e-9:
                continue
            angle = math.acos(min(1.0, cos_exit))
            if angle > cone + 1e-9:
                continue
            e1, e2 = _plane_basis(axis)
            theta = rng.uniform(0.0, 2.0 * math.pi)
            approach = math.cos(theta) * e1 + math.sin(theta) * e2
            if up_vec is not None and float(approach @ up_vec) < 0:
                approach = -approach
            quality = 1.0 if cone == 0 else 1.0 - angle / cone
            grasps.append(Grasp(center=p1 + 0.5 * t * axis,
                                axis=axis,
                                approach=approach,
                                width=float(t),
                                quality=min(1.0, max(0.0, quality))))
            if len(grasps) >= count:
                break
    return grasps


# ----------------------------------------------------------- collision ----

def _gripper_boxes(grasp: Grasp, gripper: GripperModel):
    """Oriented boxes (center, half extents, axis rows) for the gripper.

    Two fingers at pre-close width plus the palm block.  Fingertips sit
    on the plane through the contacts; the palm sits one finger depth
    behind it along the approach.
    """
    a = grasp.axis
    w = grasp.approach
    b = grasp.binormal
    axes = np.stack([a, b, w])
    width = min(grasp.width + PRE_CLOSE_EXTRA, gripper.max_width)
    finger_half = 0.5 * np.array([gripper.finger_thickness,
                                  gripper.finger_height,
                                  gripper.finger_depth])
    palm_half = 0.5 * np.asarray(gripper.palm_extents, dtype=np.float64)
    boxes = []
    for side in (-1.0, 1.0):
        offset = side * 0.5 * (width + gripper.finger_thickness)
        center = grasp.center + offset * a + 0.5 * gripper.finger_depth * w
        boxes.append((center, finger_half, axes))
    palm_center = grasp.center + (gripper.finger_depth + palm_half[2]) * w
    boxes.append((palm_center, palm_half, axes))
    return boxes


def _scene_bvhs(scene) -> list:
    if isinstance(scene, SceneReconstruction):
        return [TriangleBvh(m.vertices, m.faces) for m in scene.posed_meshes()]
    items = list(scene)
    if all(isinstance(item, TriangleBvh) for item in items):
        return items
    return [TriangleBvh(m.vertices, m.faces) for m in items]


def _box_plane_clearance(center, half, axes, plane: SupportPlane) -> float:
    """Signed distance from the lowest box corner to the plane."""
    support = float(half @ np.abs(axes @ plane.normal))
    return float(plane.signed_distance(center)) - support


def gripper_collides(grasp: Grasp, gripper: GripperModel, scene,
                     exclude: int | None = None, clearance: float = 0.0,
                     support_plane: SupportPlane | None = None) -> bool:
    """True iff the gripper at pre-close width intersects the scene.

    ``scene`` may be a :class:`SceneReconstruction`, a list of meshes,
    or a prebuilt list of :class:`TriangleBvh` (callers with many
    grasps should prebuild).  ``exclude`` removes the grasped object's
    own mesh from the check.  ``clearance`` inflates every gripper box,
    turning the test into "comes within clearance of the scene"; the
    support plane, when given, is an additional obstacle that is never
    excluded.
    """
    if clearance < 0:
        raise ValidationError(f"clearance must be >= 0, got {clearance}")
    bvhs = _scene_bvhs(scene)
    for center, half, axes in _gripper_boxes(grasp, gripper):
        grown = half + clearance
        if support_plane is not None:
            if _box_plane_clearance(center, grown, axes, support_plane) < 0:
                return True
        for idx, bvh in enumerate(bvhs):
            if exclude is not None and idx == exclude:
                continue
            if bvh.box_overlaps(center, grown, axes):
                return True
    return False


# ------------------------------------------------------------ matching ----

def _occupancy_block(mesh: TexturedMesh, origin, cell):
    """Closed occupancy of one mesh on its lattice-aligned sub-block."""
    lo, hi = mesh.bounds()
    i0 = np.floor((lo - origin) / cell).astype(int) - 1
    i1 = np.ceil((hi - origin) / cell).astype(int) + 1
    grid = voxelize_watertight(mesh, (origin + cell * i0, cell, tuple(i1 - i0)))
    return i0, i1, grid.occupancy


def match_objects(recon, truth, resolution: int = _MATCH_RESOLUTION) -> list:
    """Match each reconstructed object to the truth object it overlaps most.

    Overlap is closed-volume intersection on a shared voxel lattice with
    ``resolution`` cells along the longest axis of the joint bounding
    box.  Returns one entry per reconstructed object: the truth index,
    or None for objects overlapping no truth volume at all.
    """
    meshes_r = _posed_meshes(recon)
    meshes_t = _posed_meshes(truth)
    if not meshes_r or not meshes_t:
        raise ValidationError("matching needs nonempty scenes")
    bounds = np.array([m.bounds() for m in meshes_r + meshes_t])
    lo = bounds[:, 0].min(axis=0)
    hi = bounds[:, 1].max(axis=0)
    cell = float((hi - lo).max()) / resolution
    if cell <= 0:
        raise ValidationError("scene has zero extent")
    origin = lo - 2 * cell

    blocks_r = [_occupancy_block(m, origin, cell) for m in meshes_r]
    blocks_t = [_occupancy_block(m, origin, cell) for m in meshes_t]
    matches = []
    for i0_r, i1_r, occ_r in blocks_r:
        best = None
        best_count = 0
        for j, (i0_t, i1_t, occ_t) in enumerate(blocks_t):
            a0 = np.maximum(i0_r, i0_t)
            a1 = np.minimum(i1_r, i1_t)
            if (a1 <= a0).any():
                continue
            win_r = tuple(slice(a - o, b - o) for a, b, o in zip(a0, a1, i0_r))
            win_t = tuple(slice(a - o, b - o) for a, b, o in zip(a0, a1, i0_t))
            count = int(np.count_nonzero(occ_r[win_r] & occ_t[win_t]))
            if count > best_count:
                best_count = count
                best = j
        matches.append(best)
    return matches


def _posed_meshes(scene) -> list:
    if isinstance(scene, SceneReconstruction):
        return scene.posed_meshes()
    out = []
    for item in scene:
        if isinstance(item, TexturedMesh):
            out.append(item)
        else:
            mesh, pose = item
            out.append(transform_mesh(mesh, pose))
    return out


# -------------------------------------------------------------- metric ----

@dataclasses.dataclass(frozen=True)
class GraspCollisionReport:
    """Grasp-collision rate with its per-object breakdown.

    ``rate`` averages colliding/free over objects that produced at
    least one collision-free grasp; ``skipped`` lists the ones that
    produced none and are excluded from the average.
    """

    rate: float
    per_object: tuple
    skipped: tuple

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValidationError(f"rate must be in [0,1], got {self.rate}")


def grasp_collision_details(recon, truth, gripper: GripperModel | None = None,
                            count: int = DEFAULT_GRASPS_PER_OBJECT,
                            seed: int = 0,
                            support_plane: SupportPlane | None = None
                            ) -> GraspCollisionReport:
    """Grasps admitted by the reconstruction that hit the true scene.

    Per reconstructed object: sample up to ``count`` grasps that clear
    the reconstructed scene (with a small safety margin, target object
    excluded), then count how many of those intersect the ground-truth
    scene at zero clearance.  The target's own truth mesh, matched by
    maximum volumetric overlap, is excluded from its check so the
    contacts themselves do not read as collisions.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    gripper = gripper if gripper is not None else GripperModel()
    meshes_r = _posed_meshes(recon)
    meshes_t = _posed_meshes(truth)
    if not meshes_r or not meshes_t:
        raise ValidationError("grasp collision metric needs nonempty scenes")
    bvhs_r = [TriangleBvh(m.vertices, m.faces) for m in meshes_r]
    bvhs_t = [TriangleBvh(m.vertices, m.faces) for m in meshes_t]
    matches = match_objects(meshes_r, meshes_t)
    up = support_plane.normal if support_plane is not None else None

    rows = []
    skipped = []
    for index, mesh in enumerate(meshes_r):
        free = []
        for round_no in range(_SAMPLING_ROUNDS):
            if len(free) >= count:
                break
            batch = sample_antipodal(mesh, gripper, count,
                                     seed=[seed, index, round_no], up=up)
            for grasp in batch:
                if len(free) >= count:
                    break
                if not gripper_collides(grasp, gripper, bvhs_r, exclude=index,
                                        clearance=FREE_GRASP_CLEARANCE,
                                        support_plane=support_plane):
                    free.append(grasp)
            if not batch:
                break
        colliding = sum(
            gripper_collides(grasp, gripper, bvhs_t, exclude=matches[index],
                             support_plane=support_plane)
            for grasp in free)
        if not free:
            skipped.append(index)
        rows.append({"recon_index": index, "matched_truth": matches[index],
                     "free": len(free), "colliding": int(colliding)})

    rates = [row["colliding"] / row["free"] for row in rows if row["free"] > 0]
    if not rates:
        raise UndefinedMetricError(
            f"no object produced a collision-free grasp: {rows}")
    return GraspCollisionReport(rate=float(np.mean(rates)),
                                per_object=tuple(rows),
                                skipped=tuple(skipped))


def grasp_collision_metric(recon, truth, gripper: GripperModel | None = None,
                           count: int = DEFAULT_GRASPS_PER_OBJECT,
                           seed: int = 0,
                           support_plane: SupportPlane | None = None) -> float:
    """The scalar grasp-collision rate; see :func:`grasp_collision_details`."""
    return grasp_collision_details(recon, truth, gripper=gripper, count=count,
                                   seed=seed, support_plane=support_plane).rate
