"""6DOF registration of a mesh against a partial point cloud.

Multi-start point-to-point ICP.  Starts place the mesh centroid on the
cloud centroid under each of the 24 octahedral rotations, which keeps
the worst-case initial orientation error within the empirical ICP
convergence basin for compact tabletop objects.  Each start iterates
{sample the mesh surface, pair to nearest cloud points, reject far
pairs, solve the rigid least-squares fit}; starts are scored by exact
point-to-surface rmse over the whole cloud and the best one wins.

Neural pose estimators can supply poses through the JSON pose file
interface; score them with :func:`evaluate_registration` and fall back
to :func:`icp_register` when they miss.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .bvh import TriangleBvh
from .errors import DegenerateGeometryError, ValidationError
from .scene import PointCloud, RigidTransform, TexturedMesh, face_normals

DEFAULT_ACCEPT_RMSE = 0.005
_MIN_CLOUD_POINTS = 10
_PLANE_WARMUP = 5          # point-to-point iterations before plane steps
_PLANE_STEP_CLAMP = 0.3    # max rotation per plane step, radians


@dataclasses.dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for multi-start ICP.

    ``early_stop_rmse`` skips the remaining rotational starts once one
    achieves an exact rmse at or below it (0 disables and all 24 run).
    Results stay deterministic either way: starts run in a fixed order
    with per-start rng streams.
    """

    samples_per_iteration: int = 2000
    max_iterations: int = 60
    delta_tolerance: float = 1e-6
    rejection_factor: float = 3.0
    accept_rmse: float = DEFAULT_ACCEPT_RMSE
    early_stop_rmse: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_iteration < 3:
            raise ValidationError("samples_per_iteration must be >= 3")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.accept_rmse <= 0:
            raise ValidationError("accept_rmse must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclasses.dataclass(frozen=True)
class RegistrationResult:
    """Pose mapping mesh frame to camera frame, with fit diagnostics."""

    pose: RigidTransform
    rmse: float
    inlier_fraction: float
    converged: bool
    restarts_used: int

    def __post_init__(self):
        if self.rmse < 0:
            raise ValidationError(f"rmse must be >= 0, got {self.rmse}")
        if not 0.0 <= self.inlier_fraction <= 1.0:
            raise ValidationError(
                f"inlier_fraction must be in [0,1], got {self.inlier_fraction}")


def octahedral_rotations():
    """The 24 rotations of the cube as matrices, identity first.

    Signed permutation matrices with determinant +1, enumerated in a
    fixed order so multi-start registration is reproducible.
    """
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, col in enumerate(perm):
                m[row, col] = signs[row]
            if np.linalg.det(m) > 0.5:
                mats.append(m)
    return mats


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping source points onto target.

    Classic SVD solution; the sign correction keeps the result a proper
    rotation even when the best orthogonal map would be a reflection.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValidationError(
            f"point arrays must both be n x 3, got {src.shape} and {tgt.shape}")
    if len(src) < 3:
        raise ValidationError(f"need at least 3 point pairs, got {len(src)}")
    centroid_src = src.mean(axis=0)
    centroid_tgt = tgt.mean(axis=0)
    h = (src - centroid_src).T @ (tgt - centroid_tgt)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, centroid_tgt - rotation @ centroid_src)


def evaluate_registration(mesh: TexturedMesh, pose: RigidTransform, partial,
                          accept_rmse: float = DEFAULT_ACCEPT_RMSE,
                          bvh: TriangleBvh | None = None):
    """Score a pose: (rmse, inlier_fraction) of cloud-to-surface distances.

    Distances are exact closest-point-on-triangle queries against the
    posed mesh; a point is an inlier when its distance is at most
    ``accept_rmse``.  Pass a prebuilt ``bvh`` (in mesh frame) to score
    many poses against one mesh cheaply.
    """
    pts = partial.points if isinstance(partial, PointCloud) else np.asarray(partial)
    if bvh is None:
        bvh = TriangleBvh(mesh.vertices, mesh.faces)
    local = pose.inverse().apply(pts)
    dists, _, _ = bvh.closest_points(local)
    rmse = float(np.sqrt(np.mean(dists ** 2)))
    inlier_fraction = float(np.mean(dists <= accept_rmse))
    return rmse, inlier_fraction


def _plane_step(pose, local, feet, normals):
    """One linearized point-to-plane update, clamped for stability.

    Solves for the small mesh-frame motion (omega, tau) minimizing the
    along-normal residuals, then folds its inverse into the pose.
    """
    a = np.hstack([np.cross(local, normals), normals])
    b = -np.einsum("ij,ij->i", normals, local - feet)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    omega, tau = sol[:3], sol[3:]
    angle = np.linalg.norm(omega)
    if angle > _PLANE_STEP_CLAMP:
        omega = omega * (_PLANE_STEP_CLAMP / angle)
        tau = tau * (_PLANE_STEP_CLAMP / angle)
    step = RigidTransform(Rotation.from_rotvec(omega).as_matrix(), tau)
    return pose.compose(step.inverse())


def _icp_single_start(mesh, bvh, cloud, init_pose, rng, config):
    """Run one ICP start to convergence.

    A cloud subset drawn once per start is matched each iteration to
    its exact closest point on the mesh surface.  Matching in this
    direction keeps partial views honest: every scan point has a true
    counterpart on the mesh, whereas hidden mesh surface has none in
    the scan and would otherwise drag the fit off a correct pose.

    The first few iterations take point-to-point steps, which pull
    reliably from far starts; after that, point-to-plane steps recover
    the tangential alignment that closest-point feet cannot see, which
    point-to-point alone approaches only at a crawl.
    Returns (final pose, trace) where trace records the best-so-far
    trimmed rmse per iteration (non-increasing by construction).
    """
    if len(cloud) > config.samples_per_iteration:
        pick = rng.choice(len(cloud), config.samples_per_iteration,
                          replace=False)
        subset = cloud[pick]
    else:
        subset = cloud
    normals = face_normals(mesh)
    pose = init_pose
    best_rmse = np.inf
    trace = []
    for iteration in range(config.max_iterations):
        local = pose.inverse().apply(subset)
        dists, feet, tris = bvh.closest_points(local)
        median = np.median(dists)
        keep = dists <= config.rejection_factor * max(median, 1e-12)
        kept = np.count_nonzero(keep)
        if kept < 3:
            break
        best_rmse = min(best_rmse, float(np.sqrt(np.mean(dists[keep] ** 2))))
        trace.append(best_rmse)
        if iteration < _PLANE_WARMUP or kept < 6:
            new_pose = kabsch(feet[keep], subset[keep])
        else:
            new_pose = _plane_step(pose, local[keep], feet[keep],
                                   normals[tris[keep]])
        delta = np.linalg.norm(new_pose.matrix() - pose.matrix())
        pose = new_pose
        if delta < config.delta_tolerance:
            break
    return pose, trace


def icp_register(mesh: TexturedMesh, partial,
                 config: RegistrationConfig | None = None,
                 initial: RigidTransform | None = None) -> RegistrationResult:
    """Register a mesh to a partial cloud by multi-start ICP.

    Returns the lowest-rmse start (ties go to the earlier start).  An
    ``initial`` pose, when given, is tried before the octahedral
    starts; a coarse estimate from feature correspondences usually
    settles in that first start and disambiguates near-symmetric fits
    that blind restarts cannot tell apart.
    ``converged`` reports whether the best rmse beat
    ``config.accept_rmse``; rotationally ambiguous objects can converge
    geometrically while the pose is still wrong, so treat the flag as
    fit quality, not truth.
    """
    if config is None:
        config = RegistrationConfig()
    cloud = partial.points if isinstance(partial, PointCloud) else \
        np.asarray(partial, dtype=np.float64)
    if len(cloud) < _MIN_CLOUD_POINTS:
        raise ValidationError(
            f"need at least {_MIN_CLOUD_POINTS} cloud points, got {len(cloud)}")
    if len(mesh.faces) == 0:
        raise ValidationError("mesh has no faces")
    svals = np.linalg.svd(cloud - cloud.mean(axis=0), compute_uv=False)
    if svals[0] <= 0 or np.count_nonzero(svals > svals[0] * 1e-9) < 2:
        raise DegenerateGeometryError(
            "cloud covariance has rank < 2; points are collinear or coincident")

    bvh = TriangleBvh(mesh.vertices, mesh.faces)
    centroid_mesh = mesh.centroid()
    centroid_cloud = cloud.mean(axis=0)

    starts = [] if initial is None else [initial]
    starts.extend(RigidTransform(rot, centroid_cloud - rot @ centroid_mesh)
                  for rot in octahedral_rotations())

    best = None
    restarts = 0
    for index, init in enumerate(starts):
        rng = np.random.default_rng([config.seed, index])
        pose, _ = _icp_single_start(mesh, bvh, cloud, init, rng, config)
        restarts += 1
        rmse, inlier_fraction = evaluate_registration(
            mesh, pose, cloud, accept_rmse=config.accept_rmse, bvh=bvh)
        if best is None or rmse < best[0]:
            best = (rmse, inlier_fraction, pose)
        if config.early_stop_rmse > 0 and best[0] <= config.early_stop_rmse:
            break

    rmse, inlier_fraction, pose = best
    return RegistrationResult(pose=pose, rmse=rmse,
                              inlier_fraction=inlier_fraction,
                              converged=rmse < config.accept_rmse,
                              restarts_used=restarts)


def save_pose(pose: RigidTransform, path) -> None:
    """Write a pose as JSON: row-major 3x3 rotation plus translation, meters."""
    Path(path).write_text(json.dumps(pose.to_dict(), indent=2, sort_keys=True) + "\n")


def load_pose(path) -> RigidTransform:
    return RigidTransform.from_dict(json.loads(Path(path).read_text()))
