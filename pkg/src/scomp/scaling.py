"""Isotropic scale recovery for generated meshes.

Image-to-3D backends emit geometry in an arbitrary metric; the observed
partial cloud is in meters.  Comparing the mean centroid distance of
the matched 3D points on each side gives the scale factor directly,
without needing the pose: centroid distances are rigid-invariant.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InsufficientCorrespondencesError,
    ValidationError,
)
from .scene import PointCloud, TexturedMesh, scale_mesh

_MIN_POINTS = 4
_MIN_SPREAD = 1e-9


@dataclasses.dataclass(frozen=True)
class ScaleEstimate:
    """Result of comparing point spreads between two clouds."""

    factor: float
    n_pairs: int
    spread_observed: float
    spread_rendered: float

    def __post_init__(self):
        if not self.factor > 0:
            raise ValidationError(f"scale factor must be positive, got {self.factor}")
        expected = self.spread_observed / self.spread_rendered
        if abs(self.factor - expected) > 1e-12 * max(1.0, abs(expected)):
            raise ValidationError(
                f"factor {self.factor} inconsistent with spreads "
                f"{self.spread_observed}/{self.spread_rendered}")


def _points_of(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def _spread(points: np.ndarray, trim_fraction: float) -> float:
    """Mean distance to the centroid, optionally dropping the largest tail.

    Trimming drops at least the requested fraction (count rounded up),
    so a lone outlier in a cloud of 10/trim_fraction + 1 points still
    falls inside the dropped tail.
    """
    dists = np.linalg.norm(points - points.mean(axis=0), axis=1)
    if trim_fraction > 0:
        drop = int(np.ceil(len(dists) * trim_fraction))
        if drop:
            dists = np.sort(dists)[:len(dists) - drop]
    return float(dists.mean())


def estimate_scale(observed, rendered,
                   trim_fraction: float = 0.0) -> ScaleEstimate:
    """Scale factor mapping the rendered cloud's metric onto the observed one.

    Both clouds are centered and reduced to their mean centroid
    distance; the factor is the ratio observed / rendered.  The clouds
    need not be index-aligned since the statistic is per-cloud.
    ``trim_fraction`` drops that fraction of the largest centroid
    distances on each side before averaging (0 disables trimming);
    useful when correspondence outliers slip through.
    """
    if not 0.0 <= trim_fraction < 0.5:
        raise ValidationError(f"trim_fraction must be in [0, 0.5), got {trim_fraction}")
    pts_obs = _points_of(observed)
    pts_ren = _points_of(rendered)
    if len(pts_obs) < _MIN_POINTS or len(pts_ren) < _MIN_POINTS:
        raise InsufficientCorrespondencesError(
            f"need at least {_MIN_POINTS} points per cloud, "
            f"got {len(pts_obs)} and {len(pts_ren)}")
    spread_obs = _spread(pts_obs, trim_fraction)
    spread_ren = _spread(pts_ren, trim_fraction)
    if spread_ren < _MIN_SPREAD:
        raise DegenerateGeometryError(
            f"rendered cloud spread {spread_ren:g} is below {_MIN_SPREAD:g}")
    if spread_obs < _MIN_SPREAD:
        raise DegenerateGeometryError(
            f"observed cloud spread {spread_obs:g} is below {_MIN_SPREAD:g}")
    return ScaleEstimate(factor=spread_obs / spread_ren,
                         n_pairs=min(len(pts_obs), len(pts_ren)),
                         spread_observed=spread_obs,
                         spread_rendered=spread_ren)


def apply_scale(mesh: TexturedMesh, estimate) -> TexturedMesh:
    """Scale the mesh about its vertex centroid.

    Accepts a :class:`ScaleEstimate` or a bare positive factor.
    Topology and colors are untouched; later registration absorbs the
    translation freedom, so the centroid is as good a fixed point as any.
    """
    factor = estimate.factor if isinstance(estimate, ScaleEstimate) else float(estimate)
    return scale_mesh(mesh, factor)
