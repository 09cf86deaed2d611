"""Dense patch descriptors and cross-image correspondence.

The registration stage needs pixel pairs between the observed object
crop and a rendered view of its reconstructed mesh.  The default
descriptor here is plain ZNCC: a grayscale patch around each grid cell,
mean-subtracted and L2-normalized, which is invariant to brightness
offset and gain and needs no learned weights.  Neural descriptors can
replace it through the tensor-file interface at the bottom; matching
and 3D lifting are agnostic to the source.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionMismatchError,
    InsufficientCorrespondencesError,
    ValidationError,
)
from .raster import RenderedView
from .scene import ObjectMask, PointCloud, RgbdFrame, _frozen

DEFAULT_PATCH = 9
DEFAULT_STRIDE = 4
DEFAULT_TOP_K = 128
DEFAULT_MIN_SCORE = 0.2

_LUMA = np.array([0.299, 0.587, 0.114])
_UNIT_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class DescriptorMap:
    """Descriptors on a regular pixel grid.

    ``grid[i, j]`` is the D-dimensional descriptor for the pixel at
    ``origin + stride * (i, j)``.  Valid descriptors are unit vectors;
    cells excluded from matching (off-mask, or zero image variance)
    hold the zero vector.
    """

    grid: np.ndarray
    stride: int
    origin: tuple

    def __post_init__(self):
        grid = _frozen(self.grid, np.float32)
        if grid.ndim != 3:
            raise ValidationError(f"grid must be h x w x D, got shape {grid.shape}")
        norms = np.linalg.norm(grid.astype(np.float64), axis=2)
        off = np.abs(norms - 1.0)
        bad = (off > _UNIT_TOL) & (norms > _UNIT_TOL)
        if bad.any():
            raise ValidationError(
                f"{np.count_nonzero(bad)} descriptors are neither unit nor zero")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    @property
    def valid(self) -> np.ndarray:
        """h x w flags for cells holding a real descriptor."""
        return np.linalg.norm(self.grid, axis=2) > 0.5

    def cell_pixel(self, i: int, j: int) -> tuple:
        """(row, col) image pixel at the center of cell (i, j)."""
        return (self.origin[0] + self.stride * i, self.origin[1] + self.stride * j)


@dataclasses.dataclass(frozen=True)
class CorrespondenceSet:
    """Matched pixel pairs, index-aligned, scores descending."""

    observed_px: np.ndarray
    rendered_px: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        obs = _frozen(np.atleast_2d(self.observed_px), np.int64)
        ren = _frozen(np.atleast_2d(self.rendered_px), np.int64)
        sc = _frozen(np.atleast_1d(self.scores), np.float64)
        if obs.shape != (len(sc), 2) or ren.shape != (len(sc), 2):
            raise DimensionMismatchError(
                f"pair arrays disagree: {obs.shape}, {ren.shape}, {sc.shape}")
        if len(sc) > 1 and np.any(np.diff(sc) > 1e-12):
            raise ValidationError("scores must be descending")
        object.__setattr__(self, "observed_px", obs)
        object.__setattr__(self, "rendered_px", ren)
        object.__setattr__(self, "scores", sc)

    def __len__(self):
        return len(self.scores)

    @property
    def pairs(self):
        """Iterate ((row, col) observed, (row, col) rendered, score)."""
        for a, b, s in zip(self.observed_px, self.rendered_px, self.scores):
            yield tuple(a), tuple(b), float(s)


def _empty_correspondences() -> CorrespondenceSet:
    return CorrespondenceSet(np.zeros((0, 2), dtype=np.int64),
                             np.zeros((0, 2), dtype=np.int64),
                             np.zeros(0))


def zncc_descriptors(image: np.ndarray, mask=None, patch: int = DEFAULT_PATCH,
                     stride: int = DEFAULT_STRIDE) -> DescriptorMap:
    """ZNCC patch descriptors over a regular grid.

    Grid cells sit every ``stride`` pixels starting at ``patch // 2``
    (so every patch fits the image).  A cell gets a descriptor when its
    center pixel is on ``mask`` (or always, when mask is None) and its
    patch has nonzero variance; other cells hold the zero vector.
    """
    if patch < 3 or patch % 2 == 0:
        raise ValidationError(f"patch must be odd and >= 3, got {patch}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    image = np.asarray(image)
    if image.ndim == 3:
        luma = image.astype(np.float64) @ _LUMA
    else:
        luma = image.astype(np.float64)
    height, width = luma.shape
    half = patch // 2
    if height < patch or width < patch:
        return DescriptorMap(np.zeros((0, 0, patch * patch), dtype=np.float32),
                             stride, (half, half))

    windows = sliding_window_view(luma, (patch, patch))[::stride, ::stride]
    h, w = windows.shape[:2]
    flat = windows.reshape(h, w, patch * patch) - \
        windows.mean(axis=(2, 3)).reshape(h, w, 1)
    norms = np.linalg.norm(flat, axis=2)
    good = norms > 1e-9
    if mask is not None:
        bits = mask.bits if isinstance(mask, ObjectMask) else np.asarray(mask, dtype=bool)
        if bits.shape != luma.shape:
            raise DimensionMismatchError(
                f"mask {bits.shape} does not match image {luma.shape}")
        rows = half + stride * np.arange(h)
        cols = half + stride * np.arange(w)
        good &= bits[np.ix_(rows, cols)]

    grid = np.zeros_like(flat)
    grid[good] = flat[good] / norms[good][:, None]
    return DescriptorMap(grid.astype(np.float32), stride, (half, half))


def match(a: DescriptorMap, b: DescriptorMap, top_k: int = DEFAULT_TOP_K,
          min_score: float = DEFAULT_MIN_SCORE) -> CorrespondenceSet:
    """Mutual-nearest-neighbor matching under cosine similarity.

    Keeps pairs that are each other's best match, discards scores below
    ``min_score``, sorts by descending score (ties by cell order), and
    truncates to ``top_k``.  Pixel coordinates come from each map's
    stride and origin.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(f"descriptor dims differ: {a.dim} vs {b.dim}")
    cells_a = np.argwhere(a.valid)
    cells_b = np.argwhere(b.valid)
    if len(cells_a) == 0 or len(cells_b) == 0:
        return _empty_correspondences()

    da = a.grid[cells_a[:, 0], cells_a[:, 1]].astype(np.float64)
    db = b.grid[cells_b[:, 0], cells_b[:, 1]].astype(np.float64)
    sim = da @ db.T
    best_b = sim.argmax(axis=1)
    best_a = sim.argmax(axis=0)
    idx_a = np.arange(len(cells_a))
    mutual = best_a[best_b[idx_a]] == idx_a
    scores = sim[idx_a, best_b]
    keep = mutual & (scores >= min_score)
    if not keep.any():
        return _empty_correspondences()

    ia = idx_a[keep]
    order = np.argsort(-scores[ia], kind="stable")[:top_k]
    ia = ia[order]
    ib = best_b[ia]
    px_a = np.asarray(a.origin) + a.stride * cells_a[ia]
    px_b = np.asarray(b.origin) + b.stride * cells_b[ib]
    return CorrespondenceSet(px_a, px_b, scores[ia])


def lift_to_3d(corr: CorrespondenceSet, frame: RgbdFrame, mask: ObjectMask | None,
               rendered: RenderedView):
    """Lift matched pixels to paired 3D points.

    Observed pixels go through the frame's depth and intrinsics,
    rendered pixels through the view's.  Pairs with invalid depth on
    either side (or observed pixels off the object mask) are dropped.
    Returns (observed cloud, rendered cloud), index-aligned.
    """
    if len(corr) == 0:
        raise InsufficientCorrespondencesError("no correspondences to lift")
    ar, ac = corr.observed_px[:, 0], corr.observed_px[:, 1]
    br, bc = corr.rendered_px[:, 0], corr.rendered_px[:, 1]
    d_obs = frame.depth[ar, ac]
    d_ren = rendered.depth[br, bc]
    keep = (d_obs > 0) & (d_ren > 0)
    if mask is not None:
        keep &= mask.bits[ar, ac]
    if np.count_nonzero(keep) < 4:
        raise InsufficientCorrespondencesError(
            f"only {np.count_nonzero(keep)} of {len(corr)} pairs have valid depth")

    fi = frame.intrinsics
    ri = rendered.intrinsics
    obs = np.stack([(ac[keep] - fi.cx) / fi.fx * d_obs[keep],
                    (ar[keep] - fi.cy) / fi.fy * d_obs[keep],
                    d_obs[keep]], axis=1)
    ren = np.stack([(bc[keep] - ri.cx) / ri.fx * d_ren[keep],
                    (br[keep] - ri.cy) / ri.fy * d_ren[keep],
                    d_ren[keep]], axis=1)
    return PointCloud(obs), PointCloud(ren)


def write_descriptor_tensor(grid: np.ndarray, path) -> None:
    """Write an h x w x D float32 tensor with an 8-byte header.

    Header: h and w as uint16, D as uint32, all little-endian; data
    row-major float32.  This is the on-disk form neural descriptor
    backends produce.
    """
    grid = np.ascontiguousarray(grid, dtype=np.float32)
    if grid.ndim != 3:
        raise ValidationError(f"tensor must be h x w x D, got shape {grid.shape}")
    h, w, d = grid.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ValidationError(f"grid {h}x{w} exceeds uint16 header range")
    with open(path, "wb") as f:
        f.write(struct.pack("<HHI", h, w, d))
        f.write(grid.tobytes())


def read_descriptor_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValidationError(f"descriptor file too short: {len(raw)} bytes")
    h, w, d = struct.unpack("<HHI", raw[:8])
    expect = 8 + 4 * h * w * d
    if len(raw) != expect:
        raise ValidationError(
            f"descriptor file holds {len(raw)} bytes, header implies {expect}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w, d).copy()


def descriptor_map_from_tensor(tensor: np.ndarray, stride: int,
                               origin: tuple) -> DescriptorMap:
    """Build a DescriptorMap from a raw tensor, normalizing each cell.

    Cells with (near-)zero norm become the zero vector and are excluded
    from matching, mirroring the ZNCC variance rule.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    norms = np.linalg.norm(tensor, axis=2)
    good = norms > 1e-9
    grid = np.zeros_like(tensor)
    grid[good] = tensor[good] / norms[good][:, None]
    return DescriptorMap(grid.astype(np.float32), stride, origin)
