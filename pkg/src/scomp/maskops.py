"""Mask selection and inpainting-job construction.

Segmentation frontends return a pile of candidate masks with confidence
scores, usually overlapping and sometimes covering mere parts of objects.
This module reduces them to a clean non-overlapping set, builds the
white-background image + fill-mask pairs the inpainting stage consumes,
and crops single objects onto white canvases for image-to-3D.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError, ValidationError
from .meshio import load_color_png, load_mask_png, save_color_png, save_mask_png
from .scene import ObjectMask, RgbdFrame, _frozen

DEFAULT_OVERLAP_THRESHOLD = 0.05
DEFAULT_CONTAINMENT_THRESHOLD = 0.5
DEFAULT_DILATION_PX = 8
DEFAULT_PAD_FRACTION = 0.15


@dataclasses.dataclass(frozen=True)
class MaskCandidateSet:
    """Raw segmenter output: candidate masks over one frame, any overlap."""

    candidates: tuple

    def __post_init__(self):
        cands = tuple(self.candidates)
        shapes = {m.bits.shape for m in cands}
        if len(shapes) > 1:
            raise DimensionMismatchError(
                f"candidate masks disagree on shape: {sorted(shapes)}")
        object.__setattr__(self, "candidates", cands)

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


@dataclasses.dataclass(frozen=True)
class InpaintJob:
    """One inpainting request.

    ``isolated_image`` shows the target object on a white background,
    ``fill_mask`` marks the pixels the inpainter should hallucinate
    (occluder regions, never the object's own pixels), and ``prompt``
    is the text description forwarded to the inpainting backend.
    """

    isolated_image: np.ndarray
    fill_mask: np.ndarray
    prompt: str

    def __post_init__(self):
        image = _frozen(self.isolated_image, np.uint8)
        fill = _frozen(self.fill_mask, bool)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValidationError(f"isolated_image must be HxWx3, got {image.shape}")
        if fill.shape != image.shape[:2]:
            raise DimensionMismatchError(
                f"fill_mask {fill.shape} does not match image {image.shape[:2]}")
        object.__setattr__(self, "isolated_image", image)
        object.__setattr__(self, "fill_mask", fill)


def mask_iou(a: ObjectMask, b: ObjectMask) -> float:
    """Intersection over union of two binary masks."""
    if a.bits.shape != b.bits.shape:
        raise DimensionMismatchError(
            f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    inter = np.count_nonzero(a.bits & b.bits)
    union = np.count_nonzero(a.bits | b.bits)
    return inter / union


def select_masks(candidates, overlap_threshold=DEFAULT_OVERLAP_THRESHOLD,
                 containment_threshold=DEFAULT_CONTAINMENT_THRESHOLD):
    """Greedily pick a non-overlapping subset of candidate masks.

    Candidates are visited by descending confidence (ties: larger pixel
    count first, then input order).  A candidate is kept when, against
    every mask already kept, its IoU stays at or below
    ``overlap_threshold`` and the fraction of its own area covered by
    the kept mask stays at or below ``containment_threshold``.  The
    second rule rejects part-of-object duplicates: a fragment sitting
    inside an already-kept mask can have tiny IoU yet be fully covered.

    Accepts a :class:`MaskCandidateSet` or any iterable of
    :class:`ObjectMask`; returns a list in selection order.
    """
    if isinstance(candidates, MaskCandidateSet):
        cands = candidates.candidates
    else:
        cands = tuple(candidates)
    if not cands:
        return []
    shapes = {m.bits.shape for m in cands}
    if len(shapes) > 1:
        raise DimensionMismatchError(
            f"candidate masks disagree on shape: {sorted(shapes)}")

    order = sorted(range(len(cands)),
                   key=lambda i: (-cands[i].confidence, -cands[i].area, i))
    kept = []
    for i in order:
        cand = cands[i]
        admissible = True
        for prev in kept:
            inter = np.count_nonzero(cand.bits & prev.bits)
            if inter == 0:
                continue
            union = np.count_nonzero(cand.bits | prev.bits)
            if inter / union > overlap_threshold:
                admissible = False
                break
            if inter / cand.area > containment_threshold:
                admissible = False
                break
        if admissible:
            kept.append(cand)
    return kept


def _dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by ``radius`` pixels in Chebyshev distance."""
    if radius <= 0 or not bits.any():
        return bits
    size = 2 * radius + 1
    return ndimage.maximum_filter(bits, size=size, mode="constant", cval=0)


def build_inpaint_job(target: ObjectMask, others, frame: RgbdFrame,
                      dilation_px: int = DEFAULT_DILATION_PX) -> InpaintJob:
    """Assemble the inpainting inputs for one object.

    The isolated image keeps the frame's pixels under ``target`` and is
    white elsewhere.  The fill mask is the union of the other objects'
    masks, dilated by ``dilation_px`` (square structuring element, so
    real segmenter masks that under-cover occluder boundaries still get
    painted over), minus the target's own pixels.
    """
    if dilation_px < 0:
        raise ValidationError(f"dilation_px must be >= 0, got {dilation_px}")
    if target.bits.shape != frame.depth.shape:
        raise DimensionMismatchError(
            f"target mask {target.bits.shape} does not match frame {frame.depth.shape}")

    isolated = np.full_like(frame.rgb, 255)
    isolated[target.bits] = frame.rgb[target.bits]

    union = np.zeros(target.bits.shape, dtype=bool)
    for other in others:
        if other.bits.shape != target.bits.shape:
            raise DimensionMismatchError(
                f"occluder mask {other.bits.shape} does not match "
                f"frame {target.bits.shape}")
        union |= other.bits
    fill = _dilate(union, dilation_px) & ~target.bits
    return InpaintJob(isolated, fill, target.prompt)


def _pad_span(lo: int, hi: int, pad_fraction: float, limit: int):
    """Expand the inclusive span [lo, hi] by pad_fraction per side, clamped."""
    size = hi - lo + 1
    target = int(np.floor(size * (1.0 + 2.0 * pad_fraction) + 0.5))
    extra = target - size
    lo = max(0, lo - extra // 2)
    hi = min(limit - 1, hi + (extra - extra // 2))
    return lo, hi


def composite_on_white(frame: RgbdFrame, mask: ObjectMask,
                       pad_fraction: float = DEFAULT_PAD_FRACTION):
    """Crop the masked object onto a white canvas.

    The crop covers the mask's bounding box expanded by ``pad_fraction``
    per side (clamped to the frame).  Pixels outside the mask are white.
    Returns ``(crop, (row0, col0))`` where the offset places the crop's
    top-left corner in frame coordinates, so pasting the crop back at
    the offset reproduces every masked pixel exactly.
    """
    if pad_fraction < 0:
        raise ValidationError(f"pad_fraction must be >= 0, got {pad_fraction}")
    if mask.bits.shape != frame.depth.shape:
        raise DimensionMismatchError(
            f"mask {mask.bits.shape} does not match frame {frame.depth.shape}")
    r0, r1, c0, c1 = mask.bbox()
    height, width = mask.bits.shape
    r0, r1 = _pad_span(r0, r1, pad_fraction, height)
    c0, c1 = _pad_span(c0, c1, pad_fraction, width)

    window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
    sub = mask.bits[window]
    crop = np.full((r1 - r0 + 1, c1 - c0 + 1, 3), 255, dtype=np.uint8)
    crop[sub] = frame.rgb[window][sub]
    return crop, (r0, c0)


def save_inpaint_job(job: InpaintJob, path) -> None:
    """Write a job directory: image.png, mask.png, prompt.txt."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_color_png(job.isolated_image, path / "image.png")
    save_mask_png(job.fill_mask, path / "mask.png")
    (path / "prompt.txt").write_text(job.prompt + "\n")


def load_inpaint_job(path) -> InpaintJob:
    path = Path(path)
    image = load_color_png(path / "image.png")
    fill = load_mask_png(path / "mask.png")
    prompt = (path / "prompt.txt").read_text().rstrip("\n")
    return InpaintJob(image, fill, prompt)
