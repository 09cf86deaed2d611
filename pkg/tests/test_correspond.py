"""Descriptor extraction, mutual-NN matching, and 3D lifting."""

import numpy as np
import pytest

from scomp.correspond import (
    CorrespondenceSet,
    DescriptorMap,
    descriptor_map_from_tensor,
    lift_to_3d,
    match,
    read_descriptor_tensor,
    write_descriptor_tensor,
    zncc_descriptors,
)
from scomp.errors import (
    DimensionMismatchError,
    InsufficientCorrespondencesError,
    ValidationError,
)
from scomp.raster import render
from scomp.scene import CameraIntrinsics, ObjectMask, RgbdFrame, RigidTransform
from scomp.shapes import box, colorize

LUMA = np.array([0.299, 0.587, 0.114])


def brute_zncc(image, mask_bits, patch, stride):
    """Per-cell loop reference for the vectorized descriptor builder."""
    luma = image.astype(np.float64) @ LUMA
    half = patch // 2
    h_cells = (luma.shape[0] - patch) // stride + 1
    w_cells = (luma.shape[1] - patch) // stride + 1
    grid = np.zeros((h_cells, w_cells, patch * patch))
    for i in range(h_cells):
        for j in range(w_cells):
            r, c = half + i * stride, half + j * stride
            if mask_bits is not None and not mask_bits[r, c]:
                continue
            win = luma[r - half:r + half + 1, c - half:c + half + 1].ravel()
            win = win - win.mean()
            n = np.linalg.norm(win)
            if n > 1e-9:
                grid[i, j] = win / n
    return grid


def random_unit_map(rng, h, w, d, stride=4, origin=(4, 4)):
    return descriptor_map_from_tensor(rng.normal(size=(h, w, d)), stride, origin)


class TestZnccDescriptors:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(40, 37, 3), dtype=np.uint8)
        bits = rng.random((40, 37)) < 0.6
        bits[20, 18] = True
        for patch, stride in [(9, 4), (5, 3), (3, 1)]:
            got = zncc_descriptors(image, ObjectMask(bits=bits), patch, stride)
            want = brute_zncc(image, bits, patch, stride)
            assert got.grid.shape == want.shape
            assert np.abs(got.grid - want).max() < 1e-6

    def test_constant_image_has_no_descriptors(self):
        image = np.full((40, 40, 3), 128, dtype=np.uint8)
        dmap = zncc_descriptors(image, None)
        assert dmap.grid.shape[:2] == (8, 8)
        assert not dmap.valid.any()

    def test_brightness_offset_invariance(self):
        rng = np.random.default_rng(1)
        image = rng.integers(20, 200, size=(40, 40, 3), dtype=np.uint8)
        a = zncc_descriptors(image, None)
        b = zncc_descriptors(image + 10, None)
        assert np.abs(a.grid - b.grid).max() < 1e-6

    def test_gain_invariance(self):
        rng = np.random.default_rng(2)
        image = rng.uniform(10, 100, size=(40, 40, 3))
        a = zncc_descriptors(image, None)
        b = zncc_descriptors(image * 1.7, None)
        assert np.abs(a.grid - b.grid).max() < 1e-6

    def test_off_mask_cells_are_zero(self):
        rng = np.random.default_rng(3)
        image = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        bits = np.zeros((32, 32), dtype=bool)
        bits[16, 16] = True  # exactly one grid center (origin 4 + 4*3)
        dmap = zncc_descriptors(image, ObjectMask(bits=bits))
        assert np.count_nonzero(dmap.valid) == 1
        assert dmap.valid[3, 3]
        assert dmap.cell_pixel(3, 3) == (16, 16)

    def test_image_smaller_than_patch(self):
        image = np.zeros((6, 6, 3), dtype=np.uint8)
        dmap = zncc_descriptors(image, None, patch=9)
        assert dmap.grid.shape[:2] == (0, 0)

    def test_distinct_patches_not_identical(self):
        rng = np.random.default_rng(4)
        image = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
        dmap = zncc_descriptors(image, None, patch=9, stride=8)
        cells = np.argwhere(dmap.valid)
        assert len(cells) >= 2
        a = dmap.grid[cells[0][0], cells[0][1]].astype(float)
        b = dmap.grid[cells[1][0], cells[1][1]].astype(float)
        assert a @ b < 1.0 - 1e-3

    def test_parameter_validation(self):
        image = np.zeros((20, 20, 3), dtype=np.uint8)
        with pytest.raises(ValidationError):
            zncc_descriptors(image, None, patch=8)
        with pytest.raises(ValidationError):
            zncc_descriptors(image, None, stride=0)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(5)
        image = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
        dmap = zncc_descriptors(image, None)
        norms = np.linalg.norm(dmap.grid.astype(np.float64), axis=2)
        assert np.abs(norms[dmap.valid] - 1.0).max() < 1e-6

    def test_map_rejects_non_unit_vectors(self):
        bad = np.full((2, 2, 4), 0.4, dtype=np.float32)
        with pytest.raises(ValidationError):
            DescriptorMap(bad, 4, (4, 4))


class TestMatch:
    def test_self_match_is_identity(self):
        rng = np.random.default_rng(0)
        dmap = random_unit_map(rng, 5, 6, 16)
        corr = match(dmap, dmap, top_k=1000)
        assert len(corr) == 30
        assert np.array_equal(corr.observed_px, corr.rendered_px)
        assert corr.scores.min() > 1.0 - 1e-6

    def test_recovers_permutation(self):
        rng = np.random.default_rng(1)
        h, w, d = 6, 5, 24
        tensor = rng.normal(size=(h, w, d))
        a = descriptor_map_from_tensor(tensor, 4, (4, 4))
        perm = rng.permutation(h * w)
        b = descriptor_map_from_tensor(
            tensor.reshape(-1, d)[np.argsort(perm)].reshape(h, w, d), 4, (4, 4))
        corr = match(a, b, top_k=1000, min_score=-1.0)
        assert len(corr) == h * w
        for (ar, ac), (br, bc), score in corr.pairs:
            cell_a = ((ar - 4) // 4) * w + (ac - 4) // 4
            cell_b = ((br - 4) // 4) * w + (bc - 4) // 4
            assert cell_b == perm[cell_a]
            assert score > 1.0 - 1e-6

    def test_orthogonal_descriptors_give_empty_set(self):
        def one_hot_map(dims, d):
            grid = np.zeros((1, len(dims), d), dtype=np.float32)
            for j, k in enumerate(dims):
                grid[0, j, k] = 1.0
            return DescriptorMap(grid, 4, (4, 4))

        a = one_hot_map([0, 1, 2], 8)
        b = one_hot_map([4, 5, 6], 8)
        assert len(match(a, b)) == 0

    def test_min_score_filter(self):
        def single(v):
            g = np.zeros((1, 1, 2), dtype=np.float32)
            g[0, 0] = v
            return DescriptorMap(g, 4, (4, 4))

        angle_weak = np.arccos(0.1)
        weak = single([np.cos(angle_weak), np.sin(angle_weak)])
        ref = single([1.0, 0.0])
        assert len(match(ref, weak, min_score=0.2)) == 0
        angle_ok = np.arccos(0.3)
        ok = single([np.cos(angle_ok), np.sin(angle_ok)])
        corr = match(ref, ok, min_score=0.2)
        assert len(corr) == 1
        assert corr.scores[0] == pytest.approx(0.3, abs=1e-6)

    def test_top_k_truncation_scores_descending(self):
        rng = np.random.default_rng(2)
        a = random_unit_map(rng, 8, 8, 12)
        b = random_unit_map(rng, 8, 8, 12)
        corr = match(a, b, top_k=5, min_score=-1.0)
        assert len(corr) == 5
        assert (np.diff(corr.scores) <= 1e-12).all()
        full = match(a, b, top_k=10_000, min_score=-1.0)
        assert corr.scores[-1] >= full.scores[5:].max(initial=-1.0)

    def test_mutual_nn_symmetry(self):
        rng = np.random.default_rng(3)
        a = random_unit_map(rng, 7, 6, 10)
        b = random_unit_map(rng, 5, 8, 10)
        ab = match(a, b, top_k=10_000, min_score=-1.0)
        ba = match(b, a, top_k=10_000, min_score=-1.0)
        fwd = {(tuple(p), tuple(q)) for p, q, _ in ab.pairs}
        rev = {(tuple(q), tuple(p)) for p, q, _ in ba.pairs}
        assert fwd == rev

    def test_empty_map(self):
        rng = np.random.default_rng(4)
        empty = descriptor_map_from_tensor(np.zeros((3, 3, 8)), 4, (4, 4))
        full = random_unit_map(rng, 3, 3, 8)
        assert len(match(empty, full)) == 0
        assert len(match(full, empty)) == 0

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(5)
        with pytest.raises(DimensionMismatchError):
            match(random_unit_map(rng, 3, 3, 8), random_unit_map(rng, 3, 3, 9))


def textured_plane_views(shift_px=4):
    """Render a textured slab head-on twice, camera shifted between views.

    The slab's front face sits at z = 1 with focal length 64, so moving
    the camera 0.0625 m along +x shifts the image exactly 4 px.
    """
    slab = colorize(box([0.5, 0.5, 0.01]), seed=7)
    pose = RigidTransform(np.eye(3), [0.0, 0.0, 1.005])
    intr = CameraIntrinsics(fx=64.0, fy=64.0, cx=32.0, cy=32.0, width=64, height=64)
    view_a = render([(slab, pose)], intr)
    dx = shift_px / 64.0
    cam_b = RigidTransform(np.eye(3), [-dx, 0.0, 0.0])
    view_b = render([(slab, pose)], intr, camera_pose=cam_b)
    return view_a, view_b, dx


def frame_of(view):
    return RgbdFrame(view.color, view.depth, view.intrinsics)


class TestLiftTo3d:
    def test_identity_loop_points_coincide(self):
        view, _, _ = textured_plane_views()
        mask = ObjectMask(bits=view.instance_ids > 0)
        dmap = zncc_descriptors(view.color, mask)
        corr = match(dmap, dmap)
        obs, ren = lift_to_3d(corr, frame_of(view), mask, view)
        assert len(obs) == len(ren) >= 50
        assert np.abs(obs.points - ren.points).max() < 1e-12

    def test_known_translation_recovered(self):
        view_a, view_b, dx = textured_plane_views()
        mask_a = ObjectMask(bits=view_a.instance_ids > 0)
        mask_b = ObjectMask(bits=view_b.instance_ids > 0)
        da = zncc_descriptors(view_a.color, mask_a)
        db = zncc_descriptors(view_b.color, mask_b)
        corr = match(da, db, top_k=1000)
        obs, ren = lift_to_3d(corr, frame_of(view_a), mask_a, view_b)
        strong = corr.scores[:len(obs)] > 0.9999
        assert np.count_nonzero(strong) >= 25
        delta = obs.points[strong] - ren.points[strong]
        assert np.abs(delta - [dx, 0.0, 0.0]).max() < 1e-9

    def test_invalid_depth_drops_pairs(self):
        view, _, _ = textured_plane_views()
        frame = frame_of(view)
        on = np.argwhere(view.depth > 0)[:6]
        off = np.argwhere(view.depth == 0)[:2]
        px = np.vstack([on, off])
        corr = CorrespondenceSet(px, px, np.linspace(1.0, 0.5, len(px)))
        obs, ren = lift_to_3d(corr, frame, None, view)
        assert len(obs) == 6

    def test_too_few_valid_pairs(self):
        view, _, _ = textured_plane_views()
        frame = frame_of(view)
        off = np.argwhere(view.depth == 0)[:5]
        corr = CorrespondenceSet(off, off, np.linspace(1.0, 0.6, 5))
        with pytest.raises(InsufficientCorrespondencesError):
            lift_to_3d(corr, frame, None, view)

    def test_off_mask_pairs_dropped(self):
        view, _, _ = textured_plane_views()
        frame = frame_of(view)
        on = np.argwhere(view.depth > 0)
        bits = np.zeros_like(view.depth, dtype=bool)
        bits[tuple(on[:8].T)] = True
        corr = CorrespondenceSet(on[:12], on[:12], np.linspace(1.0, 0.5, 12))
        obs, _ = lift_to_3d(corr, frame, ObjectMask(bits=bits), view)
        assert len(obs) == 8


class TestDescriptorTensorFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = rng.normal(size=(7, 9, 33)).astype(np.float32)
        path = tmp_path / "desc.bin"
        write_descriptor_tensor(grid, path)
        assert path.stat().st_size == 8 + 4 * 7 * 9 * 33
        assert np.array_equal(read_descriptor_tensor(path), grid)

    def test_header_encoding(self, tmp_path):
        grid = np.zeros((2, 3, 4), dtype=np.float32)
        path = tmp_path / "desc.bin"
        write_descriptor_tensor(grid, path)
        head = path.read_bytes()[:8]
        assert head == bytes([2, 0, 3, 0, 4, 0, 0, 0])

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "desc.bin"
        write_descriptor_tensor(np.ones((2, 2, 2), dtype=np.float32), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError):
            read_descriptor_tensor(path)

    def test_from_tensor_normalizes(self):
        rng = np.random.default_rng(1)
        tensor = rng.normal(size=(4, 4, 8)) * 37.0
        tensor[0, 0] = 0.0
        dmap = descriptor_map_from_tensor(tensor, 4, (4, 4))
        assert not dmap.valid[0, 0]
        assert dmap.valid.sum() == 15
        norms = np.linalg.norm(dmap.grid.astype(np.float64), axis=2)
        assert np.abs(norms[dmap.valid] - 1.0).max() < 1e-6
