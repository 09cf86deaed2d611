"""Mesh and image file round trips."""

import numpy as np
import pytest

from scomp.errors import DimensionMismatchError, MeshFormatError
from scomp.meshio import (
    load_cloud,
    load_color_png,
    load_depth_png,
    load_frame_dir,
    load_intrinsics,
    load_mask_png,
    load_mesh,
    load_rgbd,
    save_cloud,
    save_color_png,
    save_depth_png,
    save_frame_dir,
    save_intrinsics,
    save_mask_png,
    save_mesh,
)
from scomp.scene import CameraIntrinsics, PointCloud, RgbdFrame, TexturedMesh


def random_mesh(rng, nv=200, nf=300, colors=True):
    # float32-representable coordinates so PLY round trips are bit exact
    verts = rng.normal(scale=0.3, size=(nv, 3)).astype(np.float32).astype(np.float64)
    faces = []
    while len(faces) < nf:
        f = rng.choice(nv, size=3, replace=False)
        tri = verts[f]
        area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
        if area > 1e-9:
            faces.append(f)
    cols = rng.integers(0, 256, size=(nv, 3), dtype=np.uint8) if colors else None
    return TexturedMesh(verts, np.asarray(faces, dtype=np.int64), cols)


class TestPly:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        m = random_mesh(rng)
        p = tmp_path / "m.ply"
        save_mesh(m, p)
        back = load_mesh(p)
        assert np.abs(back.vertices - m.vertices).max() == 0.0
        assert np.array_equal(back.faces, m.faces)
        assert np.array_equal(back.vertex_colors, m.vertex_colors)

    def test_round_trip_10k_vertices(self, tmp_path):
        rng = np.random.default_rng(1)
        m = random_mesh(rng, nv=10000, nf=5000, colors=False)
        p = tmp_path / "big.ply"
        save_mesh(m, p)
        back = load_mesh(p)
        assert np.abs(back.vertices - m.vertices).max() == 0.0
        assert back.vertex_colors is None

    def test_deterministic_bytes(self, tmp_path):
        m = random_mesh(np.random.default_rng(2))
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        save_mesh(m, a)
        save_mesh(m, b)
        assert a.read_bytes() == b.read_bytes()

    def test_face_index_out_of_range(self, tmp_path):
        m = random_mesh(np.random.default_rng(3), nv=10, nf=12)
        p = tmp_path / "bad.ply"
        save_mesh(m, p)
        data = bytearray(p.read_bytes())
        # faces live at the tail: patch the last int32 index to an invalid value
        data[-4:] = np.int32(999).tobytes()
        p.write_bytes(bytes(data))
        with pytest.raises(MeshFormatError):
            load_mesh(p)

    def test_rejects_ascii_ply(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_text("ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(MeshFormatError):
            load_mesh(p)

    def test_degenerate_faces_dropped_on_load(self, tmp_path):
        # write a file containing one valid and one zero-area face
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
        good = TexturedMesh(verts, np.array([[0, 1, 2]]))
        p = tmp_path / "dg.ply"
        save_mesh(good, p)
        raw = bytearray(p.read_bytes())
        raw = raw.replace(b"element face 1", b"element face 2")
        raw += np.uint8(3).tobytes() + np.array([0, 1, 1], dtype="<i4").tobytes()
        p.write_bytes(bytes(raw))
        back = load_mesh(p)
        assert len(back.faces) == 1


class TestCloudPly:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        pts = rng.normal(scale=0.2, size=(500, 3)).astype(np.float32).astype(np.float64)
        cols = rng.integers(0, 256, size=(500, 3), dtype=np.uint8)
        cloud = PointCloud(pts, cols)
        p = tmp_path / "c.ply"
        save_cloud(cloud, p)
        back = load_cloud(p)
        assert np.abs(back.points - pts).max() == 0.0
        assert np.array_equal(back.colors, cols)

    def test_colorless_and_mesh_file(self, tmp_path):
        cloud = PointCloud(np.array([[0.0, 0, 1], [0.5, -0.25, 2]]))
        p = tmp_path / "c.ply"
        save_cloud(cloud, p)
        back = load_cloud(p)
        assert back.colors is None
        assert np.abs(back.points - cloud.points).max() == 0.0
        # a mesh PLY reads back as its vertex set
        m = random_mesh(np.random.default_rng(6), nv=40, nf=30)
        save_mesh(m, tmp_path / "m.ply")
        as_cloud = load_cloud(tmp_path / "m.ply")
        assert np.abs(as_cloud.points - m.vertices).max() == 0.0
        assert np.array_equal(as_cloud.colors, m.vertex_colors)


class TestObj:
    def test_round_trip_within_tolerance(self, tmp_path):
        rng = np.random.default_rng(4)
        m = random_mesh(rng, nv=120, nf=150)
        p = tmp_path / "m.obj"
        save_mesh(m, p)
        back = load_mesh(p)
        assert np.abs(back.vertices - m.vertices).max() < 1e-6
        assert np.array_equal(back.faces, m.faces)
        assert np.array_equal(back.vertex_colors, m.vertex_colors)

    def test_face_index_out_of_range(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(MeshFormatError):
            load_mesh(p)

    def test_unsupported_extension(self, tmp_path):
        m = random_mesh(np.random.default_rng(5), nv=10, nf=8)
        with pytest.raises(MeshFormatError):
            save_mesh(m, tmp_path / "m.stl")


class TestImages:
    def test_depth_png_millimeter_quantization(self, tmp_path):
        depth = np.array([[0.0, 0.001], [1.2345, 65.535]])
        p = tmp_path / "d.png"
        save_depth_png(depth, p)
        back = load_depth_png(p)
        assert back[0, 0] == 0.0
        assert back[0, 1] == pytest.approx(0.001)
        assert back[1, 0] == pytest.approx(1.234, abs=5e-4)
        assert back[1, 1] == pytest.approx(65.535)

    def test_color_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, size=(24, 32, 3), dtype=np.uint8)
        p = tmp_path / "c.png"
        save_color_png(img, p)
        assert np.array_equal(load_color_png(p), img)

    def test_mask_serializes_as_0_255(self, tmp_path):
        bits = np.zeros((8, 8), dtype=bool)
        bits[2:4, 2:4] = True
        p = tmp_path / "m.png"
        save_mask_png(bits, p)
        raw = load_color_png(p)[..., 0]
        assert set(np.unique(raw)) <= {0, 255}
        assert np.array_equal(load_mask_png(p), bits)


class TestRgbdLoading:
    def _write_frame(self, tmp_path, w=64, h=48):
        rng = np.random.default_rng(8)
        k = CameraIntrinsics(fx=80.0, fy=80.0, cx=w / 2, cy=h / 2, width=w, height=h)
        rgb = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        depth = rng.uniform(0.5, 2.0, size=(h, w))
        save_color_png(rgb, tmp_path / "rgb.png")
        save_depth_png(depth, tmp_path / "depth.png")
        save_intrinsics(k, tmp_path / "intrinsics.json")
        return k, rgb, depth

    def test_load(self, tmp_path):
        k, rgb, depth = self._write_frame(tmp_path)
        frame = load_rgbd(tmp_path / "rgb.png", tmp_path / "depth.png",
                          tmp_path / "intrinsics.json")
        assert frame.intrinsics == k
        assert np.array_equal(frame.rgb, rgb)
        assert np.abs(frame.depth - depth).max() <= 5.001e-4  # mm quantization

    def test_dimension_mismatch(self, tmp_path):
        self._write_frame(tmp_path)
        save_depth_png(np.ones((40, 64)), tmp_path / "depth.png")
        with pytest.raises(DimensionMismatchError):
            load_rgbd(tmp_path / "rgb.png", tmp_path / "depth.png",
                      tmp_path / "intrinsics.json")

    def test_nonpositive_focal_rejected(self, tmp_path):
        self._write_frame(tmp_path)
        (tmp_path / "intrinsics.json").write_text(
            '{"fx": 0, "fy": 80, "cx": 32, "cy": 24, "width": 64, "height": 48}')
        with pytest.raises(ValueError):
            load_rgbd(tmp_path / "rgb.png", tmp_path / "depth.png",
                      tmp_path / "intrinsics.json")

    def test_frame_dir_round_trip(self, tmp_path):
        k, rgb, depth = self._write_frame(tmp_path)
        frame = load_frame_dir(tmp_path)
        out = tmp_path / "copy"
        save_frame_dir(frame, out)
        again = load_frame_dir(out)
        assert np.array_equal(again.rgb, frame.rgb)
        assert np.array_equal(again.depth, frame.depth)
        assert again.intrinsics == frame.intrinsics

    def test_intrinsics_round_trip(self, tmp_path):
        k = CameraIntrinsics(fx=123.5, fy=99.25, cx=1.5, cy=2.75, width=10, height=8)
        save_intrinsics(k, tmp_path / "k.json")
        assert load_intrinsics(tmp_path / "k.json") == k
