"""The canned output set: layout, determinism, replay."""

import struct

import numpy as np
import pytest
from PIL import Image

from scomp_adapters.config import STAGES
from scomp_adapters.errors import AdapterError, OutputInvalid
from scomp_adapters.fixtures import FRAME_HEIGHT, FRAME_WIDTH, replay, write_fixtures
from scomp_adapters.stages import STAGE_FILES
from scomp_adapters.validate import VALIDATORS


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    return write_fixtures(tmp_path_factory.mktemp("fix"))


def _tree_bytes(root):
    return {p.relative_to(root): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGeneration:
    def test_every_stage_has_its_declared_files(self, fixture_dir):
        for stage in STAGES:
            for name in STAGE_FILES[stage]:
                assert (fixture_dir / stage / name).is_file(), (stage, name)

    def test_every_stage_passes_its_own_validator(self, fixture_dir):
        for stage in STAGES:
            VALIDATORS[stage](fixture_dir / stage)

    def test_two_generations_are_byte_identical(self, fixture_dir, tmp_path):
        again = write_fixtures(tmp_path / "again")
        assert _tree_bytes(fixture_dir) == _tree_bytes(again)

    def test_masks_match_the_frame_size(self, fixture_dir):
        for path in sorted((fixture_dir / "segment").glob("mask_*.png")):
            with Image.open(path) as im:
                assert im.size == (FRAME_WIDTH, FRAME_HEIGHT)

    def test_mesh_is_a_substantial_closed_sphere(self, fixture_dir):
        data = (fixture_dir / "image_to_3d" / "mesh.ply").read_bytes()
        header = data[:data.find(b"end_header")].decode()
        nv = int(header.split("element vertex ")[1].split()[0])
        nf = int(header.split("element face ")[1].split()[0])
        assert nv >= 100 and nf > 100
        # Euler characteristic of a closed genus-0 surface: V - E + F = 2
        assert nv - (3 * nf // 2) + nf == 2

    def test_descriptor_cells_are_unit_vectors(self, fixture_dir):
        data = (fixture_dir / "descriptors" / "observed.desc").read_bytes()
        h, w, d = struct.unpack_from("<HHI", data)
        grid = np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w, d)
        norms = np.linalg.norm(grid, axis=2)
        assert np.allclose(norms, 1.0, atol=1e-5)


class TestReplay:
    def test_replay_copies_bytes_verbatim(self, fixture_dir, tmp_path):
        for stage in STAGES:
            job = tmp_path / stage
            job.mkdir()
            replay(stage, fixture_dir, job)
            for src in (fixture_dir / stage).iterdir():
                assert (job / src.name).read_bytes() == src.read_bytes()

    def test_unknown_stage_rejected(self, fixture_dir, tmp_path):
        with pytest.raises(AdapterError, match="unknown stage"):
            replay("translate", fixture_dir, tmp_path)

    def test_missing_stage_directory_rejected(self, fixture_dir, tmp_path):
        with pytest.raises(AdapterError, match="no fixture recorded"):
            replay("pose", fixture_dir / "nowhere", tmp_path)

    def test_corrupt_fixture_is_refused_not_copied(self, tmp_path):
        broken = write_fixtures(tmp_path / "broken")
        (broken / "pose" / "pose.json").write_text('{"rotation": "sideways"}')
        job = tmp_path / "job"
        job.mkdir()
        with pytest.raises(OutputInvalid, match="unusable"):
            replay("pose", broken, job)
        assert not list(job.iterdir())
