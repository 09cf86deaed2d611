"""Synthetic tabletop scenes with exact ground truth.

World frame: +z up, table top in the plane z = table.height, clutter
centered on the z axis.  The camera looks down from a tilted vantage
so objects occlude one another, which is the regime a completion
pipeline exists for.  Everything is driven by one seeded rng stream,
so a scene is a pure function of its spec.

Ground truth comes in three forms: the placed meshes and poses, the
rendered instance-id map, and the scene bundle directory that stores
all of it for external consumers.
"""

from __future__ import annotations

import dataclasses
import json
import threading
import warnings
from pathlib import Path

import numpy as np

from . import meshio
from .errors import ValidationError
from .raster import RenderedView, render
from .scene import CameraIntrinsics, RgbdFrame, RigidTransform, TexturedMesh
from .shapes import SHAPE_NAMES, colorize, dominant_color_name, make_shape

DEFAULT_IMAGE_SIZE = (640, 480)
DEFAULT_FOCAL = 580.0
# placement disc radius interpolates between these as clutter goes 0 -> 1
SPREAD_RADIUS = 0.30
CROWDED_RADIUS = 0.12
_PLACEMENT_MARGIN = 0.005
_PLACEMENT_ATTEMPTS = 200
_TABLE_COLOR = (205, 200, 190)
_TABLE_THICKNESS = 0.02


@dataclasses.dataclass(frozen=True)
class TablePlane:
    """The support surface: a square top centered on the world z axis."""

    height: float = 0.0
    extent: float = 0.45

    def __post_init__(self):
        if self.extent <= 0:
            raise ValidationError(f"extent must be positive, got {self.extent}")

    def mesh(self) -> TexturedMesh:
        """A thin slab whose top face lies exactly at ``height``."""
        e, t = self.extent, _TABLE_THICKNESS
        verts = np.array([[x, y, z] for z in (self.height - t, self.height)
                          for y in (-e, e) for x in (-e, e)])
        faces = np.array([
            [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
            [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
            [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]])
        colors = np.tile(np.array(_TABLE_COLOR, dtype=np.uint8), (8, 1))
        return TexturedMesh(verts, faces, colors)


@dataclasses.dataclass(frozen=True)
class PlacedObject:
    """One scene object: canonical mesh, world pose, and a text label."""

    mesh: TexturedMesh
    pose: RigidTransform
    label: str


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Knobs for :func:`generate_scene`.

    ``clutter`` in [0, 1] shrinks the placement disc from 30 cm down to
    12 cm so high values force occlusion in the rendered view.
    """

    n_objects: int = 5
    shapes: tuple = SHAPE_NAMES
    clutter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.n_objects < 1:
            raise ValidationError(
                f"n_objects must be >= 1, got {self.n_objects}")
        if not self.shapes:
            raise ValidationError("shape set must not be empty")
        unknown = [s for s in self.shapes if s not in SHAPE_NAMES]
        if unknown:
            raise ValidationError(
                f"unknown shapes {unknown}, have {sorted(SHAPE_NAMES)}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValidationError(
                f"clutter must be in [0,1], got {self.clutter}")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return {"n_objects": self.n_objects, "shapes": list(self.shapes),
                "clutter": self.clutter, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(n_objects=int(data["n_objects"]),
                   shapes=tuple(data["shapes"]),
                   clutter=float(data["clutter"]), seed=int(data["seed"]))


@dataclasses.dataclass(frozen=True)
class SyntheticScene:
    """A generated tabletop scene plus the camera that observes it.

    ``camera_pose`` maps world coordinates into the camera frame (+z
    forward, +y down).  Object poses are world-frame; use
    :meth:`object_camera_pose` for the camera-frame ground truth that
    reconstruction metrics compare against.
    """

    objects: tuple
    table: TablePlane
    camera_pose: RigidTransform
    intrinsics: CameraIntrinsics
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        # tolerance covers one pass through float32 mesh storage
        for obj in self.objects:
            placed = obj.pose.apply(obj.mesh.vertices)
            if placed[:, 2].min() < self.table.height - 1e-6:
                raise ValidationError(
                    f"object {obj.label!r} dips below the table plane")

    def __len__(self) -> int:
        return len(self.objects)

    def object_camera_pose(self, index: int) -> RigidTransform:
        return self.camera_pose.compose(self.objects[index].pose)

    def labels(self) -> list:
        return [obj.label for obj in self.objects]


def _look_at(eye: np.ndarray, target: np.ndarray) -> RigidTransform:
    """World-to-camera transform with +z toward the target and +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValidationError("camera cannot look straight up or down")
    right = right / norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return RigidTransform(rotation, -rotation @ eye)


def default_camera(table: TablePlane) -> RigidTransform:
    """The stock vantage: half a meter back, looking down at the clutter."""
    eye = np.array([0.0, -0.50, table.height + 0.42])
    target = np.array([0.0, 0.03, table.height + 0.04])
    return _look_at(eye, target)


def default_intrinsics() -> CameraIntrinsics:
    w, h = DEFAULT_IMAGE_SIZE
    return CameraIntrinsics(fx=DEFAULT_FOCAL, fy=DEFAULT_FOCAL,
                            cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                            width=w, height=h)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Place random textured primitives on the table without contact.

    Rejection sampling over (yaw, disc position).  Placement only ever
    applies yaw and lift, so each object stays inside the vertical
    cylinder over its horizontal footprint circle; keeping those
    circles 5 mm apart guarantees disjoint meshes while still allowing
    tall objects to stand close enough to occlude each other.  Runs of
    the same spec are identical; when a candidate cannot be placed the
    disc is allowed to grow, and only if that also fails does the scene
    end up with fewer objects and a warning.
    """
    rng = np.random.default_rng(spec.seed)
    table = TablePlane()
    radius = SPREAD_RADIUS + (CROWDED_RADIUS - SPREAD_RADIUS) * spec.clutter

    placed = []
    centers = []
    radii = []
    for _ in range(spec.n_objects):
        name = str(rng.choice(np.array(spec.shapes)))
        mesh = colorize(make_shape(name, rng), seed=int(rng.integers(2**31)))
        label = f"{dominant_color_name(mesh.vertex_colors)} {name.replace('_', ' ')}"
        footprint = float(np.linalg.norm(mesh.vertices[:, :2], axis=1).max())

        accepted = False
        for attempt in range(_PLACEMENT_ATTEMPTS):
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            c, s = np.cos(yaw), np.sin(yaw)
            rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            grown = radius * (1.0 + attempt / _PLACEMENT_ATTEMPTS)
            r = grown * np.sqrt(rng.random())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            xy = np.array([r * np.cos(phi), r * np.sin(phi)])
            gaps = [np.linalg.norm(xy - c2[:2]) - footprint - r2
                    - _PLACEMENT_MARGIN
                    for c2, r2 in zip(centers, radii)]
            if all(g > 0 for g in gaps):
                lift = table.height - (rotation @ mesh.vertices.T)[2].min()
                center = np.array([xy[0], xy[1], lift])
                placed.append(PlacedObject(
                    mesh=mesh, pose=RigidTransform(rotation, center), label=label))
                centers.append(center)
                radii.append(footprint)
                accepted = True
                break
        if not accepted:
            warnings.warn(
                f"placement budget exhausted: placed {len(placed)} of "
                f"{spec.n_objects} objects", stacklevel=2)
            break

    return SyntheticScene(objects=tuple(placed), table=table,
                          camera_pose=default_camera(table),
                          intrinsics=default_intrinsics(), seed=spec.seed)


def render_scene(scene: SyntheticScene, include_table: bool = True
                 ) -> RenderedView:
    """Render the scene; instance id i+1 marks object i, the table last."""
    meshes = [(obj.mesh, obj.pose) for obj in scene.objects]
    if include_table:
        meshes.append((scene.table.mesh(), RigidTransform.identity()))
    return render(meshes, scene.intrinsics, scene.camera_pose)


def render_without(scene: SyntheticScene, index: int,
                   include_table: bool = True) -> RenderedView:
    """Render with every object except ``index`` removed.

    The lone object keeps instance id 1; this is the idealized
    "completed object" view an inpainting stage aims to produce.
    """
    obj = scene.objects[index]
    meshes = [(obj.mesh, obj.pose)]
    if include_table:
        meshes.append((scene.table.mesh(), RigidTransform.identity()))
    return render(meshes, scene.intrinsics, scene.camera_pose)


def make_frame(scene: SyntheticScene, noise_sigma: float = 0.0,
               noise_seed: int = 0) -> RgbdFrame:
    """The observed RGB-D input: rendered view plus optional depth noise.

    Gaussian noise is added only to valid pixels and clipped away from
    zero so validity is preserved.
    """
    view = render_scene(scene)
    depth = view.depth
    if noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        noisy = depth + rng.normal(0.0, noise_sigma, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(noisy, 1e-4), 0.0)
    return RgbdFrame(rgb=view.color, depth=depth, intrinsics=scene.intrinsics)


# ------------------------------------------------------------- bundles ----

def save_scene_bundle(scene: SyntheticScene, out_dir) -> None:
    """Write the ground-truth bundle directory.

    {scene.json, meshes/obj_###.ply, gt_poses.json (camera frame),
    rgb.png, depth.png, ids.png, intrinsics.json}.
    """
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, obj in enumerate(scene.objects):
        mesh_name = f"meshes/obj_{i:03d}.ply"
        meshio.save_mesh(obj.mesh, out / mesh_name)
        entries.append({"label": obj.label, "mesh": mesh_name,
                        "pose": obj.pose.to_dict()})
    manifest = {
        "seed": scene.seed,
        "table": {"height": scene.table.height, "extent": scene.table.extent},
        "camera_pose": scene.camera_pose.to_dict(),
        "intrinsics": scene.intrinsics.to_dict(),
        "objects": entries,
    }
    (out / "scene.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    gt = [scene.object_camera_pose(i).to_dict() for i in range(len(scene))]
    (out / "gt_poses.json").write_text(
        json.dumps(gt, indent=2, sort_keys=True) + "\n")

    view = render_scene(scene)
    meshio.save_color_png(view.color, out / "rgb.png")
    meshio.save_depth_png(view.depth, out / "depth.png")
    meshio.save_id_png(view.instance_ids, out / "ids.png")
    meshio.save_intrinsics(scene.intrinsics, out / "intrinsics.json")


def load_scene_bundle(bundle_dir) -> SyntheticScene:
    bundle = Path(bundle_dir)
    manifest = json.loads((bundle / "scene.json").read_text())
    objects = []
    for entry in manifest["objects"]:
        mesh = meshio.load_mesh(bundle / entry["mesh"])
        objects.append(PlacedObject(
            mesh=mesh, pose=RigidTransform.from_dict(entry["pose"]),
            label=entry["label"]))
    return SyntheticScene(
        objects=tuple(objects),
        table=TablePlane(height=float(manifest["table"]["height"]),
                         extent=float(manifest["table"]["extent"])),
        camera_pose=RigidTransform.from_dict(manifest["camera_pose"]),
        intrinsics=CameraIntrinsics.from_dict(manifest["intrinsics"]),
        seed=int(manifest["seed"]))


# ------------------------------------------------------------- oracle ----

class OracleBackend:
    """Answer pipeline stage jobs from a scene's ground truth.

    This is the closed-loop test double for the whole external model
    zoo: each stage's contract is fulfilled with the idealized output
    the ground truth implies, so a pipeline run against the oracle
    isolates the engine's own math.  The reconstruction stage hands
    back the true mesh under a random similarity transform (a monocular
    model knows shape, not scale or frame) together with the viewpoint
    that reproduces its input image; the pose stage can add calibrated
    noise (``rotation_noise_deg``, ``translation_noise`` in the stage
    options) to exercise verification and fallback paths downstream.

    Instances are safe to share across pipeline worker threads: renders
    are cached under a lock and everything else is read-only.
    """

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        self._lock = threading.Lock()
        self._scene_view = None
        self._lone_views = {}

    # rendering is the expensive part; do each view once
    def _view(self) -> RenderedView:
        with self._lock:
            if self._scene_view is None:
                self._scene_view = render_scene(self.scene)
            return self._scene_view

    def _lone(self, index: int) -> RenderedView:
        with self._lock:
            if index not in self._lone_views:
                self._lone_views[index] = render_without(
                    self.scene, index, include_table=False)
            return self._lone_views[index]

    def __call__(self, stage: str, job_dir, params: dict) -> None:
        handler = getattr(self, "_stage_" + stage, None)
        if handler is None:
            raise ValidationError(f"oracle cannot answer stage {stage!r}")
        handler(Path(job_dir), params)

    def _stage_describe(self, job_dir: Path, params: dict) -> None:
        (job_dir / "prompts.json").write_text(
            json.dumps(self.scene.labels(), indent=2) + "\n")

    def _stage_segment(self, job_dir: Path, params: dict) -> None:
        view = self._view()
        entries = []
        for i, obj in enumerate(self.scene.objects):
            bits = view.mask_of(i)
            if not bits.any():
                continue
            name = f"mask_{i:03d}.png"
            meshio.save_mask_png(bits, job_dir / name)
            entries.append({"prompt": obj.label, "confidence": 1.0,
                            "mask": name})
        (job_dir / "candidates.json").write_text(
            json.dumps(entries, indent=2, sort_keys=True) + "\n")

    def _stage_inpaint(self, job_dir: Path, params: dict) -> None:
        image = meshio.load_color_png(job_dir / "image.png")
        visible = ~np.all(image == 255, axis=2)
        ids = self._view().instance_ids
        counts = [np.count_nonzero(visible & (ids == i + 1))
                  for i in range(len(self.scene))]
        index = int(np.argmax(counts))
        if counts[index] == 0:
            raise ValidationError("inpaint job shows no scene object")
        meshio.save_color_png(self._lone(index).color,
                              job_dir / "inpainted.png")

    def _identify_crop(self, image: np.ndarray) -> int:
        """Which object's idealized completion crop is this?

        The engine crops the inpainted object on white with a padded
        bounding box; redoing that from ground truth reproduces the
        bytes exactly, so plain array equality identifies the object.
        """
        from .maskops import composite_on_white
        from .scene import ObjectMask

        for i in range(len(self.scene)):
            lone = self._lone(i)
            bits = ~np.all(lone.color == 255, axis=2)
            if not bits.any():
                continue
            frame = RgbdFrame(lone.color, lone.depth, self.scene.intrinsics)
            crop, _ = composite_on_white(
                frame, ObjectMask(bits, 1.0, self.scene.objects[i].label))
            if crop.shape == image.shape and np.array_equal(crop, image):
                return i
        raise ValidationError("completion crop matches no scene object")

    def _stage_image_to_3d(self, job_dir: Path, params: dict) -> None:
        from scipy.spatial.transform import Rotation

        image = meshio.load_color_png(job_dir / "image.png")
        index = self._identify_crop(image)
        obj = self.scene.objects[index]

        rng = np.random.default_rng(int(params["seed"]))
        lo, hi = params.get("scale_range", (0.5, 2.0))
        scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        spin = Rotation.random(random_state=rng).as_matrix()
        shift = rng.uniform(-0.2, 0.2, size=3)

        # mesh in an arbitrary frame: v = scale * spin @ x + shift
        verts = scale * (obj.mesh.vertices @ spin.T) + shift
        meshio.save_mesh(TexturedMesh(verts, obj.mesh.faces,
                                      obj.mesh.vertex_colors),
                         job_dir / "mesh.ply")

        # the camera that re-renders v at the observed pixels: depths
        # come out scaled by the same factor, which is exactly the
        # ambiguity a metric-scale stage exists to resolve
        observed = self.scene.object_camera_pose(index)
        r_view = observed.rotation @ spin.T
        t_view = scale * observed.translation - r_view @ shift
        (job_dir / "viewpoint.json").write_text(json.dumps({
            "rotation": r_view.tolist(),
            "translation": t_view.tolist(),
            "intrinsics": self.scene.intrinsics.to_dict(),
        }, indent=2, sort_keys=True) + "\n")
        (job_dir / "oracle_truth.json").write_text(json.dumps({
            "index": index, "scale": scale,
        }, indent=2, sort_keys=True) + "\n")

    def _stage_descriptors(self, job_dir: Path, params: dict) -> None:
        # byte-for-byte the builtin: the oracle has nothing better to
        # say about descriptors than the reference implementation
        from .pipeline import _builtin_descriptors
        _builtin_descriptors(job_dir, params)

    def _stage_pose(self, job_dir: Path, params: dict) -> None:
        from scipy.spatial.transform import Rotation

        from .register import kabsch, save_pose

        mesh = meshio.load_mesh(job_dir / "mesh.ply")
        index = self._match_mesh(mesh)
        placed = self.scene.object_camera_pose(index).apply(
            self.scene.objects[index].mesh.vertices)
        pose = kabsch(mesh.vertices, placed)

        rng = np.random.default_rng(int(params["seed"]))
        rot_deg = float(params.get("rotation_noise_deg", 0.0))
        if rot_deg > 0:
            axis = _unit(rng.normal(size=3))
            wobble = Rotation.from_rotvec(np.radians(rot_deg) * axis).as_matrix()
            center = pose.apply(mesh.centroid())
            pose = RigidTransform(wobble @ pose.rotation,
                                  wobble @ pose.translation
                                  + center - wobble @ center)
        shift = float(params.get("translation_noise", 0.0))
        if shift > 0:
            pose = RigidTransform(pose.rotation,
                                  pose.translation + shift * _unit(rng.normal(size=3)))
        save_pose(pose, job_dir / "pose.json")

    def _match_mesh(self, mesh: TexturedMesh) -> int:
        """Identify a job mesh by shape, ignoring frame and scale.

        PLY files keep vertex order, so an index-aligned similarity fit
        separates the true object (residual at float32 noise) from any
        other (residual at geometry scale) even when the upstream scale
        estimate was off by a few percent.
        """
        from .register import kabsch

        spread = np.linalg.norm(mesh.vertices - mesh.vertices.mean(axis=0),
                                axis=1).mean()
        best = None
        for i, obj in enumerate(self.scene.objects):
            ref = obj.mesh.vertices
            if len(ref) != len(mesh.vertices):
                continue
            ref_spread = np.linalg.norm(ref - ref.mean(axis=0), axis=1).mean()
            fit = kabsch(mesh.vertices * (ref_spread / spread), ref)
            resid = fit.apply(mesh.vertices * (ref_spread / spread)) - ref
            rms = float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
            if best is None or rms / ref_spread < best[0]:
                best = (rms / ref_spread, i)
        if best is None or best[0] > 1e-3:
            raise ValidationError("pose job mesh matches no scene object")
        return best[1]


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        return np.array([1.0, 0.0, 0.0])
    return vec / norm
