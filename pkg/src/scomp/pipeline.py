"""Completion pipeline: stage orchestration, job caching, and scoring.

One RGB-D frame becomes a set of completed, posed object meshes through
six stages:

  describe     image -> one text prompt per visible object
  segment      image + prompts -> candidate masks with confidences
  inpaint      isolated object image + fill mask -> de-occluded image
  image_to_3d  completed object crop -> watertight mesh (arbitrary scale)
  descriptors  observed/rendered image pair -> dense feature tensors
  pose         scaled mesh + partial cloud -> 6-DOF camera-frame pose

Every stage runs over a *job directory* with fixed file names, so any
executable that honors the layout can serve as a backend.  The layouts:

  describe:     in  image.png                 out prompts.json (JSON list)
  segment:      in  image.png, prompts.json   out candidates.json + mask PNGs
  inpaint:      in  image.png, mask.png,      out inpainted.png (same size)
                    prompt.txt
  image_to_3d:  in  image.png                 out mesh.ply
                                                  [viewpoint.json optional]
  descriptors:  in  observed.png, observed_mask.png,
                    rendered.png, rendered_mask.png
                                              out observed.desc, rendered.desc
  pose:         in  mesh.ply, cloud.ply       out pose.json

Each job directory also carries a ``manifest.json`` describing inputs,
parameters and expected outputs; the engine writes it before dispatch
and records the final status afterwards.  Job directories are
content-addressed (a digest of the stage, parameters, backend spec and
input bytes), so re-running an identical configuration reuses every
finished stage instead of executing it again.

Backends per stage come from the run configuration: ``adapter`` invokes
an external executable as ``exe <job_dir>``, ``oracle`` answers from a
synthetic scene bundle, and ``builtin`` uses the in-process
implementations (ZNCC descriptors, multi-start ICP).  Only the
descriptors and pose stages have builtins; the perception stages must
name an adapter or the oracle.

Timing information goes to a separate ``timings.json`` so that
``run.json``, the manifests and all artifacts are byte-for-byte
reproducible for a fixed configuration and seed.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
import shutil
import struct
import subprocess
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import meshio
from .correspond import (
    DEFAULT_MIN_SCORE,
    DEFAULT_PATCH,
    DEFAULT_STRIDE,
    DEFAULT_TOP_K,
    descriptor_map_from_tensor,
    match,
    lift_to_3d,
    read_descriptor_tensor,
    write_descriptor_tensor,
    zncc_descriptors,
)
from .errors import ConfigError, ScompError, StageFailure, ValidationError
from .maskops import (
    DEFAULT_CONTAINMENT_THRESHOLD,
    DEFAULT_DILATION_PX,
    DEFAULT_OVERLAP_THRESHOLD,
    MaskCandidateSet,
    build_inpaint_job,
    composite_on_white,
    select_masks,
)
from .grasp import (
    DEFAULT_GRASPS_PER_OBJECT,
    fit_support_plane,
    grasp_collision_details,
)
from .metrics import scene_metrics, write_report
from .raster import backproject, render_object_view
from .register import (
    RegistrationConfig,
    RegistrationResult,
    evaluate_registration,
    icp_register,
    kabsch,
    load_pose,
    save_pose,
)
from .scaling import apply_scale, estimate_scale
from .scene import (
    CameraIntrinsics,
    ObjectMask,
    ReconstructedObject,
    RgbdFrame,
    RigidTransform,
    SceneReconstruction,
)

STAGE_NAMES = ("describe", "segment", "inpaint", "image_to_3d",
               "descriptors", "pose")

# Fixed (role, filename) pairs every backend must produce.  Stages may
# write extra files next to them (segment's mask PNGs, image_to_3d's
# optional viewpoint.json); those are referenced from the fixed ones.
STAGE_OUTPUTS = {
    "describe": (("prompts", "prompts.json"),),
    "segment": (("candidates", "candidates.json"),),
    "inpaint": (("inpainted", "inpainted.png"),),
    "image_to_3d": (("mesh", "mesh.ply"),),
    "descriptors": (("observed", "observed.desc"), ("rendered", "rendered.desc")),
    "pose": (("pose", "pose.json"),),
}

DEFAULT_VLM_PROMPT = ("describe the objects in the image with their generic "
                      "name and color as prompts in a list.")
DEFAULT_ADAPTER_TIMEOUT = 300.0
ADAPTER_PATH_VAR = "SCOMP_ADAPTER_PATH"
MANIFEST_NAME = "manifest.json"

# Pipeline runs accept the first ICP start that lands this close, which
# on clean geometry skips most of the 24 rotational restarts.
PIPELINE_EARLY_STOP_RMSE = 2e-4

# An adapter pose with fewer inliers than this is replaced by ICP.
POSE_INLIER_FLOOR = 0.5

_DIGEST_CHARS = 16
_STATUSES = ("pending", "ok", "failed")
_DIAGNOSTIC_LIMIT = 4000


def _canonical_json(obj) -> str:
    try:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                          allow_nan=False)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"value is not plain JSON data: {e}") from None


def _check_relpath(path: str) -> str:
    p = str(path)
    if not p or p.startswith("/") or "\\" in p:
        raise ValidationError(f"job paths must be relative, got {p!r}")
    if any(part in ("..", "") for part in p.split("/")):
        raise ValidationError(f"job path escapes its directory: {p!r}")
    return p


def _pairs(items) -> tuple:
    out = []
    for role, rel in items:
        out.append((str(role), _check_relpath(rel)))
    return tuple(out)


# ------------------------------------------------------------- manifests ----

@dataclasses.dataclass
class StageManifest:
    """What one stage job consumed, produced, and how it ended.

    ``inputs`` and ``outputs`` are (role, relative path) pairs; paths
    stay inside the job directory.  ``params`` must be plain JSON data
    because it feeds the job digest.
    """

    stage: str
    inputs: tuple
    params: dict
    outputs: tuple
    status: str = "pending"
    diagnostics: str = ""

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise ValidationError(f"unknown stage {self.stage!r}")
        self.inputs = _pairs(self.inputs)
        self.outputs = _pairs(self.outputs)
        _canonical_json(self.params)
        if self.status not in _STATUSES:
            raise ValidationError(f"unknown status {self.status!r}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "inputs": [list(p) for p in self.inputs],
            "params": self.params,
            "outputs": [list(p) for p in self.outputs],
            "status": self.status,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageManifest":
        extra = set(d) - {"stage", "inputs", "params", "outputs",
                          "status", "diagnostics"}
        if extra:
            raise ValidationError(f"unknown manifest keys {sorted(extra)}")
        try:
            return cls(stage=d["stage"], inputs=d["inputs"], params=d["params"],
                       outputs=d["outputs"], status=d.get("status", "pending"),
                       diagnostics=d.get("diagnostics", ""))
        except KeyError as e:
            raise ValidationError(f"manifest missing key {e}") from None


def save_manifest(manifest: StageManifest, path) -> None:
    Path(path).write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> StageManifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid manifest JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: manifest must be a JSON object")
    return StageManifest.from_dict(doc)


def job_digest(stage: str, params: dict, backend_spec: dict, input_files) -> str:
    """Content digest of one stage job.

    Covers the stage name, parameters, the backend spec as configured,
    and the input bytes (sorted by role), so any change that could
    change the outputs changes the digest.
    """
    h = hashlib.sha256()

    def _chunk(data: bytes):
        h.update(struct.pack("<Q", len(data)))
        h.update(data)

    _chunk(stage.encode())
    _chunk(_canonical_json(params).encode())
    _chunk(_canonical_json(backend_spec).encode())
    for role, path in sorted(input_files, key=lambda rp: rp[0]):
        _chunk(str(role).encode())
        _chunk(Path(path).read_bytes())
    return h.hexdigest()


# -------------------------------------------------------------- adapters ----

def resolve_adapter(command: str) -> str:
    """Find a stage executable.

    Commands with a directory part are used as-is; bare names are
    searched first in the directories listed in ``SCOMP_ADAPTER_PATH``
    (``os.pathsep`` separated), then on ``PATH``.
    """
    if not command:
        raise ConfigError("adapter command is empty")
    if os.path.dirname(command):
        if os.path.isfile(command) and os.access(command, os.X_OK):
            return os.path.abspath(command)
        raise ConfigError(f"adapter {command!r} is not an executable file")
    extra = os.environ.get(ADAPTER_PATH_VAR, "")
    for d in filter(None, extra.split(os.pathsep)):
        cand = os.path.join(d, command)
        if os.path.isfile(cand) and os.access(cand, os.X_OK):
            return os.path.abspath(cand)
    found = shutil.which(command)
    if found:
        return found
    raise ConfigError(
        f"adapter {command!r} not found on {ADAPTER_PATH_VAR} or PATH")


def invoke_adapter(manifest: StageManifest, job_dir, command: str,
                   timeout: float = DEFAULT_ADAPTER_TIMEOUT) -> StageManifest:
    """Run an external backend over a prepared job directory.

    Writes the pending manifest (adapters may read params from it),
    executes ``command <job_dir>``, then records ``ok`` when the
    process exits zero and every declared output exists, ``failed``
    otherwise with the captured output as diagnostics.
    """
    job_dir = Path(job_dir)
    exe = resolve_adapter(command)
    manifest.status = "pending"
    manifest.diagnostics = ""
    save_manifest(manifest, job_dir / MANIFEST_NAME)
    try:
        proc = subprocess.run([exe, str(job_dir)], capture_output=True,
                              text=True, errors="replace", timeout=timeout)
    except subprocess.TimeoutExpired:
        manifest.status = "failed"
        manifest.diagnostics = f"timed out after {timeout:g}s"
    else:
        captured = (proc.stdout + proc.stderr).strip()[-_DIAGNOSTIC_LIMIT:]
        if proc.returncode != 0:
            manifest.status = "failed"
            manifest.diagnostics = f"exit code {proc.returncode}: {captured}"
        else:
            missing = [rel for _, rel in manifest.outputs
                       if not (job_dir / rel).is_file()]
            if missing:
                manifest.status = "failed"
                manifest.diagnostics = f"missing outputs {missing}: {captured}"
            else:
                manifest.status = "ok"
    save_manifest(manifest, job_dir / MANIFEST_NAME)
    return manifest


# -------------------------------------------------------- configuration ----

_REGISTER_KEYS = tuple(f.name for f in dataclasses.fields(RegistrationConfig)
                       if f.name != "seed")


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs beyond the frame itself.

    ``stages`` maps stage names to backend specs:
    ``{"kind": "adapter", "command": ..., "timeout": ...}``,
    ``{"kind": "oracle", ...options}`` or ``{"kind": "builtin"}``.
    Spec keys beyond the backend selection are forwarded to the stage
    as extra parameters (and participate in job digests).  Credentials
    for hosted backends travel through the adapter's own environment,
    never through the config or the run directory.
    """

    seed: int = 0
    vlm_prompt: str = DEFAULT_VLM_PROMPT
    stages: dict = dataclasses.field(default_factory=dict)
    oracle_bundle: str | None = None
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    containment_threshold: float = DEFAULT_CONTAINMENT_THRESHOLD
    dilation_px: int = DEFAULT_DILATION_PX
    patch: int = DEFAULT_PATCH
    stride: int = DEFAULT_STRIDE
    top_k: int = DEFAULT_TOP_K
    min_score: float = DEFAULT_MIN_SCORE
    register: dict = dataclasses.field(default_factory=dict)
    adapter_timeout: float = DEFAULT_ADAPTER_TIMEOUT
    max_parallel_objects: int | None = None

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for stage, spec in self.stages.items():
            _check_stage_spec(stage, spec)
        bad = set(self.register) - set(_REGISTER_KEYS)
        if bad:
            raise ConfigError(
                f"unknown register options {sorted(bad)}; "
                f"seed is derived per object and cannot be set here")

    def stage_spec(self, stage: str) -> dict:
        """The effective backend spec for a stage.

        Descriptors and pose fall back to the builtin implementations;
        the perception stages must be configured explicitly.
        """
        if stage not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {stage!r}")
        spec = self.stages.get(stage)
        if spec is None:
            if stage in ("descriptors", "pose"):
                return {"kind": "builtin"}
            raise ConfigError(
                f"stage {stage!r} has no backend configured and no builtin")
        if spec["kind"] == "oracle" and not self.oracle_bundle:
            raise ConfigError(
                f"stage {stage!r} uses the oracle but oracle_bundle is unset")
        return spec

    def registration_config(self, seed: int) -> RegistrationConfig:
        opts = {"early_stop_rmse": PIPELINE_EARLY_STOP_RMSE}
        opts.update(self.register)
        return RegistrationConfig(seed=seed, **opts)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "vlm_prompt": self.vlm_prompt,
            "stages": {k: dict(v) for k, v in sorted(self.stages.items())},
            "oracle_bundle": self.oracle_bundle,
            "select": {
                "overlap_threshold": self.overlap_threshold,
                "containment_threshold": self.containment_threshold,
            },
            "dilation_px": self.dilation_px,
            "descriptor": {"patch": self.patch, "stride": self.stride},
            "match": {"top_k": self.top_k, "min_score": self.min_score},
            "register": dict(sorted(self.register.items())),
            "adapter_timeout": self.adapter_timeout,
            "max_parallel_objects": self.max_parallel_objects,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(doc)
        version = d.pop("version", 1)
        if version != 1:
            raise ConfigError(f"unsupported config version {version!r}")
        kw = {}
        for key in ("seed", "vlm_prompt", "stages", "oracle_bundle",
                    "dilation_px", "adapter_timeout", "max_parallel_objects",
                    "register"):
            if key in d:
                kw[key] = d.pop(key)
        kw.update(_sub(d, "select", ("overlap_threshold", "containment_threshold")))
        kw.update(_sub(d, "descriptor", ("patch", "stride")))
        kw.update(_sub(d, "match", ("top_k", "min_score")))
        if d:
            raise ConfigError(f"unknown config keys {sorted(d)}")
        return cls(**kw)


def _sub(doc: dict, name: str, allowed: tuple) -> dict:
    block = doc.pop(name, None)
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    extra = set(block) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} in config section {name!r}")
    return dict(block)


def _check_stage_spec(stage: str, spec) -> None:
    if stage not in STAGE_NAMES:
        raise ConfigError(f"unknown stage {stage!r} in config")
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"stage {stage!r} spec must be an object with a kind")
    kind = spec["kind"]
    if kind == "adapter":
        if not isinstance(spec.get("command"), str) or not spec["command"]:
            raise ConfigError(f"adapter spec for {stage!r} needs a command")
    elif kind == "builtin":
        if stage not in ("descriptors", "pose"):
            raise ConfigError(f"stage {stage!r} has no builtin backend")
    elif kind != "oracle":
        raise ConfigError(f"unknown backend kind {kind!r} for stage {stage!r}")


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot read config: {e}") from None
    return PipelineConfig.from_dict(doc)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def derive_seed(base: int, stage: str, index: int | None = None) -> int:
    """A stable per-stage (and optionally per-object) seed.

    Hashing keeps streams independent: nearby base seeds or indices
    share no structure, and adding objects never shifts the seeds of
    existing ones.
    """
    label = f"{base}:{stage}" if index is None else f"{base}:{stage}:{index}"
    digest = hashlib.sha256(label.encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ------------------------------------------------------ output validation ----

def load_prompts(job_dir) -> list[str]:
    path = Path(job_dir) / "prompts.json"
    doc = _load_json(path)
    if not isinstance(doc, list) or not all(isinstance(p, str) for p in doc):
        raise ValidationError(f"{path}: prompts must be a JSON list of strings")
    return [p for p in doc if p.strip()]


def load_segment_output(job_dir, shape) -> MaskCandidateSet:
    """Parse candidates.json and its mask files into a candidate set.

    Entries whose mask has no set pixels are dropped (segmenters emit
    them for prompts with no match); everything else is validated
    strictly: masks must exist, live inside the job directory and match
    the frame size.
    """
    job_dir = Path(job_dir)
    path = job_dir / "candidates.json"
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: candidates must be a JSON list")
    masks = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or not {"prompt", "confidence", "mask"} <= set(entry):
            raise ValidationError(
                f"{path}: entry {i} needs prompt, confidence and mask keys")
        rel = _check_relpath(entry["mask"])
        mask_path = job_dir / rel
        if not mask_path.is_file():
            raise ValidationError(f"{path}: entry {i} mask {rel!r} is missing")
        bits = meshio.load_mask_png(mask_path)
        if bits.shape != tuple(shape):
            raise ValidationError(
                f"{path}: entry {i} mask is {bits.shape}, frame is {tuple(shape)}")
        conf = float(entry["confidence"])
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"{path}: entry {i} confidence {conf} outside [0, 1]")
        if not bits.any():
            continue
        masks.append(ObjectMask(bits, conf, str(entry["prompt"])))
    return MaskCandidateSet(tuple(masks))


def load_inpaint_output(job_dir, shape) -> np.ndarray:
    path = Path(job_dir) / "inpainted.png"
    rgb = meshio.load_color_png(path)
    if rgb.shape[:2] != tuple(shape):
        raise ValidationError(
            f"{path}: inpainted image is {rgb.shape[:2]}, expected {tuple(shape)}")
    return rgb


def load_mesh_output(job_dir):
    """The reconstructed mesh plus the optional rendering viewpoint.

    Returns ``(mesh, viewpoint)`` where viewpoint is None or a
    ``(camera_pose, intrinsics)`` pair: backends that reconstruct in a
    non-canonical frame declare the camera that reproduces their input
    image so the rendered view lines up with the observation.
    """
    job_dir = Path(job_dir)
    mesh = meshio.load_mesh(job_dir / "mesh.ply")
    vp_path = job_dir / "viewpoint.json"
    if not vp_path.is_file():
        return mesh, None
    doc = _load_json(vp_path)
    if not isinstance(doc, dict) or not {"rotation", "translation", "intrinsics"} <= set(doc):
        raise ValidationError(
            f"{vp_path}: viewpoint needs rotation, translation and intrinsics")
    pose = RigidTransform(np.asarray(doc["rotation"], dtype=np.float64),
                          np.asarray(doc["translation"], dtype=np.float64))
    intr = CameraIntrinsics.from_dict(doc["intrinsics"])
    return mesh, (pose, intr)


def load_descriptor_output(job_dir, stride: int, origin: tuple):
    job_dir = Path(job_dir)
    obs = read_descriptor_tensor(job_dir / "observed.desc")
    ren = read_descriptor_tensor(job_dir / "rendered.desc")
    return (descriptor_map_from_tensor(obs, stride, origin),
            descriptor_map_from_tensor(ren, stride, origin))


def load_pose_output(job_dir) -> RigidTransform:
    return load_pose(Path(job_dir) / "pose.json")


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path}: missing") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from None


# ------------------------------------------------------ builtin backends ----

def _builtin_descriptors(job_dir, params) -> None:
    job_dir = Path(job_dir)
    patch, stride = int(params["patch"]), int(params["stride"])
    for side in ("observed", "rendered"):
        image = meshio.load_color_png(job_dir / f"{side}.png")
        bits = meshio.load_mask_png(job_dir / f"{side}_mask.png")
        dmap = zncc_descriptors(image, bits, patch=patch, stride=stride)
        write_descriptor_tensor(dmap.grid, job_dir / f"{side}.desc")


def _builtin_pose(job_dir, params) -> None:
    job_dir = Path(job_dir)
    mesh = meshio.load_mesh(job_dir / "mesh.ply")
    cloud = meshio.load_cloud(job_dir / "cloud.ply")
    config = RegistrationConfig(seed=int(params["seed"]), **params["register"])
    initial = params.get("initial")
    if initial is not None:
        initial = RigidTransform.from_dict(initial)
    result = icp_register(mesh, cloud, config, initial=initial)
    save_pose(result.pose, job_dir / "pose.json")
    (job_dir / "result.json").write_text(json.dumps({
        "rmse": result.rmse,
        "inlier_fraction": result.inlier_fraction,
        "converged": result.converged,
        "restarts_used": result.restarts_used,
    }, indent=2, sort_keys=True) + "\n")


_BUILTINS = {"descriptors": _builtin_descriptors, "pose": _builtin_pose}


# --------------------------------------------------------------- executor ----

class _Executor:
    """Runs stage jobs in content-addressed directories with reuse.

    A job directory whose manifest says ``ok`` (and whose outputs still
    exist) is never executed again; anything else is rebuilt from
    scratch.  Thread safe: concurrent requests for the same digest
    execute once, later requests wait for the result.
    """

    def __init__(self, root, config: PipelineConfig, overrides):
        self.root = Path(root)
        self.config = config
        self.overrides = overrides
        self.executed = 0
        self.timings = {}
        self._oracle = None
        self._lock = threading.Lock()
        self._inflight = {}

    def run(self, stage: str, inputs, params: dict) -> tuple[Path, StageManifest]:
        """Execute (or reuse) one job; inputs are (role, name, writer)."""
        if stage in self.overrides:
            spec = {"kind": "override"}
        else:
            spec = self.config.stage_spec(stage)
        params = dict(params)
        params.update({k: v for k, v in spec.items()
                       if k not in ("kind", "command", "timeout")})

        stage_root = self.root / stage
        stage_root.mkdir(parents=True, exist_ok=True)
        tmp = stage_root / f"tmp-{uuid.uuid4().hex}"
        tmp.mkdir()
        try:
            files = []
            for role, name, writer in inputs:
                writer(tmp / name)
                files.append((role, tmp / name))
            digest = job_digest(stage, params, spec, files)[:_DIGEST_CHARS]
            job_dir = stage_root / digest

            while True:
                with self._lock:
                    cached = self._cached(job_dir)
                    if cached is not None:
                        shutil.rmtree(tmp)
                        return job_dir, cached
                    waiter = self._inflight.get(digest)
                    if waiter is None:
                        self._inflight[digest] = threading.Event()
                        if job_dir.exists():
                            shutil.rmtree(job_dir)
                        os.replace(tmp, job_dir)
                        break
                waiter.wait()
            manifest = StageManifest(
                stage=stage,
                inputs=[(role, name) for role, name, _ in inputs],
                params=params,
                outputs=STAGE_OUTPUTS[stage],
            )
            try:
                manifest = self._execute(stage, spec, job_dir, manifest, digest)
            finally:
                with self._lock:
                    self._inflight.pop(digest).set()
            return job_dir, manifest
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)

    def _cached(self, job_dir: Path):
        if not (job_dir / MANIFEST_NAME).is_file():
            return None
        try:
            manifest = load_manifest(job_dir / MANIFEST_NAME)
        except ScompError:
            return None
        if manifest.status != "ok":
            return None
        if any(not (job_dir / rel).is_file() for _, rel in manifest.outputs):
            return None
        return manifest

    def _execute(self, stage, spec, job_dir, manifest, digest) -> StageManifest:
        start = time.perf_counter()
        kind = spec["kind"]
        if kind == "adapter":
            timeout = spec.get("timeout", self.config.adapter_timeout)
            manifest = invoke_adapter(manifest, job_dir, spec["command"], timeout)
        else:
            if kind == "override":
                fn = self.overrides[stage]
            elif kind == "builtin":
                fn = _BUILTINS[stage]
            else:
                fn = functools.partial(self._oracle_backend(), stage)
            save_manifest(manifest, job_dir / MANIFEST_NAME)
            try:
                fn(job_dir, manifest.params)
            except Exception as e:  # backend bug: record, don't crash the run
                manifest.status = "failed"
                manifest.diagnostics = f"{type(e).__name__}: {e}"[:_DIAGNOSTIC_LIMIT]
            else:
                missing = [rel for _, rel in manifest.outputs
                           if not (job_dir / rel).is_file()]
                if missing:
                    manifest.status = "failed"
                    manifest.diagnostics = f"missing outputs {missing}"
                else:
                    manifest.status = "ok"
            save_manifest(manifest, job_dir / MANIFEST_NAME)
        with self._lock:
            self.executed += 1
            self.timings[f"{stage}/{digest}"] = time.perf_counter() - start
        return manifest

    def _oracle_backend(self):
        with self._lock:
            if self._oracle is None:
                from .synth import OracleBackend, load_scene_bundle
                scene = load_scene_bundle(self.config.oracle_bundle)
                self._oracle = OracleBackend(scene)
            return self._oracle


# ------------------------------------------------------------------ runs ----

@dataclasses.dataclass(frozen=True)
class PipelineRun:
    """A finished (or attempted) completion run and where it lives."""

    out_dir: Path
    config: PipelineConfig
    frame: RgbdFrame
    prompts: tuple
    reconstruction: SceneReconstruction
    records: tuple
    executed: int

    @property
    def empty(self) -> bool:
        return len(self.reconstruction) == 0

    @property
    def partial(self) -> bool:
        failed = any(r["status"] != "ok" for r in self.records)
        return failed and len(self.reconstruction) > 0

    @property
    def exit_code(self) -> int:
        if self.empty:
            return 3
        return 2 if self.partial else 0


def run_pipeline(frame: RgbdFrame, config: PipelineConfig, out_dir,
                 backends=None) -> PipelineRun:
    """Complete every detected object in one frame.

    ``backends`` optionally maps stage names to in-process callables
    ``fn(job_dir, params)`` that take precedence over the configured
    backend, which is how tests inject faults or stubs.  Failures in
    per-object stages skip that object and continue; failures in the
    scene-level describe/segment stages raise :class:`StageFailure`.

    The run directory is self-contained: config.json, frame/, the
    content-addressed stages/ tree, objects/ with the final meshes and
    poses, run.json describing everything, and timings.json (the only
    file allowed to differ between identical runs).
    """
    backends = backends or {}
    _validate_backends(config, backends)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    meshio.save_frame_dir(frame, out / "frame")
    executor = _Executor(out / "stages", config, backends)
    started = time.perf_counter()

    try:
        job, manifest = executor.run(
            "describe",
            [("image", "image.png",
              functools.partial(meshio.save_color_png, frame.rgb))],
            {"prompt": config.vlm_prompt,
             "seed": derive_seed(config.seed, "describe")})
        _require_ok(manifest)
        prompts = _scene_output(load_prompts, job, "describe")
        if not prompts:
            return _finalize(out, executor, config, frame, (), (), started)

        prompt_bytes = (job / "prompts.json").read_bytes()
        job, manifest = executor.run(
            "segment",
            [("image", "image.png",
              functools.partial(meshio.save_color_png, frame.rgb)),
             ("prompts", "prompts.json",
              lambda p: Path(p).write_bytes(prompt_bytes))],
            {"seed": derive_seed(config.seed, "segment")})
        _require_ok(manifest)
        candidates = _scene_output(load_segment_output, job, "segment",
                                   frame.depth.shape)
        kept = select_masks(candidates, config.overlap_threshold,
                            config.containment_threshold)
        if not kept:
            return _finalize(out, executor, config, frame, tuple(prompts),
                             (), started)

        workers = config.max_parallel_objects or os.cpu_count() or 1
        results = [None] * len(kept)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = {
                pool.submit(_complete_object, frame, config, executor,
                            kept, i): i
                for i in range(len(kept))
            }
            for future in futures:
                results[futures[future]] = future.result()
        return _finalize(out, executor, config, frame, tuple(prompts),
                         results, started)
    finally:
        _write_timings(out, executor, time.perf_counter() - started)


def _validate_backends(config: PipelineConfig, overrides) -> None:
    """Fail fast on unrunnable configurations, before any stage work."""
    for stage in STAGE_NAMES:
        if stage in overrides:
            continue
        spec = config.stage_spec(stage)
        if spec["kind"] == "adapter":
            resolve_adapter(spec["command"])


def _require_ok(manifest: StageManifest) -> None:
    if manifest.status != "ok":
        raise StageFailure(
            f"stage {manifest.stage} failed: {manifest.diagnostics}")


def _scene_output(loader, job, stage, *args):
    try:
        return loader(job, *args)
    except ScompError as e:
        raise StageFailure(f"stage {stage} produced invalid output: {e}") from e


def _complete_object(frame, config, executor, kept, index):
    """One object's chain from mask to posed mesh; never raises."""
    mask = kept[index]
    record = {"index": index, "prompt": mask.prompt, "status": "ok",
              "jobs": {}}
    current = "inpaint"
    try:
        others = [m for j, m in enumerate(kept) if j != index]
        job_spec = build_inpaint_job(mask, others, frame, config.dilation_px)
        job, manifest = executor.run(
            "inpaint",
            [("image", "image.png",
              functools.partial(meshio.save_color_png, job_spec.isolated_image)),
             ("mask", "mask.png",
              functools.partial(meshio.save_mask_png, job_spec.fill_mask)),
             ("prompt", "prompt.txt",
              functools.partial(_write_text, job_spec.prompt + "\n"))],
            {"seed": derive_seed(config.seed, "inpaint", index)})
        record["jobs"]["inpaint"] = job.name
        _require_ok(manifest)
        inpainted = load_inpaint_output(job, frame.depth.shape)
        extent_bits = ~np.all(inpainted == 255, axis=2)
        if not extent_bits.any():
            raise StageFailure("inpainted image is entirely white")
        extent = ObjectMask(extent_bits, 1.0, mask.prompt)

        current = "image_to_3d"
        completed = RgbdFrame(inpainted, frame.depth, frame.intrinsics)
        crop, _ = composite_on_white(completed, extent)
        job, manifest = executor.run(
            "image_to_3d",
            [("image", "image.png",
              functools.partial(meshio.save_color_png, crop))],
            {"seed": derive_seed(config.seed, "image_to_3d", index)})
        record["jobs"]["image_to_3d"] = job.name
        _require_ok(manifest)
        mesh, viewpoint = load_mesh_output(job)
        if viewpoint is not None:
            view = render_object_view(mesh, camera_pose=viewpoint[0],
                                      intrinsics=viewpoint[1])
        else:
            view = render_object_view(mesh)
        rendered_bits = view.instance_ids > 0
        if not rendered_bits.any():
            raise StageFailure("reconstructed mesh renders to no pixels")

        current = "descriptors"
        job, manifest = executor.run(
            "descriptors",
            [("observed", "observed.png",
              functools.partial(meshio.save_color_png, inpainted)),
             ("observed_mask", "observed_mask.png",
              functools.partial(meshio.save_mask_png, extent_bits)),
             ("rendered", "rendered.png",
              functools.partial(meshio.save_color_png, view.color)),
             ("rendered_mask", "rendered_mask.png",
              functools.partial(meshio.save_mask_png, rendered_bits))],
            {"patch": config.patch, "stride": config.stride})
        record["jobs"]["descriptors"] = job.name
        _require_ok(manifest)
        origin = (config.patch // 2, config.patch // 2)
        observed_map, rendered_map = load_descriptor_output(
            job, config.stride, origin)

        current = "scale"
        corr = match(observed_map, rendered_map, config.top_k, config.min_score)
        observed_pts, rendered_pts = lift_to_3d(corr, frame, mask, view)
        estimate = estimate_scale(observed_pts, rendered_pts)
        scaled = apply_scale(mesh, estimate)
        record["scale"] = estimate.factor
        record["correspondences"] = len(observed_pts)

        current = "pose"
        # the same correspondences give a coarse pose: rendered points
        # mapped back to the (rescaled) mesh frame against their observed
        # partners, which anchors registration away from symmetric fits
        mesh_pts = view.camera_pose.inverse().apply(rendered_pts.points)
        center = mesh.centroid()
        coarse = kabsch(center + estimate.factor * (mesh_pts - center),
                        observed_pts.points)
        partial_cloud = backproject(frame, mask)
        result = _register_object(config, executor, record, scaled,
                                  partial_cloud, index, coarse)
        record.update(rmse=result.rmse,
                      inlier_fraction=result.inlier_fraction,
                      converged=result.converged)
        return ReconstructedObject(scaled, result.pose, mask.prompt), record
    except Exception as e:
        record.update(status="failed", stage=current,
                      error=f"{type(e).__name__}: {e}"[:_DIAGNOSTIC_LIMIT])
        return None, record


def _register_object(config, executor, record, mesh, cloud, index, coarse):
    seed = derive_seed(config.seed, "pose", index)
    reg_config = config.registration_config(seed)
    job, manifest = executor.run(
        "pose",
        [("mesh", "mesh.ply", functools.partial(meshio.save_mesh, mesh)),
         ("cloud", "cloud.ply", functools.partial(meshio.save_cloud, cloud))],
        {"seed": seed,
         "initial": coarse.to_dict(),
         "register": {k: getattr(reg_config, k) for k in _REGISTER_KEYS}})
    record["jobs"]["pose"] = job.name
    _require_ok(manifest)
    pose = load_pose_output(job)
    kind = ("override" if "pose" in executor.overrides
            else config.stage_spec("pose")["kind"])
    result_path = job / "result.json"
    if kind == "builtin" and result_path.is_file():
        doc = _load_json(result_path)
        return RegistrationResult(pose, doc["rmse"], doc["inlier_fraction"],
                                  doc["converged"], doc.get("restarts_used", 0))
    rmse, inliers = evaluate_registration(mesh, pose, cloud,
                                          reg_config.accept_rmse)
    if inliers < POSE_INLIER_FLOOR:
        record["pose_fallback"] = True
        return icp_register(mesh, cloud, reg_config, initial=coarse)
    return RegistrationResult(pose, rmse, inliers,
                              rmse <= reg_config.accept_rmse, 0)


def _write_text(text, path):
    Path(path).write_text(text)


def _finalize(out, executor, config, frame, prompts, results, started):
    objects = []
    records = []
    for item in results:
        obj, record = item
        if obj is None:
            records.append(record)
            continue
        slot = f"obj_{record['index']:03d}"
        obj_dir = out / "objects" / slot
        obj_dir.mkdir(parents=True, exist_ok=True)
        meshio.save_mesh(obj.mesh, obj_dir / "mesh.ply")
        save_pose(obj.pose, obj_dir / "pose.json")
        (obj_dir / "prompt.txt").write_text(obj.prompt + "\n")
        record["mesh"] = f"objects/{slot}/mesh.ply"
        record["pose"] = f"objects/{slot}/pose.json"
        record["mesh_sha256"] = _file_sha(out / record["mesh"])
        record["pose_sha256"] = _file_sha(out / record["pose"])
        objects.append(obj)
        records.append(record)

    recon = SceneReconstruction(tuple(objects), frame.intrinsics)
    run = PipelineRun(out_dir=out, config=config, frame=frame,
                      prompts=tuple(prompts), reconstruction=recon,
                      records=tuple(records), executed=executor.executed)
    doc = {
        "version": 1,
        "config": config.to_dict(),
        "prompts": list(prompts),
        "objects": [dict(sorted(r.items())) for r in records],
        "empty": run.empty,
        "partial": run.partial,
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return run


def _write_timings(out, executor, total) -> None:
    doc = {"stages": dict(sorted(executor.timings.items())), "total": total}
    (out / "timings.json").write_text(json.dumps(doc, indent=2) + "\n")


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_run(out_dir) -> PipelineRun:
    """Rebuild a PipelineRun from its directory."""
    out = Path(out_dir)
    config = load_config(out / "config.json")
    frame = meshio.load_frame_dir(out / "frame")
    doc = _load_json(out / "run.json")
    records = tuple(doc.get("objects", []))
    objects = []
    for record in records:
        if record.get("status") != "ok":
            continue
        mesh = meshio.load_mesh(out / record["mesh"])
        pose = load_pose(out / record["pose"])
        objects.append(ReconstructedObject(mesh, pose, record.get("prompt", "")))
    recon = SceneReconstruction(tuple(objects), frame.intrinsics)
    return PipelineRun(out_dir=out, config=config, frame=frame,
                       prompts=tuple(doc.get("prompts", [])),
                       reconstruction=recon, records=records, executed=0)


# ------------------------------------------------------------- evaluation ----

def truth_pairs(truth) -> list:
    """Normalize ground truth to camera-frame (mesh, pose) pairs.

    Accepts a synthetic scene bundle directory, a loaded synthetic
    scene, or an explicit pair list.
    """
    if isinstance(truth, (str, os.PathLike)):
        from .synth import load_scene_bundle
        truth = load_scene_bundle(truth)
    if hasattr(truth, "object_camera_pose"):
        return [(truth.objects[i].mesh, truth.object_camera_pose(i))
                for i in range(len(truth))]
    return list(truth)


def evaluate_run(run, truth, json_path, csv_path=None,
                 grasp_count: int = DEFAULT_GRASPS_PER_OBJECT):
    """Score a run against ground truth and write the report.

    ``run`` is a PipelineRun or a run directory; ``truth`` is anything
    :func:`truth_pairs` accepts.  The JSON report carries the scene
    metrics plus a ``gc`` block with the grasp-collision breakdown; an
    empty reconstruction short-circuits to a zero-MIoU report.  The
    support plane for grasp screening is fitted to the frame's own
    depth, so evaluation needs no privileged scene knowledge.
    """
    if not isinstance(run, PipelineRun):
        run = load_run(run)
    pairs = truth_pairs(truth)

    if len(run.reconstruction) == 0:
        doc = {"empty": True, "miou": 0.0, "cd_x1e4": None,
               "mmd_emd_x1e2": None, "gc": None, "per_object": []}
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            Path(csv_path).write_text("scope,index,miou,cd_x1e4,emd_x1e2\r\n")
        return doc

    metrics = scene_metrics(pairs, run.reconstruction)
    write_report(metrics, json_path, csv_path)

    plane = fit_support_plane(backproject(run.frame).points)
    gc = grasp_collision_details(run.reconstruction, pairs,
                                 count=grasp_count, seed=run.config.seed,
                                 support_plane=plane)
    doc = json.loads(Path(json_path).read_text())
    doc["empty"] = False
    doc["gc"] = {
        "rate": gc.rate,
        "per_object": [dict(sorted(r.items())) for r in gc.per_object],
        "skipped": list(gc.skipped),
    }
    Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
