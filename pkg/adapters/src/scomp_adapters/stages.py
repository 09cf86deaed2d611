"""Driving one stage job from a prepared directory.

A job directory arrives with input files and usually a ``manifest.json``
describing the stage, its parameters and the input roster.  The adapter
fills in the stage's output files, sourcing them either from the canned
fixture set or from a hosted endpoint, and validates them before
declaring success.  The manifest itself is the caller's bookkeeping;
the adapter only reads it.
"""

from __future__ import annotations

import json
from pathlib import Path

from .client import call_endpoint, encode_inputs
from .config import STAGES, AdapterConfig
from .errors import AdapterError, BackendUnavailable, OutputInvalid, RemoteError
from .fixtures import replay
from .validate import VALIDATORS

MANIFEST_NAME = "manifest.json"

# Output files each stage must leave behind.  The segment stage also
# writes the mask images its candidates.json points at.
STAGE_FILES = {
    "describe": ("prompts.json",),
    "segment": ("candidates.json",),
    "inpaint": ("inpainted.png",),
    "image_to_3d": ("mesh.ply",),
    "descriptors": ("observed.desc", "rendered.desc"),
    "pose": ("pose.json",),
}


def read_job(job_dir) -> tuple[str | None, dict, list[str]]:
    """Stage name, parameters and input paths from a job manifest.

    Returns ``(None, {}, [])`` when no manifest is present; explicit
    invocations may run over bare directories.
    """
    path = Path(job_dir) / MANIFEST_NAME
    if not path.is_file():
        return None, {}, []
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise AdapterError(f"{path}: invalid manifest JSON: {e}") from None
    if not isinstance(doc, dict):
        raise AdapterError(f"{path}: manifest must be a JSON object")
    stage = doc.get("stage")
    if stage is not None and stage not in STAGES:
        raise AdapterError(f"{path}: unknown stage {stage!r}")
    params = doc.get("params") or {}
    if not isinstance(params, dict):
        raise AdapterError(f"{path}: params must be an object")
    inputs = []
    for pair in doc.get("inputs") or []:
        if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                or not isinstance(pair[1], str)):
            raise AdapterError(f"{path}: inputs must be (role, path) pairs")
        inputs.append(pair[1])
    return stage, params, inputs


def _gather_inputs(job_dir: Path, stage: str, declared: list[str]) -> dict:
    """Input bytes keyed by relative path.

    With a manifest the roster is explicit; otherwise every regular
    file except the manifest and the stage's own outputs is shipped.
    """
    if declared:
        files = {}
        for rel in declared:
            path = job_dir / rel
            if not path.is_file():
                raise AdapterError(f"{path}: declared input is missing")
            files[rel] = path.read_bytes()
        return files
    skip = set(STAGE_FILES[stage]) | {MANIFEST_NAME}
    return {p.name: p.read_bytes()
            for p in sorted(job_dir.iterdir())
            if p.is_file() and p.name not in skip}


def _safe_name(name: str) -> str:
    if name.startswith(("/", "\\")) or ".." in Path(name).parts:
        raise RemoteError(f"endpoint returned unsafe output path {name!r}")
    return name


def _run_remote(stage: str, job_dir: Path, params: dict,
                inputs: list[str], config: AdapterConfig) -> None:
    url = config.endpoint(stage)
    if not url:
        raise BackendUnavailable(
            f"stage {stage!r} has no endpoint configured and no fixture "
            f"directory was given; set SCOMP_ADAPTER_ENDPOINT or "
            f"SCOMP_ADAPTER_FIXTURES")
    payload = {
        "stage": stage,
        "model": config.model(stage),
        "device": config.device,
        "seed": int(params.get("seed", config.seed)),
        "params": params,
        "inputs": encode_inputs(_gather_inputs(job_dir, stage, inputs)),
    }
    outputs = call_endpoint(url, payload, config.timeout, config.api_key)

    missing = [name for name in STAGE_FILES[stage] if name not in outputs]
    if missing:
        raise RemoteError(f"endpoint response lacks outputs {missing}")
    written = []
    try:
        for name, data in outputs.items():
            path = job_dir / _safe_name(name)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            written.append(path)
        VALIDATORS[stage](job_dir)
    except (OutputInvalid, RemoteError):
        for path in written:  # leave no half-written job behind
            path.unlink(missing_ok=True)
        raise


def run_job(stage: str, job_dir, config: AdapterConfig,
            fixture_dir: str = "") -> None:
    """Fill in the outputs for one stage job.

    Fixture mode wins when a fixture directory is known, making runs
    deterministic and network-free; otherwise the configured endpoint
    serves the job.  Raises an :class:`AdapterError` subclass on any
    failure; on success the stage's files exist and validate.
    """
    if stage not in STAGES:
        raise AdapterError(f"unknown stage {stage!r}")
    job_dir = Path(job_dir)
    if not job_dir.is_dir():
        raise AdapterError(f"{job_dir}: not a directory")
    _, params, inputs = read_job(job_dir)
    source = fixture_dir or config.fixtures
    if source:
        replay(stage, source, job_dir)
    else:
        _run_remote(stage, job_dir, params, inputs, config)
