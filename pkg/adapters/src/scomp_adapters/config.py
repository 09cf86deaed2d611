"""Adapter configuration, read entirely from the environment.

Credentials and endpoints live in the caller's environment so nothing
secret ever lands in a job directory, a manifest, or a log.  All
variables are optional; with none set the adapter can still serve jobs
from a fixture directory.

    SCOMP_ADAPTER_ENDPOINT             inference endpoint shared by all stages
    SCOMP_ADAPTER_ENDPOINT_<STAGE>     per-stage override, e.g. ..._POSE
    SCOMP_ADAPTER_MODEL_<STAGE>        model identifier sent with the request
    SCOMP_ADAPTER_API_KEY              bearer token for the endpoint
    SCOMP_ADAPTER_DEVICE               accelerator hint forwarded verbatim
    SCOMP_ADAPTER_SEED                 seed used when the job supplies none
    SCOMP_ADAPTER_TIMEOUT              request timeout in seconds
    SCOMP_ADAPTER_FIXTURES             canned-output directory (replay mode)

Stage names appear uppercased in variable names: IMAGE_TO_3D for the
image_to_3d stage and so on.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Mapping

from .errors import AdapterError

STAGES = ("describe", "segment", "inpaint", "image_to_3d",
          "descriptors", "pose")

ENV_PREFIX = "SCOMP_ADAPTER"
FIXTURES_VAR = f"{ENV_PREFIX}_FIXTURES"

DEFAULT_TIMEOUT = 120.0

# Reasonable hosted-model defaults per stage; the endpoint is free to
# ignore the identifier or map it onto whatever it actually serves.
DEFAULT_MODELS = {
    "describe": "gpt-4o",
    "segment": "grounded-sam-2",
    "inpaint": "brushnet",
    "image_to_3d": "instantmesh",
    "descriptors": "vit-l-14",
    "pose": "foundationpose",
}


def _stage_var(name: str, stage: str) -> str:
    return f"{ENV_PREFIX}_{name}_{stage.upper()}"


@dataclasses.dataclass(frozen=True)
class AdapterConfig:
    """A frozen snapshot of the adapter environment.

    ``endpoints`` and ``models`` map stage names to values; a missing
    endpoint means the stage has no hosted backend.  The API key is
    deliberately excluded from ``repr`` and from anything written to
    disk.
    """

    endpoints: dict
    models: dict
    api_key: str = ""
    device: str = ""
    seed: int = 0
    timeout: float = DEFAULT_TIMEOUT
    fixtures: str = ""

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> "AdapterConfig":
        env = os.environ if env is None else env
        shared = env.get(f"{ENV_PREFIX}_ENDPOINT", "").strip()
        endpoints = {}
        models = {}
        for stage in STAGES:
            url = env.get(_stage_var("ENDPOINT", stage), "").strip() or shared
            if url:
                endpoints[stage] = url
            models[stage] = (env.get(_stage_var("MODEL", stage), "").strip()
                             or DEFAULT_MODELS[stage])
        seed_raw = env.get(f"{ENV_PREFIX}_SEED", "0").strip() or "0"
        timeout_raw = env.get(f"{ENV_PREFIX}_TIMEOUT", "").strip()
        try:
            seed = int(seed_raw)
            timeout = float(timeout_raw) if timeout_raw else DEFAULT_TIMEOUT
        except ValueError as e:
            raise AdapterError(f"bad numeric adapter variable: {e}") from None
        if timeout <= 0:
            raise AdapterError(f"{ENV_PREFIX}_TIMEOUT must be positive")
        return cls(
            endpoints=endpoints,
            models=models,
            api_key=env.get(f"{ENV_PREFIX}_API_KEY", ""),
            device=env.get(f"{ENV_PREFIX}_DEVICE", "").strip(),
            seed=seed,
            timeout=timeout,
            fixtures=env.get(FIXTURES_VAR, "").strip(),
        )

    def endpoint(self, stage: str) -> str:
        """URL serving ``stage``, or an empty string when unconfigured."""
        return self.endpoints.get(stage, "")

    def model(self, stage: str) -> str:
        return self.models.get(stage, "")

    def __repr__(self) -> str:  # keep the token out of logs
        masked = "****" if self.api_key else ""
        return (f"AdapterConfig(endpoints={self.endpoints!r}, "
                f"models={self.models!r}, api_key={masked!r}, "
                f"device={self.device!r}, seed={self.seed}, "
                f"timeout={self.timeout}, fixtures={self.fixtures!r})")
