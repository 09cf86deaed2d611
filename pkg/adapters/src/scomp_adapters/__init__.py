"""Stage adapters for the scomp pipeline.

The pipeline engine runs each model-backed stage by preparing a job
directory and executing an adapter command over it.  This package ships
one such command, ``scomp-adapter``, which serves every stage from a
single executable.  Outputs come either from a hosted inference
endpoint (configured through environment variables) or from a canned
fixture set for offline and CI use.

The package speaks only the job-directory file formats; it does not
import the engine.
"""

from .config import STAGES, AdapterConfig
from .errors import AdapterError, BackendUnavailable, OutputInvalid, RemoteError
from .fixtures import replay, write_fixtures
from .stages import STAGE_FILES, run_job

__all__ = [
    "STAGES",
    "STAGE_FILES",
    "AdapterConfig",
    "AdapterError",
    "BackendUnavailable",
    "OutputInvalid",
    "RemoteError",
    "replay",
    "run_job",
    "write_fixtures",
]
