"""Failure taxonomy shared across the adapter package.

The distinction matters for exit codes: an unavailable backend (nothing
configured, model failed to load, no accelerator on the serving side)
exits 4 so callers can tell "cannot serve" from "tried and failed",
which exits 1.
"""


class AdapterError(Exception):
    """Base class; any adapter-side failure."""


class OutputInvalid(AdapterError):
    """A produced output failed structural validation."""


class RemoteError(AdapterError):
    """The inference endpoint misbehaved: transport trouble, an HTTP
    error status, or a malformed response body."""


class BackendUnavailable(AdapterError):
    """No backend can serve the stage: nothing is configured, or the
    server reported it cannot load or run the model."""
