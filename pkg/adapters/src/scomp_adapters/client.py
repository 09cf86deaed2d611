"""JSON-over-HTTP transport to an inference endpoint.

The wire format is one POST per stage job:

    request  {"stage", "model", "device", "seed", "params",
              "inputs": {relative path: base64 bytes}}
    response {"status": "ok", "outputs": {relative path: base64 bytes}}
           | {"status": "unavailable", "message": ...}
           | {"status": "error", "message": ...}

"unavailable" means the server cannot run the model at all (load
failure, missing accelerator); callers turn that into exit code 4.
Credentials travel only in the Authorization header.
"""

from __future__ import annotations

import base64
import binascii
import json
import urllib.error
import urllib.request

from .errors import BackendUnavailable, RemoteError


def call_endpoint(url: str, payload: dict, timeout: float,
                  api_key: str = "") -> dict:
    """POST one job; return decoded output bytes keyed by file name."""
    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as e:
        detail = e.read(512).decode("utf-8", errors="replace").strip()
        if e.code == 503:
            raise BackendUnavailable(
                f"{url}: backend unavailable (HTTP 503): {detail}") from None
        raise RemoteError(f"{url}: HTTP {e.code}: {detail}") from None
    except (urllib.error.URLError, TimeoutError, OSError) as e:
        raise RemoteError(f"{url}: {e}") from None

    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise RemoteError(f"{url}: response is not JSON: {e}") from None
    if not isinstance(doc, dict):
        raise RemoteError(f"{url}: response must be a JSON object")

    status = doc.get("status")
    if status == "unavailable":
        raise BackendUnavailable(
            f"{url}: {doc.get('message', 'backend reported unavailable')}")
    if status != "ok":
        raise RemoteError(
            f"{url}: status {status!r}: {doc.get('message', 'no detail')}")

    outputs = doc.get("outputs")
    if not isinstance(outputs, dict) or not outputs:
        raise RemoteError(f"{url}: ok response carried no outputs")
    decoded = {}
    for name, text in outputs.items():
        if not isinstance(name, str) or not isinstance(text, str):
            raise RemoteError(f"{url}: outputs must map names to base64 strings")
        try:
            decoded[name] = base64.b64decode(text, validate=True)
        except (binascii.Error, ValueError):
            raise RemoteError(f"{url}: output {name!r} is not base64") from None
    return decoded


def encode_inputs(files: dict) -> dict:
    """Map of name -> bytes, encoded for the request body."""
    return {name: base64.b64encode(data).decode("ascii")
            for name, data in files.items()}
