"""The hosted-endpoint path, exercised against a loopback HTTP server."""

import base64
import http.server
import io
import json
import socket
import threading

import numpy as np
import pytest
from PIL import Image

from scomp_adapters.cli import main


class _Handler(http.server.BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length))
        self.server.requests.append((dict(self.headers), payload))
        status, doc = self.server.responder(payload)
        body = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def server():
    srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.requests = []
    srv.responder = lambda payload: (200, {"status": "ok", "outputs": {}})
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def _url(server):
    return f"http://127.0.0.1:{server.server_address[1]}/infer"


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _job(tmp_path, **files):
    job = tmp_path / "job"
    job.mkdir()
    for name, data in files.items():
        (job / name).write_bytes(data)
    return job


class TestHappyPath:
    def test_describe_round_trip(self, server, tmp_path, monkeypatch):
        server.responder = lambda payload: (200, {
            "status": "ok",
            "outputs": {"prompts.json": _b64(b'["kettle", "mitten"]')},
        })
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        monkeypatch.setenv("SCOMP_ADAPTER_API_KEY", "sekret-token-123")
        monkeypatch.setenv("SCOMP_ADAPTER_SEED", "5")
        job = _job(tmp_path, **{"image.png": b"fake image bytes"})

        assert main(["describe", str(job)]) == 0
        assert json.loads((job / "prompts.json").read_text()) == ["kettle", "mitten"]

        headers, payload = server.requests[0]
        assert headers["Authorization"] == "Bearer sekret-token-123"
        assert payload["stage"] == "describe"
        assert payload["model"] == "gpt-4o"
        assert payload["seed"] == 5
        assert base64.b64decode(payload["inputs"]["image.png"]) == b"fake image bytes"

    def test_credentials_never_reach_the_job_directory(self, server, tmp_path,
                                                       monkeypatch):
        server.responder = lambda payload: (200, {
            "status": "ok", "outputs": {"prompts.json": _b64(b'["cup"]')}})
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        monkeypatch.setenv("SCOMP_ADAPTER_API_KEY", "sekret-token-123")
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 0
        for path in job.rglob("*"):
            assert b"sekret-token-123" not in path.read_bytes(), path

    def test_manifest_params_forwarded(self, server, tmp_path, monkeypatch):
        server.responder = lambda payload: (200, {
            "status": "ok", "outputs": {"prompts.json": _b64(b'["cup"]')}})
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        manifest = {"stage": "describe", "params": {"seed": 9, "prompt": "list them"},
                    "inputs": [["image", "image.png"]],
                    "outputs": [], "status": "pending", "diagnostics": ""}
        (job / "manifest.json").write_text(json.dumps(manifest))

        assert main([str(job)]) == 0
        _, payload = server.requests[0]
        assert payload["seed"] == 9
        assert payload["params"]["prompt"] == "list them"
        assert list(payload["inputs"]) == ["image.png"]

    def test_segment_writes_masks_alongside_candidates(self, server, tmp_path,
                                                       monkeypatch):
        mask = np.zeros((480, 640), dtype=np.uint8)
        mask[100:200, 100:300] = 255
        buf = io.BytesIO()
        Image.fromarray(mask, mode="L").save(buf, format="PNG")
        entries = [{"prompt": "cup", "confidence": 0.7, "mask": "mask_000.png"}]
        server.responder = lambda payload: (200, {
            "status": "ok",
            "outputs": {
                "candidates.json": _b64(json.dumps(entries).encode()),
                "mask_000.png": _b64(buf.getvalue()),
            },
        })
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["segment", str(job)]) == 0
        assert (job / "mask_000.png").read_bytes() == buf.getvalue()


class TestFailurePaths:
    def test_server_reports_unavailable_exits_4(self, server, tmp_path,
                                                monkeypatch, capsys):
        server.responder = lambda payload: (200, {
            "status": "unavailable", "message": "model weights not loaded"})
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 4
        assert "model weights not loaded" in capsys.readouterr().err

    def test_http_503_exits_4(self, server, tmp_path, monkeypatch):
        server.responder = lambda payload: (503, {"detail": "no accelerator"})
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 4

    def test_http_500_exits_1(self, server, tmp_path, monkeypatch):
        server.responder = lambda payload: (500, {"detail": "boom"})
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 1

    def test_connection_refused_exits_1(self, tmp_path, monkeypatch):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", f"http://127.0.0.1:{port}/")
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 1

    def test_invalid_output_is_removed_and_exits_1(self, server, tmp_path,
                                                   monkeypatch, capsys):
        server.responder = lambda payload: (200, {
            "status": "ok",
            "outputs": {"prompts.json": _b64(b'{"not": "a list"}')},
        })
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 1
        assert not (job / "prompts.json").exists()
        assert "must be a JSON list" in capsys.readouterr().err

    def test_missing_declared_output_exits_1(self, server, tmp_path, monkeypatch):
        server.responder = lambda payload: (200, {
            "status": "ok", "outputs": {"wrong.txt": _b64(b"hi")}})
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 1

    def test_unsafe_output_path_rejected(self, server, tmp_path, monkeypatch):
        server.responder = lambda payload: (200, {
            "status": "ok",
            "outputs": {"prompts.json": _b64(b'["ok"]'),
                        "../escape.txt": _b64(b"nope")},
        })
        monkeypatch.setenv("SCOMP_ADAPTER_ENDPOINT", _url(server))
        job = _job(tmp_path, **{"image.png": b"px"})
        assert main(["describe", str(job)]) == 1
        assert not (tmp_path / "escape.txt").exists()
