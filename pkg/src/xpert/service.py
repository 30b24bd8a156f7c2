"""HTTP facade over a Registry.

Endpoints:
    GET  /manifest               published manifest (atomic snapshot)
    GET  /models                 all model records
    GET  /models/{id}/artifact   snapshot bytes; byte ranges honored
    POST /models                 register {display_name, artifact_uri,
                                 base_model_fingerprint} -> {model_id}
    POST /explain                start the explanation job -> {job_id};
                                 409 while one is running, 503 when the
                                 backend provider is unreachable
    GET  /jobs/{id}              job status

Reads stay available while an explanation job runs; they only ever see
fully published snapshots because the registry mutates via atomic
renames.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from xpert.probe import PromptSet
from xpert.protocol import BackendError
from xpert.registry import ExplainJobError, Registry


class BackendProvider:
    """What POST /explain needs from the deployment.

    ``acquire()`` returns ``(summarizer, base_gen, model_backend_for)``
    and raises ``BackendError`` (or ``OSError``) when the backends are
    unreachable; ``release()`` runs after the job finishes.
    """

    def acquire(self):
        raise NotImplementedError

    def release(self, handles) -> None:
        pass


class _JobTable:
    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, dict] = {}
        self._counter = 0

    def start(self) -> str | None:
        """Reserve a job slot; None when one is already running."""
        with self._lock:
            if any(job["status"] == "running"
                   for job in self._jobs.values()):
                return None
            self._counter += 1
            job_id = f"j{self._counter:04d}"
            self._jobs[job_id] = {"job_id": job_id, "status": "running",
                                  "manifest_version": None, "error": None}
            return job_id

    def finish(self, job_id: str, *, version: int | None = None,
               error: str | None = None) -> None:
        with self._lock:
            job = self._jobs[job_id]
            job["status"] = "failed" if error is not None else "done"
            job["manifest_version"] = version
            job["error"] = error

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            job = self._jobs.get(job_id)
            return dict(job) if job else None


class RegistryService(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, registry: Registry,
                 provider: BackendProvider):
        super().__init__(address, _Handler)
        self.registry = registry
        self.provider = provider
        self.jobs = _JobTable()

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def run_explain_job(self, job_id: str, handles,
                        prompts: PromptSet) -> None:
        summarizer, base_gen, model_backend_for = handles
        try:
            manifest = self.registry.explain_all(
                summarizer, base_gen, model_backend_for, prompts)
        except (ExplainJobError, BackendError, ValueError, OSError) as err:
            self.jobs.finish(job_id, error=str(err))
        else:
            self.jobs.finish(job_id, version=manifest.version)
        finally:
            self.provider.release(handles)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: RegistryService

    def log_message(self, format, *args):  # tests are quieter this way
        pass

    # -- plumbing ----------------------------------------------------------

    def _send_json(self, status: int, payload) -> None:
        body = json.dumps(payload, indent=2).encode() + b"\n"
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, message: str) -> None:
        self._send_json(status, {"error": message})

    def _read_body(self) -> dict | None:
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            return None
        return payload if isinstance(payload, dict) else None

    # -- GET -----------------------------------------------------------------

    def do_GET(self):
        registry = self.server.registry
        if self.path == "/manifest":
            body = registry.manifest().to_json_bytes()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return
        if self.path == "/models":
            self._send_json(200, [r.to_json_dict() for r in
                                  registry.records()])
            return
        if self.path.startswith("/models/") and \
                self.path.endswith("/artifact"):
            model_id = self.path[len("/models/"):-len("/artifact")]
            self._serve_artifact(model_id)
            return
        if self.path.startswith("/jobs/"):
            job = self.server.jobs.get(self.path[len("/jobs/"):])
            if job is None:
                self._send_error_json(404, "unknown job")
            else:
                self._send_json(200, job)
            return
        self._send_error_json(404, "unknown path")

    def _serve_artifact(self, model_id: str) -> None:
        path = self.server.registry.artifact_path(model_id)
        if not path.exists():
            self._send_error_json(404, f"unknown model {model_id!r}")
            return
        blob = path.read_bytes()
        start, stop = 0, len(blob)
        range_header = self.headers.get("Range")
        if range_header:
            parsed = _parse_range(range_header, len(blob))
            if parsed is None:
                self.send_response(416)
                self.send_header("Content-Range", f"bytes */{len(blob)}")
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            start, stop = parsed
        chunk = blob[start:stop]
        self.send_response(206 if range_header else 200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(len(chunk)))
        if range_header:
            self.send_header("Content-Range",
                             f"bytes {start}-{stop - 1}/{len(blob)}")
        self.end_headers()
        self.wfile.write(chunk)

    # -- POST ----------------------------------------------------------------

    def do_POST(self):
        if self.path == "/models":
            self._register()
            return
        if self.path == "/explain":
            self._explain()
            return
        self._send_error_json(404, "unknown path")

    def _register(self) -> None:
        body = self._read_body()
        if body is None or not {"display_name", "artifact_uri",
                                "base_model_fingerprint"} <= body.keys():
            self._send_error_json(400, "register needs display_name, "
                                  "artifact_uri, base_model_fingerprint")
            return
        try:
            model_id = self.server.registry.register_model(
                str(body["display_name"]), str(body["artifact_uri"]),
                str(body["base_model_fingerprint"]))
        except ValueError as err:
            self._send_error_json(400, str(err))
            return
        self._send_json(201, {"model_id": model_id})

    def _explain(self) -> None:
        body = self._read_body()
        if body is None or not isinstance(body.get("prompts"), list) \
                or not body["prompts"]:
            self._send_error_json(400, "explain needs a non-empty "
                                  "prompts list")
            return
        try:
            prompts = PromptSet.from_texts([str(p) for p in
                                            body["prompts"]])
        except ValueError as err:
            self._send_error_json(400, str(err))
            return
        job_id = self.server.jobs.start()
        if job_id is None:
            self._send_error_json(409, "an explanation job is already "
                                  "running")
            return
        try:
            handles = self.server.provider.acquire()
        except (BackendError, OSError) as err:
            self.server.jobs.finish(job_id, error=str(err))
            self._send_error_json(503, f"backend unreachable: {err}")
            return
        worker = threading.Thread(
            target=self.server.run_explain_job,
            args=(job_id, handles, prompts), daemon=True)
        worker.start()
        self._send_json(202, {"job_id": job_id})


def _parse_range(header: str, size: int) -> tuple[int, int] | None:
    """First byte range of a ``bytes=`` header as ``(start, stop)``.

    Suffix ranges (``bytes=-N``) are supported; anything unsatisfiable
    or malformed returns None.
    """
    if not header.startswith("bytes="):
        return None
    spec = header[len("bytes="):].split(",")[0].strip()
    first, _, last = spec.partition("-")
    try:
        if first:
            start = int(first)
            stop = int(last) + 1 if last else size
        elif last:
            start = max(0, size - int(last))
            stop = size
        else:
            return None
    except ValueError:
        return None
    if start >= size or start < 0 or stop <= start:
        return None
    return start, min(stop, size)


def serve(registry: Registry, provider: BackendProvider,
          host: str = "127.0.0.1", port: int = 0) -> RegistryService:
    """Bind and return the service; caller drives serve_forever()."""
    return RegistryService((host, port), registry, provider)
