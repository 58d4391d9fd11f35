"""HTTP service exposing the pipeline, versioned under /v1.

Routes:
    GET  /v1/healthz        -> {"status": "ok", "schema_version": N}
    GET  /v1/graph/stats    -> graph counters
    POST /v1/ingest         -> {"source": path} starts an async job, 202
    GET  /v1/jobs/{id}      -> job status and, once done, the report
    POST /v1/query          -> {"query": text, "overrides": {depth, k}}

Errors carry a structured body {"code": ..., "message": ...} whose codes
mirror the CLI exit codes: EMPTY_GRAPH (409, exit 3), GATEWAY_EXHAUSTED
(502, exit 4), BAD_REQUEST (400, exit 2), INGEST_BUSY (409), NOT_FOUND
(404), INTERNAL (500, exit 1). Queries are served from graph snapshots, so
a request that arrives mid-ingestion sees exactly the events flushed so
far, never a torn graph.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .config import AppConfig
from .engine import AnalyticsEngine
from .errors import EmptyGraph, GatewayError, VideoEkgError
from .store import SCHEMA_VERSION

logger = logging.getLogger(__name__)


class JobRegistry:
    def __init__(self) -> None:
        self._jobs: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def create(self) -> str:
        with self._lock:
            self._counter += 1
            job_id = f"job-{self._counter:04d}"
            self._jobs[job_id] = {"job_id": job_id, "status": "running"}
            return job_id

    def finish(self, job_id: str, report: dict | None = None,
               error: str | None = None) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if error is None:
                job.update(status="done", report=report)
            else:
                job.update(status="failed", error=error)

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            job = self._jobs.get(job_id)
            return dict(job) if job else None


class AppServer:
    """Engine plus a threading HTTP server bound to an ephemeral or fixed port."""

    def __init__(self, config: AppConfig, engine: AnalyticsEngine | None = None):
        self.config = config
        self.engine = engine or AnalyticsEngine(config)
        self.jobs = JobRegistry()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def start(self, port: int = 0) -> int:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self._httpd.server_address[1]

    def serve_forever(self, port: int) -> None:
        handler = _make_handler(self)
        self._httpd = ThreadingHTTPServer(("0.0.0.0", port), handler)
        logger.info("serving on port %d", port)
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()

    # -- request handlers ---------------------------------------------------

    def handle_healthz(self) -> tuple[int, dict]:
        return 200, {"status": "ok", "schema_version": SCHEMA_VERSION}

    def handle_stats(self) -> tuple[int, dict]:
        return 200, self.engine.stats()

    def handle_ingest(self, body: dict) -> tuple[int, dict]:
        source = body.get("source")
        if not source:
            return 400, {"code": "BAD_REQUEST", "message": "body needs 'source'"}
        from .chunking import FrameStream
        try:
            stream = FrameStream.from_path(source)
        except FileNotFoundError:
            return 400, {"code": "BAD_REQUEST",
                         "message": f"stream source not found: {source}"}
        except (ValueError, KeyError) as exc:
            return 400, {"code": "BAD_REQUEST", "message": f"bad stream source: {exc}"}
        if self.engine.is_ingesting(stream.stream_id):
            return 409, {"code": "INGEST_BUSY",
                         "message": f"stream {stream.stream_id!r} is already ingesting"}
        job_id = self.jobs.create()

        def run() -> None:
            try:
                report = self.engine.ingest(stream)
                self.jobs.finish(job_id, report=asdict(report))
            except VideoEkgError as exc:
                self.jobs.finish(job_id, error=str(exc))
            except Exception as exc:  # keep the job observable on surprise errors
                logger.exception("ingest job %s crashed", job_id)
                self.jobs.finish(job_id, error=f"internal: {exc}")

        threading.Thread(target=run, daemon=True).start()
        return 202, {"job_id": job_id, "status": "running"}

    def handle_job(self, job_id: str) -> tuple[int, dict]:
        job = self.jobs.get(job_id)
        if job is None:
            return 404, {"code": "NOT_FOUND", "message": f"no job {job_id}"}
        return 200, job

    def handle_query(self, body: dict) -> tuple[int, dict]:
        query = body.get("query")
        if not query:
            return 400, {"code": "BAD_REQUEST", "message": "body needs 'query'"}
        overrides = body.get("overrides") or {}
        try:
            outcome = self.engine.answer(query, depth=overrides.get("depth"),
                                         k=overrides.get("k"))
        except EmptyGraph as exc:
            return 409, {"code": "EMPTY_GRAPH", "message": str(exc)}
        except GatewayError as exc:
            return 502, {"code": "GATEWAY_EXHAUSTED", "message": str(exc)}
        except VideoEkgError as exc:
            return 500, {"code": "INTERNAL", "message": str(exc)}
        return 200, {"answer": outcome.answer, "score": outcome.score,
                     "source": outcome.source, "degraded": outcome.degraded,
                     "audit_id": outcome.audit_path}


def _make_handler(app: AppServer):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # route through logging, not stderr
            logger.debug("http: " + fmt, *args)

        def _reply(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _read_body(self) -> dict | None:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw.decode("utf-8") or "{}")
            except json.JSONDecodeError:
                return None
            return body if isinstance(body, dict) else None

        def do_GET(self) -> None:
            if self.path == "/v1/healthz":
                self._reply(*app.handle_healthz())
            elif self.path == "/v1/graph/stats":
                self._reply(*app.handle_stats())
            elif self.path.startswith("/v1/jobs/"):
                self._reply(*app.handle_job(self.path.rsplit("/", 1)[1]))
            else:
                self._reply(404, {"code": "NOT_FOUND", "message": self.path})

        def do_POST(self) -> None:
            body = self._read_body()
            if body is None:
                self._reply(400, {"code": "BAD_REQUEST",
                                  "message": "body must be a JSON object"})
                return
            if self.path == "/v1/ingest":
                self._reply(*app.handle_ingest(body))
            elif self.path == "/v1/query":
                self._reply(*app.handle_query(body))
            else:
                self._reply(404, {"code": "NOT_FOUND", "message": self.path})

    return Handler


def run_service(config: AppConfig, port: int) -> None:
    AppServer(config).serve_forever(port)
