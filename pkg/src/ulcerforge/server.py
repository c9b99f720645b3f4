"""HTTP service for the blind rating study.

Protocol (JSON over HTTP):

    POST /api/session {"rater_id": ...}        -> {"session_id": ..., "total": N}
    GET  /api/session/{id}/next                -> {"token", "image_url", "index", "total"}
                                                  or {"done": true}
    POST /api/session/{id}/verdict
         {"token": ..., "verdict": "real"|"fake"} -> {"accepted": true}
    GET  /api/report   (header X-Admin-Token)  -> StudyReport JSON
    GET  /img/{token}                          -> PNG bytes

Rater-facing payloads never contain ground-truth labels or
label-correlated identifiers; image ids are opaque shuffled tokens.
Verdicts are appended durably before acknowledgment; duplicates get 409.
A frontend directory, when configured, is served at /.
"""

from __future__ import annotations

import json
import logging
import mimetypes
import secrets
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .dataset import encode_png, read_image
from .errors import DataError
from .rng import stream
from .study import (DuplicateVerdictError, StudyConfig, Verdict, VerdictStore,
                    study_report)

log = logging.getLogger(__name__)


class StudyService:
    """Session and verdict logic behind the HTTP handler."""

    def __init__(self, config: StudyConfig, store: VerdictStore,
                 frontend_dir: "str | Path | None" = None):
        self.config = config
        self.store = store
        self.frontend_dir = Path(frontend_dir).resolve() if frontend_dir else None
        self._images = {img.token: img for img in config.images}
        self._sessions: dict[str, str] = {}
        self._orders: dict[str, list[str]] = {}
        self._lock = threading.Lock()

    def create_session(self, rater_id: str) -> dict:
        rater_id = str(rater_id).strip()
        if not rater_id:
            raise DataError("rater_id must be non-empty")
        session_id = secrets.token_hex(8)
        with self._lock:
            self._sessions[session_id] = rater_id
        return {"session_id": session_id, "total": self.config.images_total}

    def _order_for(self, rater_id: str) -> list[str]:
        # deterministic per (shuffle_seed, rater_id)
        with self._lock:
            order = self._orders.get(rater_id)
            if order is None:
                rng = stream(self.config.shuffle_seed, f"order:{rater_id}")
                perm = rng.permutation(self.config.images_total)
                order = [self.config.images[i].token for i in perm]
                self._orders[rater_id] = order
        return order

    def rater_for(self, session_id: str) -> str | None:
        with self._lock:
            return self._sessions.get(session_id)

    def next_item(self, session_id: str) -> dict | None:
        rater_id = self.rater_for(session_id)
        if rater_id is None:
            return None
        rated = self.store.rated_tokens(rater_id)
        order = self._order_for(rater_id)
        for token in order:
            if token not in rated:
                return {
                    "token": token,
                    "image_url": f"/img/{token}",
                    "index": len(rated) + 1,
                    "total": self.config.images_total,
                }
        return {"done": True}

    def submit_verdict(self, session_id: str, token: str, verdict: str) -> None:
        rater_id = self.rater_for(session_id)
        if rater_id is None:
            raise KeyError(session_id)
        if token not in self._images:
            raise DataError(f"unknown image token")
        self.store.append(Verdict(session_id=session_id, rater_id=rater_id,
                                  token=token, verdict=verdict, ts=time.time()))

    def report(self) -> dict:
        return study_report(self.config, self.store.snapshot(),
                            allow_partial=True).to_dict()

    def image_png(self, token: str) -> bytes | None:
        img = self._images.get(token)
        if img is None:
            return None
        return encode_png(read_image(img.path))


class StudyRequestHandler(BaseHTTPRequestHandler):
    server: "StudyHTTPServer"

    def log_message(self, fmt, *args):  # route to logging, keep stdout clean
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(body)

    def _read_json_body(self) -> dict | None:
        try:
            length = int(self.headers.get("Content-Length", "0"))
            obj = json.loads(self.rfile.read(length).decode("utf-8")) if length else {}
        except (ValueError, json.JSONDecodeError):
            return None
        return obj if isinstance(obj, dict) else None

    @property
    def service(self) -> StudyService:
        return self.server.service

    def do_POST(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if parts == ["api", "session"]:
            body = self._read_json_body()
            if body is None or not str(body.get("rater_id", "")).strip():
                self._send_json(400, {"error": "rater_id required"})
                return
            self._send_json(200, self.service.create_session(body["rater_id"]))
            return
        if len(parts) == 4 and parts[:2] == ["api", "session"] and parts[3] == "verdict":
            session_id = parts[2]
            body = self._read_json_body()
            if body is None:
                self._send_json(400, {"error": "invalid JSON body"})
                return
            token = str(body.get("token", ""))
            verdict = str(body.get("verdict", ""))
            if verdict not in ("real", "fake"):
                self._send_json(400, {"error": "verdict must be 'real' or 'fake'"})
                return
            try:
                self.service.submit_verdict(session_id, token, verdict)
            except KeyError:
                self._send_json(404, {"error": "unknown session"})
                return
            except DuplicateVerdictError:
                self._send_json(409, {"error": "verdict already recorded"})
                return
            except DataError:
                self._send_json(404, {"error": "unknown image token"})
                return
            self._send_json(200, {"accepted": True})
            return
        self._send_json(404, {"error": "not found"})

    def do_GET(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if len(parts) == 4 and parts[:2] == ["api", "session"] and parts[3] == "next":
            item = self.service.next_item(parts[2])
            if item is None:
                self._send_json(404, {"error": "unknown session"})
            else:
                self._send_json(200, item)
            return
        if parts == ["api", "report"]:
            token = self.headers.get("X-Admin-Token", "")
            if not self.service.config.admin_token or token != self.service.config.admin_token:
                self._send_json(403, {"error": "admin token required"})
                return
            self._send_json(200, self.service.report())
            return
        if len(parts) == 2 and parts[0] == "img":
            try:
                body = self.service.image_png(parts[1])
            except (OSError, DataError):
                self._send_json(404, {"error": "image unavailable"})
                return
            if body is None:
                self._send_json(404, {"error": "unknown image"})
                return
            self._send_bytes(200, body, "image/png")
            return
        if self.service.frontend_dir is not None:
            self._serve_frontend(parts)
            return
        self._send_json(404, {"error": "not found"})

    def _serve_frontend(self, parts: list[str]) -> None:
        root = self.service.frontend_dir
        rel = "/".join(parts) if parts else "index.html"
        target = (root / rel).resolve()
        if target.is_dir():
            target = target / "index.html"
        if root not in target.parents and target != root:
            self._send_json(404, {"error": "not found"})
            return
        if not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        self._send_bytes(200, target.read_bytes(), ctype)


class StudyHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: StudyService):
        super().__init__(address, StudyRequestHandler)
        self.service = service


def serve_study(config: StudyConfig, store: VerdictStore, host: str = "127.0.0.1",
                port: int = 8765, frontend_dir: "str | Path | None" = None) -> StudyHTTPServer:
    """Bind the study service; the caller drives serve_forever()/shutdown()."""
    service = StudyService(config, store, frontend_dir=frontend_dir)
    return StudyHTTPServer((host, port), service)
