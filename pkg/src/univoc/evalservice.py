"""HTTP service that runs a listening test.

Serves each listener their next screen, streams stimulus audio by opaque
handle, and appends accepted ratings to a JSON-lines store. Two properties
the whole test hangs on:

* Durability before acknowledgment: a screen's ratings are written, flushed,
  and fsynced as one buffer before the 200 goes out, so an acked rating
  survives a hard kill.
* Hidden reference: payloads never carry system ids, only per-screen handles;
  the handle-to-system mapping stays server-side until export.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .errors import ConfigError, InputError
from .evalstats import RatingRecord, SessionPlan

log = logging.getLogger(__name__)

_API_VERSION = 1


class RatingStore:
    """Append-only JSON-lines rating log with serialized, synced writes."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: list[RatingRecord] = []
        self._screens_done: dict[str, set[int]] = {}
        self._recovered_torn = 0
        if self.path.exists():
            self._recover()
        self._file = open(self.path, "a", encoding="utf-8")

    def _recover(self):
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                rec = RatingRecord.from_json(line)
            except (InputError, json.JSONDecodeError, ValueError):
                # torn tail from a crash mid-write, or stray corruption
                self._recovered_torn += 1
                continue
            self._index(rec)
        if self._recovered_torn:
            log.warning("rating store %s: skipped %d unparseable line(s)",
                        self.path, self._recovered_torn)

    def _index(self, rec: RatingRecord):
        self._records.append(rec)
        self._screens_done.setdefault(rec.listener_id, set()).add(rec.screen_index)

    def append_screen(self, records: list[RatingRecord]) -> None:
        """Durably append one screen's ratings as a single write."""
        buffer = "".join(rec.to_json() + "\n" for rec in records)
        with self._lock:
            self._file.write(buffer)
            self._file.flush()
            os.fsync(self._file.fileno())
            for rec in records:
                self._index(rec)

    def screens_submitted(self, listener_id: str) -> int:
        with self._lock:
            return len(self._screens_done.get(listener_id, ()))

    def has_screen(self, listener_id: str, screen_index: int) -> bool:
        with self._lock:
            return screen_index in self._screens_done.get(listener_id, ())

    def all_records(self) -> list[RatingRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def close(self):
        self._file.close()


def export_ratings(store_path):
    """Parse a rating store file strictly.

    Returns (records, malformed_line_numbers); malformed lines are reported,
    never fatal, so a torn tail cannot block an export.
    """
    path = Path(store_path)
    if not path.exists():
        raise InputError(f"rating store {path} does not exist")
    records, malformed = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(RatingRecord.from_json(line))
            except (InputError, json.JSONDecodeError, ValueError):
                malformed.append(lineno)
    return records, malformed


def completion_code(token: str) -> str:
    return hashlib.sha256(f"{token}:complete".encode()).hexdigest()[:10]


@dataclass(frozen=True)
class _HandleTarget:
    audio_path: Path


class Service:
    """Binds a session plan to an audio tree and a rating store.

    Audio lives at audio_root/{system_id}/{utterance_id}.wav. Startup fails
    if any stimulus file is missing, listing what could not be found.
    """

    def __init__(self, plan: SessionPlan, audio_root, store_path,
                 ui_dir=None):
        self.plan = plan
        self.audio_root = Path(audio_root)
        self.ui_dir = Path(ui_dir) if ui_dir is not None else None
        self._listeners = {lp.token: lp for lp in plan.listeners}
        self._handles: dict[str, _HandleTarget] = {}
        missing = []
        seen_paths = set()
        for lp in plan.listeners:
            for sc in lp.screens:
                natural_path = self._audio_path(plan.natural_id, sc.utterance_id)
                self._handles[sc.reference_handle] = _HandleTarget(natural_path)
                for st in sc.stimuli:
                    path = self._audio_path(st.system_id, sc.utterance_id)
                    self._handles[st.handle] = _HandleTarget(path)
                    if path not in seen_paths:
                        seen_paths.add(path)
                        if not path.is_file():
                            missing.append(str(path))
        if missing:
            shown = ", ".join(sorted(missing)[:10])
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            raise ConfigError(f"{len(missing)} stimulus file(s) missing: "
                              f"{shown}{more}")
        self.store = RatingStore(store_path)
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def _audio_path(self, system_id: str, utterance_id: str) -> Path:
        return self.audio_root / system_id / f"{utterance_id}.wav"

    # -- request-level API, shared by the HTTP handler and in-process tests

    def session_payload(self, token: str):
        lp = self._listeners.get(token)
        if lp is None:
            return None
        done = self.store.screens_submitted(token)
        if done >= len(lp.screens):
            return {"v": _API_VERSION, "complete": True,
                    "completion_code": completion_code(token)}
        screen = lp.screens[done]
        return {
            "v": _API_VERSION,
            "screen_index": done,
            "total_screens": len(lp.screens),
            "utterance_ref": {
                "handle": screen.reference_handle,
                "audio_url": f"/api/audio/{screen.reference_handle}",
            },
            "stimuli": [{"handle": st.handle,
                         "audio_url": f"/api/audio/{st.handle}"}
                        for st in screen.stimuli],
        }

    def submit_ratings(self, payload) -> tuple[int, dict]:
        """Validate one POST body; returns (http_status, response payload)."""
        if not isinstance(payload, dict) or payload.get("v") != _API_VERSION:
            return 400, {"error": "unsupported or missing payload version"}
        token = payload.get("listener_token")
        lp = self._listeners.get(token)
        if lp is None:
            return 404, {"error": "unknown listener token"}
        screen_index = payload.get("screen_index")
        done = self.store.screens_submitted(token)
        if done >= len(lp.screens):
            return 409, {"error": "session already complete"}
        if screen_index != done:
            return 409, {"error": f"expected screen_index {done}",
                         "expected": done}
        screen = lp.screens[screen_index]
        scores = payload.get("scores")
        if not isinstance(scores, list):
            return 400, {"error": "scores must be a list"}
        expected = {st.handle for st in screen.stimuli}
        got = {}
        for item in scores:
            if not isinstance(item, dict) or "handle" not in item or \
                    "score" not in item:
                return 400, {"error": "each score needs handle and score"}
            if item["handle"] in got:
                return 400, {"error": f"duplicate handle {item['handle']}"}
            got[item["handle"]] = item["score"]
        if set(got) != expected:
            return 400, {"error": "scores must cover exactly the served "
                                  "stimuli"}
        for handle, score in got.items():
            if isinstance(score, bool) or not isinstance(score, int) or \
                    not 0 <= score <= 100:
                return 400, {"error": "scores must be integers in [0, 100]"}

        by_handle = {st.handle: st.system_id for st in screen.stimuli}
        now = time.time()
        records = [
            RatingRecord(token, screen.utterance_id, by_handle[h], score,
                         screen_index, now)
            for h, score in sorted(got.items())
        ]
        self.store.append_screen(records)
        return 200, {"v": _API_VERSION, "accepted": len(records)}

    def audio_bytes(self, handle: str):
        target = self._handles.get(handle)
        if target is None:
            return None
        return target.audio_path.read_bytes()

    def progress_payload(self):
        total_screens = sum(len(lp.screens) for lp in self.plan.listeners)
        submitted = sum(self.store.screens_submitted(t) for t in self._listeners)
        complete = sum(
            1 for t, lp in self._listeners.items()
            if self.store.screens_submitted(t) >= len(lp.screens)
        )
        return {
            "v": _API_VERSION,
            "listeners_total": len(self._listeners),
            "listeners_complete": complete,
            "screens_submitted": submitted,
            "screens_total": total_screens,
            "ratings_recorded": len(self.store),
        }

    # -- server lifecycle

    def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        handler = _make_handler(self)
        self._server = ThreadingHTTPServer((host, port), handler)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self._server.server_address[1]

    def serve_forever(self, host: str = "127.0.0.1", port: int = 8765):
        handler = _make_handler(self)
        self._server = ThreadingHTTPServer((host, port), handler)
        log.info("listening on %s:%d", host, self._server.server_address[1])
        try:
            self._server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            self._server.server_close()
            self.store.close()

    def stop(self):
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self.store.close()


_UI_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}


def _make_handler(service: Service):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

        def _send_json(self, status: int, payload: dict):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_bytes(self, body: bytes, content_type: str):
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            if path.startswith("/api/session/"):
                payload = service.session_payload(path[len("/api/session/"):])
                if payload is None:
                    self._send_json(404, {"error": "unknown listener token"})
                else:
                    self._send_json(200, payload)
            elif path.startswith("/api/audio/"):
                body = service.audio_bytes(path[len("/api/audio/"):])
                if body is None:
                    self._send_json(404, {"error": "unknown audio handle"})
                else:
                    self._send_bytes(body, "audio/wav")
            elif path == "/api/progress":
                self._send_json(200, service.progress_payload())
            elif service.ui_dir is not None:
                self._serve_ui(path)
            else:
                self._send_json(404, {"error": "not found"})

        def _serve_ui(self, path: str):
            rel = path.lstrip("/") or "index.html"
            target = (service.ui_dir / rel).resolve()
            if not str(target).startswith(str(service.ui_dir.resolve())) or \
                    not target.is_file():
                self._send_json(404, {"error": "not found"})
                return
            ctype = _UI_CONTENT_TYPES.get(target.suffix, "application/octet-stream")
            self._send_bytes(target.read_bytes(), ctype)

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path != "/api/ratings":
                self._send_json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError:
                self._send_json(400, {"error": "body is not valid JSON"})
                return
            try:
                status, response = service.submit_ratings(payload)
            except InputError as exc:
                status, response = 400, {"error": str(exc)}
            self._send_json(status, response)

    return Handler
