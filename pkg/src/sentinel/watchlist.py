"""Embedded watchlist service and fan-out client.

The service hosts any number of logical databases over HTTP/1.1 + JSON,
entirely in memory, with an optional artificial response delay for
exercising concurrency. The client issues one check per database in
parallel and folds the responses into a single verdict.
"""

from __future__ import annotations

import base64
import binascii
import json
import random
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .signature import Signature, similarity

STATUSES = ("wanted", "undocumented", "extremist", "criminal", "clear")

ADMISSIBLE = "admissible"
INADMISSIBLE = "inadmissible"
INDETERMINATE = "indeterminate"

DEFAULT_TIMEOUT = 5.0


class ConfigError(ValueError):
    pass


def _utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        raise ValueError("captured_at must be timezone-aware")
    return dt.astimezone(timezone.utc)


def parse_rfc3339(text: str) -> datetime:
    return _utc(datetime.fromisoformat(text.replace("Z", "+00:00")))


def format_rfc3339(dt: datetime) -> str:
    return _utc(dt).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class WatchRecord:
    record_id: str
    name: str
    status: str
    signature: Signature
    details: str = ""

    def __post_init__(self):
        if not self.record_id:
            raise ValueError("record_id must be nonempty")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")


@dataclass(frozen=True)
class CheckRequest:
    request_id: str
    signature: Signature
    face_image: bytes  # PGM payload; base64 on the wire
    camera_id: str
    captured_at: datetime

    def __post_init__(self):
        if not self.request_id:
            raise ValueError("request_id must be nonempty")
        object.__setattr__(self, "captured_at", _utc(self.captured_at))

    def to_wire(self) -> dict:
        return {
            "request_id": self.request_id,
            "signature": self.signature.to_wire(),
            "face_image": base64.b64encode(self.face_image).decode("ascii"),
            "camera_id": self.camera_id,
            "captured_at": format_rfc3339(self.captured_at),
        }


@dataclass(frozen=True)
class DbHit:
    database: str
    record_id: str
    status: str
    score: float
    details: str = ""

    def __post_init__(self):
        if self.status not in STATUSES or self.status == "clear":
            raise ValueError(f"hit status must be adverse, got {self.status!r}")
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")


@dataclass(frozen=True)
class Verdict:
    request_id: str
    decision: str
    hits: tuple[DbHit, ...]
    databases_queried: tuple[str, ...]
    databases_unavailable: tuple[str, ...]

    def __post_init__(self):
        if self.decision not in (ADMISSIBLE, INADMISSIBLE, INDETERMINATE):
            raise ValueError(f"unknown decision {self.decision!r}")
        if self.decision == INADMISSIBLE and not self.hits:
            raise ValueError("inadmissible verdict needs at least one hit")
        if self.decision != INADMISSIBLE and self.hits:
            raise ValueError("hits imply an inadmissible verdict")
        if self.decision == ADMISSIBLE and self.databases_unavailable:
            raise ValueError("admissible verdict requires every database to respond")
        if self.decision == INDETERMINATE and not self.databases_unavailable:
            raise ValueError("indeterminate verdict needs an unavailable database")


# ------------------------------------------------------------------ service


class _Store:
    """Databases of records with a lock making upserts atomic and scans
    consistent snapshots."""

    def __init__(self):
        self._lock = threading.Lock()
        self._dbs: dict[str, dict[str, WatchRecord]] = {}

    def upsert(self, db: str, record: WatchRecord) -> None:
        with self._lock:
            self._dbs.setdefault(db, {})[record.record_id] = record

    def ensure(self, db: str) -> None:
        with self._lock:
            self._dbs.setdefault(db, {})

    def snapshot(self, db: str) -> list[WatchRecord] | None:
        with self._lock:
            table = self._dbs.get(db)
            return None if table is None else list(table.values())

    def database_names(self) -> list[str]:
        with self._lock:
            return sorted(self._dbs)


def _scan(records: list[WatchRecord], db: str, sig: Signature, tau: float) -> list[DbHit]:
    hits = []
    for rec in records:
        if rec.status == "clear":
            continue
        score = similarity(rec.signature, sig)
        if score >= tau:
            hits.append(DbHit(db, rec.record_id, rec.status, score, rec.details))
    hits.sort(key=lambda h: (-h.score, h.record_id))
    return hits


class WatchlistService:
    """In-process HTTP watchlist host.

    latency_ms: either one (lo, hi) range for every database or a mapping
    of database name to range; each check sleeps a uniform draw from the
    range before answering.
    """

    def __init__(self, tau: float = 0.9, latency_ms=None, seed: int = 0):
        if not 0.0 < tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {tau}")
        self.tau = tau
        self._latency = latency_ms
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self.store = _Store()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # latency --------------------------------------------------------------
    def _delay_for(self, db: str) -> float:
        spec = self._latency
        if isinstance(spec, dict):
            spec = spec.get(db)
        if spec is None:
            return 0.0
        lo, hi = spec
        with self._rng_lock:
            return self._rng.uniform(lo, hi) / 1000.0

    # request handling -----------------------------------------------------
    def _handle_put_record(self, db: str, record_id: str, body: dict):
        try:
            record = WatchRecord(
                record_id=record_id,
                name=str(body["name"]),
                status=body["status"],
                signature=Signature.from_wire(body["signature"]),
                details=str(body.get("details", "")),
            )
        except (KeyError, TypeError, ValueError) as e:
            return 400, {"error": f"invalid record: {e}"}
        self.store.upsert(db, record)
        return 200, {"stored": record_id}

    def _handle_check(self, db: str, body: dict):
        records = self.store.snapshot(db)
        if records is None:
            return 404, {"error": f"unknown database {db!r}"}
        try:
            request_id = body["request_id"]
            if not isinstance(request_id, str) or not request_id:
                raise ValueError("request_id must be a nonempty string")
            sig = Signature.from_wire(body["signature"])
            base64.b64decode(body["face_image"], validate=True)
            str(body["camera_id"])
            parse_rfc3339(body["captured_at"])
        except (KeyError, TypeError, ValueError, binascii.Error) as e:
            return 400, {"error": f"malformed check request: {e}"}
        time.sleep(self._delay_for(db))
        hits = _scan(records, db, sig, self.tau)
        return 200, {
            "hits": [
                {
                    "record_id": h.record_id,
                    "status": h.status,
                    "score": h.score,
                    "details": h.details,
                }
                for h in hits
            ]
        }

    def _route(self, method: str, path: str, body) -> tuple[int, dict]:
        parts = [p for p in path.split("/") if p]
        if method == "GET" and parts == ["v1", "health"]:
            return 200, {"status": "ok"}
        if (
            method == "PUT"
            and len(parts) == 5
            and parts[:2] == ["v1", "databases"]
            and parts[3] == "records"
        ):
            if not isinstance(body, dict):
                return 400, {"error": "body must be a JSON object"}
            return self._handle_put_record(parts[2], parts[4], body)
        if (
            method == "POST"
            and len(parts) == 4
            and parts[:2] == ["v1", "databases"]
            and parts[3] == "check"
        ):
            if not isinstance(body, dict):
                return 400, {"error": "body must be a JSON object"}
            return self._handle_check(parts[2], body)
        return 404, {"error": f"no route for {method} {path}"}

    # lifecycle ------------------------------------------------------------
    def start(self, host: str = "127.0.0.1", port: int = 0) -> str:
        if self._httpd is not None:
            raise ConfigError("service already started")
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _reply(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                body = None
                if raw:
                    try:
                        body = json.loads(raw)
                    except json.JSONDecodeError:
                        self._send(400, {"error": "body is not valid JSON"})
                        return
                code, payload = service._route(self.command, self.path, body)
                self._send(code, payload)

            def _send(self, code: int, payload: dict):
                data = json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            do_GET = do_PUT = do_POST = _reply

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self.base_url

    @property
    def base_url(self) -> str:
        if self._httpd is None:
            raise ConfigError("service not started")
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
            self._thread = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    # snapshotting ---------------------------------------------------------
    def save_snapshot(self, path) -> None:
        with self.store._lock:
            data = {
                db: [
                    {
                        "record_id": r.record_id,
                        "name": r.name,
                        "status": r.status,
                        "signature": r.signature.to_wire(),
                        "details": r.details,
                    }
                    for r in table.values()
                ]
                for db, table in self.store._dbs.items()
            }
        with open(path, "w") as f:
            json.dump(data, f)

    def load_snapshot(self, path) -> None:
        with open(path) as f:
            data = json.load(f)
        for db, records in data.items():
            # an empty list still creates the database, so checks against it
            # answer with no hits instead of 404
            self.store.ensure(db)
            for r in records:
                self.store.upsert(
                    db,
                    WatchRecord(
                        r["record_id"],
                        r["name"],
                        r["status"],
                        Signature.from_wire(r["signature"]),
                        r.get("details", ""),
                    ),
                )


# ------------------------------------------------------------------- client


def put_record(base_url: str, db: str, record: WatchRecord, timeout: float = DEFAULT_TIMEOUT):
    body = {
        "name": record.name,
        "status": record.status,
        "signature": record.signature.to_wire(),
        "details": record.details,
    }
    req = urllib.request.Request(
        f"{base_url}/v1/databases/{db}/records/{record.record_id}",
        data=json.dumps(body).encode(),
        headers={"Content-Type": "application/json"},
        method="PUT",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read())


def _check_one(db: str, url: str, wire: bytes, timeout: float):
    req = urllib.request.Request(
        f"{url}/v1/databases/{db}/check",
        data=wire,
        headers={"Content-Type": "application/json"},
        method="POST",
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read())


def fan_out_check(
    endpoints: list[tuple[str, str]],
    request: CheckRequest,
    timeout: float = DEFAULT_TIMEOUT,
) -> Verdict:
    """Check one face against every configured database at once.

    Any hit makes the verdict inadmissible. A clean sweep with every
    database responding is admissible. Silence from any database downgrades
    a clean result to indeterminate rather than waving the face through.
    """
    if not endpoints:
        raise ConfigError("at least one database endpoint is required")
    wire = json.dumps(request.to_wire()).encode()

    def call(entry):
        db, url = entry
        try:
            payload = _check_one(db, url, wire, timeout)
            hits = [
                DbHit(db, h["record_id"], h["status"], float(h["score"]), h.get("details", ""))
                for h in payload.get("hits", [])
            ]
            return db, hits, True
        except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError):
            return db, [], False

    with ThreadPoolExecutor(max_workers=len(endpoints)) as pool:
        results = list(pool.map(call, endpoints))

    hits = sorted(
        (h for _, hs, _ in results for h in hs), key=lambda h: (h.database, h.record_id)
    )
    unavailable = tuple(sorted(db for db, _, ok in results if not ok))
    queried = tuple(sorted(db for db, _ in endpoints))
    if hits:
        decision = INADMISSIBLE
    elif unavailable:
        decision = INDETERMINATE
    else:
        decision = ADMISSIBLE
    return Verdict(request.request_id, decision, tuple(hits), queried, unavailable)
