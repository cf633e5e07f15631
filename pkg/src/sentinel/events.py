"""Append-only JSON-lines event log.

One writer lock serializes appends, so sequence numbers are gapless and
strictly increasing no matter how many worker threads report through the
log. Each line is a self-contained JSON object.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone

from .watchlist import format_rfc3339

CORE_KINDS = ("detection", "check_requested", "verdict", "alert")
OPERATIONAL_KINDS = (
    "run_started",
    "run_finished",
    "frame_processed",
    "frame_error",
    "skipped",
    "anomaly",
    "webhook_error",
)
KINDS = CORE_KINDS + OPERATIONAL_KINDS


@dataclass(frozen=True)
class EventRecord:
    seq: int
    ts: str
    kind: str
    payload: dict

    def __post_init__(self):
        if self.seq < 1:
            raise ValueError("seq starts at 1")
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts, "kind": self.kind, "payload": self.payload}
        )


class EventLog:
    """File-backed log; appends are atomic with respect to each other."""

    def __init__(self, path):
        self._path = path
        self._lock = threading.Lock()
        self._seq = 0
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, kind: str, payload: dict, ts: datetime | None = None) -> EventRecord:
        stamp = format_rfc3339(ts or datetime.now(timezone.utc))
        with self._lock:
            self._seq += 1
            rec = EventRecord(self._seq, stamp, kind, payload)
            self._fh.write(rec.to_json() + "\n")
            self._fh.flush()
        return rec

    @property
    def last_seq(self) -> int:
        with self._lock:
            return self._seq

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[EventRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(EventRecord(obj["seq"], obj["ts"], obj["kind"], obj["payload"]))
    return out


def verify_log(records: list[EventRecord]) -> None:
    """Raise when the log breaks its ordering or referencing guarantees."""
    seen_requests = set()
    for i, rec in enumerate(records):
        if rec.seq != i + 1:
            raise ValueError(f"sequence gap at position {i}: seq {rec.seq}")
        if rec.kind == "check_requested":
            seen_requests.add(rec.payload.get("request_id"))
        elif rec.kind == "verdict":
            rid = rec.payload.get("request_id")
            if rid not in seen_requests:
                raise ValueError(f"verdict for unknown request {rid!r} at seq {rec.seq}")
