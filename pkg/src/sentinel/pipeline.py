"""Frame-to-alert orchestration.

Flow per frame: detect with every registered cascade, keep the human
detections, snapshot the annotated full frame once and each face crop
separately, check flagged signatures (a re-sighting escalates immediately),
then fan each face out to the watchlist databases. Verdicts are handled in
submission order before the next frame starts, so two runs over the same
input produce the same log apart from timestamps and request ids.
"""

from __future__ import annotations

import functools
import json
import re
import sys
import threading
import urllib.request
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .cascade_xml import load_cascade, load_frontal_face
from .events import EventLog, EventRecord, read_log
from .haar import Cascade, DetectParams, detect_multiscale
from .imaging import (
    ColorImage,
    GrayImage,
    Rect,
    crop,
    draw_rect,
    read_image,
    to_grayscale,
    write_image,
)
from .signature import DEFAULT_TAU, DegenerateCropError, Signature, matches, signature, similarity
from .watchlist import CheckRequest, ConfigError, Verdict, fan_out_check

CLASS_LABELS = ("human", "animal", "object")

ALERT_COLOR = (220, 40, 40)


class StartupError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    label: str
    cascade: Cascade

    def __post_init__(self):
        if self.label not in CLASS_LABELS:
            raise ValueError(f"unknown class label {self.label!r}")


class CascadeRegistry:
    """Cascade models mapped to the class of thing they detect."""

    def __init__(self, entries: list[RegistryEntry]):
        if not any(e.label == "human" for e in entries):
            raise ValueError("registry needs at least one human cascade")
        self.entries = list(entries)

    @classmethod
    def from_files(cls, pairs: list[tuple[str, str]]) -> "CascadeRegistry":
        entries = [
            RegistryEntry(Path(path).stem, label, load_cascade(path)) for path, label in pairs
        ]
        return cls(entries)

    @classmethod
    def default(cls) -> "CascadeRegistry":
        return cls([RegistryEntry("frontal_face", "human", load_frontal_face())])


@dataclass(frozen=True)
class PersonSnapshot:
    full_image_path: str
    face_image_path: str
    face_rect: Rect
    signature: Signature | None
    camera_id: str
    ts: datetime


@dataclass(frozen=True)
class FlagEntry:
    signature: Signature
    first_flagged_ts: str
    request_id: str
    alert_seq: int


class FlagStore:
    """Signatures of inadmissible individuals, matchable against new
    sightings and rebuildable from the event log."""

    def __init__(self, tau: float = DEFAULT_TAU):
        self.tau = tau
        self._entries: list[FlagEntry] = []
        self._lock = threading.Lock()

    def add(self, sig: Signature, first_flagged_ts: str, request_id: str, alert_seq: int):
        with self._lock:
            self._entries.append(FlagEntry(sig, first_flagged_ts, request_id, alert_seq))

    def match(self, sig: Signature) -> FlagEntry | None:
        with self._lock:
            entries = list(self._entries)
        for entry in entries:
            if matches(entry.signature, sig, self.tau):
                return entry
        return None

    def __len__(self):
        return len(self._entries)

    @classmethod
    def rebuild(cls, records: list[EventRecord], tau: float = DEFAULT_TAU) -> "FlagStore":
        store = cls(tau)
        for rec in records:
            if rec.kind != "alert" or rec.payload.get("severity") != "alarm":
                continue
            wire = rec.payload.get("signature")
            if wire is None:
                continue
            store.add(
                Signature.from_wire(wire),
                rec.payload.get("ts_flagged", rec.ts),
                rec.payload.get("request_id", ""),
                rec.seq,
            )
        return store


# ---------------------------------------------------------------- frame feed

_NUM = re.compile(r"(\d+)")


def _frame_sort_key(path: Path):
    nums = _NUM.findall(path.stem)
    return (int(nums[-1]) if nums else -1, path.name)


class FrameSource:
    """Ordered feed of frame files from a directory; timestamps are taken at
    read time and never go backwards."""

    def __init__(self, camera_id: str, frames_dir):
        self.camera_id = camera_id
        self.frames_dir = Path(frames_dir)
        self._last = datetime.min.replace(tzinfo=timezone.utc)

    def paths(self) -> list[Path]:
        if not self.frames_dir.is_dir():
            raise StartupError(f"frames directory {self.frames_dir} does not exist")
        files = [p for p in self.frames_dir.iterdir() if p.suffix.lower() in (".ppm", ".pgm")]
        return sorted(files, key=_frame_sort_key)

    def __iter__(self):
        for path in self.paths():
            now = datetime.now(timezone.utc)
            if now < self._last:
                now = self._last
            self._last = now
            yield path, now


# ------------------------------------------------------------ check dispatch


class CheckDispatcher:
    """Bounded concurrent check runner.

    submit() blocks once queue_bound checks are in flight, throttling the
    caller instead of dropping work. Results surface through the returned
    futures; completion order is unconstrained.
    """

    def __init__(
        self,
        endpoints: list[tuple[str, str]] | None = None,
        timeout: float = 5.0,
        queue_bound: int = 1024,
        pool_size: int | None = None,
        checker=None,
    ):
        if queue_bound < 1:
            raise ConfigError("queue_bound must be >= 1")
        if checker is None:
            if not endpoints:
                raise ConfigError("at least one database endpoint is required")
            checker = functools.partial(fan_out_check, list(endpoints), timeout=timeout)
        self._checker = checker
        self._sem = threading.Semaphore(queue_bound)
        self._pool = ThreadPoolExecutor(max_workers=pool_size or min(queue_bound, 32))

    def submit(self, request: CheckRequest) -> Future:
        self._sem.acquire()
        try:
            return self._pool.submit(self._run, request)
        except BaseException:
            self._sem.release()
            raise

    def _run(self, request: CheckRequest) -> Verdict:
        try:
            return self._checker(request)
        finally:
            self._sem.release()

    def close(self) -> None:
        self._pool.shutdown(wait=True)


# -------------------------------------------------------------- orchestrator


def _ensure_color(frame) -> ColorImage:
    if isinstance(frame, ColorImage):
        return frame
    return ColorImage(np.repeat(frame.pixels[:, :, None], 3, axis=2))


class Pipeline:
    def __init__(
        self,
        camera_id: str,
        registry: CascadeRegistry,
        dispatcher: CheckDispatcher,
        log: EventLog,
        output_dir,
        detect_params: DetectParams | None = None,
        tau: float = DEFAULT_TAU,
        crop_margin: float = 0.2,
        webhook: str | None = None,
        alert_stream=None,
    ):
        self.camera_id = camera_id
        self.registry = registry
        self.dispatcher = dispatcher
        self.log = log
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.params = detect_params or DetectParams()
        self.tau = tau
        self.crop_margin = crop_margin
        self.webhook = webhook
        self.flags = FlagStore(tau)
        self._alert_stream = alert_stream if alert_stream is not None else sys.stderr
        self._pending: dict[str, PersonSnapshot] = {}
        self._pending_lock = threading.Lock()

    # ---------------------------------------------------------- per frame
    def process_frame(self, frame, ts: datetime, frame_index: int) -> list[PersonSnapshot]:
        color = _ensure_color(frame)
        gray = to_grayscale(color)
        faces: list[tuple[str, Rect]] = []
        ignored = 0
        for entry in self.registry.entries:
            boxes = detect_multiscale(entry.cascade, gray, self.params)
            if entry.label == "human":
                faces.extend((entry.name, r) for r in boxes)
            else:
                # non-human classes are recorded and dropped
                for r in boxes:
                    ignored += 1
                    self.log.append(
                        "detection",
                        {
                            "camera_id": self.camera_id,
                            "classification": entry.label,
                            "cascade": entry.name,
                            "rect": [r.x, r.y, r.w, r.h],
                            "ignored": True,
                        },
                        ts,
                    )

        snapshots: list[PersonSnapshot] = []
        if faces:
            stamp = ts.strftime("%Y%m%dT%H%M%S%fZ")
            base = f"{self.camera_id}_{stamp}_{frame_index:06d}"
            annotated = color
            for _, r in faces:
                annotated = draw_rect(annotated, r, ALERT_COLOR, thickness=2)
            full_path = self.output_dir / f"{base}_full.ppm"
            write_image(annotated, full_path)

            for k, (cascade_name, r) in enumerate(faces):
                face_img = crop(gray, r, margin=self.crop_margin)
                face_path = self.output_dir / f"{base}_face{k}.pgm"
                write_image(face_img, face_path)
                try:
                    sig = signature(face_img)
                except DegenerateCropError as e:
                    sig = None
                    self.log.append(
                        "skipped",
                        {
                            "camera_id": self.camera_id,
                            "reason": str(e),
                            "face_image_path": str(face_path),
                            "full_image_path": str(full_path),
                        },
                        ts,
                    )
                snap = PersonSnapshot(
                    str(full_path), str(face_path), r, sig, self.camera_id, ts
                )
                snapshots.append(snap)
                self.log.append(
                    "detection",
                    {
                        "camera_id": self.camera_id,
                        "classification": "human",
                        "cascade": cascade_name,
                        "rect": [r.x, r.y, r.w, r.h],
                        "face_image_path": str(face_path),
                        "full_image_path": str(full_path),
                        "has_signature": sig is not None,
                    },
                    ts,
                )
        self.log.append(
            "frame_processed",
            {
                "camera_id": self.camera_id,
                "frame_index": frame_index,
                "faces": len(faces),
                "ignored_detections": ignored,
            },
            ts,
        )
        return snapshots

    # ------------------------------------------------------------- checks
    def submit_check(self, snapshot: PersonSnapshot) -> tuple[str, Future]:
        if snapshot.signature is None:
            raise ValueError("snapshot has no signature to check")
        request_id = str(uuid.uuid4())
        with open(snapshot.face_image_path, "rb") as f:
            face_bytes = f.read()
        request = CheckRequest(
            request_id=request_id,
            signature=snapshot.signature,
            face_image=face_bytes,
            camera_id=snapshot.camera_id,
            captured_at=snapshot.ts,
        )
        with self._pending_lock:
            self._pending[request_id] = snapshot
        self.log.append(
            "check_requested",
            {
                "request_id": request_id,
                "camera_id": snapshot.camera_id,
                "face_image_path": snapshot.face_image_path,
                "full_image_path": snapshot.full_image_path,
            },
            snapshot.ts,
        )
        return request_id, self.dispatcher.submit(request)

    def handle_verdict(self, verdict: Verdict) -> EventRecord | None:
        with self._pending_lock:
            snapshot = self._pending.pop(verdict.request_id, None)
        if snapshot is None:
            self.log.append(
                "anomaly",
                {"reason": "verdict for unknown request", "request_id": verdict.request_id},
            )
            return None
        hits_payload = [
            {
                "database": h.database,
                "record_id": h.record_id,
                "status": h.status,
                "score": h.score,
                "details": h.details,
            }
            for h in verdict.hits
        ]
        self.log.append(
            "verdict",
            {
                "request_id": verdict.request_id,
                "camera_id": snapshot.camera_id,
                "decision": verdict.decision,
                "hits": hits_payload,
                "databases_queried": list(verdict.databases_queried),
                "databases_unavailable": list(verdict.databases_unavailable),
            },
        )
        if verdict.decision == "admissible":
            return None
        if verdict.decision == "inadmissible":
            rec = self._emit_alert(
                {
                    "severity": "alarm",
                    "request_id": verdict.request_id,
                    "camera_id": snapshot.camera_id,
                    "full_image_path": snapshot.full_image_path,
                    "face_image_path": snapshot.face_image_path,
                    "hits": hits_payload,
                    "signature": snapshot.signature.to_wire(),
                }
            )
            self.flags.add(snapshot.signature, rec.ts, verdict.request_id, rec.seq)
            return rec
        return self._emit_alert(
            {
                "severity": "review",
                "request_id": verdict.request_id,
                "camera_id": snapshot.camera_id,
                "full_image_path": snapshot.full_image_path,
                "face_image_path": snapshot.face_image_path,
                "databases_unavailable": list(verdict.databases_unavailable),
            }
        )

    # --------------------------------------------------------- re-sighting
    def resight_check(self, snapshot: PersonSnapshot) -> EventRecord | None:
        if snapshot.signature is None:
            return None
        entry = self.flags.match(snapshot.signature)
        if entry is None:
            return None
        return self._emit_alert(
            {
                "severity": "breach",
                "camera_id": snapshot.camera_id,
                "full_image_path": snapshot.full_image_path,
                "face_image_path": snapshot.face_image_path,
                "similarity": similarity(entry.signature, snapshot.signature),
                "original": {
                    "request_id": entry.request_id,
                    "first_flagged_ts": entry.first_flagged_ts,
                    "alert_seq": entry.alert_seq,
                },
            }
        )

    # -------------------------------------------------------------- alerts
    def _emit_alert(self, payload: dict) -> EventRecord:
        rec = self.log.append("alert", payload)
        line = (
            f"ALERT[{payload['severity']}] camera={payload.get('camera_id')} "
            f"face={payload.get('face_image_path')}"
        )
        print(line, file=self._alert_stream)
        if self.webhook:
            body = json.dumps(
                {"seq": rec.seq, "ts": rec.ts, "kind": "alert", "payload": payload}
            ).encode()
            try:
                req = urllib.request.Request(
                    self.webhook,
                    data=body,
                    headers={"Content-Type": "application/json"},
                    method="POST",
                )
                urllib.request.urlopen(req, timeout=2.0).close()
            except OSError as e:
                self.log.append("webhook_error", {"error": str(e), "alert_seq": rec.seq})
        return rec

    # ----------------------------------------------------------------- run
    def run(self, source: FrameSource) -> int:
        self.log.append(
            "run_started",
            {"camera_id": self.camera_id, "frames_dir": str(source.frames_dir)},
        )
        frames = 0
        checks = 0
        for frame_index, (path, ts) in enumerate(source):
            try:
                frame = read_image(path)
            except (OSError, ValueError) as e:
                self.log.append("frame_error", {"path": str(path), "error": str(e)}, ts)
                continue
            frames += 1
            snapshots = self.process_frame(frame, ts, frame_index)
            in_flight = []
            for snap in snapshots:
                # escalation first: a flagged face alerts even when the new
                # check has not come back yet
                self.resight_check(snap)
                if snap.signature is not None:
                    in_flight.append(self.submit_check(snap))
            for request_id, future in in_flight:
                checks += 1
                try:
                    verdict = future.result()
                except Exception as e:
                    self.log.append(
                        "anomaly", {"reason": f"check failed: {e}", "request_id": request_id}
                    )
                    continue
                self.handle_verdict(verdict)
        self.log.append("run_finished", {"frames": frames, "checks": checks})
        return 0


# ---------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    camera_id: str
    frames_dir: str
    output_dir: str
    event_log: str
    endpoints: list[tuple[str, str]]
    cascades: list[tuple[str, str]] | None = None  # (path, label); None = bundled face
    scale_factor: float = 1.1
    min_neighbors: int = 4
    min_size: int = 0
    step_fraction: float = 0.05
    tau: float = DEFAULT_TAU
    timeout_ms: int = 5000
    queue_bound: int = 1024
    crop_margin: float = 0.2
    webhook: str | None = None

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path) as f:
            raw = json.load(f)
        try:
            endpoints = [(str(db), str(url)) for db, url in raw["endpoints"]]
            cfg = cls(
                camera_id=str(raw["camera_id"]),
                frames_dir=str(raw["frames_dir"]),
                output_dir=str(raw["output_dir"]),
                event_log=str(raw["event_log"]),
                endpoints=endpoints,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid pipeline config: {e}") from None
        if "cascades" in raw:
            cfg.cascades = [(str(c["path"]), str(c["label"])) for c in raw["cascades"]]
        for key in (
            "scale_factor",
            "min_neighbors",
            "min_size",
            "step_fraction",
            "tau",
            "timeout_ms",
            "queue_bound",
            "crop_margin",
            "webhook",
        ):
            if key in raw:
                setattr(cfg, key, raw[key])
        return cfg


def probe_endpoints(endpoints: list[tuple[str, str]], timeout: float = 2.0) -> list[str]:
    """Names of endpoints whose health route answers."""
    alive = []
    for db, url in endpoints:
        try:
            with urllib.request.urlopen(f"{url}/v1/health", timeout=timeout) as resp:
                if resp.status == 200:
                    alive.append(db)
        except OSError:
            pass
    return alive


def run_from_config(config: PipelineConfig) -> int:
    """Wire up and run the pipeline; raises StartupError when no watchlist
    database is reachable."""
    alive = probe_endpoints(config.endpoints)
    if not alive:
        raise StartupError("no watchlist endpoint is reachable")
    registry = (
        CascadeRegistry.default()
        if config.cascades is None
        else CascadeRegistry.from_files(config.cascades)
    )
    params = DetectParams(
        scale_factor=config.scale_factor,
        min_neighbors=config.min_neighbors,
        min_size=config.min_size,
        step_fraction=config.step_fraction,
    )
    dispatcher = CheckDispatcher(
        endpoints=config.endpoints,
        timeout=config.timeout_ms / 1000.0,
        queue_bound=config.queue_bound,
    )
    source = FrameSource(config.camera_id, config.frames_dir)
    with EventLog(config.event_log) as log:
        pipe = Pipeline(
            camera_id=config.camera_id,
            registry=registry,
            dispatcher=dispatcher,
            log=log,
            output_dir=config.output_dir,
            detect_params=params,
            tau=config.tau,
            crop_margin=config.crop_margin,
            webhook=config.webhook,
        )
        try:
            return pipe.run(source)
        finally:
            dispatcher.close()
