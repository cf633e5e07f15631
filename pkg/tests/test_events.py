import json
import threading
from datetime import datetime, timezone

import pytest

from sentinel.events import EventLog, EventRecord, read_log, verify_log


class TestEventRecord:
    def test_rejects_bad_kind(self):
        with pytest.raises(ValueError):
            EventRecord(1, "2026-08-22T00:00:00Z", "gossip", {})

    def test_rejects_nonpositive_seq(self):
        with pytest.raises(ValueError):
            EventRecord(0, "2026-08-22T00:00:00Z", "alert", {})

    def test_json_line_shape(self):
        rec = EventRecord(3, "2026-08-22T00:00:00Z", "detection", {"a": 1})
        obj = json.loads(rec.to_json())
        assert obj == {
            "seq": 3,
            "ts": "2026-08-22T00:00:00Z",
            "kind": "detection",
            "payload": {"a": 1},
        }


class TestEventLog:
    def test_sequential_appends(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with EventLog(path) as log:
            a = log.append("run_started", {})
            b = log.append("frame_processed", {"frame_index": 0})
            assert (a.seq, b.seq) == (1, 2)
            assert log.last_seq == 2
        records = read_log(path)
        assert [r.kind for r in records] == ["run_started", "frame_processed"]
        verify_log(records)

    def test_explicit_timestamp_is_used(self, tmp_path):
        with EventLog(tmp_path / "log.jsonl") as log:
            rec = log.append("alert", {}, datetime(2026, 1, 2, 3, 4, 5, tzinfo=timezone.utc))
        assert rec.ts == "2026-01-02T03:04:05Z"

    def test_concurrent_appends_stay_gapless(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with EventLog(path) as log:
            def worker():
                for _ in range(50):
                    log.append("detection", {"t": threading.get_ident()})

            threads = [threading.Thread(target=worker) for _ in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        records = read_log(path)
        assert len(records) == 400
        verify_log(records)


class TestVerifyLog:
    def rec(self, seq, kind, payload=None):
        return EventRecord(seq, "2026-08-22T00:00:00Z", kind, payload or {})

    def test_detects_gap(self):
        records = [self.rec(1, "run_started"), self.rec(3, "alert")]
        with pytest.raises(ValueError, match="gap"):
            verify_log(records)

    def test_detects_orphan_verdict(self):
        records = [
            self.rec(1, "run_started"),
            self.rec(2, "verdict", {"request_id": "q"}),
        ]
        with pytest.raises(ValueError, match="unknown request"):
            verify_log(records)

    def test_accepts_check_then_verdict(self):
        records = [
            self.rec(1, "check_requested", {"request_id": "q"}),
            self.rec(2, "verdict", {"request_id": "q"}),
        ]
        verify_log(records)
