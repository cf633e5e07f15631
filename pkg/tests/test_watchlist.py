import json
import time
import urllib.error
import urllib.request
from datetime import datetime, timezone

import numpy as np
import pytest

from sentinel.imaging import GrayImage, encode_image
from sentinel.signature import Signature, signature
from sentinel.watchlist import (
    ADMISSIBLE,
    INADMISSIBLE,
    INDETERMINATE,
    CheckRequest,
    ConfigError,
    DbHit,
    Verdict,
    WatchRecord,
    WatchlistService,
    fan_out_check,
    put_record,
)


def crop(seed, shift=0):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(32, 32)).astype(np.int64)
    return GrayImage(np.clip(base + shift, 0, 255).astype(np.uint8))


def sig(seed) -> Signature:
    return signature(crop(seed))


def request_for(seed, request_id="req-1") -> CheckRequest:
    img = crop(seed)
    return CheckRequest(
        request_id=request_id,
        signature=signature(img),
        face_image=encode_image(img),
        camera_id="gate-3",
        captured_at=datetime(2026, 8, 22, 12, 0, 0, tzinfo=timezone.utc),
    )


def record(seed, record_id="r-1", status="wanted", name="John Doe", details="") -> WatchRecord:
    return WatchRecord(record_id, name, status, sig(seed), details)


def raw(method, url, body=None, timeout=5.0):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read() or b"{}")


@pytest.fixture()
def service():
    with WatchlistService() as svc:
        yield svc


class TestTypes:
    def test_record_validation(self):
        with pytest.raises(ValueError):
            WatchRecord("", "x", "wanted", sig(1))
        with pytest.raises(ValueError):
            WatchRecord("r", "x", "suspicious", sig(1))

    def test_hit_validation(self):
        with pytest.raises(ValueError):
            DbHit("db", "r", "clear", 0.95)
        with pytest.raises(ValueError):
            DbHit("db", "r", "wanted", 1.5)

    def test_check_request_validation(self):
        with pytest.raises(ValueError):
            request_for(1, request_id="")
        with pytest.raises(ValueError):
            CheckRequest("r", sig(1), b"", "cam", datetime(2026, 1, 1))

    def test_verdict_consistency_enforced(self):
        h = DbHit("db", "r", "wanted", 0.99)
        with pytest.raises(ValueError):
            Verdict("q", INADMISSIBLE, (), ("db",), ())
        with pytest.raises(ValueError):
            Verdict("q", ADMISSIBLE, (h,), ("db",), ())
        with pytest.raises(ValueError):
            Verdict("q", ADMISSIBLE, (), ("db",), ("db",))
        with pytest.raises(ValueError):
            Verdict("q", INDETERMINATE, (), ("db",), ())
        with pytest.raises(ValueError):
            Verdict("q", "maybe", (), ("db",), ())
        Verdict("q", INADMISSIBLE, (h,), ("db",), ("other",))


class TestService:
    def test_health(self, service):
        code, body = raw("GET", f"{service.base_url}/v1/health")
        assert code == 200 and body == {"status": "ok"}

    def test_exact_signature_scores_one(self, service):
        put_record(service.base_url, "police", record(7, details="case 12"))
        code, body = raw(
            "POST", f"{service.base_url}/v1/databases/police/check", request_for(7).to_wire()
        )
        assert code == 200
        assert len(body["hits"]) == 1
        hit = body["hits"][0]
        assert hit["record_id"] == "r-1"
        assert hit["status"] == "wanted"
        assert hit["details"] == "case 12"
        assert abs(hit["score"] - 1.0) <= 1e-6

    def test_upsert_replaces(self, service):
        put_record(service.base_url, "police", record(7, details="old"))
        put_record(service.base_url, "police", record(7, details="new"))
        _, body = raw(
            "POST", f"{service.base_url}/v1/databases/police/check", request_for(7).to_wire()
        )
        assert [h["details"] for h in body["hits"]] == ["new"]

    def test_put_bad_signature_length(self, service):
        body = {"name": "x", "status": "wanted", "signature": [0.0] * 1000, "details": ""}
        code, _ = raw("PUT", f"{service.base_url}/v1/databases/police/records/r9", body)
        assert code == 400

    def test_put_unknown_status(self, service):
        body = {"name": "x", "status": "naughty", "signature": sig(1).to_wire(), "details": ""}
        code, _ = raw("PUT", f"{service.base_url}/v1/databases/police/records/r9", body)
        assert code == 400

    def test_check_unknown_database(self, service):
        code, _ = raw(
            "POST", f"{service.base_url}/v1/databases/nowhere/check", request_for(1).to_wire()
        )
        assert code == 404

    def test_check_malformed_bodies(self, service):
        put_record(service.base_url, "police", record(7))
        url = f"{service.base_url}/v1/databases/police/check"
        good = request_for(1).to_wire()
        for breakage in [
            lambda b: b.pop("request_id"),
            lambda b: b.__setitem__("request_id", ""),
            lambda b: b.__setitem__("signature", [0.1] * 10),
            lambda b: b.__setitem__("face_image", "@@not-base64@@"),
            lambda b: b.__setitem__("captured_at", "yesterday"),
            lambda b: b.pop("signature"),
        ]:
            body = json.loads(json.dumps(good))
            breakage(body)
            code, _ = raw("POST", url, body)
            assert code == 400

    def test_clear_status_never_hits(self, service):
        put_record(service.base_url, "police", record(7, status="clear"))
        _, body = raw(
            "POST", f"{service.base_url}/v1/databases/police/check", request_for(7).to_wire()
        )
        assert body["hits"] == []

    def test_noise_records_do_not_hit(self, service):
        for i in range(20):
            put_record(service.base_url, "police", record(100 + i, record_id=f"r{i}"))
        _, body = raw(
            "POST", f"{service.base_url}/v1/databases/police/check", request_for(999).to_wire()
        )
        assert body["hits"] == []

    def test_hits_sorted_by_descending_score(self, service):
        put_record(service.base_url, "police", record(7, record_id="exact"))
        near = WatchRecord("near", "x", "criminal", signature(crop(7, shift=6)))
        put_record(service.base_url, "police", near)
        _, body = raw(
            "POST", f"{service.base_url}/v1/databases/police/check", request_for(7).to_wire()
        )
        scores = [h["score"] for h in body["hits"]]
        assert len(scores) == 2
        assert scores == sorted(scores, reverse=True)
        assert body["hits"][0]["record_id"] == "exact"

    def test_invalid_json_body(self, service):
        req = urllib.request.Request(
            f"{service.base_url}/v1/databases/police/check", data=b"{nope", method="POST"
        )
        with pytest.raises(urllib.error.HTTPError) as e:
            urllib.request.urlopen(req, timeout=5.0)
        assert e.value.code == 400

    def test_unknown_route(self, service):
        code, _ = raw("GET", f"{service.base_url}/v2/whatever")
        assert code == 404

    def test_snapshot_round_trip(self, service, tmp_path):
        put_record(service.base_url, "police", record(7))
        put_record(service.base_url, "interpol", record(8, record_id="r-2"))
        path = tmp_path / "snap.json"
        service.save_snapshot(path)
        with WatchlistService() as restored:
            restored.load_snapshot(path)
            _, body = raw(
                "POST", f"{restored.base_url}/v1/databases/police/check", request_for(7).to_wire()
            )
            assert len(body["hits"]) == 1


class TestFanOut:
    def seeded_service(self, latency_ms=None):
        svc = WatchlistService(latency_ms=latency_ms)
        svc.start()
        for db in ("police", "interpol", "immigration"):
            for i in range(3):
                put_record(svc.base_url, db, record(200 + i, record_id=f"{db}-{i}"))
        return svc

    def endpoints(self, svc, names=("police", "interpol", "immigration")):
        return [(n, svc.base_url) for n in names]

    def test_zero_endpoints_rejected(self):
        with pytest.raises(ConfigError):
            fan_out_check([], request_for(1))

    def test_hit_yields_inadmissible(self):
        svc = self.seeded_service()
        try:
            put_record(svc.base_url, "interpol", record(42, record_id="target"))
            v = fan_out_check(self.endpoints(svc), request_for(42, "q-9"))
            assert v.decision == INADMISSIBLE
            assert v.request_id == "q-9"
            assert [h.record_id for h in v.hits] == ["target"]
            assert v.hits[0].database == "interpol"
            assert v.databases_unavailable == ()
        finally:
            svc.stop()

    def test_clean_sweep_is_admissible(self):
        svc = self.seeded_service()
        try:
            v = fan_out_check(self.endpoints(svc), request_for(999))
            assert v.decision == ADMISSIBLE
            assert v.hits == ()
            assert v.databases_queried == ("immigration", "interpol", "police")
        finally:
            svc.stop()

    def test_unreachable_database_is_indeterminate(self):
        svc = self.seeded_service()
        try:
            eps = self.endpoints(svc, ("police", "interpol")) + [
                ("customs", "http://127.0.0.1:9")
            ]
            v = fan_out_check(eps, request_for(999), timeout=2.0)
            assert v.decision == INDETERMINATE
            assert v.databases_unavailable == ("customs",)
        finally:
            svc.stop()

    def test_slow_database_times_out_to_indeterminate(self):
        svc = self.seeded_service(latency_ms={"interpol": (400, 400)})
        try:
            v = fan_out_check(self.endpoints(svc), request_for(999), timeout=0.15)
            assert v.decision == INDETERMINATE
            assert "interpol" in v.databases_unavailable
        finally:
            svc.stop()

    def test_hit_beats_unavailability(self):
        svc = self.seeded_service()
        try:
            put_record(svc.base_url, "police", record(42, record_id="target"))
            eps = self.endpoints(svc) + [("customs", "http://127.0.0.1:9")]
            v = fan_out_check(eps, request_for(42), timeout=2.0)
            assert v.decision == INADMISSIBLE
            assert v.databases_unavailable == ("customs",)
        finally:
            svc.stop()

    def test_calls_overlap_rather_than_serialize(self):
        svc = self.seeded_service(latency_ms=(100, 100))
        try:
            t0 = time.monotonic()
            v = fan_out_check(self.endpoints(svc), request_for(999), timeout=5.0)
            wall = time.monotonic() - t0
            assert v.decision == ADMISSIBLE
            assert wall < 0.25
        finally:
            svc.stop()

    def test_endpoint_order_never_matters(self):
        svc = self.seeded_service()
        try:
            put_record(svc.base_url, "police", record(42, record_id="t1"))
            put_record(svc.base_url, "immigration", record(42, record_id="t2"))
            import itertools

            verdicts = [
                fan_out_check(list(p), request_for(42))
                for p in itertools.permutations(self.endpoints(svc))
            ]
            first = verdicts[0]
            for v in verdicts[1:]:
                assert v == first
            assert [h.record_id for h in first.hits] == ["t2", "t1"]
        finally:
            svc.stop()
