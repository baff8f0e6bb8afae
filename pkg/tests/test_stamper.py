import hashlib
import json

import pytest
import requests

from tpsc._persist import backoff_delay
from tpsc.errors import StamperError, UnknownHash
from tpsc.stamper import (
    CreatorCredential,
    FaultPlan,
    HttpStampClient,
    MockStampService,
    ProofStore,
    Stamper,
    load_proofs,
)

CRED = CreatorCredential("k1")


def h(i: int) -> str:
    return hashlib.sha256(f"chunk-{i}".encode()).hexdigest()


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t


def make_stamper(tmp_path, svc, clock=None, **kw):
    kw.setdefault("retry_base_s", 0.0)
    kw.setdefault("poll_interval_s", 0.0)
    return Stamper(ProofStore(tmp_path / "proofs.jsonl"), HttpStampClient(svc.url, timeout=2), CRED,
                   clock=clock or FakeClock(), **kw)


def test_fresh_hash_is_submitted(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    rec = st.submit_hash(h(0))
    assert rec.status == "submitted" and rec.attempts == 1
    assert mock_service.ledger()[h(0)]["posts"] == 1


def test_submit_is_idempotent(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    a = st.submit_hash(h(0))
    b = st.submit_hash(h(0))
    assert a == b
    assert mock_service.ledger()[h(0)]["posts"] == 1


def test_service_down_then_recovers(tmp_path):
    faults = FaultPlan(down=True)
    clock = FakeClock()
    with MockStampService(0, faults=faults) as svc:
        st = make_stamper(tmp_path, svc, clock, retry_base_s=1.0)
        st.enqueue(h(1))
        st.run_pending()
        rec = st.proofs.get(h(1))
        assert rec.status == "queued" and rec.attempts == 1
        st.run_pending()  # backoff not elapsed
        assert st.proofs.get(h(1)).attempts == 1
        faults.down = False
        clock.t += 1.0
        st.run_pending()
        assert st.proofs.get(h(1)).status == "submitted"
        assert h(1) in svc.ledger()


def test_backoff_is_exponential_and_capped():
    assert [backoff_delay(n, 1.0, 300.0) for n in (1, 2, 3, 4)] == [1.0, 2.0, 4.0, 8.0]
    assert backoff_delay(20, 1.0, 300.0) == 300.0


def test_confirmation_with_mock_clock_takes_at_most_three_polls(tmp_path):
    clock = FakeClock(5000.0)
    with MockStampService(0, confirm_delay_s=2.0, clock=clock) as svc:
        st = make_stamper(tmp_path, svc)
        st.submit_hash(h(2))
        polls = 0
        while st.proofs.get(h(2)).status != "confirmed":
            clock.t += 1.0
            st.poll_proof(h(2))
            polls += 1
            assert polls <= 3
        rec = st.proofs.get(h(2))
        assert rec.tx_id == "mock-" + h(2)[:24]
        assert rec.blockchain_time_us == 5002 * 1_000_000


def test_poll_before_submit(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    with pytest.raises(UnknownHash):
        st.poll_proof(h(3))
    st.enqueue(h(3))
    with pytest.raises(UnknownHash):
        st.poll_proof(h(3))


def test_poll_of_confirmed_is_noop(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    st.submit_hash(h(4))
    first = st.poll_proof(h(4))
    assert first.status == "confirmed"
    mock_service.stop()
    again = st.poll_proof(h(4))  # no network needed
    assert again.tx_id == first.tx_id


def test_poll_of_hash_unknown_to_service_fails_record(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    st.submit_hash(h(5))
    st.proofs.put(type(st.proofs.get(h(5)))(h(6), 0, mock_service.url, status="submitted"))
    assert st.poll_proof(h(6)).status == "failed"


def test_wire_protocol(mock_service):
    r = requests.post(mock_service.url + "/api/stamp", json={"hash": h(7)}, headers={"Authorization": "x"})
    assert r.status_code == 200 and r.json() == {"status": "submitted"}
    body = requests.get(mock_service.url + f"/api/proof/{h(7)}").json()
    assert body["status"] == "confirmed" and body["tx_id"] == "mock-" + h(7)[:24]
    r = requests.get(mock_service.url + f"/api/proof/{h(8)}")
    assert r.status_code == 404 and r.json() == {"status": "unknown"}
    r = requests.post(mock_service.url + "/api/stamp", json={"hash": h(7)})
    assert r.status_code == 401
    r = requests.post(mock_service.url + "/api/stamp", json={"hash": "zz"}, headers={"Authorization": "x"})
    assert r.status_code == 400


def test_hundred_hashes_hundred_entries(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    for i in range(100):
        st.submit_hash(h(i))
        st.submit_hash(h(i))
    entries = requests.get(mock_service.url + "/api/ledger").json()["entries"]
    assert len(entries) == 100
    assert {e["hash"] for e in entries} == {h(i) for i in range(100)}


def test_rejected_credential_marks_failed(tmp_path):
    with MockStampService(0, api_keys={"other"}) as svc:
        st = make_stamper(tmp_path, svc)
        rec = st.submit_hash(h(9))
        assert rec.status == "failed" and "credential" in rec.reason


def test_dropped_reply_is_retried_without_duplicate_entry(tmp_path):
    with MockStampService(0, faults=FaultPlan(drop_rate=1.0)) as svc:
        st = make_stamper(tmp_path, svc)
        assert st.submit_hash(h(10)).status == "queued"
        svc.faults.drop_rate = 0.0
        st.run_pending()
        assert st.proofs.get(h(10)).status in ("submitted", "confirmed")
        assert list(svc.ledger()) == [h(10)]
        assert svc.ledger()[h(10)]["posts"] == 2


def test_proofs_file_last_line_wins_and_survives_restart(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    st.enqueue(h(11))
    st.submit_hash(h(11))
    st.poll_proof(h(11))
    lines = (tmp_path / "proofs.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert all(json.dumps(json.loads(x), sort_keys=True, separators=(",", ":")) == x for x in lines)
    assert load_proofs(tmp_path / "proofs.jsonl")[h(11)].status == "confirmed"
    st.proofs.compact()
    assert len((tmp_path / "proofs.jsonl").read_text().splitlines()) == 1


def test_torn_proofs_line_is_ignored(tmp_path, mock_service):
    st = make_stamper(tmp_path, mock_service)
    st.submit_hash(h(12))
    with open(tmp_path / "proofs.jsonl", "a") as fh:
        fh.write('{"hash": "ab')
    assert load_proofs(tmp_path / "proofs.jsonl")[h(12)].status == "submitted"


def test_ledger_persists_across_restart(tmp_path):
    ledger = tmp_path / "ledger.jsonl"
    with MockStampService(0, ledger_path=ledger) as svc:
        st = make_stamper(tmp_path, svc)
        st.submit_hash(h(13))
    with MockStampService(0, ledger_path=ledger) as svc2:
        assert h(13) in svc2.ledger()


def test_port_in_use_is_reported(mock_service):
    with pytest.raises(StamperError):
        MockStampService(mock_service.port).start()


def test_credential_comes_from_environment(monkeypatch):
    monkeypatch.delenv("TPSC_API_KEY", raising=False)
    assert CreatorCredential.from_env() is None
    monkeypatch.setenv("TPSC_API_KEY", "secret-value")
    cred = CreatorCredential.from_env()
    assert cred.key_id == hashlib.sha256(b"secret-value").hexdigest()[:16]
    assert "secret-value" not in repr(cred)


def test_no_credential_refuses_submission(tmp_path, mock_service):
    st = Stamper(ProofStore(tmp_path / "p.jsonl"), HttpStampClient(mock_service.url), None)
    with pytest.raises(StamperError):
        st.submit_hash(h(14))
