import csv
import io
import json
import os
import signal
import subprocess
import sys
import tarfile
import time

import pytest
import requests

from helpers import T0, build_dataset, sim_config, write_config
from tpsc.cli import main
from tpsc.core import Sample
from tpsc.dataset import DatasetDir
from tpsc.ingest import write_samples


@pytest.fixture
def cfg_path(tmp_path, mock_service):
    return write_config(tmp_path / "cfg.json", sim_config(url=mock_service.url))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors_exit_64(capsys):
    with pytest.raises(SystemExit) as e:
        main(["verify"])
    assert e.value.code == 64
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 64


def test_verify_without_manifest_exits_64(tmp_path, capsys):
    code, out, err = run(capsys, "verify", tmp_path)
    assert code == 64 and "manifest" in err and out == ""


def test_verify_exit_codes(tmp_path, capsys):
    build_dataset(tmp_path / "ok")
    assert run(capsys, "verify", tmp_path / "ok")[0] == 0
    build_dataset(tmp_path / "pending", proof_status="submitted")
    assert run(capsys, "verify", tmp_path / "pending")[0] == 1
    m = build_dataset(tmp_path / "bad")
    p = DatasetDir(tmp_path / "bad").store.path_for(m.chunks[6].hash)
    raw = bytearray(p.read_bytes())
    raw[100] ^= 4
    p.write_bytes(bytes(raw))
    code, out, _ = run(capsys, "verify", tmp_path / "bad", "--format", "json")
    rep = json.loads(out)
    assert code == 3 and rep["verdict"] == "tampered" and rep["first_failure"] == 6
    code, out, _ = run(capsys, "verify", tmp_path / "bad")
    assert "first failing sequence: 6" in out


def test_record_requires_credential(tmp_path, cfg_path, capsys, monkeypatch):
    monkeypatch.delenv("TPSC_API_KEY", raising=False)
    code, _, err = run(capsys, "record", cfg_path, tmp_path / "ds", "--duration", 5)
    assert code == 64 and "TPSC_API_KEY" in err


def test_config_problems_listed(tmp_path, capsys):
    bad = write_config(tmp_path / "bad.json", {"sensors": [{"sensor_id": "x"}], "chunker": {"clock": "?"}})
    code, _, err = run(capsys, "record", bad, tmp_path / "ds", "--no-stamp")
    assert code == 64
    assert "sensors[0].sensor_id" in err and "chunker.clock" in err


def test_full_lifecycle(tmp_path, cfg_path, capsys, caplog, api_key, mock_service):
    ds = tmp_path / "ds"
    code, out, _ = run(capsys, "record", cfg_path, ds, "--duration", 130)
    assert code == 0 and json.loads(out)["total_chunks"] == 3
    # chunks are stamped but not necessarily confirmed yet; export refuses unfinalized data
    code, _, err = run(capsys, "export", ds, tmp_path / "b.tar")
    assert code == 64 and "finalize" in err
    code, out, _ = run(capsys, "finalize", ds, "-c", cfg_path, "--wait", 5)
    assert code == 0 and json.loads(out)["changed"]
    code, out, err = run(capsys, "finalize", ds, "-c", cfg_path)
    assert code == 0 and not json.loads(out)["changed"]
    assert "already finalized" in caplog.text
    assert run(capsys, "verify", ds)[0] == 0
    code, out, _ = run(capsys, "export", ds, tmp_path / "b.tar")
    assert code == 0 and out.split()[1].endswith("b.tar")
    raw = (tmp_path / "b.tar").read_bytes()
    assert api_key.encode() not in raw and b"api_key" not in raw.lower()
    with tarfile.open(tmp_path / "b.tar") as tar:
        tar.extractall(tmp_path / "x", filter="data")
    assert run(capsys, "verify", tmp_path / "x")[0] == 0
    assert run(capsys, "verify", tmp_path / "b.tar")[0] == 0


def test_no_stamp_makes_no_submissions(tmp_path, cfg_path, capsys, mock_service, monkeypatch):
    monkeypatch.delenv("TPSC_API_KEY", raising=False)
    code, out, _ = run(capsys, "record", cfg_path, tmp_path / "ds", "--duration", 70, "--no-stamp")
    assert code == 0 and json.loads(out)["total_chunks"] >= 1
    assert mock_service.ledger() == {}


def test_set_override(tmp_path, cfg_path, capsys, monkeypatch):
    monkeypatch.delenv("TPSC_API_KEY", raising=False)
    code, out, _ = run(capsys, "record", cfg_path, tmp_path / "ds", "--duration", 30, "--no-stamp",
                       "--set", "chunker.chunk_interval_s=10")
    assert code == 0 and json.loads(out)["total_chunks"] == 3


def test_inspect_matches_parse(tmp_path, capsys):
    m = build_dataset(tmp_path, n_chunks=3, per_chunk=4)
    code, out, _ = run(capsys, "inspect", tmp_path, "--sequence", 1, "--records")
    assert code == 0
    fields = dict(line.split(None, 1) for line in out.splitlines()[:10])
    assert fields["record_count"] == "4" and fields["sequence"] == "1"
    assert fields["hash"] == m.chunks[1].hash
    assert fields["prev_hash"] == m.chunks[0].hash
    assert len(out.splitlines()) == 10 + 4
    obj = DatasetDir(tmp_path).store.path_for(m.chunks[2].hash)
    code, out, _ = run(capsys, "inspect", obj)
    assert code == 0 and f"hash          {m.chunks[2].hash}" in out
    assert run(capsys, "inspect", tmp_path, "--sequence", 9)[0] == 64


def test_inspect_rejects_garbage(tmp_path, capsys):
    (tmp_path / "junk").write_bytes(b"not a chunk at all")
    code, _, err = run(capsys, "inspect", tmp_path / "junk")
    assert code == 65 and "magic" in err.lower()


def test_simulate_is_deterministic(capsys):
    a = run(capsys, "simulate", "--seed", 4, "--seeds", 2)[1]
    b = run(capsys, "simulate", "--seed", 4, "--seeds", 2)[1]
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert [r["seed"] for r in rows] == ["4", "5"]
    assert float(rows[0]["median_error"]) < 0.5 < 1.5 < float(rows[0]["mean_error"])


def test_simulate_sweep_writes_csv_and_png(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--sweep", "fraction", "--seeds", 2, "--format", "json",
                       "--out-dir", tmp_path / "rep")
    assert code == 0
    rows = json.loads(out)
    assert rows[0]["corrupt_fraction"] == 0.0 and len(rows) == 20
    assert (tmp_path / "rep" / "simulation.csv").read_text().startswith("corrupt_fraction,")
    assert (tmp_path / "rep" / "simulation.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_check_and_aggregate_reports(tmp_path, cfg_path, capsys, monkeypatch):
    monkeypatch.delenv("TPSC_API_KEY", raising=False)
    ds = tmp_path / "ds"
    run(capsys, "record", cfg_path, ds, "--duration", 30, "--no-stamp")
    code, out, _ = run(capsys, "check", ds, "--out-dir", tmp_path / "q")
    reports = json.loads(out)
    assert code == 0 and [r["series_id"] for r in reports] == [1, 2]
    assert (tmp_path / "q" / "quality.png").exists() and (tmp_path / "q" / "quality.csv").exists()

    for i, off in enumerate([0.0, 0.1, -0.1, 50.0]):
        write_samples(tmp_path / f"src{i}.txt", [Sample(1, T0 + k * 1_000_000, 20 + off) for k in range(5)])
    files = [tmp_path / f"src{i}.txt" for i in range(4)]
    code, out, _ = run(capsys, "aggregate", *files, "--grid-s", 1, "--out-dir", tmp_path / "a")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 5
    assert all(r["outliers"] == "src3" for r in rows)
    assert float(rows[0]["median"]) == pytest.approx(20.05)
    assert (tmp_path / "a" / "aggregate.png").exists()
    assert run(capsys, "aggregate", ds, "--grid-s", 1)[0] == 64  # needs --sensor


def _wait_for(pred, timeout=10.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if pred():
            return True
        time.sleep(0.05)
    return False


def test_record_sigterm_seals_and_exits_cleanly(tmp_path):
    raw = sim_config(interval_s=60)
    raw["chunker"].update(clock="wall", start_us=None)
    cfg = write_config(tmp_path / "cfg.json", raw)
    env = {k: v for k, v in os.environ.items() if k != "TPSC_API_KEY"}
    proc = subprocess.Popen([sys.executable, "-m", "tpsc", "record", str(cfg), str(tmp_path / "ds"), "--no-stamp"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, env=env)
    assert _wait_for(lambda: (tmp_path / "ds" / "journal.log").exists()
                     and (tmp_path / "ds" / "journal.log").stat().st_size > 300)
    proc.send_signal(signal.SIGTERM)
    out, err = proc.communicate(timeout=20)
    assert proc.returncode == 0, err
    summary = json.loads(out)
    assert summary["total_chunks"] == 1 and summary["samples"] > 0
    m = DatasetDir(tmp_path / "ds").manifest()
    assert m.chunks[0].record_count == summary["samples"]


def test_mock_stamper_command(tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "tpsc", "mock-stamper", "--port", "0",
                             "--confirm-delay", "0", "--run-for", "30"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    url = line.split()[4]
    h = "ab" * 32
    assert requests.post(url + "/api/stamp", json={"hash": h}, headers={"Authorization": "k"}).status_code == 200
    assert requests.get(url + f"/api/proof/{h}").json()["status"] == "confirmed"
    proc.send_signal(signal.SIGINT)
    proc.communicate(timeout=10)
    assert proc.returncode == 0
