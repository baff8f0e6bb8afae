import hashlib
import subprocess
import sys
import textwrap

import pytest

from helpers import DATASET_ID, samples
from tpsc.chunker import (
    CHUNK_SIZE_THRESHOLD,
    ChainState,
    Chunker,
    FlushPolicy,
    Journal,
    append_sample,
    expire,
    recover,
    seal_now,
)
from tpsc.core import RECORD_SIZE, ZERO_HASH, Sample, parse_chunk
from tpsc.errors import JournalCorrupt

T = 1_700_000_000_000_000
SIZE_ONLY = FlushPolicy(CHUNK_SIZE_THRESHOLD, None)


def feed(state, items, policy):
    sealed = []
    for s in items:
        _, c = append_sample(state, s, policy)
        if c:
            sealed.append(c)
    return sealed


def test_threshold_arithmetic():
    assert CHUNK_SIZE_THRESHOLD == 262_144
    assert 13_798 * RECORD_SIZE == 262_162 >= CHUNK_SIZE_THRESHOLD
    assert 13_797 * RECORD_SIZE == 262_143 < CHUNK_SIZE_THRESHOLD


def test_13797_samples_do_not_seal():
    st = ChainState(DATASET_ID)
    assert feed(st, samples(13_797, step_us=10), SIZE_ONLY) == []
    assert len(st.buffer) == 13_797


def test_13798th_append_seals():
    st = ChainState(DATASET_ID)
    sealed = feed(st, samples(13_798, step_us=10), SIZE_ONLY)
    assert len(sealed) == 1
    assert sealed[0].chunk.header.record_count == 13_798
    assert st.buffer == [] and st.next_sequence == 1


def test_time_window_seals_and_resets():
    pol = FlushPolicy(CHUNK_SIZE_THRESHOLD, 10_000_000)
    st = ChainState(DATASET_ID)
    # one sample per second: the sample at +10 s closes the window
    sealed = feed(st, samples(25, step_us=1_000_000), pol)
    assert [c.chunk.header.record_count for c in sealed] == [11, 11]
    assert len(st.buffer) == 3


def test_expiry_with_empty_buffer_seals_nothing():
    pol = FlushPolicy(CHUNK_SIZE_THRESHOLD, 1)
    st = ChainState(DATASET_ID)
    _, c = expire(st, pol, T + 10**9)
    assert c is None


def test_expiry_without_new_sample():
    pol = FlushPolicy(CHUNK_SIZE_THRESHOLD, 5_000_000)
    st = ChainState(DATASET_ID)
    feed(st, samples(2), pol)
    assert expire(st, pol, T + 4_000_000)[1] is None
    c = expire(st, pol, T + 5_000_000)[1]
    assert c is not None and c.chunk.header.record_count == 2


def test_chain_links():
    st = ChainState(DATASET_ID)
    sealed = []
    for part in (samples(3), samples(4, start_us=T + 10**7)):
        feed(st, part, SIZE_ONLY)
        sealed.append(seal_now(st)[1])
    first, second = sealed
    assert first.chunk.header.prev_hash == ZERO_HASH
    assert second.chunk.header.prev_hash == hashlib.sha256(first.data).digest()
    assert second.chunk.header.sequence == 1


def test_seal_now():
    st = ChainState(DATASET_ID)
    feed(st, samples(3), SIZE_ONLY)
    _, c = seal_now(st)
    assert c.chunk.header.record_count == 3
    assert seal_now(st)[1] is None
    assert seal_now(ChainState(DATASET_ID))[1] is None


def test_invalid_sample_is_counted_not_buffered():
    st = ChainState(DATASET_ID)
    append_sample(st, Sample(1, T, float("nan")), SIZE_ONLY)
    assert st.buffer == [] and st.rejected == 1


def test_recover_empty_journal_gives_genesis(tmp_path):
    st = recover(tmp_path / "journal.log", DATASET_ID)
    assert st.next_sequence == 0 and st.last_hash is None and st.buffer == []


def test_journal_round_trip_with_seals(tmp_path):
    path = tmp_path / "journal.log"
    ch = Chunker(Journal(path, DATASET_ID), FlushPolicy(RECORD_SIZE * 4, None))
    out = [ch.append(s) for s in samples(10)]
    sealed = [c for c in out if c]
    assert len(sealed) == 2
    ch.close(compact=False)
    st = recover(path, DATASET_ID)
    assert st.next_sequence == 2
    assert st.last_hash == sealed[-1].hash
    assert st.buffer == samples(10)[8:]


def test_compaction_keeps_chain_position(tmp_path):
    path = tmp_path / "journal.log"
    ch = Chunker(Journal(path, DATASET_ID), FlushPolicy(RECORD_SIZE * 4, None))
    for s in samples(10):
        ch.append(s)
    ch.close(compact=True)
    text = path.read_text().splitlines()
    assert text[0].startswith("# tpsc journal dataset=")
    assert sum(1 for line in text if line.startswith("SEAL")) == 2
    assert len(text) == 1 + 2 + 2
    st = recover(path, DATASET_ID)
    assert st.next_sequence == 2 and len(st.buffer) == 2


def test_torn_last_record_is_discarded(tmp_path, caplog):
    path = tmp_path / "journal.log"
    j = Journal(path, DATASET_ID)
    for s in samples(5):
        j.append(s)
    j.close()
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])  # cut into the last line
    st = recover(path, DATASET_ID)
    assert len(st.buffer) == 4
    assert "torn" in caplog.text
    # reopening truncates the tail so appends continue cleanly
    j = Journal(path, DATASET_ID)
    j.append(samples(1, start_us=T + 99)[0])
    j.close()
    assert len(recover(path, DATASET_ID).buffer) == 5


def test_corruption_before_tail_names_offset(tmp_path):
    path = tmp_path / "journal.log"
    j = Journal(path, DATASET_ID)
    for s in samples(5):
        j.append(s)
    j.close()
    lines = path.read_bytes().split(b"\n")
    offset = len(lines[0]) + 1 + len(lines[1]) + 1
    lines[2] = b"1 zz 3.0"
    path.write_bytes(b"\n".join(lines))
    with pytest.raises(JournalCorrupt) as e:
        recover(path, DATASET_ID)
    assert e.value.offset == offset


def test_seal_marker_must_match_samples(tmp_path):
    path = tmp_path / "journal.log"
    j = Journal(path, DATASET_ID)
    for s in samples(3):
        j.append(s)
    j._fh.write("SEAL 0 " + "ab" * 32 + "\n")
    j.append(samples(1, start_us=T + 10**8)[0])
    j.close()
    with pytest.raises(JournalCorrupt):
        recover(path, DATASET_ID)


def test_journal_of_other_dataset_refused(tmp_path):
    path = tmp_path / "journal.log"
    Journal(path, DATASET_ID).close()
    with pytest.raises(JournalCorrupt):
        recover(path, b"\x01" * 16)


def test_kill_and_restart_recovers_buffer(tmp_path):
    path = tmp_path / "journal.log"
    script = textwrap.dedent(f"""
        import os, signal
        from tpsc.chunker import Chunker, FlushPolicy, Journal
        from tpsc.core import Sample
        ch = Chunker(Journal({str(path)!r}, bytes.fromhex({DATASET_ID.hex()!r})), FlushPolicy())
        for i in range(5):
            ch.append(Sample(1, {T} + i, float(i)))
        os.kill(os.getpid(), signal.SIGKILL)
    """)
    proc = subprocess.run([sys.executable, "-c", script], timeout=30)
    assert proc.returncode == -9
    st = recover(path, DATASET_ID)
    assert [s.value for s in st.buffer] == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert st.next_sequence == 0


def test_persist_runs_before_seal_marker(tmp_path):
    path = tmp_path / "journal.log"
    seen = []

    def persist(sealed):
        seen.append(path.read_text().count("SEAL"))

    ch = Chunker(Journal(path, DATASET_ID), FlushPolicy(RECORD_SIZE * 2, None), persist=persist)
    for s in samples(4):
        ch.append(s)
    ch.close(compact=False)
    assert seen == [0, 1]


def test_sealed_bytes_parse_back(tmp_path):
    st = ChainState(DATASET_ID)
    feed(st, samples(7, seed=1), SIZE_ONLY)
    c = seal_now(st)[1]
    assert parse_chunk(c.data) == c.chunk
