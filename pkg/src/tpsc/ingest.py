"""Sample sources: simulated sensors, replay files and the line protocol.

The line protocol stands in for real GPIO readers. One sample per line::

    <sensor_id> <timestamp_us> <value> [flags]

Blank lines and lines starting with ``#`` are ignored. The optional flags
column is written by the chunker journal; live senders normally omit it.
"""

from __future__ import annotations

import heapq
import io
import logging
import math
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, TextIO

from tpsc.core import FLAG_SUSPECT, Sample, SensorDescriptor, SensorKind, sample_problem
from tpsc.errors import LineRejected

log = logging.getLogger(__name__)

MODES = ("simulated", "replay", "line_protocol")

DEFAULT_INTERVALS_US = {
    SensorKind.TEMPERATURE: 2_000_000,
    SensorKind.CURRENT: 100_000,
    SensorKind.VIBRATION: 50_000,
    SensorKind.OTHER: 1_000_000,
}


@dataclass(frozen=True)
class SimParams:
    baseline: float = 0.0
    amplitude: float = 0.0
    noise_sd: float = 0.0
    period_s: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.period_s <= 0:
            raise ValueError("period_s must be > 0")


@dataclass(frozen=True)
class SourceConfig:
    descriptor: SensorDescriptor
    mode: str = "simulated"
    sim_params: SimParams = field(default_factory=SimParams)
    path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown source mode {self.mode!r}")
        if self.mode == "replay" and not self.path:
            raise ValueError("replay sources need a path")


def parse_line(line: str) -> Sample | None:
    """Parse one line-protocol line; None for blank and comment lines."""
    text = line.strip()
    if not text or text.startswith("#"):
        return None
    parts = text.split()
    if len(parts) not in (3, 4):
        raise LineRejected(f"expected 3 or 4 fields, got {len(parts)}: {text!r}")
    try:
        sid = int(parts[0])
        ts = int(parts[1])
        value = float(parts[2])
        flags = int(parts[3]) if len(parts) == 4 else 0
    except ValueError as e:
        raise LineRejected(f"{e}: {text!r}") from None
    s = Sample(sid, ts, value, flags)
    bad = sample_problem(s)
    if bad:
        raise LineRejected(f"bad {bad}: {text!r}")
    return s


def format_line(s: Sample) -> str:
    # repr() round-trips a float exactly
    if s.flags:
        return f"{s.sensor_id} {s.timestamp_us} {float(s.value)!r} {s.flags}"
    return f"{s.sensor_id} {s.timestamp_us} {float(s.value)!r}"


class _Monotonic:
    """Clamp non-increasing timestamps to previous + 1 us and mark them suspect."""

    def __init__(self):
        self.last: dict[int, int] = {}

    def __call__(self, s: Sample) -> Sample:
        prev = self.last.get(s.sensor_id)
        if prev is not None and s.timestamp_us <= prev:
            s = Sample(s.sensor_id, prev + 1, s.value, s.flags | FLAG_SUSPECT)
        self.last[s.sensor_id] = s.timestamp_us
        return s


class Source:
    """Base sample source. ``next_sample`` returns None at end of stream."""

    sensor_id: int
    rejected: int = 0

    def next_sample(self) -> Sample | None:
        raise NotImplementedError

    def __iter__(self) -> Iterator[Sample]:
        while (s := self.next_sample()) is not None:
            yield s

    def close(self) -> None:
        pass


class SimulatedSource(Source):
    """Sinusoid plus gaussian noise, sampled at the nominal interval.

    value(t) = baseline + amplitude * sin(2*pi*t/period_s) + N(0, noise_sd)
    with t in seconds since ``start_us``. Vibration sensors emit 1.0 when the
    signal is above the baseline and 0.0 otherwise.
    """

    def __init__(self, config: SourceConfig, start_us: int, end_us: int | None = None):
        self.config = config
        self.sensor_id = config.descriptor.sensor_id
        self.interval_us = config.descriptor.nominal_interval_us
        self.start_us = start_us
        self.end_us = end_us
        self.tick = 0
        self.rng = random.Random(config.sim_params.seed)

    def value_at(self, tick: int) -> float:
        p = self.config.sim_params
        t = tick * self.interval_us / 1e6
        v = p.baseline + p.amplitude * math.sin(2 * math.pi * t / p.period_s)
        if p.noise_sd > 0:
            v += self.rng.gauss(0.0, p.noise_sd)
        if self.config.descriptor.kind is SensorKind.VIBRATION:
            return 1.0 if v > p.baseline else 0.0
        return v

    def next_sample(self) -> Sample | None:
        ts = self.start_us + self.tick * self.interval_us
        if self.end_us is not None and ts >= self.end_us:
            return None
        s = Sample(self.sensor_id, ts, self.value_at(self.tick))
        self.tick += 1
        return s


class LineSource(Source):
    """Reads line-protocol samples from a text stream.

    ``sensor_ids`` limits which ids are accepted: lines for other ids count as
    rejected unless ``ignore_other_ids`` is set (replay files may hold several
    sensors, each read by its own source).
    """

    def __init__(self, stream: TextIO, sensor_ids: Iterable[int] | None = None,
                 ignore_other_ids: bool = False):
        self.stream = stream
        self.sensor_ids = set(sensor_ids) if sensor_ids is not None else None
        self.ignore_other_ids = ignore_other_ids
        self.sensor_id = min(self.sensor_ids) if self.sensor_ids else -1
        self.rejected = 0
        self.lineno = 0
        self._mono = _Monotonic()

    def next_sample(self) -> Sample | None:
        for line in self.stream:
            self.lineno += 1
            try:
                s = parse_line(line)
            except LineRejected as e:
                self.rejected += 1
                log.warning("line %d rejected: %s", self.lineno, e)
                continue
            if s is None:
                continue
            if self.sensor_ids is not None and s.sensor_id not in self.sensor_ids:
                if not self.ignore_other_ids:
                    self.rejected += 1
                    log.warning("line %d rejected: unknown sensor id %d", self.lineno, s.sensor_id)
                continue
            return self._mono(s)
        return None


class ReplaySource(LineSource):
    def __init__(self, config: SourceConfig):
        self.config = config
        self._fh = open(config.path, encoding="ascii")
        super().__init__(self._fh, [config.descriptor.sensor_id], ignore_other_ids=True)
        self.sensor_id = config.descriptor.sensor_id

    def close(self) -> None:
        self._fh.close()


def open_source(config: SourceConfig, start_us: int, end_us: int | None = None) -> Source:
    if config.mode == "simulated":
        return SimulatedSource(config, start_us, end_us)
    if config.mode == "replay":
        return ReplaySource(config)
    raise ValueError("line_protocol sources share one stream; use LineSource directly")


@dataclass
class StreamSummary:
    delivered: dict[int, int] = field(default_factory=dict)
    rejected: int = 0

    @property
    def total(self) -> int:
        return sum(self.delivered.values())


def check_unique_ids(configs: Iterable[SourceConfig]) -> None:
    seen: set[int] = set()
    for c in configs:
        sid = c.descriptor.sensor_id
        if sid in seen:
            raise ValueError(f"duplicate sensor_id {sid}")
        seen.add(sid)


def merge_logical(sources: list[Source]) -> Iterator[Sample]:
    """Merge sources by timestamp; ties broken by source order. Deterministic."""
    heap: list[tuple[int, int, Sample]] = []
    for i, src in enumerate(sources):
        s = src.next_sample()
        if s is not None:
            heap.append((s.timestamp_us, i, s))
    heapq.heapify(heap)
    while heap:
        _, i, s = heapq.heappop(heap)
        yield s
        nxt = sources[i].next_sample()
        if nxt is not None:
            heapq.heappush(heap, (nxt.timestamp_us, i, nxt))


def run_scheduler(
    sources: list[Source],
    sink: Callable[[Sample], None],
    *,
    realtime: bool = False,
    stop: threading.Event | None = None,
    clock: Callable[[], float] = time.time,
    idle: Callable[[], None] | None = None,
) -> StreamSummary:
    """Deliver samples from all sources to ``sink``.

    Logical mode merges by timestamp as fast as possible. Realtime mode gives
    each source its own thread, paced by the wall clock for timed sources,
    and the sink consumes a merged queue on the calling thread; ``idle`` is
    called whenever that queue stays empty for 100 ms.
    """
    ids = [s.sensor_id for s in sources if s.sensor_id >= 0]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate sensor_id among sources")
    stop = stop or threading.Event()
    summary = StreamSummary({sid: 0 for sid in ids})

    def deliver(s: Sample) -> None:
        sink(s)
        summary.delivered[s.sensor_id] = summary.delivered.get(s.sensor_id, 0) + 1

    if not realtime:
        for s in merge_logical(sources):
            if stop.is_set():
                break
            deliver(s)
    else:
        _run_threaded(sources, deliver, stop, clock, idle)
    summary.rejected = sum(src.rejected for src in sources)
    return summary


_DONE = object()


def _run_threaded(sources, deliver, stop, clock, idle) -> None:
    q: queue.Queue = queue.Queue(maxsize=4096)

    def pump(src: Source) -> None:
        t0_wall = clock()
        t0_us = None
        try:
            for s in src:
                if stop.is_set():
                    break
                if isinstance(src, SimulatedSource):
                    if t0_us is None:
                        t0_us = s.timestamp_us
                    delay = (s.timestamp_us - t0_us) / 1e6 - (clock() - t0_wall)
                    if delay > 0 and stop.wait(delay):
                        break
                q.put(s)
        except Exception:
            log.exception("source %s failed", src.sensor_id)
        finally:
            q.put(_DONE)

    threads = [threading.Thread(target=pump, args=(s,), daemon=True) for s in sources]
    for t in threads:
        t.start()
    remaining = len(threads)
    while remaining:
        try:
            item = q.get(timeout=0.1)
        except queue.Empty:
            if idle is not None:
                idle()
            # a source blocked on a live stream must not hold up shutdown
            if stop.is_set():
                break
            continue
        if item is _DONE:
            remaining -= 1
        else:
            deliver(item)


def read_samples(path: str | Path, sensor_id: int | None = None) -> list[Sample]:
    """Read every valid sample from a line-protocol file."""
    with open(path, encoding="ascii") as fh:
        return list(LineSource(fh, None if sensor_id is None else [sensor_id], ignore_other_ids=True))


def write_samples(path: str | Path, samples: Iterable[Sample]) -> None:
    buf = io.StringIO()
    for s in samples:
        buf.write(format_line(s) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="ascii")
