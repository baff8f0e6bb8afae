"""Small persistence helpers: atomic writes, keyed JSON-lines logs, backoff."""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def backoff_delay(failures: int, base: float = 1.0, cap: float = 300.0) -> float:
    """Delay before the next attempt after ``failures`` consecutive failures."""
    if failures <= 0:
        return 0.0
    return min(cap, base * 2 ** min(failures - 1, 64))


class KeyedJsonl:
    """Append-only JSON-lines file where the last line per key wins.

    A torn final line (crash mid-write) is ignored on load.
    """

    def __init__(self, path: str | Path, key: str):
        self.path = Path(path)
        self.key = key
        self._lock = threading.Lock()
        self.items: dict[str, dict] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        raw = self.path.read_text(encoding="utf-8")
        lines = raw.split("\n")
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    log.warning("%s: ignoring torn final line", self.path)
                    continue
                raise
            self.items[obj[self.key]] = obj

    def put(self, obj: dict) -> None:
        with self._lock:
            self.items[obj[self.key]] = obj
            line = canonical_json(obj) + "\n"
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def snapshot_bytes(self) -> bytes:
        """One line per key, sorted by key; deterministic."""
        with self._lock:
            items = sorted(self.items.items())
        return "".join(canonical_json(v) + "\n" for _, v in items).encode("utf-8")

    def compact(self) -> None:
        atomic_write(self.path, self.snapshot_bytes())

    def values(self) -> Iterable[dict]:
        with self._lock:
            return list(self.items.values())
