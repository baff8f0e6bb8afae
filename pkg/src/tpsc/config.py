"""Config file loading and validation.

The config is JSON with sections ``dataset``, ``sensors``, ``chunker``,
``stamper``, ``store``, ``checks`` and ``ingest``. Secrets never live here;
the API key comes from ``TPSC_API_KEY``. Validation reports every problem at
once rather than stopping at the first.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from tpsc.chunker import CHUNK_SIZE_THRESHOLD, FlushPolicy
from tpsc.core import SensorDescriptor, SensorKind
from tpsc.errors import ConfigError
from tpsc.ingest import DEFAULT_INTERVALS_US, MODES, SimParams, SourceConfig
from tpsc.trustcheck import CheckRules

DEFAULTS: dict = {
    "dataset": {"id": None, "description": "", "location": ""},
    "sensors": [],
    "chunker": {
        "chunk_interval_s": 300,
        "size_threshold": CHUNK_SIZE_THRESHOLD,
        "clock": "wall",
        "start_us": None,
    },
    "stamper": {
        "enabled": True,
        "url": "http://127.0.0.1:8788",
        "backend": "protocol",
        "timeout_s": 5.0,
        "retry_base_s": 1.0,
        "retry_cap_s": 300.0,
        "poll_interval_s": 1.0,
        "drain_timeout_s": 30.0,
    },
    "store": {"remote_gateway": None},
    "checks": {"gap_factor": 3},
    "ingest": {"line_source": "-"},
}

_SECRET_KEYS = {"api_key", "apikey", "secret", "token", "password"}


@dataclass
class Config:
    raw: dict
    sources: list[SourceConfig]
    policy: FlushPolicy

    @property
    def descriptors(self) -> list[SensorDescriptor]:
        return [s.descriptor for s in self.sources]

    @property
    def stamper(self) -> dict:
        return self.raw["stamper"]

    @property
    def chunker(self) -> dict:
        return self.raw["chunker"]

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def store(self) -> dict:
        return self.raw["store"]

    @property
    def logical_clock(self) -> bool:
        return self.raw["chunker"]["clock"] == "logical"

    def check_rules(self) -> CheckRules:
        return CheckRules.from_config(self.raw.get("checks") or {})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``a.b.0.c=value``; value is parsed as JSON when it can be."""
    if "=" not in assignment:
        raise ConfigError([f"--set expects key=value, got {assignment!r}"])
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.strip().split(".")
    for i, p in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(p)
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            except (ValueError, IndexError):
                raise ConfigError([f"--set {key}: bad list index {p!r}"]) from None
        else:
            if last:
                node[p] = value
            else:
                node = node.setdefault(p, {})


def _find_secrets(obj, path="") -> list[str]:
    hits = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            if str(k).lower() in _SECRET_KEYS:
                hits.append(f"{path}{k}")
            hits.extend(_find_secrets(v, f"{path}{k}."))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            hits.extend(_find_secrets(v, f"{path}{i}."))
    return hits


def build_config(raw_in: dict, overrides: list[str] | None = None, base_dir: Path | None = None) -> Config:
    raw = _merge(DEFAULTS, raw_in or {})
    for o in overrides or []:
        apply_override(raw, o)
    problems: list[str] = []

    for s in _find_secrets(raw):
        problems.append(f"{s}: secrets are not allowed in config files; use TPSC_API_KEY")

    sources: list[SourceConfig] = []
    seen: set[int] = set()
    if not isinstance(raw["sensors"], list):
        problems.append("sensors: must be a list")
        raw["sensors"] = []
    for i, s in enumerate(raw["sensors"]):
        where = f"sensors[{i}]"
        try:
            kind = SensorKind(s.get("kind", "other"))
        except ValueError:
            problems.append(f"{where}.kind: unknown kind {s.get('kind')!r}")
            continue
        sid = s.get("sensor_id")
        if not isinstance(sid, int) or not 0 <= sid <= 0xFFFF:
            problems.append(f"{where}.sensor_id: integer 0..65535 required")
            continue
        if sid in seen:
            problems.append(f"{where}.sensor_id: duplicate id {sid}")
        seen.add(sid)
        interval = s.get("nominal_interval_us", DEFAULT_INTERVALS_US[kind])
        if not isinstance(interval, int) or interval <= 0:
            problems.append(f"{where}.nominal_interval_us: positive integer required")
            continue
        mode = s.get("mode", "simulated")
        if mode not in MODES:
            problems.append(f"{where}.mode: one of {', '.join(MODES)}")
            continue
        path = s.get("path")
        if mode == "replay":
            if not path:
                problems.append(f"{where}.path: required for replay sources")
                continue
            if base_dir is not None and not Path(path).is_absolute():
                path = str(base_dir / path)
        sim = s.get("sim") or {}
        try:
            params = SimParams(
                baseline=float(sim.get("baseline", 0.0)),
                amplitude=float(sim.get("amplitude", 0.0)),
                noise_sd=float(sim.get("noise_sd", 0.0)),
                period_s=float(sim.get("period_s", 60.0)),
                seed=int(sim.get("seed", sid)),
            )
        except (TypeError, ValueError) as e:
            problems.append(f"{where}.sim: {e}")
            continue
        desc = SensorDescriptor(sid, kind, str(s.get("unit", "")), str(s.get("model", "")), interval)
        sources.append(SourceConfig(desc, mode, params, path))

    ch = raw["chunker"]
    interval_s = ch.get("chunk_interval_s")
    if interval_s is not None and (not isinstance(interval_s, (int, float)) or interval_s <= 0):
        problems.append("chunker.chunk_interval_s: positive number or null")
        interval_s = None
    threshold = ch.get("size_threshold")
    if not isinstance(threshold, int) or threshold <= 0:
        problems.append("chunker.size_threshold: positive integer required")
        threshold = CHUNK_SIZE_THRESHOLD
    if ch.get("clock") not in ("wall", "logical"):
        problems.append("chunker.clock: 'wall' or 'logical'")
    if ch.get("start_us") is not None and not isinstance(ch["start_us"], int):
        problems.append("chunker.start_us: integer microseconds or null")

    st = raw["stamper"]
    if st.get("backend") not in ("protocol", "originstamp"):
        problems.append("stamper.backend: 'protocol' or 'originstamp'")
    if st.get("enabled") and not st.get("url"):
        problems.append("stamper.url: required when stamping is enabled")
    for k in ("timeout_s", "retry_base_s", "retry_cap_s", "poll_interval_s", "drain_timeout_s"):
        if not isinstance(st.get(k), (int, float)) or st[k] < 0:
            problems.append(f"stamper.{k}: non-negative number required")

    did = raw["dataset"].get("id")
    if did is not None:
        try:
            ok = len(bytes.fromhex(did)) == 16 and did == did.lower()
        except (ValueError, TypeError):
            ok = False
        if not ok:
            problems.append("dataset.id: 32 lowercase hex characters or null")

    try:
        CheckRules.from_config(raw.get("checks") or {})
    except (ValueError, TypeError) as e:
        problems.append(f"checks: {e}")

    if problems:
        raise ConfigError(problems)
    policy = FlushPolicy(threshold, None if interval_s is None else int(round(interval_s * 1_000_000)))
    return Config(raw, sources, policy)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> Config:
    if path is None:
        return build_config({}, overrides)
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"{p}: no such config file"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{p}: invalid JSON: {e}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{p}: top level must be an object"])
    return build_config(raw, overrides, base_dir=p.parent)
