"""Command-line interface.

Exit codes: 0 intact/success, 1 unconfirmed, 2 incomplete, 3 tampered,
64 usage or precondition error, 65 data error. Logs go to stderr, data to
stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from tpsc import __version__
from tpsc.errors import ConfigError, DatasetError, ManifestError, TpscError

log = logging.getLogger("tpsc")

EX_USAGE = 64
EX_DATAERR = 65


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def _stop_on_signals(stop: threading.Event):
    """Set ``stop`` on SIGINT/SIGTERM while inside the block."""
    if threading.current_thread() is not threading.main_thread():
        yield
        return

    def handler(signum, frame):
        log.info("signal %d: shutting down", signum)
        stop.set()

    old = {sig: signal.signal(sig, handler) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        yield
    finally:
        for sig, h in old.items():
            signal.signal(sig, h)


def _config(args):
    from tpsc.config import load_config
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def _credential(required: bool):
    from tpsc.stamper import API_KEY_ENV, CreatorCredential
    cred = CreatorCredential.from_env()
    if cred is None and required:
        raise UsageError(f"stamping needs a creator API key in ${API_KEY_ENV} (or pass --no-stamp)")
    return cred


def _emit_rows(rows: list[dict], fmt: str, out=None) -> str:
    out = out or sys.stdout
    if fmt == "json":
        text = json.dumps(rows, sort_keys=True, indent=2) + "\n"
    else:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        text = buf.getvalue()
    out.write(text)
    return text


def _write_table(rows: list[dict], out_dir: Path, stem: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}.csv"
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return path


# -- commands ----------------------------------------------------------------------


def cmd_record(args) -> int:
    from tpsc.dataset import record

    cfg = _config(args)
    stamp = not args.no_stamp and cfg.stamper.get("enabled", True)
    cred = _credential(required=stamp)
    stop = threading.Event()
    with _stop_on_signals(stop):
        summary = record(args.dataset, cfg, duration_s=args.duration, stamp=stamp,
                         credential=cred, stop=stop)
    log.info("recorded %d samples, sealed %d chunk(s), %d total; %d rejected",
             summary.samples, summary.chunks_sealed, summary.total_chunks, summary.rejected)
    if summary.unsubmitted:
        log.warning("%d hash(es) not yet accepted by the timestamping service", len(summary.unsubmitted))
    print(json.dumps(summary.__dict__, sort_keys=True))
    return 0


def _load_for_verify(path: Path):
    from tpsc.bundle import read_bundle
    from tpsc.dataset import DatasetDir

    if path.is_file():
        view = read_bundle(path, strict=False)
        return view.manifest, view.store, view.proofs
    ds = DatasetDir(path)
    if not ds.has_manifest():
        raise UsageError(f"{path}: no manifest.json (not a dataset directory)")
    return ds.manifest(), ds.store, ds.proofs()


def cmd_verify(args) -> int:
    from tpsc.verify import refresh_proofs, verify_dataset

    manifest, store, proofs = _load_for_verify(Path(args.dataset))
    offline = args.online is None
    if not offline:
        from tpsc.stamper import HttpStampClient
        proofs = refresh_proofs(proofs, HttpStampClient(args.online))
    report = verify_dataset(manifest, store, proofs, offline=offline)
    if args.format == "json":
        print(report.to_json())
    else:
        print(report.to_text())
    return report.exit_code


def cmd_export(args) -> int:
    from tpsc.bundle import export_bundle
    from tpsc.dataset import DatasetDir

    ds = DatasetDir(args.dataset)
    if not ds.has_manifest():
        raise UsageError(f"{args.dataset}: no manifest.json")
    if not ds.manifest().finalized:
        raise UsageError("dataset is not finalized; run `tpsc finalize` first")
    digest = export_bundle(args.dataset, args.out)
    print(f"{digest}  {args.out}")
    return 0


def cmd_finalize(args) -> int:
    from tpsc.dataset import finalize

    cfg = _config(args)
    stamp = not args.no_stamp and cfg.stamper.get("enabled", True)
    cred = _credential(required=stamp)
    changed, m = finalize(args.dataset, cfg, stamp=stamp, credential=cred, wait_s=args.wait)
    if not changed:
        log.warning("dataset is already finalized; nothing to do")
    print(json.dumps({"dataset_id": m.dataset_id, "manifest_hash": m.manifest_hash,
                      "chunks": len(m.chunks), "changed": changed}, sort_keys=True))
    return 0


def cmd_stamp(args) -> int:
    from tpsc.dataset import stamp_pending

    cfg = _config(args)
    counts = stamp_pending(args.dataset, cfg, _credential(required=True), wait_s=args.wait)
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    from tpsc.core import parse_chunk
    from tpsc.dataset import DatasetDir

    path = Path(args.path)
    if path.is_dir():
        ds = DatasetDir(path)
        m = ds.manifest()
        if args.sequence is None:
            print(json.dumps(m.to_dict(), sort_keys=True, indent=2))
            return 0
        if not 0 <= args.sequence < len(m.chunks):
            raise UsageError(f"no chunk {args.sequence}; dataset has {len(m.chunks)}")
        data = ds.store.get(m.chunks[args.sequence].hash)
    else:
        data = path.read_bytes()
    c = parse_chunk(data)
    h = c.header
    info = {
        "magic": h.magic.decode("ascii"),
        "version": h.version,
        "dataset_id": h.dataset_id.hex(),
        "sequence": h.sequence,
        "prev_hash": h.prev_hash.hex(),
        "first_ts_us": h.first_ts_us,
        "last_ts_us": h.last_ts_us,
        "record_count": h.record_count,
        "hash": hashlib.sha256(data).hexdigest(),
        "bytes": len(data),
    }
    for k, v in info.items():
        print(f"{k:<13} {v}")
    if args.records:
        from tpsc.ingest import format_line
        for s in c.records:
            print(format_line(s))
    return 0


def cmd_simulate(args) -> int:
    from tpsc.trustcheck import simulate_network, sweep

    base = dict(n_sources=args.n, corrupt_fraction=args.fraction, noise_sd=args.noise,
                corrupt_bias=args.bias, n_points=args.points)
    seeds = list(range(args.seed, args.seed + args.seeds))
    if args.sweep:
        param = {"fraction": "corrupt_fraction", "bias": "corrupt_bias"}[args.sweep]
        values = ([round(0.05 * i, 2) for i in range(0, 20)] if param == "corrupt_fraction"
                  else [0.1, 0.3, 1, 3, 10, 30, 100, 300, 1000])
        rows = sweep(param, values, base, seeds)
    else:
        param = None
        rows = []
        for s in seeds:
            r = simulate_network(seed=s, **base).to_dict()
            rows.append({"seed": s, **r})
    _emit_rows(rows, args.format)
    if args.out_dir:
        out = Path(args.out_dir)
        table = _write_table(rows, out, "simulation")
        log.info("wrote %s", table)
        if param:
            from tpsc.plotting import plot_sweep
            log.info("wrote %s", plot_sweep(rows, param, out / "simulation.png"))
    return 0


def cmd_mock_stamper(args) -> int:
    from tpsc.stamper import MockStampService

    svc = MockStampService(args.port, args.confirm_delay, host=args.host, ledger_path=args.ledger,
                           api_keys=set(args.api_key) if args.api_key else None)
    svc.start()
    print(f"mock timestamping service on {svc.url} (confirm delay {args.confirm_delay}s)", flush=True)
    stop = threading.Event()
    try:
        with _stop_on_signals(stop):
            stop.wait(args.run_for) if args.run_for else stop.wait()
    finally:
        svc.stop()
    return 0


def _series_by_sensor(dataset: Path) -> tuple[dict, list]:
    from tpsc.dataset import DatasetDir, iter_dataset_samples

    m = DatasetDir(dataset).manifest()
    by: dict[int, list] = {d.sensor_id: [] for d in m.sensors}
    for s in iter_dataset_samples(dataset):
        by.setdefault(s.sensor_id, []).append(s)
    for v in by.values():
        v.sort(key=lambda s: s.timestamp_us)
    return by, m.sensors


def cmd_check(args) -> int:
    from tpsc.trustcheck import check_series

    rules = _config(args).check_rules()
    by, sensors = _series_by_sensor(Path(args.dataset))
    reports = {d.sensor_id: check_series(by.get(d.sensor_id, []), d, rules) for d in sensors}
    if args.format == "json":
        print(json.dumps([r.to_dict() for r in reports.values()], sort_keys=True, indent=2))
    rows = [{
        "sensor_id": r.series_id,
        "n_samples": r.n_samples,
        "sampling_gaps": r.sampling_gaps,
        "worst_gap_us": r.worst_gap_us,
        "range_violations": r.range_violations,
        "rate_of_change_violations": r.rate_of_change_violations,
        "metadata_complete": r.metadata_complete,
    } for r in reports.values()]
    if args.format == "csv":
        _emit_rows(rows, "csv")
    if args.out_dir:
        from tpsc.plotting import plot_series_checks
        out = Path(args.out_dir)
        _write_table(rows, out, "quality")
        plot_series_checks({k: by.get(k, []) for k in reports}, reports, out / "quality.png")
    return 0 if all(r.ok for r in reports.values()) else 1


def cmd_aggregate(args) -> int:
    from tpsc.ingest import read_samples
    from tpsc.trustcheck import aggregate_sources

    series = {}
    for p in map(Path, args.inputs):
        if p.is_dir():
            by, _ = _series_by_sensor(p)
            if args.sensor is None:
                raise UsageError("--sensor is required when aggregating dataset directories")
            series[p.name] = by.get(args.sensor, [])
        else:
            samples = read_samples(p, args.sensor)
            samples.sort(key=lambda s: s.timestamp_us)
            series[p.stem] = samples
    result = aggregate_sources(series, int(args.grid_s * 1_000_000))
    rows = result.to_rows()
    _emit_rows(rows, args.format)
    if args.out_dir:
        from tpsc.plotting import plot_aggregate
        out = Path(args.out_dir)
        _write_table(rows, out, "aggregate")
        plot_aggregate(result, series, out / "aggregate.png")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tpsc", description="Tamper-evident sensor data: record, stamp, verify, export.")
    p.add_argument("--version", action="version", version=f"tpsc {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=False):
        sp.add_argument("--config", "-c", required=required, help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. chunker.chunk_interval_s=60")

    sp = sub.add_parser("record", help="record sensor data into a dataset directory")
    sp.add_argument("config", help="JSON config file")
    sp.add_argument("dataset", help="dataset directory")
    sp.add_argument("--duration", type=float, help="stop after this many seconds")
    sp.add_argument("--no-stamp", action="store_true", help="store chunks without timestamping")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_record)

    sp = sub.add_parser("verify", help="audit a dataset directory or bundle")
    sp.add_argument("dataset", help="dataset directory or bundle .tar")
    sp.add_argument("--format", choices=("text", "json"), default="text")
    sp.add_argument("--online", metavar="URL", help="re-query pending proofs at this service")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("finalize", help="freeze the manifest and timestamp its hash")
    sp.add_argument("dataset")
    with_config(sp)
    sp.add_argument("--no-stamp", action="store_true")
    sp.add_argument("--wait", type=float, default=0.0, metavar="SECONDS",
                    help="wait up to this long for every proof to confirm")
    sp.set_defaults(func=cmd_finalize)

    sp = sub.add_parser("stamp", help="submit and poll any outstanding proofs")
    sp.add_argument("dataset")
    with_config(sp)
    sp.add_argument("--wait", type=float, default=0.0, metavar="SECONDS")
    sp.set_defaults(func=cmd_stamp)

    sp = sub.add_parser("export", help="write a deposit bundle of a finalized dataset")
    sp.add_argument("dataset")
    sp.add_argument("out", help="output .tar path")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("inspect", help="show a chunk header (file, or dataset + --sequence)")
    sp.add_argument("path")
    sp.add_argument("--sequence", type=int)
    sp.add_argument("--records", action="store_true", help="also print records as line protocol")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("simulate", help="median vs mean under corrupt sources")
    sp.add_argument("--n", type=int, default=101)
    sp.add_argument("--fraction", type=float, default=0.2)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--bias", type=float, default=10.0)
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    sp.add_argument("--sweep", choices=("fraction", "bias"))
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out-dir", help="write simulation.csv (and simulation.png for sweeps)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("mock-stamper", help="run the mock timestamping service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8788)
    sp.add_argument("--confirm-delay", type=float, default=2.0)
    sp.add_argument("--ledger", help="persist the ledger here")
    sp.add_argument("--api-key", action="append", help="accept only these keys")
    sp.add_argument("--run-for", type=float, help="exit after this many seconds")
    sp.set_defaults(func=cmd_mock_stamper)

    sp = sub.add_parser("check", help="per-sensor quality checks on a dataset")
    sp.add_argument("dataset")
    with_config(sp)
    sp.add_argument("--format", choices=("csv", "json"), default="json")
    sp.add_argument("--out-dir", help="write quality.csv and quality.png")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("aggregate", help="robust cross-source aggregation")
    sp.add_argument("inputs", nargs="+", help="line-protocol files or dataset directories")
    sp.add_argument("--grid-s", type=float, required=True, help="grid interval in seconds")
    sp.add_argument("--sensor", type=int, help="sensor id to take from each input")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--out-dir", help="write aggregate.csv and aggregate.png")
    sp.set_defaults(func=cmd_aggregate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, ManifestError) as e:
        print(f"tpsc {args.command}: {e}", file=sys.stderr)
        return EX_USAGE
    except TpscError as e:
        print(f"tpsc {args.command}: {e}", file=sys.stderr)
        return EX_DATAERR


if __name__ == "__main__":
    sys.exit(main())
