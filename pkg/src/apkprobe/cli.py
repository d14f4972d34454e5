"""Command-line pipeline driver.

Subcommands: transform, scan, snapshot, analyze, mock-serve, report.
A JSON config file can pre-set any flag; explicit flags win. Exit codes:
0 success, 1 partial or total pipeline failure, 2 usage errors.

transforms.jsonl is the single provenance log joining archives to
analytics; every variant written to disk has exactly one record there.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import analytics
from .archive import compute_digests, open_archive
from .errors import ApkProbeError
from .gateway import ScanClient, SnapshotStore, scan_and_snapshot
from .modularizer import build_connection_graph, cluster_classes
from .reports import Snapshot, filter_engines
from .synth import identity_for, pack_key_for
from .transforms import (
    TRIGGERS,
    TransformKind,
    TransformRecord,
    apply_fuse,
    apply_pack,
    apply_prune,
    apply_sign_transform,
    build_dynload_proxy,
    build_module_variants,
)

_SIGN_KINDS = {TransformKind.S1, TransformKind.S2, TransformKind.S3}
_PRUNE_KINDS = {TransformKind.P1, TransformKind.P2, TransformKind.P3}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config_defaults(parser, args)
    try:
        return args.func(args)
    except ApkProbeError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apkprobe",
        description="Transform APK corpora, drive scans, analyze verdict deltas.")
    parser.add_argument("--config", help="JSON file pre-setting any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="generate traceable variants")
    p.add_argument("--kinds", required=True,
                   help="comma list: S1,S2,S3,P1,P2,P3,PACK,FUSE,MODVAR,DYN")
    p.add_argument("--in", dest="indir", help="corpus directory of .apk files")
    p.add_argument("--out", dest="outdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--fuse-payload", help="payload APK for FUSE")
    p.add_argument("--triggers", default="",
                   help="comma list of H1..H11 for DYN proxies")
    p.add_argument("--tracking-base", default="http://tracker.local",
                   help="tracking server base URL for DYN proxies")
    p.add_argument("--excluded-prefixes",
                   default="android.,androidx.,java.,kotlin.",
                   help="class prefixes ignored by MODVAR clustering")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("scan", help="submit files and store first snapshots")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--kind", default="first", choices=("first", "reanalysis"))
    p.add_argument("--api-key")
    p.add_argument("--rate", type=float, default=240.0,
                   help="client requests per minute")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("snapshot", help="reanalyze or track stored hashes")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--kind", default="reanalysis",
                   choices=("reanalysis", "tracked"))
    p.add_argument("--day", type=int, help="day number for tracked snapshots")
    p.add_argument("--api-key")
    p.add_argument("--rate", type=float, default=240.0)
    p.add_argument("--every", type=float,
                   help="seconds between polling rounds")
    p.add_argument("--rounds", type=int, default=1)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("analyze", help="emit CSV analytics")
    p.add_argument("what", choices=("flips", "rates", "histogram", "modules",
                                    "entities"))
    p.add_argument("--store")
    p.add_argument("--transforms", help="transforms.jsonl path")
    p.add_argument("--transform", help="restrict to one transform kind")
    p.add_argument("--out", dest="outdir", required=True)
    p.add_argument("--allowlist-threshold", type=float, default=0.9)
    p.add_argument("--tracking-log", help="tracking entries JSONL (entities)")
    p.add_argument("--metadata", help="JSON file: address -> metadata (entities)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("mock-serve", help="run the simulated scanning service")
    p.add_argument("--config", "--engines", dest="engines_config",
                   required=True,
                   help="service config JSON (engines, profiles, payloads)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--tracking-log", help="append tracking entries to this JSONL")
    p.set_defaults(func=cmd_mock_serve)

    p = sub.add_parser("report", help="render analysis tables")
    p.add_argument("--in", dest="indir", required=True,
                   help="directory holding analyze output CSVs")
    p.set_defaults(func=cmd_report)

    return parser


_CONFIG_ALIASES = {"in": "indir", "out": "outdir"}


def _apply_config_defaults(parser, args) -> None:
    """Config file values fill flags the command line left at their default."""
    with open(args.config, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    for key, value in config.items():
        attr = key.replace("-", "_")
        attr = _CONFIG_ALIASES.get(attr, attr)
        if hasattr(args, attr) and getattr(args, attr) in (None,
                                                           parser.get_default(attr)):
            setattr(args, attr, value)


# -- transform ----------------------------------------------------------------

def _corpus_files(indir) -> list:
    files = sorted(Path(indir).glob("*.apk"))
    if not files:
        raise ApkProbeError("no .apk files under %s" % indir)
    return files


def _variant_name(input_sha: str, record: TransformRecord) -> str:
    tag = record.kind.replace("-", "")
    suffix = ""
    cluster = record.parameters.get("cluster_id")
    if record.kind == TransformKind.MODVAR.value:
        suffix = "_b" if cluster is None else "_c%d" % cluster
    if record.parameters.get("trigger"):
        suffix = "_" + record.parameters["trigger"]
    return "%s_%s%s.apk" % (input_sha[:12], tag, suffix)


def _transform_one(path: Path, kinds, args):
    data = path.read_bytes()
    apk = open_archive(data)
    sha = compute_digests(data).sha256
    seed = args.seed
    results = []
    for kind in kinds:
        if kind in _SIGN_KINDS:
            identity = None
            if kind != TransformKind.S1:
                tag = "%s-%s" % (kind.value.lower(), sha[:12])
                identity = (None if kind == TransformKind.S2
                            else identity_for(seed, tag))
            results.append(apply_sign_transform(apk, kind, identity))
        elif kind in _PRUNE_KINDS:
            identity = identity_for(seed, "%s-%s" % (kind.value.lower(), sha[:12]))
            results.append(apply_prune(apk, kind, identity))
        elif kind == TransformKind.PACK:
            identity = identity_for(seed, "pack-%s" % sha[:12])
            results.append(apply_pack(apk, pack_key_for(seed, sha), identity))
        elif kind == TransformKind.FUSE:
            payload = open_archive(Path(args.fuse_payload).read_bytes())
            identity = identity_for(seed, "fuse-%s" % sha[:12])
            results.append(apply_fuse(apk, payload, identity))
        elif kind == TransformKind.MODVAR:
            prefixes = tuple(p for p in args.excluded_prefixes.split(",") if p)
            clusters = cluster_classes(build_connection_graph(apk, prefixes))
            factory = lambda tag: identity_for(  # noqa: E731
                seed, "modvar-%s-%s" % (sha[:12], tag))
            results.extend(build_module_variants(apk, clusters, factory))
    return path, results


def cmd_transform(args) -> int:
    kinds = [TransformKind(k.strip()) for k in args.kinds.split(",") if k.strip()]
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    log_path = outdir / "transforms.jsonl"

    records: list[tuple[str, TransformRecord]] = []
    failures = []

    proxy_kinds = [k for k in kinds
                   if k in (TransformKind.DYN, TransformKind.DYN_TRIG)]
    app_kinds = [k for k in kinds if k not in proxy_kinds]

    if app_kinds:
        if not args.indir:
            raise ApkProbeError("--in is required for kinds %s"
                                % ",".join(k.value for k in app_kinds))
        if TransformKind.FUSE in app_kinds and not args.fuse_payload:
            raise ApkProbeError("FUSE needs --fuse-payload")
        files = _corpus_files(args.indir)
        worker = lambda p: _transform_one(p, app_kinds, args)  # noqa: E731
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                outcomes = list(pool.map(_guarded(worker, failures), files))
        else:
            outcomes = [_guarded(worker, failures)(p) for p in files]
        for outcome in outcomes:
            if outcome is None:
                continue
            path, results = outcome
            for variant, record in results:
                name = _variant_name(record.input_sha256, record)
                (outdir / name).write_bytes(variant.to_bytes())
                records.append((name, record))

    for kind in proxy_kinds:
        trigger_ids = [t for t in args.triggers.split(",") if t]
        if kind == TransformKind.DYN and not trigger_ids:
            trigger_ids = [None]
        for trig_id in (trigger_ids or [None]):
            trigger = TRIGGERS[trig_id] if trig_id else None
            token = hashlib.sha256(
                ("%d:%s" % (args.seed, trig_id or "plain")).encode()
            ).hexdigest()[:16]
            base = args.tracking_base.rstrip("/")
            identity = identity_for(args.seed, "dyn-%s" % token)
            variant, record = build_dynload_proxy(
                "%s/d/%s" % (base, token), base, token, trigger, identity)
            name = _variant_name(record.input_sha256, record)
            (outdir / name).write_bytes(variant.to_bytes())
            records.append((name, record))

    records.sort(key=lambda item: (item[1].input_sha256, item[1].kind,
                                   json.dumps(item[1].parameters, sort_keys=True)))
    with log_path.open("w", encoding="utf-8") as fh:
        for name, record in records:
            row = json.loads(record.to_json())
            row["file"] = name
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    print("wrote %d variants to %s" % (len(records), outdir))
    if failures:
        for path, exc in failures:
            print("failed: %s: %s" % (path, exc), file=sys.stderr)
        return 1
    return 0


def _guarded(worker, failures):
    def run(path):
        try:
            return worker(path)
        except Exception as exc:  # noqa: BLE001 - collected for exit status
            failures.append((path, exc))
            return None
    return run


# -- scan / snapshot ------------------------------------------------------------

def _client(args) -> ScanClient:
    return ScanClient(args.endpoint, api_key=args.api_key,
                      rate_per_min=args.rate)


def cmd_scan(args) -> int:
    client = _client(args)
    store = SnapshotStore(args.store)
    failures = 0
    for path in _corpus_files(args.indir):
        outcome = scan_and_snapshot(client, store, path.read_bytes(),
                                    kind=args.kind)
        status = "ok" if outcome.error is None else outcome.error
        print("%s %s %s" % (path.name, outcome.sha256[:12], status))
        failures += outcome.error is not None
    return 1 if failures else 0


def cmd_snapshot(args) -> int:
    client = _client(args)
    store = SnapshotStore(args.store)
    hashes = sorted({s.report.sha256 for s in store.query()})
    if not hashes:
        raise ApkProbeError("snapshot store %s is empty" % args.store)
    failures = 0
    for round_no in range(args.rounds):
        day = args.day if args.day is not None else round_no + 1
        for sha in hashes:
            try:
                if args.kind == "reanalysis" and not client.request_reanalysis(sha):
                    print("%s unknown to service" % sha[:12])
                    failures += 1
                    continue
                report = client.fetch_report(sha)
                if report is None:
                    failures += 1
                    continue
                store.append(Snapshot(
                    report, args.kind,
                    day if args.kind == "tracked" else None))
            except ApkProbeError as exc:
                print("%s: %s" % (sha[:12], exc), file=sys.stderr)
                failures += 1
        if args.every and round_no + 1 < args.rounds:
            time.sleep(args.every)
    return 1 if failures else 0


# -- analyze --------------------------------------------------------------------

def _load_transform_records(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(TransformRecord.from_json(line))
    return records


def _interactions(args, store: SnapshotStore):
    records = _load_transform_records(args.transforms)
    if args.transform:
        records = [r for r in records if r.kind == args.transform]
    lookup = lambda sha: store.latest_report(sha, kind="first")  # noqa: E731
    return analytics.build_interaction_records(records, lookup)


def cmd_analyze(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    if args.what == "entities":
        if not args.tracking_log:
            raise ApkProbeError("entities needs --tracking-log")
        entries = _load_tracking_entries(args.tracking_log)
        table = {}
        if args.metadata:
            with open(args.metadata, "r", encoding="utf-8") as fh:
                table = json.load(fh)
        groups = analytics.group_entities(entries, lambda a: table.get(a))
        (outdir / "entities.csv").write_text(analytics.entities_csv(groups))
        print("entities.csv: %d groups" % len(groups))
        return 0

    if not args.store or not args.transforms:
        raise ApkProbeError("%s needs --store and --transforms" % args.what)
    store = SnapshotStore(args.store)

    if args.what in ("flips", "rates"):
        interactions = _interactions(args, store)
        if args.what == "flips":
            (outdir / "flips.csv").write_text(analytics.flips_csv(interactions))
        combos = sorted({(engine, r.transform_kind)
                         for r in interactions for engine in r.pairs})
        rates = [analytics.compute_flip_rates(
                    [r for r in interactions if r.transform_kind == t], e, t)
                 for e, t in combos]
        (outdir / "rates.csv").write_text(analytics.rates_csv(rates))
        print("%d interaction records over %d engine/transform pairs"
              % (len(interactions), len(combos)))
        return 0

    if args.what == "histogram":
        records = _load_transform_records(args.transforms)
        firsts = store.query(kind="first")
        reports = {s.report.sha256: s.report for s in firsts}
        allowlist = filter_engines([s.report for s in firsts],
                                   args.allowlist_threshold)
        variant_shas = {r.output_sha256: r.kind for r in records}
        original = [r for sha, r in reports.items() if sha not in variant_shas]
        by_tag = {"original": analytics.histogram_by_maliciousness(
            original, allowlist)}
        for kind in sorted({r.kind for r in records}):
            group = [reports[sha] for sha, k in variant_shas.items()
                     if k == kind and sha in reports]
            if group:
                by_tag[kind] = analytics.histogram_by_maliciousness(
                    group, allowlist)
        (outdir / "histogram.csv").write_text(analytics.histogram_csv(by_tag))
        print("histogram.csv over %d corpora" % len(by_tag))
        return 0

    if args.what == "modules":
        records = _load_transform_records(args.transforms)
        firsts = store.query(kind="first")
        reports = {s.report.sha256: s.report for s in firsts}
        allowlist = filter_engines([s.report for s in firsts],
                                   args.allowlist_threshold)
        out_lines = []
        by_original: dict = {}
        for r in records:
            if r.kind == TransformKind.MODVAR.value:
                by_original.setdefault(r.input_sha256, []).append(r)
        for original_sha, group in sorted(by_original.items()):
            baseline = None
            variants = {}
            for r in group:
                report = reports.get(r.output_sha256)
                if report is None:
                    continue
                if r.parameters.get("baseline"):
                    baseline = report
                else:
                    variants[r.parameters["cluster_id"]] = report
            if baseline is None or not variants:
                continue
            original_report = reports.get(original_sha)
            if original_report is None:
                continue
            attribution = analytics.attribute_modules(
                original_report, baseline, variants, allowlist)
            out_lines.append(analytics.modules_csv(original_sha, attribution))
        header_done = False
        merged = []
        for block in out_lines:
            lines = block.splitlines()
            merged.extend(lines if not header_done else lines[1:])
            header_done = True
        (outdir / "modules.csv").write_text("\n".join(merged) + "\n")
        print("modules.csv for %d apps" % len(out_lines))
        return 0

    raise ApkProbeError("unknown analyze target %r" % args.what)


def _load_tracking_entries(path) -> list:
    from .mock.tracking import TrackingEntry
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            entries.append(TrackingEntry(obj.get("token"), obj["path"],
                                         obj.get("user_agent", ""),
                                         obj["source"], obj.get("timestamp", 0.0)))
    return entries


# -- mock service ----------------------------------------------------------------

def cmd_mock_serve(args) -> int:
    from .mock.service import load_service_config, make_http_server

    service = load_service_config(args.engines_config)
    server = make_http_server(service, args.host, args.port)
    print("mock scanner on http://%s:%d (%d engines)"
          % (server.server_address[0], server.server_address[1],
             len(service.engines)))
    try:
        if args.tracking_log:
            _serve_with_tracking_log(server, service, args.tracking_log)
        else:
            server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def _serve_with_tracking_log(server, service, log_path) -> None:
    import threading

    def flusher():
        written = 0
        while True:
            time.sleep(0.5)
            entries = service.tracking_log.entries()
            if len(entries) > written:
                with open(log_path, "a", encoding="utf-8") as fh:
                    for e in entries[written:]:
                        fh.write(json.dumps({
                            "token": e.token, "path": e.path,
                            "user_agent": e.user_agent, "source": e.source,
                            "timestamp": e.timestamp}) + "\n")
                written = len(entries)

    threading.Thread(target=flusher, daemon=True).start()
    server.serve_forever()


# -- report ----------------------------------------------------------------------

def cmd_report(args) -> int:
    indir = Path(args.indir)
    shown = 0
    for name in ("histogram.csv", "rates.csv", "modules.csv", "entities.csv",
                 "flips.csv"):
        path = indir / name
        if not path.exists():
            continue
        shown += 1
        print("== %s ==" % name)
        rows = [line.split(",") for line in
                path.read_text().strip().splitlines()]
        widths = [max(len(r[i]) for r in rows if i < len(r))
                  for i in range(max(len(r) for r in rows))]
        for row in rows:
            print("  ".join(cell.ljust(widths[i])
                            for i, cell in enumerate(row)))
        print()
    if not shown:
        raise ApkProbeError("no analysis CSVs under %s" % indir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
