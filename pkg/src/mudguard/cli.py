"""Command-line entry point: ``mudguard <subcommand> ...``."""

from __future__ import annotations

import argparse
import ipaddress
import json
import logging
import sys
from pathlib import Path

from . import learner, replay, synth
from .compiler import DEFAULT_WINDOW, compile_policy, load_device_context
from .datapath.bench import bench, loopback_latency, render_table
from .datapath.limiters import DEFAULT_BURST
from .errors import MudGuardError
from .manager import FixtureServer, MudManager, read_events_source, watch_events
from .model import parse_mud_file, serialize_mud_file

EXIT_IO = 12
EXIT_INPUT = 13

log = logging.getLogger("mudguard")


def _read_mud(path):
    return parse_mud_file(Path(path).read_bytes())


def cmd_parse(args) -> int:
    mud = _read_mud(args.file)
    print(f"{mud.mud_url} (version {mud.mud_version}, updated {mud.last_update})")
    for direction in ("from-device", "to-device"):
        names = ", ".join(a.name for a in mud.policy_acls(direction)) or "-"
        print(f"  {direction} policy: {names}")
    for acl in mud.acls:
        print(f"  acl {acl.name} ({acl.address_family}, {len(acl.aces)} aces)")
        for ace in acl.aces:
            a, m = ace.actions, ace.matches
            target = m.dns_name or m.dst_address or m.src_address or "any"
            rates = []
            if a.packet_rate is not None:
                rates.append(f"packet-rate {a.packet_rate}")
            if a.byte_rate is not None:
                rates.append(f"byte-rate {a.byte_rate.render(byte_units=True)}")
            port = f" port {m.port}" if m.port is not None else ""
            print(f"    {ace.name}: {a.forwarding} {m.protocol or 'any'} {target}{port}"
                  + (f" [{', '.join(rates)}]" if rates else ""))
    if args.pretty:
        print(serialize_mud_file(mud))
    return 0


def cmd_compile(args) -> int:
    policy = compile_policy(_read_mud(args.file), load_device_context(args.device_ctx), args.window)
    for w in policy.warnings:
        log.warning(w)
    out = {
        "device_id": policy.device_id,
        "policies": policy.policy_count,
        "rules": [r.to_json() for r in policy.rules],
        "default_drops": [{"device_address": str(d.device_address), "direction": d.direction}
                          for d in policy.default_drops],
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_learn(args) -> int:
    categories = learner.load_category_map(args.categories)
    if args.trace.endswith(".csv"):
        records = learner.read_trace_csv(args.trace)
    else:
        devices = [d for d in categories if _is_address(d)]
        records = replay.records_from_packets(replay.load_trace(args.trace, "pcap"), devices)
    windows = learner.windowize(records, args.window, direction=args.direction)
    stats = learner.aggregate(windows, categories, args.window)
    learner.write_table(stats, sys.stdout)
    if args.policy:
        if args.granularity:
            gran = learner.load_granularity(args.granularity, args.granularity_name)
        elif args.round_pkts and args.round_bytes:
            gran = learner.Granularity(args.round_pkts, args.round_bytes)
        else:
            raise SystemExit("learn: --policy needs --round-pkts and --round-bytes or --granularity")
        for name in sorted(stats):
            limits = learner.suggest_limits(stats[name], args.policy, gran, args.protocol)
            print(json.dumps({"category": name, "policy": args.policy, **limits.actions()}))
    return 0


def _is_address(text: str) -> bool:
    try:
        ipaddress.ip_address(text)
    except ValueError:
        return False
    return True


def cmd_replay(args) -> int:
    packets = replay.load_trace(args.trace, args.format)
    if args.remap:
        packets = list(replay.rewrite(packets, replay.AddressRemap.load(args.remap)))
    policy = compile_policy(_read_mud(args.mud), load_device_context(args.device_ctx), args.window)
    report = replay.replay(packets, policy.rules, args.mode, args.direction, args.window,
                           args.burst, args.workers)
    if args.report:
        replay.emit_report(report, args.report)
    t = report.totals()
    print(json.dumps({**t, "packet_drop_rate": round(report.packet_drop_rate, 6),
                      "byte_drop_rate": round(report.byte_drop_rate, 6),
                      "drop_reasons": report.drop_reason_histogram,
                      "windows": len(report.per_window_series)}, indent=2))
    return 0


def cmd_bench(args) -> int:
    results = bench(args.rules, args.packets, args.installed)
    print(render_table(results))
    if args.latency:
        lat = loopback_latency(args.latency, installed=args.rules)
        print(f"\nloopback echo median: {lat['baseline_median_ns'] / 1000:.2f} us without firewall, "
              f"{lat['firewall_median_ns'] / 1000:.2f} us with ({lat['relative_change'] * 100:+.2f}%)")
    return 0


def cmd_serve(args) -> int:
    server = FixtureServer(args.dir, args.port, args.host)
    print(f"serving {args.dir} at {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_manage(args) -> int:
    dns = json.loads(Path(args.dns).read_text()) if args.dns else {}
    mgr = MudManager(dns=dns, window=args.window, base_dir=args.base_dir, timeout=args.timeout)
    worst = 0

    def report(outcome):
        nonlocal worst
        print(json.dumps(outcome.to_json()), flush=True)
        worst = worst or outcome.exit_code

    if args.poll:
        try:
            watch_events(args.events, mgr, args.poll, report, max_polls=args.max_polls)
        except KeyboardInterrupt:
            pass
    else:
        for e in read_events_source(args.events):
            report(mgr.on_device_event(e))
    return worst


def cmd_synth(args) -> int:
    if args.kind == "flood":
        records = synth.syn_flood(args.src, args.dst, args.rate, args.duration, args.port, seed=args.seed)
    elif args.kind == "cbr":
        records = synth.cbr(args.src, args.dst, args.rate, args.duration, dst_port=args.port)
    else:
        records = synth.appliance_trace(args.src, args.dst, args.minutes, args.seed, dst_port=args.port)
    learner.write_trace_csv(records, args.output)
    print(f"wrote {len(records)} records to {args.output}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mudguard", description="Rate-limited MUD policy toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="validate a MUD file and summarize it")
    s.add_argument("file")
    s.add_argument("--pretty", action="store_true", help="also print the normalized document")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("compile", help="compile a MUD file into flow rules (JSON)")
    s.add_argument("file")
    s.add_argument("--device-ctx", required=True, help="device context (JSON or CSV)")
    s.add_argument("--window", type=float, default=DEFAULT_WINDOW, help="limiter window in seconds")
    s.set_defaults(func=cmd_compile)

    s = sub.add_parser("learn", help="windowed traffic statistics and suggested limits")
    s.add_argument("trace", help="CSV trace, or pcap whose device ids are addresses")
    s.add_argument("--window", type=float, default=60)
    s.add_argument("--categories", required=True, help="JSON map of device_id to category")
    s.add_argument("--direction", choices=learner.DIRECTIONS, default="outgoing")
    s.add_argument("--policy", choices=learner.POLICIES)
    s.add_argument("--protocol", choices=("tcp", "udp"), default="tcp")
    s.add_argument("--round-pkts", type=int)
    s.add_argument("--round-bytes", type=int)
    s.add_argument("--granularity", help="granularity JSON file")
    s.add_argument("--granularity-name", help="entry to use from a multi-entry granularity file")
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("replay", help="replay a trace through the datapath")
    s.add_argument("trace")
    s.add_argument("--format", choices=("pcap", "csv"))
    s.add_argument("--mud", required=True)
    s.add_argument("--device-ctx", required=True)
    s.add_argument("--mode", choices=("window", "bucket"), default="window")
    s.add_argument("--direction", choices=("from-device", "to-device", "auto"), default="auto")
    s.add_argument("--window", type=float, default=DEFAULT_WINDOW)
    s.add_argument("--burst", type=int, default=DEFAULT_BURST)
    s.add_argument("--remap", help="address remap JSON")
    s.add_argument("--report", help="write the report here (.json or .csv)")
    s.add_argument("--workers", type=int, default=1, help="shard by device across processes")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("bench", help="rule churn and per-packet timings")
    s.add_argument("--rules", type=int, default=255)
    s.add_argument("--packets", type=int, default=10000)
    s.add_argument("--installed", type=int, default=1, help="rules present during the datapath run")
    s.add_argument("--latency", type=int, metavar="ROUNDS", default=0,
                   help="also run the loopback echo comparison with this many samples per side")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve-fixtures", help="serve a directory of MUD files over HTTP")
    s.add_argument("dir")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("manage", help="process device join/leave events")
    s.add_argument("--events", required=True, help="events JSON file, or - for stdin")
    s.add_argument("--dns", help="JSON map of host name to addresses")
    s.add_argument("--window", type=float, default=DEFAULT_WINDOW)
    s.add_argument("--base-dir", help="directory relative file:// URLs resolve against")
    s.add_argument("--timeout", type=float, default=10.0)
    s.add_argument("--poll", type=float, help="watch the events file, re-reading every N seconds")
    s.add_argument("--max-polls", type=int, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_manage)

    s = sub.add_parser("synth", help="write a synthetic CSV trace")
    s.add_argument("kind", choices=("flood", "cbr", "appliance"))
    s.add_argument("output")
    s.add_argument("--src", default="192.168.1.20")
    s.add_argument("--dst", default="203.0.113.10")
    s.add_argument("--port", type=int, default=443)
    s.add_argument("--rate", type=float, default=100.0, help="packets per second (flood, cbr)")
    s.add_argument("--duration", type=float, default=600.0, help="seconds (flood, cbr)")
    s.add_argument("--minutes", type=int, default=1440, help="trace length (appliance)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MudGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
