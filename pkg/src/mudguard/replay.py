"""Trace ingestion, address rewriting and virtual-time replay through a Datapath."""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
import multiprocessing
import struct
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

from .compiler import FlowRule
from .datapath.limiters import DEFAULT_BURST, NS_PER_SEC, Action
from .datapath.packet import ETH_P_IP, ETH_P_IPV6, DST_MAC, SRC_MAC, build_frame, parse_headers, rewrite_addresses
from .datapath.table import DEFAULT_CAPACITY, Datapath
from .errors import MalformedPacket, TraceLoadError
from .learner import TraceRecord, read_trace_csv

log = logging.getLogger(__name__)

# pcap magic -> nanoseconds per fractional timestamp unit
_PCAP_MAGICS = {0xA1B2C3D4: 1000, 0xA1B23C4D: 1}
LINKTYPE_ETHERNET = 1
_RAW_LINKTYPES = (101, 228, 229)
SERIES_FIELDS = ("window_start", "passed_pkts", "dropped_pkts", "passed_bytes", "dropped_bytes")


class TracePacket(NamedTuple):
    timestamp: int
    frame: bytes
    length: int


def _order(packets: list[TracePacket], source) -> list[TracePacket]:
    if any(b.timestamp < a.timestamp for a, b in zip(packets, packets[1:])):
        log.warning("%s: timestamps out of order, sorting", source)
        packets.sort(key=lambda p: p.timestamp)
    return packets


def read_pcap(data: bytes, source="pcap") -> list[TracePacket]:
    """Decode a classic pcap capture (microsecond or nanosecond timestamps).

    Raw-IP captures get a dummy Ethernet header; their recorded length grows
    by the same 14 bytes so every length is measured on the same layer.
    """
    if not data:
        return []
    if len(data) < 24:
        raise TraceLoadError(f"{source}: truncated pcap global header")
    for endian in "<>":
        magic = struct.unpack_from(endian + "I", data)[0]
        if magic in _PCAP_MAGICS:
            break
    else:
        raise TraceLoadError(f"{source}: not a pcap file (magic {data[:4].hex()})")
    frac_ns = _PCAP_MAGICS[magic]
    linktype = struct.unpack_from(endian + "I", data, 20)[0] & 0xFFFF
    if linktype != LINKTYPE_ETHERNET and linktype not in _RAW_LINKTYPES:
        raise TraceLoadError(f"{source}: unsupported link type {linktype}")
    rec_hdr = struct.Struct(endian + "IIII")
    out = []
    off, n = 24, len(data)
    while off < n:
        if off + 16 > n:
            raise TraceLoadError(f"{source}: truncated record header at byte {off}")
        sec, frac, incl, orig = rec_hdr.unpack_from(data, off)
        off += 16
        if off + incl > n:
            raise TraceLoadError(f"{source}: truncated packet data at byte {off}")
        body = data[off:off + incl]
        off += incl
        ts = sec * NS_PER_SEC + frac * frac_ns
        if linktype == LINKTYPE_ETHERNET:
            out.append(TracePacket(ts, body, orig))
        else:
            ethertype = ETH_P_IPV6 if body and body[0] >> 4 == 6 else ETH_P_IP
            eth = DST_MAC + SRC_MAC + struct.pack("!H", ethertype)
            out.append(TracePacket(ts, eth + body, orig + 14))
    return _order(out, source)


def write_pcap(packets: Iterable[TracePacket], path, nanosecond: bool = False) -> None:
    magic = 0xA1B23C4D if nanosecond else 0xA1B2C3D4
    unit = 1 if nanosecond else 1000
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for p in packets:
            sec, rem = divmod(p.timestamp, NS_PER_SEC)
            fh.write(struct.pack("<IIII", sec, rem // unit, len(p.frame), max(p.length, len(p.frame))))
            fh.write(p.frame)


@lru_cache(maxsize=4096)
def _frame_for(src, dst, protocol, src_port, dst_port, length) -> bytes:
    return build_frame(src, dst, protocol, src_port, dst_port, length)


def packets_from_records(records: Iterable[TraceRecord]) -> list[TracePacket]:
    """Synthesize one minimal frame per record; the record length is kept as-is."""
    out = []
    for i, r in enumerate(records):
        if r.src is None or r.dst is None:
            raise TraceLoadError(f"record {i} has no src/dst; cannot synthesize a frame")
        try:
            frame = _frame_for(r.src, r.dst, r.protocol, r.src_port, r.dst_port, r.length)
        except ValueError as exc:
            raise TraceLoadError(f"record {i}: {exc}") from None
        out.append(TracePacket(r.timestamp, frame, r.length))
    return out


def load_trace(path, fmt: Optional[str] = None) -> list[TracePacket]:
    """Load a pcap or CSV trace as timestamp-ordered packets.

    The format is taken from ``fmt``, else the file suffix, else the
    leading bytes.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TraceLoadError(f"{path}: {exc.strerror or exc}") from None
    if fmt is None:
        suffix = path.suffix.lower()
        if suffix == ".csv":
            fmt = "csv"
        elif suffix in (".pcap", ".cap"):
            fmt = "pcap"
        else:
            head = data[:4]
            fmt = "pcap" if any(head == struct.pack(e + "I", m) for e in "<>" for m in _PCAP_MAGICS) else "csv"
    if fmt == "pcap":
        return read_pcap(data, path)
    if fmt != "csv":
        raise TraceLoadError(f"unknown trace format {fmt!r}")
    if not data.strip():
        return []
    records = read_trace_csv(path)
    return _order(packets_from_records(records), path)


def records_from_packets(packets: Iterable[TracePacket], devices) -> list[TraceRecord]:
    """Turn captured packets into learner records for the given device addresses.

    A packet sourced by a device is outgoing for it, one addressed to a
    device incoming; packets touching no listed device are skipped. The
    device id is the address in text form.
    """
    devs = {ipaddress.ip_address(d).packed for d in devices}
    out = []
    for p in packets:
        try:
            pkt = parse_headers(p.frame, p.timestamp, p.length)
        except MalformedPacket:
            continue
        if pkt.src in devs:
            dev, direction = pkt.src, "outgoing"
        elif pkt.dst in devs:
            dev, direction = pkt.dst, "incoming"
        else:
            continue
        out.append(TraceRecord(p.timestamp, str(ipaddress.ip_address(dev)), direction, pkt.protocol,
                               pkt.length, str(pkt.src_address), str(pkt.dst_address),
                               pkt.src_port, pkt.dst_port))
    return out


# -- address rewriting ------------------------------------------------------


@dataclass(frozen=True)
class AddressRemap:
    """Old address -> new address, plus what to do with unmapped addresses.

    With ``default="drop-record"`` any record carrying an unmapped address
    is removed from the stream; with ``"keep"`` it passes through untouched.
    """

    mapping: dict = field(default_factory=dict)
    default: str = "keep"

    def __post_init__(self):
        if self.default not in ("keep", "drop-record"):
            raise ValueError("default must be 'keep' or 'drop-record'")
        packed = {}
        for old, new in self.mapping.items():
            old_a, new_a = ipaddress.ip_address(old), ipaddress.ip_address(new)
            if old_a.version != new_a.version:
                raise ValueError(f"remap {old_a} -> {new_a} changes address family")
            packed[old_a.packed] = new_a.packed
        if len(set(packed.values())) != len(packed):
            raise ValueError("remap is not injective")
        object.__setattr__(self, "_packed", packed)

    def lookup(self, address: bytes) -> Optional[bytes]:
        return self._packed.get(address)

    def inverse(self) -> "AddressRemap":
        return AddressRemap({str(n): str(o) for o, n in self.normalized().items()}, self.default)

    def normalized(self) -> dict:
        return {ipaddress.ip_address(o): ipaddress.ip_address(n) for o, n in self._packed.items()}

    @classmethod
    def load(cls, path) -> "AddressRemap":
        obj = json.loads(Path(path).read_text())
        if "mapping" not in obj:
            obj = {"mapping": obj}
        return cls(obj["mapping"], obj.get("default", "keep"))


def rewrite(stream: Iterable[TracePacket], remap: AddressRemap) -> Iterator[TracePacket]:
    """Substitute mapped addresses in each frame, fixing checksums on the way."""
    drop_unmapped = remap.default == "drop-record"
    for p in stream:
        try:
            pkt = parse_headers(p.frame, p.timestamp, p.length)
        except MalformedPacket:
            if not drop_unmapped:
                yield p
            continue
        new_src, new_dst = remap.lookup(pkt.src), remap.lookup(pkt.dst)
        if drop_unmapped and (new_src is None or new_dst is None):
            continue
        if new_src is None and new_dst is None:
            yield p
        else:
            yield p._replace(frame=rewrite_addresses(p.frame, new_src, new_dst))


# -- replay -----------------------------------------------------------------


@dataclass
class WindowPoint:
    window_start: int
    passed_pkts: int = 0
    dropped_pkts: int = 0
    passed_bytes: int = 0
    dropped_bytes: int = 0


@dataclass
class ReplayReport:
    total_packets: int = 0
    total_bytes: int = 0
    passed_packets: int = 0
    passed_bytes: int = 0
    dropped_packets: int = 0
    dropped_bytes: int = 0
    aborted_packets: int = 0
    aborted_bytes: int = 0
    drop_reason_histogram: dict = field(default_factory=dict)
    per_window_series: list = field(default_factory=list)
    window_seconds: float = 60
    origin: Optional[int] = None

    @property
    def packet_drop_rate(self) -> float:
        judged = self.passed_packets + self.dropped_packets
        return self.dropped_packets / judged if judged else 0.0

    @property
    def byte_drop_rate(self) -> float:
        judged = self.passed_bytes + self.dropped_bytes
        return self.dropped_bytes / judged if judged else 0.0

    def totals(self) -> dict:
        return {k: getattr(self, k) for k in (
            "total_packets", "total_bytes", "passed_packets", "passed_bytes",
            "dropped_packets", "dropped_bytes", "aborted_packets", "aborted_bytes")}

    def to_json(self) -> dict:
        # totals go last so a streaming reader sees the series first
        return {
            "window_seconds": self.window_seconds,
            "origin": self.origin,
            "drop_reason_histogram": dict(sorted(self.drop_reason_histogram.items())),
            "per_window_series": [asdict(w) for w in self.per_window_series],
            "totals": self.totals(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReplayReport":
        return cls(
            **obj["totals"],
            drop_reason_histogram=dict(obj["drop_reason_histogram"]),
            per_window_series=[WindowPoint(**w) for w in obj["per_window_series"]],
            window_seconds=obj["window_seconds"],
            origin=obj["origin"],
        )


class _Tally:
    def __init__(self, origin: Optional[int], size: int):
        self.origin = origin
        self.size = size
        self.report = ReplayReport(window_seconds=size / NS_PER_SEC, origin=origin)
        self.reasons: Counter = Counter()
        self.windows: dict[int, list[int]] = {}

    def add(self, ts: int, length: int, verdict) -> None:
        r = self.report
        if self.origin is None:
            self.origin = r.origin = ts
        r.total_packets += 1
        r.total_bytes += length
        action = verdict.action
        if action is Action.ABORT:
            r.aborted_packets += 1
            r.aborted_bytes += length
            self.reasons[verdict.reason.value] += 1
            return
        slot = self.windows.get((ts - self.origin) // self.size)
        if slot is None:
            slot = self.windows[(ts - self.origin) // self.size] = [0, 0, 0, 0]
        if action is Action.PASS:
            r.passed_packets += 1
            r.passed_bytes += length
            slot[0] += 1
            slot[2] += length
        else:
            r.dropped_packets += 1
            r.dropped_bytes += length
            self.reasons[verdict.reason.value] += 1
            slot[1] += 1
            slot[3] += length

    def finish(self) -> ReplayReport:
        r = self.report
        r.drop_reason_histogram = dict(sorted(self.reasons.items()))
        r.per_window_series = _series(self.windows, self.origin, self.size)
        return r


def _series(windows: dict[int, list[int]], origin: Optional[int], size: int) -> list[WindowPoint]:
    """Contiguous, zero-filled series from the first to the last busy window."""
    if not windows:
        return []
    lo, hi = min(windows), max(windows)
    empty = (0, 0, 0, 0)
    return [WindowPoint(origin + i * size, *windows.get(i, empty)) for i in range(lo, hi + 1)]


def _device_sides(rules: Sequence[FlowRule]) -> set[bytes]:
    return {r.key.src if r.key.direction == "from-device" else r.key.dst for r in rules}


def _replay_serial(stream, rules, mode, direction, size, burst, origin) -> ReplayReport:
    dp = Datapath(capacity=max(DEFAULT_CAPACITY, len(rules)), mode=mode, burst=burst)
    for r in rules:
        dp.insert_rule(r)
    tally = _Tally(origin, size)
    process = dp.process_packet
    if direction == "auto":
        devices = _device_sides(rules)
        for p in stream:
            try:
                pkt = parse_headers(p.frame, p.timestamp, p.length)
            except MalformedPacket:
                tally.add(p.timestamp, p.length, process(p.frame, p.timestamp, length=p.length))
                continue
            d = "from-device" if pkt.src in devices else "to-device"
            tally.add(p.timestamp, p.length, dp.process_parsed(pkt, d))
    else:
        for p in stream:
            tally.add(p.timestamp, p.length, process(p.frame, p.timestamp, direction, length=p.length))
    return tally.finish()


def _shard_of(p: TracePacket, direction: str, devices: set[bytes]) -> bytes:
    try:
        pkt = parse_headers(p.frame, p.timestamp, p.length)
    except MalformedPacket:
        return b""
    if direction == "from-device":
        return pkt.src
    if direction == "to-device":
        return pkt.dst
    return pkt.src if pkt.src in devices else pkt.dst


def _merge(parts: list[ReplayReport], origin: Optional[int], size: int) -> ReplayReport:
    out = ReplayReport(window_seconds=size / NS_PER_SEC, origin=origin)
    reasons: Counter = Counter()
    windows: dict[int, list[int]] = {}
    for part in parts:
        for k, v in part.totals().items():
            setattr(out, k, getattr(out, k) + v)
        reasons.update(part.drop_reason_histogram)
        for w in part.per_window_series:
            slot = windows.setdefault((w.window_start - origin) // size, [0, 0, 0, 0])
            for i, v in enumerate((w.passed_pkts, w.dropped_pkts, w.passed_bytes, w.dropped_bytes)):
                slot[i] += v
    # zero rows from one shard's gap filling must not widen the merged series
    windows = {i: s for i, s in windows.items() if any(s)}
    out.drop_reason_histogram = dict(sorted(reasons.items()))
    out.per_window_series = _series(windows, origin, size)
    return out


def replay(stream: Iterable[TracePacket], rules: Sequence[FlowRule], mode: str = "window",
           direction: str = "from-device", window: Optional[float] = None,
           burst: int = DEFAULT_BURST, workers: int = 1) -> ReplayReport:
    """Feed ``stream`` through a fresh Datapath loaded with ``rules``.

    Trace timestamps are the clock, so results do not depend on how fast the
    host runs. ``direction`` may be ``"auto"``: packets sourced by a device
    address of some rule count as from-device, the rest as to-device. The
    report's windows start at the first packet and default to the rules'
    window length. ``workers > 1`` shards the trace by device across
    processes; since every rule belongs to one device the verdicts are the
    same as a serial run.
    """
    if direction not in ("from-device", "to-device", "auto"):
        raise ValueError("direction must be from-device, to-device or auto")
    if window is None:
        window = rules[0].window if rules else 60
    size = int(round(window * NS_PER_SEC))
    if size <= 0:
        raise ValueError("window must be positive")
    if workers <= 1:
        return _replay_serial(stream, rules, mode, direction, size, burst, None)

    packets = list(stream)
    if not packets:
        return _Tally(None, size).finish()
    origin = min(p.timestamp for p in packets)
    devices = _device_sides(rules)
    shards: dict[bytes, list[TracePacket]] = {}
    for p in packets:
        shards.setdefault(_shard_of(p, direction, devices), []).append(p)
    by_device: dict[bytes, list[FlowRule]] = {}
    for r in rules:
        side = r.key.src if r.key.direction == "from-device" else r.key.dst
        by_device.setdefault(side, []).append(r)
    jobs = [(shard, by_device.get(dev, []), mode, direction, size, burst, origin)
            for dev, shard in shards.items()]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        parts = list(pool.map(_replay_job, jobs))
    return _merge(parts, origin, size)


def _replay_job(args) -> ReplayReport:
    return _replay_serial(*args)


# -- report output ----------------------------------------------------------


def emit_report(report: ReplayReport, path, fmt: Optional[str] = None) -> None:
    """Write the per-window series as CSV, or the whole report as JSON."""
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    if fmt == "json":
        path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SERIES_FIELDS)
            for w in report.per_window_series:
                writer.writerow(_row(w))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def _row(w: WindowPoint) -> tuple:
    return (w.window_start, w.passed_pkts, w.dropped_pkts, w.passed_bytes, w.dropped_bytes)


def read_report(path) -> ReplayReport:
    return ReplayReport.from_json(json.loads(Path(path).read_text()))
