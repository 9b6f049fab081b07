"""Windowed traffic statistics and rate-limit suggestions.

Traces are sliced into fixed windows per device, the way a MUD author
would measure what a device normally sends before writing its limits.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Optional, TextIO

from .errors import LearnerError, TraceLoadError
from .model import RateLimit

NS_PER_SEC = 1_000_000_000
DIRECTIONS = ("outgoing", "incoming")
PROTOCOLS = ("tcp", "udp", "icmp", "other")
POLICIES = ("peaks", "averages")
TRACE_FIELDS = ("timestamp_ns", "device_id", "direction", "protocol", "length")
ENDPOINT_FIELDS = ("src", "dst", "src_port", "dst_port")


@dataclass(frozen=True)
class TraceRecord:
    """One packet's metadata.

    The endpoint fields are optional; the learner ignores them, but the
    replay harness needs them to synthesize a frame.
    """

    timestamp: int
    device_id: str
    direction: str
    protocol: str
    length: int
    src: Optional[str] = None
    dst: Optional[str] = None
    src_port: int = 0
    dst_port: int = 0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"record length must be positive, got {self.length}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")


@dataclass
class WindowStats:
    window_start: int
    device_id: str
    tcp_packets: int = 0
    tcp_bytes: int = 0
    udp_packets: int = 0
    udp_bytes: int = 0
    # ICMP and anything else; kept so window totals account for every record
    other_packets: int = 0
    other_bytes: int = 0

    @property
    def packets(self) -> int:
        return self.tcp_packets + self.udp_packets + self.other_packets

    @property
    def bytes(self) -> int:
        return self.tcp_bytes + self.udp_bytes + self.other_bytes

    def add(self, rec: TraceRecord) -> None:
        if rec.protocol == "tcp":
            self.tcp_packets += 1
            self.tcp_bytes += rec.length
        elif rec.protocol == "udp":
            self.udp_packets += 1
            self.udp_bytes += rec.length
        else:
            self.other_packets += 1
            self.other_bytes += rec.length


@dataclass(frozen=True)
class CategoryStats:
    """Per-window averages and peaks for one device category.

    Averages are taken over every active window of every device in the
    category; peaks are the mean of each device's busiest window.
    """

    category: str
    tcp_avg_pkts: float
    tcp_peak_pkts: float
    udp_avg_pkts: float
    udp_peak_pkts: float
    tcp_avg_bytes: float
    tcp_peak_bytes: float
    udp_avg_bytes: float
    udp_peak_bytes: float
    window_seconds: float = 60
    devices: int = 0
    windows: int = 0

    def statistic(self, policy: str, protocol: str, unit: str) -> float:
        kind = {"peaks": "peak", "averages": "avg"}.get(policy)
        if kind is None:
            raise LearnerError(f"policy must be one of {POLICIES}")
        if protocol not in ("tcp", "udp") or unit not in ("pkts", "bytes"):
            raise LearnerError(f"no statistic for {protocol}/{unit}")
        return getattr(self, f"{protocol}_{kind}_{unit}")


@dataclass(frozen=True)
class Granularity:
    packet_round_to: int
    byte_round_to: int

    def __post_init__(self):
        if self.packet_round_to <= 0 or self.byte_round_to <= 0:
            raise LearnerError("rounding granularity must be positive")


@dataclass(frozen=True)
class SuggestedLimits:
    policy: str
    packet_limit: RateLimit
    byte_limit: RateLimit

    def actions(self) -> dict:
        """The rate fields as they would appear in a MUD ``actions`` block."""
        return {
            "packet-rate": self.packet_limit.render(),
            "byte-rate": self.byte_limit.render(byte_units=True),
        }


def _window_ns(window_size: float) -> int:
    if window_size <= 0:
        raise LearnerError("window size must be positive")
    return int(Decimal(str(window_size)) * NS_PER_SEC)


def windowize(trace: Iterable[TraceRecord], window_size: float = 60,
              direction: Optional[str] = None) -> list[WindowStats]:
    """Slice ``trace`` into per-device windows of ``window_size`` seconds.

    Each device's first record opens its first window. A record past the
    current window moves the start forward by whole window sizes until the
    record fits, so idle stretches produce no windows at all. Records must be
    time-ordered within each device. ``direction`` keeps only outgoing or
    incoming records.
    """
    size = _window_ns(window_size)
    if direction is not None and direction not in DIRECTIONS:
        raise LearnerError(f"direction must be one of {DIRECTIONS}")
    current: dict[str, WindowStats] = {}
    last_seen: dict[str, int] = {}
    out: list[WindowStats] = []
    for rec in trace:
        if direction is not None and rec.direction != direction:
            continue
        dev, ts = rec.device_id, rec.timestamp
        w = current.get(dev)
        if w is None:
            w = current[dev] = WindowStats(ts, dev)
            out.append(w)
        elif ts < last_seen[dev]:
            raise LearnerError(f"trace for device {dev!r} is not sorted by timestamp")
        elif ts >= w.window_start + size:
            start = w.window_start + (ts - w.window_start) // size * size
            w = current[dev] = WindowStats(start, dev)
            out.append(w)
        last_seen[dev] = ts
        w.add(rec)
    # group by device (first appearance), time-ordered within each device
    order = {dev: i for i, dev in enumerate(current)}
    out.sort(key=lambda w: order[w.device_id])
    return out


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def aggregate(windows: list[WindowStats], category_map: dict[str, str],
              window_seconds: float = 60) -> dict[str, CategoryStats]:
    """Category averages and peaks from per-device windows.

    Every window handed in is an active one (windowize never materializes
    empty windows), so averaging over them skips idle time.
    """
    by_category: dict[str, dict[str, list[WindowStats]]] = defaultdict(lambda: defaultdict(list))
    for w in windows:
        category = category_map.get(w.device_id)
        if category is None:
            raise LearnerError(f"device {w.device_id!r} has no category")
        by_category[category][w.device_id].append(w)

    metrics = ("tcp_packets", "udp_packets", "tcp_bytes", "udp_bytes")
    out = {}
    for category, devices in by_category.items():
        every = [w for ws in devices.values() for w in ws]
        avg = {m: _mean(getattr(w, m) for w in every) for m in metrics}
        peak = {m: _mean(max(getattr(w, m) for w in ws) for ws in devices.values()) for m in metrics}
        out[category] = CategoryStats(
            category,
            tcp_avg_pkts=avg["tcp_packets"], tcp_peak_pkts=peak["tcp_packets"],
            udp_avg_pkts=avg["udp_packets"], udp_peak_pkts=peak["udp_packets"],
            tcp_avg_bytes=avg["tcp_bytes"], tcp_peak_bytes=peak["tcp_bytes"],
            udp_avg_bytes=avg["udp_bytes"], udp_peak_bytes=peak["udp_bytes"],
            window_seconds=window_seconds, devices=len(devices), windows=len(every),
        )
    return out


def _round_up(value: float, step: int) -> int:
    # Decimal(str(x)) keeps the value as printed, so 1716.8 / 10 stays 171.68
    return math.ceil(Decimal(str(value)) / step) * step


def suggest_limits(stats: CategoryStats, policy: str, granularity: Granularity,
                   protocol: str = "tcp") -> SuggestedLimits:
    """Round the chosen per-window statistic up to ``granularity``, per minute."""
    per_minute = Decimal(60) / Decimal(str(stats.window_seconds))
    limits = []
    for unit, step in (("pkts", granularity.packet_round_to), ("bytes", granularity.byte_round_to)):
        value = stats.statistic(policy, protocol, unit)
        if value <= 0:
            raise LearnerError(f"{stats.category}: no {protocol} traffic to derive a {unit} limit from")
        limits.append(RateLimit(_round_up(Decimal(str(value)) * per_minute, step), "minute"))
    return SuggestedLimits(policy, limits[0], limits[1])


def load_granularity(path, name: Optional[str] = None) -> Granularity:
    """Read a granularity config: either one object or a mapping of named ones."""
    obj = json.loads(Path(path).read_text())
    if name is not None:
        if name not in obj:
            raise LearnerError(f"{path}: no granularity named {name!r}")
        obj = obj[name]
    try:
        return Granularity(int(obj["packet_round_to"]), int(obj["byte_round_to"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise LearnerError(f"{path}: bad granularity config ({exc})") from None


def load_category_map(path) -> dict[str, str]:
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict) or not all(isinstance(v, str) for v in obj.values()):
        raise LearnerError(f"{path}: category map must be an object of device_id -> category")
    return {str(k): v for k, v in obj.items()}


# -- CSV trace format -------------------------------------------------------


def read_trace_csv(source) -> list[TraceRecord]:
    """Parse a CSV trace; the endpoint columns are optional.

    ``source`` is a path or an open text file. A header row is required.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_trace_csv(fh)
    reader = csv.DictReader(source)
    missing = [f for f in TRACE_FIELDS if f not in (reader.fieldnames or ())]
    if missing and reader.fieldnames is not None:
        raise TraceLoadError(f"trace CSV lacks columns {missing}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(TraceRecord(
                int(row["timestamp_ns"]), row["device_id"], row["direction"],
                row["protocol"].lower(), int(row["length"]),
                row.get("src") or None, row.get("dst") or None,
                int(row.get("src_port") or 0), int(row.get("dst_port") or 0),
            ))
        except (TypeError, ValueError) as exc:
            raise TraceLoadError(f"trace CSV line {lineno}: {exc}") from None
    return out


def write_trace_csv(records: Iterable[TraceRecord], dest) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="") as fh:
            return write_trace_csv(records, fh)
    writer = csv.writer(dest)
    writer.writerow(TRACE_FIELDS + ENDPOINT_FIELDS)
    for r in records:
        writer.writerow((r.timestamp, r.device_id, r.direction, r.protocol, r.length,
                         r.src or "", r.dst or "", r.src_port, r.dst_port))


TABLE_HEADER = ("category", "unit", "TCP", "TCP Max", "UDP", "UDP Max")


def write_table(stats: dict[str, CategoryStats], dest: TextIO) -> None:
    """Write one packets row and one bytes row per category."""
    writer = csv.writer(dest)
    writer.writerow(TABLE_HEADER)
    for name in sorted(stats):
        s = stats[name]
        writer.writerow((name, "packets", f"{s.tcp_avg_pkts:.2f}", f"{s.tcp_peak_pkts:.2f}",
                         f"{s.udp_avg_pkts:.2f}", f"{s.udp_peak_pkts:.2f}"))
        writer.writerow((name, "bytes", f"{s.tcp_avg_bytes:.2f}", f"{s.tcp_peak_bytes:.2f}",
                         f"{s.udp_avg_bytes:.2f}", f"{s.udp_peak_bytes:.2f}"))
