"""Synthetic traces: SYN floods, constant-rate streams and appliance-like traffic.

All generators are deterministic for a given seed and return TraceRecords
sorted by timestamp, ready for the CSV writer or the replay harness.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction

from .learner import TraceRecord

NS_PER_SEC = 1_000_000_000
MIN_FRAME = 60


def cbr(src: str, dst: str, rate: float, duration: float, protocol: str = "tcp",
        dst_port: int = 443, src_port: int = 40000, length: int = MIN_FRAME,
        start: int = 0, device_id: str = "device") -> list[TraceRecord]:
    """``rate`` packets per second for ``duration`` seconds, evenly spaced.

    Timestamps are exact multiples of the interval (rounded down to the
    nanosecond), so packet i sits at ``start + floor(i / rate)``.
    """
    if rate <= 0 or duration <= 0:
        raise ValueError("rate and duration must be positive")
    rate_f = Fraction(str(rate))
    count = int(rate_f * Fraction(str(duration)))
    return [
        TraceRecord(start + int(i * NS_PER_SEC / rate_f), device_id, "outgoing", protocol, length,
                    src, dst, src_port, dst_port)
        for i in range(count)
    ]


def syn_flood(src: str, dst: str, rate: float, duration: float, dst_port: int = 80,
              start: int = 0, seed: int = 0, device_id: str = "device") -> list[TraceRecord]:
    """TCP SYNs from random source ports at a constant rate, as a DoS tool sends them."""
    rng = random.Random(seed)
    out = cbr(src, dst, rate, duration, "tcp", dst_port, 0, MIN_FRAME, start, device_id)
    return [TraceRecord(r.timestamp, r.device_id, r.direction, r.protocol, r.length, r.src, r.dst,
                        rng.randrange(1024, 65536), r.dst_port) for r in out]


@dataclass(frozen=True)
class ApplianceProfile:
    """Shape of an appliance's per-minute activity.

    Most active minutes are a light heartbeat; a few carry a larger
    exchange (a status upload or a command burst). Packet sizes mix bare
    acknowledgements with small payloads.
    """

    idle_probability: float = 0.35
    heartbeat_packets: tuple[int, int] = (12, 30)
    busy_probability: float = 0.06
    busy_packets: tuple[int, int] = (50, 90)
    spike_probability: float = 0.003
    spike_packets: tuple[int, int] = (240, 330)
    ack_fraction: float = 0.55
    payload_lengths: tuple[int, int] = (80, 180)


def appliance_trace(src: str, dst: str, minutes: int = 1440, seed: int = 0,
                    profile: ApplianceProfile = ApplianceProfile(), dst_port: int = 443,
                    device_id: str = "appliance") -> list[TraceRecord]:
    """Outgoing TCP traffic of one appliance talking to its cloud service."""
    rng = random.Random(seed)
    p = profile
    out = []
    for minute in range(minutes):
        if rng.random() < p.idle_probability:
            continue
        roll = rng.random()
        if roll < p.spike_probability:
            lo, hi = p.spike_packets
        elif roll < p.spike_probability + p.busy_probability:
            lo, hi = p.busy_packets
        else:
            lo, hi = p.heartbeat_packets
        n = rng.randint(lo, hi)
        base = minute * 60 * NS_PER_SEC
        stamps = sorted(base + rng.randrange(60 * NS_PER_SEC) for _ in range(n))
        for ts in stamps:
            if rng.random() < p.ack_fraction:
                length = MIN_FRAME + rng.randrange(0, 7)
            else:
                length = rng.randint(*p.payload_lengths)
            out.append(TraceRecord(ts, device_id, "outgoing", "tcp", length, src, dst,
                                   rng.randrange(32768, 61000), dst_port))
    return out
