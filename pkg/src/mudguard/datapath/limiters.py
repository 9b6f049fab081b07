"""The two rate-limiter semantics: strict fixed windows and token buckets.

Both work on integer nanosecond timestamps. Token buckets keep their
credit scaled by the window length so refills stay exact integers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

NS_PER_SEC = 1_000_000_000
DEFAULT_WINDOW_NS = 60 * NS_PER_SEC
DEFAULT_BURST = 5
# byte buckets hold this many full-size Ethernet frames of burst credit
BYTE_BURST_FRAME = 1500


class Action(str, enum.Enum):
    PASS = "pass"
    DROP = "drop"
    ABORT = "abort"


class Reason(str, enum.Enum):
    ALLOWED = "allowed"
    NO_RULE = "no-rule"
    PKT_RATE = "pkt-rate-exceeded"
    BYTE_RATE = "byte-rate-exceeded"
    MALFORMED = "malformed"


class Verdict(NamedTuple):
    action: Action
    reason: Reason


PASS = Verdict(Action.PASS, Reason.ALLOWED)
DROP_NO_RULE = Verdict(Action.DROP, Reason.NO_RULE)
DROP_PKT_RATE = Verdict(Action.DROP, Reason.PKT_RATE)
DROP_BYTE_RATE = Verdict(Action.DROP, Reason.BYTE_RATE)
ABORT = Verdict(Action.ABORT, Reason.MALFORMED)


@dataclass(slots=True)
class FlowCounters:
    packets: int = 0
    bytes: int = 0
    max_pkt_rate: int = 0
    max_bytes_rate: int = 0


@dataclass(slots=True)
class WindowState:
    window_start: Optional[int] = None
    window_size: int = DEFAULT_WINDOW_NS

    def __post_init__(self):
        if self.window_size <= 0:
            raise ValueError("window_size must be positive")


def roll_window(counters: FlowCounters, ws: WindowState, now: int) -> None:
    """Advance ``ws`` to the window holding ``now``, zeroing counters on expiry.

    The new start is the old one plus a whole number of window sizes, so
    window boundaries never drift with packet arrival times.
    """
    start = ws.window_start
    if start is None:
        ws.window_start = now
    elif now >= start + ws.window_size:
        ws.window_start = start + (now - start) // ws.window_size * ws.window_size
        counters.packets = 0
        counters.bytes = 0


def window_check(counters: FlowCounters, ws: WindowState, length: int, now: int) -> Reason:
    """Reset-then-update: expire the window first, then test the packet against it.

    The limits are checked before admission, so a dropped packet never
    counts toward the window totals.
    """
    # roll_window inlined; this runs once per packet
    start = ws.window_start
    if start is None:
        ws.window_start = now
    elif now >= start + ws.window_size:
        ws.window_start = start + (now - start) // ws.window_size * ws.window_size
        counters.packets = 0
        counters.bytes = 0
    if counters.max_pkt_rate and counters.packets + 1 > counters.max_pkt_rate:
        return Reason.PKT_RATE
    if counters.max_bytes_rate and counters.bytes + length > counters.max_bytes_rate:
        return Reason.BYTE_RATE
    counters.packets += 1
    counters.bytes += length
    return Reason.ALLOWED


class TokenBucket:
    """Continuous-refill bucket: ``rate`` tokens per ``window_ns``, at most ``capacity``.

    Starts full. Internally every quantity is multiplied by ``window_ns`` so
    that refilling ``elapsed * rate / window_ns`` tokens needs no division.
    """

    __slots__ = ("capacity", "rate", "window_ns", "_scaled", "last_refill")

    def __init__(self, capacity: int, rate: int, window_ns: int = DEFAULT_WINDOW_NS):
        if capacity < 0 or rate < 0 or window_ns <= 0:
            raise ValueError("bucket parameters must be non-negative with a positive window")
        self.capacity = capacity
        self.rate = rate
        self.window_ns = window_ns
        self._scaled = capacity * window_ns
        self.last_refill: Optional[int] = None

    @property
    def tokens(self) -> float:
        return self._scaled / self.window_ns

    @property
    def refill_rate(self) -> float:
        """Tokens per second."""
        return self.rate * NS_PER_SEC / self.window_ns

    def refill(self, now: int) -> None:
        last = self.last_refill
        if last is not None and now > last:
            self._scaled = min(self.capacity * self.window_ns, self._scaled + (now - last) * self.rate)
        if last is None or now > last:
            self.last_refill = now

    def has(self, amount: int) -> bool:
        return self._scaled >= amount * self.window_ns

    def take(self, amount: int) -> None:
        self._scaled -= amount * self.window_ns


def bucket_check(pkt_bucket: Optional[TokenBucket], byte_bucket: Optional[TokenBucket],
                 length: int, now: int) -> Reason:
    """Admit one packet of ``length`` bytes if both buckets have credit.

    A ``None`` bucket means that dimension is unlimited.
    """
    if pkt_bucket is not None:
        pkt_bucket.refill(now)
    if byte_bucket is not None:
        byte_bucket.refill(now)
    if pkt_bucket is not None and not pkt_bucket.has(1):
        return Reason.PKT_RATE
    if byte_bucket is not None and not byte_bucket.has(length):
        return Reason.BYTE_RATE
    if pkt_bucket is not None:
        pkt_bucket.take(1)
    if byte_bucket is not None:
        byte_bucket.take(length)
    return Reason.ALLOWED
