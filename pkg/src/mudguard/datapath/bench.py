"""Micro-benchmarks for rule churn and per-packet processing."""

from __future__ import annotations

import ipaddress
import multiprocessing
import socket
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..compiler import FlowKey, FlowRule
from .limiters import PASS
from .packet import build_frame
from .table import Datapath

COLUMNS = ("Min", "Median", "Avg", "90th", "99th", "Max", "Std.dev.")

DEVICE = "192.168.1.10"


@dataclass(frozen=True)
class TimingStats:
    samples: int
    min: float
    median: float
    avg: float
    p90: float
    p99: float
    max: float
    stddev: float

    @classmethod
    def from_samples(cls, samples) -> "TimingStats":
        arr = np.asarray(samples, dtype=float)
        if arr.size == 0:
            raise ValueError("no samples")
        return cls(
            int(arr.size), float(arr.min()), float(np.median(arr)), float(arr.mean()),
            float(np.percentile(arr, 90)), float(np.percentile(arr, 99)), float(arr.max()),
            float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        )

    def row(self) -> tuple[float, ...]:
        return (self.min, self.median, self.avg, self.p90, self.p99, self.max, self.stddev)


def bench_rules(n: int) -> list[FlowRule]:
    """``n`` distinct from-device TCP rules from one device to n servers."""
    base = int(ipaddress.IPv4Address("10.0.0.1"))
    return [
        FlowRule(FlowKey.of(DEVICE, ipaddress.IPv4Address(base + i), "from-device", "tcp", 443))
        for i in range(n)
    ]


def _timed(fn: Callable, args_seq) -> list[int]:
    clock = time.perf_counter_ns
    out = []
    for args in args_seq:
        t0 = clock()
        fn(*args)
        out.append(clock() - t0)
    return out


def bench(n_rules: int = 255, n_packets: int = 10000, installed: int = 1,
          datapath: Optional[Datapath] = None) -> dict[str, TimingStats]:
    """Time insert x n_rules, delete x n_rules and datapath x n_packets (ns).

    The datapath run matches one rule with ``installed`` rules in the
    table, the way a single active flow is checked among many entries.
    """
    if n_rules < 1 or n_packets < 1:
        raise ValueError("need at least one operation")
    dp = datapath or Datapath()
    rules = bench_rules(n_rules)
    insert = _timed(dp.insert_rule, [(r,) for r in rules])
    delete = _timed(dp.delete_rule, [(r.key,) for r in rules])

    extra = bench_rules(max(installed, 1))
    for r in extra:
        dp.insert_rule(r)
    target = extra[-1].key
    frame = build_frame(DEVICE, target.dst_address, "tcp", 40000, 443, length=200)
    process = dp.process_packet
    samples = _timed(process, [(frame, i * 1000) for i in range(n_packets)])
    for r in extra:
        dp.delete_rule(r.key)
    return {
        "Insert rule": TimingStats.from_samples(insert),
        "Delete rule": TimingStats.from_samples(delete),
        "Datapath": TimingStats.from_samples(samples),
    }


def render_table(results: dict[str, TimingStats], unit: str = "ns") -> str:
    header = ("Experiment",) + COLUMNS
    rows = [header] + [(name,) + tuple(f"{v:.2f}" for v in s.row()) for name, s in results.items()]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return f"(time in {unit})\n" + "\n".join(lines)


# -- loopback request/response latency -------------------------------------
#
# Three processes stand in for the client, router and server machines, and
# the client runs a TCP request/response loop (one small request, one
# reply, repeated) through the relay. With the firewall enabled the relay
# runs each client->server segment through a Datapath before forwarding it,
# as the from-device program on the router's LAN side would.

_MSG = 64
_FW_ON = b"\x00fw-on".ljust(_MSG, b"\x00")
_FW_OFF = b"\x00fw-off".ljust(_MSG, b"\x00")
_STOP = b"\x00stop".ljust(_MSG, b"\x00")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = sock.recv(n)
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return buf


def _nodelay(sock: socket.socket) -> socket.socket:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _echo_server(listener: socket.socket) -> None:
    conn, _ = listener.accept()
    _nodelay(conn)
    with conn:
        while True:
            data = _recv_exact(conn, _MSG)
            if data == _STOP:
                return
            conn.sendall(data)


def _relay(listener: socket.socket, server: tuple, installed: int) -> None:
    conn, peer = listener.accept()
    _nodelay(conn)
    upstream = _nodelay(socket.create_connection(server))
    local = upstream.getsockname()
    dp = Datapath()
    for r in bench_rules(installed - 1) if installed > 1 else []:
        dp.insert_rule(r)
    dp.insert_rule(FlowRule(FlowKey.of(peer[0], server[0], "from-device", "tcp", server[1])))
    # the kernel hands XDP a complete frame, so headers are built once up front
    frame = build_frame(peer[0], server[0], "tcp", peer[1], server[1], length=_MSG + 54,
                        tcp_flags=0x18)
    enabled = False
    clock = time.monotonic_ns
    with conn, upstream:
        while True:
            data = _recv_exact(conn, _MSG)
            if data == _STOP:
                upstream.sendall(_STOP)
                return
            if data == _FW_ON or data == _FW_OFF:
                enabled = data == _FW_ON
                conn.sendall(data)
                continue
            if enabled and dp.process_packet(frame, clock(), "from-device") is not PASS:
                raise RuntimeError(f"firewall dropped benchmark traffic via {local}")
            upstream.sendall(data)
            conn.sendall(_recv_exact(upstream, _MSG))


def _listener() -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    sock.listen(1)
    return sock


def loopback_latency(rounds: int = 5000, block: int = 50, installed: int = 255) -> dict[str, float]:
    """Median request/response latency (ns) through a relay, firewall off vs on.

    Settings alternate in blocks so slow drift of the machine affects both
    sides equally.
    """
    ctx = multiprocessing.get_context("fork")
    server_l, relay_l = _listener(), _listener()
    server_addr, relay_addr = server_l.getsockname(), relay_l.getsockname()
    procs = [
        ctx.Process(target=_echo_server, args=(server_l,), daemon=True),
        ctx.Process(target=_relay, args=(relay_l, server_addr, installed), daemon=True),
    ]
    for p in procs:
        p.start()
    server_l.close()
    relay_l.close()

    client = _nodelay(socket.create_connection(relay_addr, timeout=10.0))
    data = b"r" * _MSG
    results: dict[bool, list[int]] = {False: [], True: []}
    clock = time.perf_counter_ns
    try:
        for _ in range(50):
            client.sendall(data)
            _recv_exact(client, _MSG)
        enabled = False
        while len(results[True]) < rounds:
            client.sendall(_FW_ON if enabled else _FW_OFF)
            _recv_exact(client, _MSG)
            samples = results[enabled]
            for _ in range(block):
                t0 = clock()
                client.sendall(data)
                _recv_exact(client, _MSG)
                samples.append(clock() - t0)
            enabled = not enabled
        client.sendall(_STOP)
    finally:
        client.close()
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    base = statistics.median(results[False])
    fw = statistics.median(results[True])
    return {
        "baseline_median_ns": base,
        "firewall_median_ns": fw,
        "relative_change": (fw - base) / base,
    }
