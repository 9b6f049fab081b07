"""Compile a parsed MUD file plus device context into allowlist rules."""

from __future__ import annotations

import csv
import ipaddress
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Optional

from .errors import CompileError
from .model import IPAddress, MudFile, RateLimit

DEFAULT_WINDOW = 60
DIRECTIONS = ("from-device", "to-device")
PROTOCOLS = ("tcp", "udp", "icmp")


class FlowKey(NamedTuple):
    """Exact-match allowlist key.

    Addresses are packed (4 or 16 bytes), mirroring the in-kernel key
    layout. ``src``/``dst`` follow the packet, so for a to-device rule the
    remote host is ``src``. ``port`` is the destination port of from-device
    traffic and the source port of to-device traffic; 0 is a wildcard.
    """

    src: bytes
    dst: bytes
    direction: str
    protocol: str
    port: int

    @classmethod
    def of(cls, src, dst, direction: str, protocol: str, port: int = 0) -> "FlowKey":
        return cls(
            ipaddress.ip_address(src).packed,
            ipaddress.ip_address(dst).packed,
            direction,
            protocol,
            port,
        )

    @property
    def src_address(self) -> IPAddress:
        return ipaddress.ip_address(self.src)

    @property
    def dst_address(self) -> IPAddress:
        return ipaddress.ip_address(self.dst)

    @property
    def family(self) -> str:
        return "ipv4" if len(self.src) == 4 else "ipv6"

    def wildcard(self) -> "FlowKey":
        return self._replace(port=0)

    def to_json(self) -> dict:
        return {
            "src": str(self.src_address),
            "dst": str(self.dst_address),
            "direction": self.direction,
            "protocol": self.protocol,
            "port": self.port,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlowKey":
        return cls.of(obj["src"], obj["dst"], obj["direction"], obj["protocol"], obj["port"])

    def __str__(self):
        return (f"{self.direction} {self.protocol} {self.src_address} -> "
                f"{self.dst_address} port {self.port or '*'}")


@dataclass(frozen=True)
class FlowRule:
    key: FlowKey
    max_packets: int = 0
    max_bytes: int = 0
    window: float = DEFAULT_WINDOW
    origin: tuple[str, str] = ("", "")

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.max_packets < 0 or self.max_bytes < 0:
            raise ValueError("limits must be non-negative")
        if len(self.key.src) != len(self.key.dst):
            raise ValueError("key mixes address families")

    def to_json(self) -> dict:
        return {
            "key": self.key.to_json(),
            "max_packets": self.max_packets,
            "max_bytes": self.max_bytes,
            "window": self.window,
            "origin": list(self.origin),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlowRule":
        return cls(FlowKey.from_json(obj["key"]), obj["max_packets"], obj["max_bytes"],
                   obj["window"], tuple(obj["origin"]))


@dataclass(frozen=True)
class DefaultDrop:
    """Catch-all drop record for one device address and direction.

    The datapath needs no entry for it (a lookup miss already drops); it is
    kept so policy counts match what a rule-based firewall would install.
    """

    device_address: IPAddress
    direction: str


@dataclass
class DeviceContext:
    device_id: str
    device_addresses: list[IPAddress]
    dns_map: dict[str, list[IPAddress]] = field(default_factory=dict)

    def __post_init__(self):
        self.device_addresses = [ipaddress.ip_address(a) for a in self.device_addresses]
        dns = {}
        for host, addrs in self.dns_map.items():
            addrs = [ipaddress.ip_address(a) for a in addrs]
            if not addrs:
                raise ValueError(f"DNS entry {host!r} has no addresses")
            # "Host.Example." and "host.example" are one entry
            merged = dns.setdefault(host.lower().rstrip("."), [])
            merged.extend(a for a in addrs if a not in merged)
            if len({a.version for a in merged}) != 1:
                raise ValueError(f"DNS entry {host!r} mixes address families")
        self.dns_map = dns

    def resolve(self, host: str) -> Optional[list[IPAddress]]:
        return self.dns_map.get(host.lower().rstrip("."))


def load_device_context(path) -> DeviceContext:
    """Load a device context from JSON or CSV.

    JSON: ``{"device_id": ..., "addresses": [...], "dns": {host: [addr, ...]}}``.
    CSV rows: ``device_id,<id>`` / ``address,<ip>`` / ``host,<name>,<ip>``.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        device_id, addrs, dns = "", [], {}
        with path.open(newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                kind = row[0].strip()
                if kind == "device_id":
                    device_id = row[1].strip()
                elif kind == "address":
                    addrs.append(row[1].strip())
                elif kind == "host":
                    dns.setdefault(row[1].strip(), []).append(row[2].strip())
                else:
                    raise ValueError(f"{path}: unknown row kind {kind!r}")
        return DeviceContext(device_id, addrs, dns)
    obj = json.loads(path.read_text())
    return DeviceContext(obj.get("device_id", ""), obj.get("addresses", []), obj.get("dns", {}))


def rate_to_window(limit: Optional[RateLimit], window: float) -> int:
    """Express a rate as a count per ``window`` seconds, rounding up."""
    if window <= 0:
        raise ValueError("window must be positive")
    if limit is None or limit.count == 0:
        return 0
    scaled = Fraction(limit.count) * Fraction(window).limit_denominator(10**9) / limit.period_seconds
    return math.ceil(scaled)


@dataclass
class CompiledPolicy:
    device_id: str
    rules: list[FlowRule] = field(default_factory=list)
    default_drops: list[DefaultDrop] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def policy_count(self) -> int:
        return len(self.rules) + len(self.default_drops)

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)


def compile_policy(mud: MudFile, ctx: DeviceContext, window: float = DEFAULT_WINDOW) -> CompiledPolicy:
    """Expand accept ACEs into FlowRules for every device/remote address pair.

    Drop ACEs yield nothing: anything not allowlisted is dropped anyway.
    Raises CompileError if an accepted DNS name cannot be resolved; nothing
    is returned in that case, so callers never install a partial policy.
    """
    out = CompiledPolicy(ctx.device_id)
    seen: set[FlowKey] = set()

    for direction in DIRECTIONS:
        acls = mud.policy_acls(direction)
        if not acls:
            continue
        remote_end = "destination" if direction == "from-device" else "source"
        key_port_role = remote_end

        for acl in acls:
            dev_addrs = [a for a in ctx.device_addresses if f"ipv{a.version}" == acl.address_family]
            for ace in acl.aces:
                where = f"{acl.name}/{ace.name}"
                if ace.actions.forwarding != "accept":
                    continue
                m = ace.matches
                if m.extra.get("ietf-mud:mud"):
                    out.warnings.append(f"{where}: MUD-specific matches unsupported, skipped")
                    continue

                literal = m.dst_address if remote_end == "destination" else m.src_address
                if m.dns_name is not None and m.dns_endpoint == remote_end:
                    remotes = ctx.resolve(m.dns_name)
                    if remotes is None:
                        raise CompileError(f"{where}: cannot resolve host {m.dns_name!r}")
                elif literal is not None:
                    remotes = [literal]
                else:
                    out.warnings.append(f"{where}: no remote endpoint for {direction}, skipped")
                    continue

                remotes = [r for r in remotes if f"ipv{r.version}" == acl.address_family]
                if not remotes:
                    out.warnings.append(f"{where}: remote addresses are not {acl.address_family}, skipped")
                    continue
                if not dev_addrs:
                    out.warnings.append(f"{where}: device has no {acl.address_family} address, skipped")
                    continue

                port = 0
                if m.port is not None:
                    if m.port_role == key_port_role:
                        port = m.port
                    else:
                        out.warnings.append(f"{where}: device-side port {m.port} not enforceable, wildcarded")
                protocols = [m.protocol] if m.protocol else list(PROTOCOLS)
                max_pkts = rate_to_window(ace.actions.packet_rate, window)
                max_bytes = rate_to_window(ace.actions.byte_rate, window)

                for dev in dev_addrs:
                    for remote in remotes:
                        for proto in protocols:
                            src, dst = (dev, remote) if direction == "from-device" else (remote, dev)
                            key = FlowKey(src.packed, dst.packed, direction, proto,
                                          0 if proto == "icmp" else port)
                            if key in seen:
                                out.warnings.append(f"{where}: duplicate of an earlier rule for {key}, skipped")
                                continue
                            seen.add(key)
                            out.rules.append(FlowRule(key, max_pkts, max_bytes, window, (acl.name, ace.name)))

        for dev in ctx.device_addresses:
            if any(acl.address_family == f"ipv{dev.version}" for acl in acls):
                out.default_drops.append(DefaultDrop(dev, direction))
    return out
