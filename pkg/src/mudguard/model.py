"""Extended MUD document model: containers, ACLs, ACEs and rate-limited actions.

Documents use the RFC 8520 JSON layout. Two extra keys, ``packet-rate`` and
``byte-rate``, may appear next to ``forwarding`` inside an ACE's ``actions``
object. Keys this module does not understand are kept in ``extra`` mappings
and written back out on serialization.
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .errors import MudParseError, MudValidationError, RateGrammarError

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

PERIOD_SECONDS = {"second": 1, "minute": 60, "hour": 3600, "day": 86400}
_MULTIPLIERS = {"": 1, "kb": 1000, "mb": 1000000}
_RATE_RE = re.compile(r"^\s*(\d+)\s*(kb|mb)?\s*/\s*([a-z]+)\s*$", re.IGNORECASE)

MUD_KEY = "ietf-mud:mud"
ACLS_KEY = "ietf-access-control-list:acls"

_PROTO_NUMBERS = {"tcp": 6, "udp": 17}
_ICMP_NUMBERS = {"ipv4": 1, "ipv6": 58}
_ACL_TYPES = {"ipv4-acl-type": "ipv4", "ipv6-acl-type": "ipv6", "ipv4": "ipv4", "ipv6": "ipv6"}


@dataclass(frozen=True)
class RateLimit:
    """``count`` packets or bytes per ``period``; a count of 0 means no limit."""

    count: int
    period: str

    def __post_init__(self):
        if self.period not in PERIOD_SECONDS:
            raise RateGrammarError(f"unknown rate period {self.period!r}")
        if self.count < 0:
            raise RateGrammarError("rate count must be non-negative")

    @property
    def unlimited(self) -> bool:
        return self.count == 0

    @property
    def period_seconds(self) -> int:
        return PERIOD_SECONDS[self.period]

    def render(self, byte_units: bool = False) -> str:
        count = str(self.count)
        if byte_units and self.count:
            if self.count % 1000000 == 0:
                count = f"{self.count // 1000000}mb"
            elif self.count % 1000 == 0:
                count = f"{self.count // 1000}kb"
        return f"{count}/{self.period}"

    def __str__(self) -> str:
        return self.render()


def parse_rate(text: str) -> RateLimit:
    """Parse ``<count>[kb|mb]/<period>``; kb and mb are decimal multipliers."""
    if not isinstance(text, str):
        raise RateGrammarError(f"rate must be a string, got {type(text).__name__}")
    m = _RATE_RE.match(text)
    if not m:
        raise RateGrammarError(f"malformed rate {text!r}; expected <count>[kb|mb]/<period>")
    count, suffix, period = m.group(1), (m.group(2) or "").lower(), m.group(3).lower()
    if period not in PERIOD_SECONDS:
        raise RateGrammarError(f"unknown rate period {period!r} in {text!r}")
    return RateLimit(int(count) * _MULTIPLIERS[suffix], period)


@dataclass(frozen=True)
class MatchCriteria:
    dns_name: Optional[str] = None
    # which endpoint the DNS name constrains: "source" or "destination"
    dns_endpoint: Optional[str] = None
    src_address: Optional[IPAddress] = None
    dst_address: Optional[IPAddress] = None
    protocol: Optional[str] = None
    port: Optional[int] = None
    port_role: Optional[str] = None
    direction_initiated: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dns_name is not None and self.dns_endpoint not in ("source", "destination"):
            raise MudValidationError("dns_name needs dns_endpoint 'source' or 'destination'")
        if self.dns_endpoint == "source" and self.src_address is not None:
            raise MudValidationError("source endpoint has both a DNS name and a literal address")
        if self.dns_endpoint == "destination" and self.dst_address is not None:
            raise MudValidationError("destination endpoint has both a DNS name and a literal address")
        if self.protocol not in (None, "tcp", "udp", "icmp"):
            raise MudValidationError(f"unsupported protocol {self.protocol!r}")
        if self.port is not None:
            if self.protocol not in ("tcp", "udp"):
                raise MudValidationError("a port match requires protocol tcp or udp")
            if not 0 <= self.port <= 65535:
                raise MudValidationError(f"port {self.port} out of range")
            if self.port_role not in ("source", "destination"):
                raise MudValidationError("port_role must be 'source' or 'destination'")
        if self.direction_initiated not in (None, "from-device", "to-device"):
            raise MudValidationError(f"bad direction-initiated {self.direction_initiated!r}")

    @property
    def family(self) -> Optional[str]:
        for addr in (self.src_address, self.dst_address):
            if addr is not None:
                return f"ipv{addr.version}"
        return None


@dataclass(frozen=True)
class ActionGroup:
    forwarding: str
    packet_rate: Optional[RateLimit] = None
    byte_rate: Optional[RateLimit] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.forwarding not in ("accept", "drop"):
            raise MudValidationError(f"forwarding must be accept or drop, got {self.forwarding!r}")


@dataclass(frozen=True)
class Ace:
    name: str
    matches: MatchCriteria
    actions: ActionGroup
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Acl:
    name: str
    address_family: str
    aces: tuple[Ace, ...] = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.address_family not in ("ipv4", "ipv6"):
            raise MudValidationError(f"ACL {self.name!r}: bad address family {self.address_family!r}")
        seen = set()
        for ace in self.aces:
            if ace.name in seen:
                raise MudValidationError(f"ACL {self.name!r}: duplicate ACE name {ace.name!r}")
            seen.add(ace.name)
            fam = ace.matches.family
            if fam is not None and fam != self.address_family:
                raise MudValidationError(
                    f"ACL {self.name!r}: ACE {ace.name!r} matches {fam} in a {self.address_family} ACL"
                )


@dataclass(frozen=True)
class MudFile:
    mud_version: int
    mud_url: str
    last_update: str
    is_supported: bool
    from_device_policy: tuple[str, ...] = ()
    to_device_policy: tuple[str, ...] = ()
    acls: tuple[Acl, ...] = ()
    cache_validity: Optional[int] = None
    system_info: Optional[str] = None
    extra: dict = field(default_factory=dict)
    document_extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.mud_version, int) or self.mud_version < 1:
            raise MudValidationError(f"mud-version must be an integer >= 1, got {self.mud_version!r}")
        names = [acl.name for acl in self.acls]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise MudValidationError(f"duplicate ACL names: {sorted(dupes)}")
        for ref in (*self.from_device_policy, *self.to_device_policy):
            if ref not in names:
                raise MudValidationError(f"policy references unknown ACL {ref!r}")

    def acl(self, name: str) -> Acl:
        for acl in self.acls:
            if acl.name == name:
                return acl
        raise KeyError(name)

    def policy_acls(self, direction: str) -> list[Acl]:
        names = self.from_device_policy if direction == "from-device" else self.to_device_policy
        return [self.acl(n) for n in names]


# -- parsing ---------------------------------------------------------------


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise MudValidationError(f"{where}: missing required key {key!r}")
    return obj[key]


def _as_dict(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise MudValidationError(f"{where}: expected an object")
    return value


def _leftover(obj: dict, known) -> dict:
    return {k: v for k, v in obj.items() if k not in known}


def _parse_policy(value, where: str) -> tuple[str, ...]:
    value = _as_dict(value, where)
    lists = _as_dict(value.get("access-lists", {}), where)
    entries = lists.get("access-list", [])
    if not isinstance(entries, list):
        raise MudValidationError(f"{where}: access-list must be a list")
    return tuple(str(_require(_as_dict(e, where), "name", where)) for e in entries)


def _parse_address(text: str, where: str) -> IPAddress:
    try:
        net = ipaddress.ip_network(text, strict=True)
    except ValueError as exc:
        raise MudValidationError(f"{where}: bad address {text!r}: {exc}") from None
    if net.num_addresses != 1:
        raise MudValidationError(f"{where}: only host addresses are supported, got {text!r}")
    return net.network_address


def _parse_port(value, where: str) -> int:
    value = _as_dict(value, where)
    op = value.get("operator", "eq")
    if op != "eq" or "port" not in value:
        raise MudValidationError(f"{where}: only single-port 'eq' matches are supported")
    return int(value["port"])


def _parse_matches(raw: dict, family: str, where: str) -> MatchCriteria:
    raw = _as_dict(raw, where)
    kw: dict[str, Any] = {}
    extra: dict[str, Any] = {}
    protocol = None

    for l3 in ("ipv4", "ipv6"):
        if l3 not in raw:
            continue
        if l3 != family:
            raise MudValidationError(f"{where}: {l3} match inside a {family} ACL")
        block = _as_dict(raw[l3], where)
        for end in ("src", "dst"):
            name = block.get(f"ietf-acldns:{end}-dnsname")
            if name is not None:
                if "dns_name" in kw:
                    raise MudValidationError(f"{where}: only one DNS name per ACE is supported")
                kw["dns_name"] = name
                kw["dns_endpoint"] = "source" if end == "src" else "destination"
        for end, key in (("src", "source"), ("dst", "destination")):
            net = block.get(f"{key}-{l3}-network")
            if net is not None:
                kw[f"{end}_address"] = _parse_address(net, where)
        if "protocol" in block:
            proto = block["protocol"]
            if isinstance(proto, str):
                protocol = proto.lower()
            elif proto == _ICMP_NUMBERS[l3]:
                protocol = "icmp"
            else:
                protocol = {v: k for k, v in _PROTO_NUMBERS.items()}.get(proto)
                if protocol is None:
                    raise MudValidationError(f"{where}: unsupported protocol number {proto}")
        known = {
            "ietf-acldns:src-dnsname", "ietf-acldns:dst-dnsname", "protocol",
            f"source-{l3}-network", f"destination-{l3}-network",
        }
        rest = _leftover(block, known)
        if rest:
            extra[l3] = rest

    for l4 in ("tcp", "udp", "icmp"):
        if l4 not in raw:
            continue
        if protocol not in (None, l4):
            raise MudValidationError(f"{where}: {l4} block contradicts protocol {protocol}")
        protocol = l4
        block = _as_dict(raw[l4], where)
        for key, role in (("source-port", "source"), ("destination-port", "destination")):
            if key in block:
                if "port" in kw:
                    raise MudValidationError(f"{where}: only one port match per ACE is supported")
                kw["port"] = _parse_port(block[key], where)
                kw["port_role"] = role
        if "ietf-mud:direction-initiated" in block:
            kw["direction_initiated"] = block["ietf-mud:direction-initiated"]
        rest = _leftover(block, {"source-port", "destination-port", "ietf-mud:direction-initiated"})
        if rest:
            extra[l4] = rest

    extra.update(_leftover(raw, {"ipv4", "ipv6", "tcp", "udp", "icmp"}))
    return MatchCriteria(protocol=protocol, extra=extra, **kw)


def _parse_actions(raw: dict, where: str) -> ActionGroup:
    raw = _as_dict(raw, where)
    forwarding = str(_require(raw, "forwarding", where)).lower()
    if forwarding == "reject":
        forwarding = "drop"
    packet_rate = parse_rate(raw["packet-rate"]) if "packet-rate" in raw else None
    byte_rate = parse_rate(raw["byte-rate"]) if "byte-rate" in raw else None
    extra = _leftover(raw, {"forwarding", "packet-rate", "byte-rate"})
    return ActionGroup(forwarding, packet_rate, byte_rate, extra)


def _parse_acl(raw: dict) -> Acl:
    raw = _as_dict(raw, "acl")
    name = str(_require(raw, "name", "acl"))
    where = f"acl {name!r}"
    acl_type = raw.get("type", "ipv4-acl-type")
    family = _ACL_TYPES.get(acl_type)
    if family is None:
        raise MudValidationError(f"{where}: unsupported ACL type {acl_type!r}")
    aces_raw = _as_dict(raw.get("aces", {}), where).get("ace", [])
    aces = []
    for ace_raw in aces_raw:
        ace_raw = _as_dict(ace_raw, where)
        ace_name = str(_require(ace_raw, "name", where))
        ace_where = f"{where} ace {ace_name!r}"
        aces.append(Ace(
            name=ace_name,
            matches=_parse_matches(ace_raw.get("matches", {}), family, ace_where),
            actions=_parse_actions(_require(ace_raw, "actions", ace_where), ace_where),
            extra=_leftover(ace_raw, {"name", "matches", "actions"}),
        ))
    extra = _leftover(raw, {"name", "type", "aces"})
    rest = _leftover(_as_dict(raw.get("aces", {}), where), {"ace"})
    if rest:
        extra["aces"] = rest
    return Acl(name, family, tuple(aces), extra)


def parse_mud_file(text: Union[str, bytes]) -> MudFile:
    """Parse and validate an extended MUD document."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MudParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise MudParseError(exc.msg, offset) from None

    doc = _as_dict(doc, "document")
    mud = _as_dict(_require(doc, MUD_KEY, "document"), MUD_KEY)
    acls_raw = _as_dict(doc.get(ACLS_KEY, {}), ACLS_KEY).get("acl", [])
    if not isinstance(acls_raw, list):
        raise MudValidationError(f"{ACLS_KEY}: acl must be a list")

    known = {
        "mud-version", "mud-url", "last-update", "cache-validity", "is-supported",
        "systeminfo", "from-device-policy", "to-device-policy",
    }
    doc_extra = _leftover(doc, {MUD_KEY, ACLS_KEY})
    acl_container_rest = _leftover(_as_dict(doc.get(ACLS_KEY, {}), ACLS_KEY), {"acl"})
    if acl_container_rest:
        doc_extra[ACLS_KEY] = acl_container_rest
    return MudFile(
        mud_version=_require(mud, "mud-version", MUD_KEY),
        mud_url=str(_require(mud, "mud-url", MUD_KEY)),
        last_update=str(_require(mud, "last-update", MUD_KEY)),
        is_supported=bool(_require(mud, "is-supported", MUD_KEY)),
        from_device_policy=_parse_policy(mud.get("from-device-policy", {}), "from-device-policy"),
        to_device_policy=_parse_policy(mud.get("to-device-policy", {}), "to-device-policy"),
        acls=tuple(_parse_acl(a) for a in acls_raw),
        cache_validity=mud.get("cache-validity"),
        system_info=mud.get("systeminfo"),
        extra=_leftover(mud, known),
        document_extra=doc_extra,
    )


# -- serialization ---------------------------------------------------------


def _merge(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _matches_to_json(m: MatchCriteria, family: str) -> dict:
    out: dict[str, Any] = {}
    l3: dict[str, Any] = {}
    if m.dns_name is not None:
        end = "src" if m.dns_endpoint == "source" else "dst"
        l3[f"ietf-acldns:{end}-dnsname"] = m.dns_name
    if m.src_address is not None:
        l3[f"source-{family}-network"] = f"{m.src_address}/{m.src_address.max_prefixlen}"
    if m.dst_address is not None:
        l3[f"destination-{family}-network"] = f"{m.dst_address}/{m.dst_address.max_prefixlen}"
    if m.protocol is not None:
        l3["protocol"] = _ICMP_NUMBERS[family] if m.protocol == "icmp" else _PROTO_NUMBERS[m.protocol]
    if l3 or family in m.extra:
        out[family] = l3
    if m.protocol in ("tcp", "udp"):
        l4: dict[str, Any] = {}
        if m.direction_initiated is not None:
            l4["ietf-mud:direction-initiated"] = m.direction_initiated
        if m.port is not None:
            l4[f"{m.port_role}-port"] = {"operator": "eq", "port": m.port}
        if l4 or m.protocol in m.extra:
            out[m.protocol] = l4
    return _merge(out, json.loads(json.dumps(m.extra)))


def _actions_to_json(a: ActionGroup) -> dict:
    out: dict[str, Any] = {}
    if a.packet_rate is not None:
        out["packet-rate"] = a.packet_rate.render()
    if a.byte_rate is not None:
        out["byte-rate"] = a.byte_rate.render(byte_units=True)
    out["forwarding"] = a.forwarding
    out.update(a.extra)
    return out


def mud_to_dict(mud: MudFile) -> dict:
    container: dict[str, Any] = {
        "mud-version": mud.mud_version,
        "mud-url": mud.mud_url,
        "last-update": mud.last_update,
    }
    if mud.cache_validity is not None:
        container["cache-validity"] = mud.cache_validity
    container["is-supported"] = mud.is_supported
    if mud.system_info is not None:
        container["systeminfo"] = mud.system_info
    for key, names in (("from-device-policy", mud.from_device_policy),
                       ("to-device-policy", mud.to_device_policy)):
        if names:
            container[key] = {"access-lists": {"access-list": [{"name": n} for n in names]}}
    container.update(mud.extra)

    acls = []
    for acl in mud.acls:
        aces = []
        for ace in acl.aces:
            entry = {
                "name": ace.name,
                "matches": _matches_to_json(ace.matches, acl.address_family),
                "actions": _actions_to_json(ace.actions),
            }
            entry.update(ace.extra)
            aces.append(entry)
        acl_json = {"name": acl.name, "type": f"{acl.address_family}-acl-type", "aces": {"ace": aces}}
        acls.append(_merge(acl_json, json.loads(json.dumps(acl.extra))))

    doc = {MUD_KEY: container, ACLS_KEY: {"acl": acls}}
    return _merge(doc, json.loads(json.dumps(mud.document_extra)))


def serialize_mud_file(mud: MudFile, indent: Optional[int] = 2) -> str:
    return json.dumps(mud_to_dict(mud), indent=indent)
