"""Ethernet/IPv4/IPv6/TCP/UDP/ICMP header parsing and minimal frame synthesis."""

from __future__ import annotations

import ipaddress
import struct
from functools import partial
from typing import NamedTuple, Optional

from ..compiler import FlowKey
from ..errors import MalformedPacket

ETH_P_IP = 0x0800
ETH_P_IPV6 = 0x86DD
_VLAN_TYPES = (0x8100, 0x88A8)

TCP_SYN = 0x02
TCP_ACK = 0x10

_ETH = struct.Struct("!6s6sH")
_U16 = struct.Struct("!H")
_PORTS = struct.Struct("!HH")
_TCP = struct.Struct("!HH9xB")
_IPV4 = struct.Struct("!B5xHxB2x4s4s")
_IPV6 = struct.Struct("!B5xBx16s16s")

_IPPROTO_NAMES = {6: "tcp", 17: "udp", 1: "icmp", 58: "icmp"}
_V6_EXT_HEADERS = (0, 43, 60)
_L4_MIN = {6: 20, 17: 8, 1: 4, 58: 4}

# IANA "use for experimentation"; stands in for any non-TCP/UDP/ICMP payload
OTHER_PROTO = 253

SRC_MAC = bytes.fromhex("020000000001")
DST_MAC = bytes.fromhex("020000000002")


class ParsedPacket(NamedTuple):
    src: bytes
    dst: bytes
    protocol: str
    src_port: int
    dst_port: int
    length: int
    timestamp: int
    tcp_flags: int = 0

    @property
    def src_address(self):
        return ipaddress.ip_address(self.src)

    @property
    def dst_address(self):
        return ipaddress.ip_address(self.dst)


def parse_headers(frame: bytes, timestamp: int = 0, length: Optional[int] = None) -> ParsedPacket:
    """Decode L2-L4 headers of ``frame``.

    ``length`` overrides the on-wire length when the captured frame is
    shorter (pcap snaplen, synthesized CSV records). Raises MalformedPacket
    on truncation or a non-IP ethertype.
    """
    n = len(frame)
    if n < 14:
        raise MalformedPacket("frame shorter than an Ethernet header")
    ethertype = _U16.unpack_from(frame, 12)[0]
    off = 14
    while ethertype in _VLAN_TYPES:
        if n < off + 4:
            raise MalformedPacket("truncated VLAN tag")
        ethertype = _U16.unpack_from(frame, off + 2)[0]
        off += 4

    fragment = False
    if ethertype == ETH_P_IP:
        if n < off + 20:
            raise MalformedPacket("truncated IPv4 header")
        vihl, frag, proto, src, dst = _IPV4.unpack_from(frame, off)
        ihl = (vihl & 0x0F) * 4
        if vihl >> 4 != 4 or ihl < 20 or n < off + ihl:
            raise MalformedPacket("bad IPv4 header")
        fragment = (frag & 0x1FFF) != 0
        l4 = off + ihl
    elif ethertype == ETH_P_IPV6:
        if n < off + 40:
            raise MalformedPacket("truncated IPv6 header")
        vtc, proto, src, dst = _IPV6.unpack_from(frame, off)
        if vtc >> 4 != 6:
            raise MalformedPacket("bad IPv6 version")
        l4 = off + 40
        while proto in _V6_EXT_HEADERS or proto == 44:
            if n < l4 + 8:
                raise MalformedPacket("truncated IPv6 extension header")
            if proto == 44:
                fragment = fragment or (_U16.unpack_from(frame, l4 + 2)[0] & 0xFFF8) != 0
                proto, l4 = frame[l4], l4 + 8
            else:
                proto, l4 = frame[l4], l4 + (frame[l4 + 1] + 1) * 8
    else:
        raise MalformedPacket(f"unsupported ethertype 0x{ethertype:04x}")

    if length is None:
        length = n
    name = _IPPROTO_NAMES.get(proto)
    if name is None or fragment:
        return _new_packet((src, dst, "other", 0, 0, length, timestamp, 0))
    if n < l4 + _L4_MIN[proto]:
        raise MalformedPacket(f"truncated {name} header")
    if proto == 6:
        sport, dport, flags = _TCP.unpack_from(frame, l4)
        return _new_packet((src, dst, "tcp", sport, dport, length, timestamp, flags))
    if proto == 17:
        sport, dport = _PORTS.unpack_from(frame, l4)
        return _new_packet((src, dst, "udp", sport, dport, length, timestamp, 0))
    return _new_packet((src, dst, "icmp", 0, 0, length, timestamp, 0))


def build_key(pkt: ParsedPacket, direction: str) -> FlowKey:
    src, dst, proto, sport, dport = pkt[:5]
    port = dport if direction == "from-device" else sport
    return _new_key((src, dst, direction, proto, port))


# NamedTuple.__new__ is a Python-level function; building through tuple.__new__
# skips it, which matters on the per-packet path.
_new_packet = partial(tuple.__new__, ParsedPacket)
_new_key = partial(tuple.__new__, FlowKey)


# -- checksums and synthesis ------------------------------------------------


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _pseudo_header(src: bytes, dst: bytes, proto: int, l4_len: int) -> bytes:
    if len(src) == 4:
        return src + dst + struct.pack("!BBH", 0, proto, l4_len)
    return src + dst + struct.pack("!IxxxB", l4_len, proto)


def build_frame(
    src,
    dst,
    protocol: str,
    src_port: int = 0,
    dst_port: int = 0,
    length: int = 0,
    tcp_flags: int = TCP_SYN,
) -> bytes:
    """Build a checksummed Ethernet frame carrying the given 5-tuple.

    The frame is zero-padded up to ``length``; it is never shorter than the
    headers need, so callers track the intended length separately.
    """
    src_b = ipaddress.ip_address(src).packed
    dst_b = ipaddress.ip_address(dst).packed
    v4 = len(src_b) == 4
    if v4 != (len(dst_b) == 4):
        raise ValueError("source and destination address families differ")
    l3_len = 20 if v4 else 40

    if protocol == "tcp":
        proto, l4_min = 6, 20
    elif protocol == "udp":
        proto, l4_min = 17, 8
    elif protocol == "icmp":
        proto, l4_min = (1 if v4 else 58), 8
    elif protocol == "other":
        proto, l4_min = OTHER_PROTO, 0
    else:
        raise ValueError(f"cannot synthesize protocol {protocol!r}")
    payload_len = max(0, length - 14 - l3_len - l4_min)
    l4_len = l4_min + payload_len
    payload = bytes(payload_len)

    if proto == 6:
        l4 = struct.pack("!HHIIBBHHH", src_port, dst_port, 0, 0, 5 << 4, tcp_flags, 65535, 0, 0)
    elif proto == 17:
        l4 = struct.pack("!HHHH", src_port, dst_port, l4_len, 0)
    elif proto == OTHER_PROTO:
        l4 = b""
    else:
        l4 = struct.pack("!BBHHH", 8 if v4 else 128, 0, 0, 0, 0)
    segment = l4 + payload
    if proto != OTHER_PROTO:
        if proto == 1:
            csum = internet_checksum(segment)
        else:
            csum = internet_checksum(_pseudo_header(src_b, dst_b, proto, l4_len) + segment)
            if proto == 17 and csum == 0:
                csum = 0xFFFF
        csum_off = {6: 16, 17: 6}.get(proto, 2)
        segment = segment[:csum_off] + struct.pack("!H", csum) + segment[csum_off + 2:]

    if v4:
        hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + l4_len, 0, 0x4000, 64, proto, 0, src_b, dst_b)
        hdr = hdr[:10] + struct.pack("!H", internet_checksum(hdr)) + hdr[12:]
        ethertype = ETH_P_IP
    else:
        hdr = struct.pack("!IHBB16s16s", 6 << 28, l4_len, proto, 64, src_b, dst_b)
        ethertype = ETH_P_IPV6
    return _ETH.pack(DST_MAC, SRC_MAC, ethertype) + hdr + segment


def rewrite_addresses(frame: bytes, new_src: Optional[bytes], new_dst: Optional[bytes]) -> bytes:
    """Substitute L3 addresses in place and fix the affected checksums.

    The IPv4 header checksum is always recomputed; the TCP/UDP/ICMPv6
    checksum only when the capture holds the whole L4 segment.
    """
    buf = bytearray(frame)
    ethertype = _U16.unpack_from(buf, 12)[0]
    off = 14
    while ethertype in _VLAN_TYPES:
        ethertype = _U16.unpack_from(buf, off + 2)[0]
        off += 4
    if ethertype == ETH_P_IP:
        alen, src_off, ihl = 4, off + 12, (buf[off] & 0x0F) * 4
        proto = buf[off + 9]
        total = _U16.unpack_from(buf, off + 2)[0]
        l4, l4_len = off + ihl, total - ihl
    elif ethertype == ETH_P_IPV6:
        alen, src_off = 16, off + 8
        proto = buf[off + 6]
        l4, l4_len = off + 40, _U16.unpack_from(buf, off + 4)[0]
    else:
        return bytes(frame)
    if new_src is not None:
        buf[src_off:src_off + alen] = new_src
    if new_dst is not None:
        buf[src_off + alen:src_off + 2 * alen] = new_dst
    src, dst = bytes(buf[src_off:src_off + alen]), bytes(buf[src_off + alen:src_off + 2 * alen])

    if ethertype == ETH_P_IP:
        buf[off + 10:off + 12] = b"\x00\x00"
        buf[off + 10:off + 12] = struct.pack("!H", internet_checksum(bytes(buf[off:off + ihl])))
        fragment = (_U16.unpack_from(buf, off + 6)[0] & 0x1FFF) != 0
        if fragment:
            return bytes(buf)
    csum_off = {6: 16, 17: 6, 58: 2}.get(proto)
    if csum_off is None or len(buf) < l4 + l4_len or l4_len < csum_off + 2:
        return bytes(buf)
    if proto == 17 and ethertype == ETH_P_IP and _U16.unpack_from(buf, l4 + 6)[0] == 0:
        return bytes(buf)  # UDP over IPv4 without checksum stays that way
    buf[l4 + csum_off:l4 + csum_off + 2] = b"\x00\x00"
    csum = internet_checksum(_pseudo_header(src, dst, proto, l4_len) + bytes(buf[l4:l4 + l4_len]))
    if proto == 17 and csum == 0:
        csum = 0xFFFF
    buf[l4 + csum_off:l4 + csum_off + 2] = struct.pack("!H", csum)
    return bytes(buf)
