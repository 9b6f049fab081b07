import ipaddress
import json
import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mudguard.compiler import (
    CompiledPolicy,
    DeviceContext,
    FlowKey,
    FlowRule,
    compile_policy,
    load_device_context,
    rate_to_window,
)
from mudguard.errors import CompileError
from mudguard.model import PERIOD_SECONDS, RateLimit, parse_mud_file

DEVICE = "192.168.1.40"
TRUSTED = "198.51.100.7"


def load(fixtures, name):
    return parse_mud_file((fixtures / f"{name}.json").read_bytes())


def ctx(dns=None, addresses=(DEVICE,)):
    return DeviceContext("dev", list(addresses), dns if dns is not None else {"trusted.example.com": [TRUSTED]})


def doc(aces_from, aces_to=(), family="ipv4"):
    def acl(name, aces):
        return {"name": name, "type": f"{family}-acl-type", "aces": {"ace": list(aces)}}
    mud = {"mud-version": 1, "mud-url": "https://example.com/x.json", "last-update": "2024-01-01",
           "is-supported": True,
           "from-device-policy": {"access-lists": {"access-list": [{"name": "fr"}]}}}
    acls = [acl("fr", aces_from)]
    if aces_to:
        mud["to-device-policy"] = {"access-lists": {"access-list": [{"name": "to"}]}}
        acls.append(acl("to", aces_to))
    return parse_mud_file(json.dumps({"ietf-mud:mud": mud, "ietf-access-control-list:acls": {"acl": acls}}))


def ace(name, matches, forwarding="accept", **rates):
    return {"name": name, "matches": matches, "actions": {"forwarding": forwarding, **rates}}


class TestSingleTrustedHost:
    def test_four_policies(self, fixtures):
        policy = compile_policy(load(fixtures, "single-trusted-host"), ctx())
        assert policy.policy_count == 4
        assert len(policy.rules) == 2 and len(policy.default_drops) == 2
        keys = {r.key for r in policy.rules}
        assert keys == {
            FlowKey.of(DEVICE, TRUSTED, "from-device", "tcp", 443),
            FlowKey.of(TRUSTED, DEVICE, "to-device", "tcp", 443),
        }
        assert all(r.max_packets == 0 and r.max_bytes == 0 for r in policy.rules)

    def test_unresolvable_host_fails_whole_file(self, fixtures):
        with pytest.raises(CompileError, match="missing.invalid"):
            compile_policy(load(fixtures, "broken-unresolvable-host"), ctx())


class TestExpansion:
    def test_rates_become_window_limits(self, fixtures):
        dns = json.loads((fixtures / "dns.json").read_text())
        policy = compile_policy(load(fixtures, "appliances-peaks"), ctx(dns))
        assert {(r.max_packets, r.max_bytes) for r in policy.rules} == {(250, 40000)}
        assert all(r.key.port == 0 for r in policy.rules)

    def test_address_product(self):
        mud = doc([ace("a", {"ipv4": {"ietf-acldns:dst-dnsname": "h", "protocol": 17}})])
        policy = compile_policy(mud, ctx({"h": ["10.0.0.1", "10.0.0.2", "10.0.0.3"]},
                                         addresses=("192.168.1.2", "192.168.1.3")))
        assert len(policy.rules) == 6
        assert len({r.key for r in policy.rules}) == 6

    def test_drop_aces_compile_to_nothing(self):
        mud = doc([ace("a", {"ipv4": {"destination-ipv4-network": "10.0.0.1/32", "protocol": 6}}, "drop")])
        assert compile_policy(mud, ctx()).rules == []

    def test_missing_protocol_expands(self):
        mud = doc([ace("a", {"ipv4": {"destination-ipv4-network": "10.0.0.1/32"}})])
        assert sorted(r.key.protocol for r in compile_policy(mud, ctx()).rules) == ["icmp", "tcp", "udp"]

    def test_device_side_port_is_wildcarded(self):
        mud = doc([ace("a", {"ipv4": {"destination-ipv4-network": "10.0.0.1/32", "protocol": 6},
                             "tcp": {"source-port": {"operator": "eq", "port": 5000}}})])
        policy = compile_policy(mud, ctx())
        assert policy.rules[0].key.port == 0
        assert any("wildcard" in w for w in policy.warnings)

    def test_to_device_uses_source_port(self):
        mud = doc([ace("a", {"ipv4": {"destination-ipv4-network": "10.0.0.1/32", "protocol": 6}})],
                  [ace("b", {"ipv4": {"source-ipv4-network": "10.0.0.1/32", "protocol": 6},
                             "tcp": {"source-port": {"operator": "eq", "port": 8883}}})])
        to = [r for r in compile_policy(mud, ctx()).rules if r.key.direction == "to-device"]
        assert to[0].key == FlowKey.of("10.0.0.1", DEVICE, "to-device", "tcp", 8883)

    def test_family_mismatch_skipped(self):
        mud = doc([ace("a", {"ipv6": {"ietf-acldns:dst-dnsname": "h", "protocol": 6}})], family="ipv6")
        policy = compile_policy(mud, ctx({"h": ["2001:db8::1"]}))
        assert policy.rules == [] and policy.warnings

    def test_ipv6(self):
        mud = doc([ace("a", {"ipv6": {"ietf-acldns:dst-dnsname": "h", "protocol": 6}})], family="ipv6")
        policy = compile_policy(mud, ctx({"h": ["2001:db8::1"]}, addresses=("2001:db8::40",)))
        assert policy.rules[0].key == FlowKey.of("2001:db8::40", "2001:db8::1", "from-device", "tcp", 0)

    def test_duplicates_dropped(self):
        m = {"ipv4": {"destination-ipv4-network": "10.0.0.1/32", "protocol": 6}}
        policy = compile_policy(doc([ace("a", m), ace("b", m)]), ctx())
        assert len(policy.rules) == 1
        assert any("duplicate" in w for w in policy.warnings)


class TestRateToWindow:
    @pytest.mark.parametrize("count,period,window,expected", [
        (50, "second", 60, 3000),
        (250, "minute", 60, 250),
        (1, "hour", 60, 1),      # 1/60 of a packet rounds up to one
        (90, "minute", 30, 45),
        (0, "second", 60, 0),
    ])
    def test_examples(self, count, period, window, expected):
        assert rate_to_window(RateLimit(count, period), window) == expected

    def test_absent_rate_is_unlimited(self):
        assert rate_to_window(None, 60) == 0

    @given(st.integers(0, 10**9), st.sampled_from(sorted(PERIOD_SECONDS)), st.integers(1, 86400))
    def test_ceiling(self, count, period, window):
        got = rate_to_window(RateLimit(count, period), window)
        exact = Fraction(count * window, PERIOD_SECONDS[period])
        assert got == math.ceil(exact)
        assert got >= exact and got - exact < 1


class TestKeysAndContexts:
    @given(st.ip_addresses(v=4), st.ip_addresses(v=4), st.sampled_from(["from-device", "to-device"]),
           st.sampled_from(["tcp", "udp", "icmp"]), st.integers(0, 65535),
           st.integers(0, 10**6), st.integers(0, 10**9))
    def test_rule_json_round_trip(self, a, b, d, proto, port, mp, mb):
        rule = FlowRule(FlowKey.of(a, b, d, proto, port), mp, mb, 60, ("acl", "ace"))
        assert FlowRule.from_json(json.loads(json.dumps(rule.to_json()))) == rule

    def test_key_equals_plain_tuple(self):
        k = FlowKey.of("1.2.3.4", "5.6.7.8", "from-device", "tcp", 80)
        assert k == tuple(k) and hash(k) == hash(tuple(k))
        assert k.wildcard().port == 0

    def test_rule_rejects_mixed_families(self):
        with pytest.raises(ValueError):
            FlowRule(FlowKey(ipaddress.ip_address("1.2.3.4").packed, ipaddress.ip_address("::1").packed,
                             "from-device", "tcp", 0))

    def test_context_csv(self, tmp_path):
        p = tmp_path / "ctx.csv"
        p.write_text("device_id,cam\naddress,192.168.1.9\nhost,Cloud.Example.,10.0.0.1\nhost,cloud.example,10.0.0.2\n")
        c = load_device_context(p)
        assert c.device_id == "cam"
        assert c.resolve("cloud.example") == [ipaddress.ip_address("10.0.0.1"), ipaddress.ip_address("10.0.0.2")]

    def test_context_json(self, fixtures):
        c = load_device_context(fixtures / "context-sensor.json")
        assert c.device_addresses == [ipaddress.ip_address(DEVICE)]
        assert c.resolve("TRUSTED.example.com.") == [ipaddress.ip_address(TRUSTED)]

    def test_context_rejects_mixed_family_entry(self):
        with pytest.raises(ValueError):
            DeviceContext("d", [], {"h": ["10.0.0.1", "::1"]})

    def test_compiled_policy_iterates_rules(self):
        p = CompiledPolicy("d", [FlowRule(FlowKey.of("1.1.1.1", "2.2.2.2", "from-device", "udp", 53))])
        assert len(p) == 1 and list(p) == p.rules
