import json
import socket
import threading

import pytest

from mudguard.datapath import Datapath
from mudguard.errors import CompileError, FetchError, FetchTimeout, TableFullError
from mudguard.manager import (
    DEFAULT_CACHE_VALIDITY,
    DeviceEvent,
    FixtureServer,
    MudManager,
    fetch_mud,
    parse_events,
    watch_events,
)


@pytest.fixture
def dns(fixtures):
    return json.loads((fixtures / "dns.json").read_text())


def join(device, name, addr):
    return DeviceEvent("join", device, f"file://fixtures/{name}.json", (addr,))


class CountingFetch:
    def __init__(self):
        self.calls = []

    def __call__(self, url, **kw):
        self.calls.append(url)
        return fetch_mud(url, **kw)


class FakeClock:
    def __init__(self):
        self.now = 1000.0

    def __call__(self):
        return self.now


class TestFetch:
    def test_relative_file_url(self, fixtures, tmp_path):
        expected = (fixtures / "appliances-peaks.json").read_bytes()
        # falls back to the bundled fixtures when base_dir has none
        assert fetch_mud("file://fixtures/appliances-peaks.json", base_dir=tmp_path) == expected
        assert fetch_mud("file://fixtures/appliances-peaks.json", base_dir=fixtures.parent) == expected

    def test_absolute_file_url(self, fixtures):
        path = fixtures / "dns.json"
        assert fetch_mud(path.as_uri()) == path.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FetchError) as info:
            fetch_mud("file://fixtures/nope.json", base_dir=tmp_path)
        assert info.value.status == 404

    def test_http_bytes_equal(self, fixtures):
        with FixtureServer(fixtures) as server:
            body = fetch_mud(f"{server.url}/smarthubs-peaks.json")
        assert body == (fixtures / "smarthubs-peaks.json").read_bytes()

    def test_http_404(self, fixtures):
        with FixtureServer(fixtures) as server, pytest.raises(FetchError) as info:
            fetch_mud(f"{server.url}/missing.json")
        assert info.value.status == 404 and info.value.exit_code == 7

    def test_timeout(self):
        # accepts the connection (via the backlog) but never answers
        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        sock.listen(1)
        host, port = sock.getsockname()
        try:
            with pytest.raises(FetchTimeout):
                fetch_mud(f"http://{host}:{port}/x.json", timeout=0.3)
        finally:
            sock.close()

    def test_unsupported_scheme(self):
        with pytest.raises(FetchError):
            fetch_mud("ftp://example.com/x.json")


class TestJoinLeave:
    def test_single_trusted_host(self, dns):
        mgr = MudManager(dns=dns)
        out = mgr.on_device_event(join("sensor-1", "single-trusted-host", "192.168.1.40"))
        assert (out.status, out.policies, out.rules) == ("installed", 4, 2)
        assert len(mgr.datapath) == 2
        out = mgr.on_device_event(DeviceEvent("leave", "sensor-1"))
        assert (out.status, out.policies, out.rules) == ("removed", 4, 2)
        assert len(mgr.datapath) == 0 and mgr.state.installed == {}

    def test_over_http(self, dns, fixtures):
        mgr = MudManager(dns=dns)
        with FixtureServer(fixtures) as server:
            out = mgr.on_device_event(DeviceEvent("join", "hub", f"{server.url}/smarthubs-peaks.json",
                                                  ("192.168.1.30",)))
        assert out.ok and out.policies == 4
        assert {r.max_packets for r in mgr.state.installed["hub"]} == {1720}

    def test_unknown_leave(self):
        out = MudManager().on_device_event(DeviceEvent("leave", "ghost"))
        assert out.status == "not-found" and out.ok

    def test_rejoin_is_idempotent(self, dns):
        mgr = MudManager(dns=dns)
        ev = join("a", "appliances-peaks", "192.168.1.20")
        mgr.on_device_event(ev)
        keys = mgr.installed_keys()
        second = mgr.on_device_event(ev)
        assert second.cached and mgr.installed_keys() == keys == set(mgr.datapath.keys())

    def test_rejoin_with_new_policy_replaces(self, dns):
        mgr = MudManager(dns=dns)
        mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20"))
        mgr.on_device_event(join("a", "appliances-averages", "192.168.1.20"))
        assert {r.max_packets for r in mgr.state.installed["a"]} == {40}
        assert {mgr.datapath.rule(k).max_packets for k in mgr.datapath.keys()} == {40}

    def test_broken_join_keeps_state(self, dns):
        mgr = MudManager(dns=dns)
        mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20"))
        before = (set(mgr.datapath.keys()), dict(mgr.state.policies))
        out = mgr.on_device_event(join("b", "broken-unresolvable-host", "192.168.1.50"))
        assert out.status == "error" and out.exit_code == CompileError.exit_code
        assert (set(mgr.datapath.keys()), dict(mgr.state.policies)) == before

    def test_fetch_error_reported(self, tmp_path):
        out = MudManager(base_dir=tmp_path).on_device_event(join("x", "absent", "192.168.1.9"))
        assert out.status == "error" and out.exit_code == 7 and "absent" in out.error

    def test_table_full_rolls_back(self, dns):
        dp = Datapath(capacity=3)
        mgr = MudManager(datapath=dp, dns=dns)
        assert mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20")).ok
        out = mgr.on_device_event(join("s", "single-trusted-host", "192.168.1.40"))
        assert out.exit_code == TableFullError.exit_code
        assert set(dp.keys()) == mgr.installed_keys() and len(dp) == 2
        assert "s" not in mgr.state.installed

    def test_replacement_rollback_restores_old_rules(self, dns):
        dp = Datapath(capacity=2)
        mgr = MudManager(datapath=dp, dns=dns)
        mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20"))
        old = {k: dp.rule(k) for k in dp.keys()}
        # a policy needing three entries on a full table fails part way
        out = mgr.on_device_event(DeviceEvent("join", "a", "file://fixtures/single-trusted-host.json",
                                              ("192.168.1.20", "192.168.1.21")))
        assert not out.ok
        assert {k: dp.rule(k) for k in dp.keys()} == old

    def test_key_conflict(self, dns):
        mgr = MudManager(dns=dns)
        mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20"))
        out = mgr.on_device_event(join("b", "appliances-averages", "192.168.1.20"))
        assert out.status == "error" and "belongs to a" in out.error
        assert {r.max_packets for r in mgr.state.installed["a"]} == {250}
        assert {dp_rule.max_packets for dp_rule in map(mgr.datapath.rule, mgr.datapath.keys())} == {250}

    def test_fixture_sequence(self, fixtures, dns):
        mgr = MudManager(dns=dns)
        outcomes = mgr.process(parse_events((fixtures / "events.json").read_text()))
        assert [(o.kind, o.status, o.policies) for o in outcomes] == [
            ("join", "installed", 4), ("join", "installed", 4), ("leave", "removed", 4)]
        assert list(mgr.state.installed) == ["appliance-1"]
        assert set(mgr.datapath.keys()) == mgr.installed_keys()

    def test_coherence_over_random_sequence(self, dns):
        import random
        rng = random.Random(5)
        mgr = MudManager(datapath=Datapath(capacity=7), dns=dns)
        devices = [("a", "appliances-peaks", "192.168.1.20"), ("h", "smarthubs-averages", "192.168.1.30"),
                   ("s", "single-trusted-host", "192.168.1.40"), ("x", "broken-unresolvable-host", "192.168.1.50"),
                   ("a2", "appliances-averages", "192.168.1.20")]
        for _ in range(200):
            d, name, addr = rng.choice(devices)
            ev = join(d, name, addr) if rng.random() < 0.6 else DeviceEvent("leave", d)
            mgr.on_device_event(ev)
            assert set(mgr.datapath.keys()) == mgr.installed_keys()
            owners = [k for rules in mgr.state.installed.values() for k in (r.key for r in rules)]
            assert len(owners) == len(set(owners))


class TestCache:
    def test_hit_skips_fetch(self, dns):
        fetch = CountingFetch()
        mgr = MudManager(dns=dns, fetch=fetch)
        mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20"))
        mgr.on_device_event(DeviceEvent("leave", "a"))
        out = mgr.on_device_event(join("a", "appliances-peaks", "192.168.1.20"))
        assert len(fetch.calls) == 1 and out.cached and out.fetch_ms == 0

    def test_expiry(self, dns):
        fetch, clock = CountingFetch(), FakeClock()
        mgr = MudManager(dns=dns, fetch=fetch, clock=clock)
        ev = join("a", "appliances-peaks", "192.168.1.20")
        mgr.on_device_event(ev)
        clock.now += DEFAULT_CACHE_VALIDITY * 3600 - 1
        assert mgr.on_device_event(ev).cached
        clock.now += 2
        assert not mgr.on_device_event(ev).cached and len(fetch.calls) == 2

    def test_document_validity_wins(self, dns, tmp_path, fixtures):
        doc = json.loads((fixtures / "appliances-peaks.json").read_text())
        doc["ietf-mud:mud"]["cache-validity"] = 1
        (tmp_path / "short.json").write_text(json.dumps(doc))
        fetch, clock = CountingFetch(), FakeClock()
        mgr = MudManager(dns=dns, fetch=fetch, clock=clock, base_dir=tmp_path)
        ev = DeviceEvent("join", "a", "short.json", ("192.168.1.20",))
        mgr.on_device_event(ev)
        clock.now += 3601
        assert not mgr.on_device_event(ev).cached


class TestEvents:
    def test_list_and_lines_agree(self):
        objs = [{"kind": "join", "device_id": "d", "mud_url": "u", "addresses": ["10.0.0.1"]},
                {"kind": "leave", "device_id": "d"}]
        assert parse_events(json.dumps(objs)) == parse_events("\n".join(map(json.dumps, objs)))
        assert parse_events("  ") == []

    @pytest.mark.parametrize("obj", [{"kind": "reboot", "device_id": "d"}, {"kind": "join", "device_id": "d"},
                                     {"kind": "leave", "device_id": ""}])
    def test_invalid(self, obj):
        with pytest.raises(ValueError):
            parse_events(json.dumps([obj]))

    def test_watch_handles_new_entries_only(self, tmp_path, dns):
        path = tmp_path / "events.jsonl"
        mgr, seen = MudManager(dns=dns), []
        path.write_text(json.dumps({"kind": "join", "device_id": "s",
                                    "mud_url": "file://fixtures/single-trusted-host.json",
                                    "addresses": ["192.168.1.40"]}) + "\n")
        watch_events(path, mgr, 0.0, seen.append, max_polls=2)
        assert [o.status for o in seen] == ["installed"]
        with path.open("a") as fh:
            fh.write(json.dumps({"kind": "leave", "device_id": "s"}) + "\n")
        stop = threading.Event()
        t = threading.Thread(target=watch_events, args=(path, mgr, 0.01, seen.append, stop))
        t.start()
        for _ in range(200):
            if len(seen) == 3:
                break
            stop.wait(0.01)
        stop.set()
        t.join()
        # a fresh watcher re-reads from the top: the join is a re-install, then the leave
        assert [o.status for o in seen] == ["installed", "installed", "removed"]
        assert len(mgr.datapath) == 0
