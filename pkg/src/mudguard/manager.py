"""MUD manager: fetch descriptions, compile them and keep the datapath in sync.

Device join/leave events arrive already extracted (from a JSON file or
stdin); the manager owns every rule it installs and is the only writer to
the datapath's rule table.
"""

from __future__ import annotations

import json
import logging
import socket
import sys
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field
from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterable, Optional

from .compiler import DEFAULT_WINDOW, CompiledPolicy, DeviceContext, FlowKey, FlowRule, compile_policy
from .datapath.table import Datapath
from .errors import FetchError, FetchTimeout, MudGuardError
from .model import MudFile, parse_mud_file

log = logging.getLogger(__name__)

FETCH_TIMEOUT = 10.0
# hours; the default for documents that do not set cache-validity
DEFAULT_CACHE_VALIDITY = 48
BUNDLED_FIXTURES = Path(__file__).resolve().parent / "fixtures"
EVENT_KINDS = ("join", "leave")


def _local_path(url: str, parsed: urllib.parse.ParseResult, base_dir: Path) -> Path:
    if parsed.netloc in ("", "localhost"):
        return Path(urllib.parse.unquote(parsed.path))
    # file://fixtures/x.json names a path relative to base_dir
    rel = Path(urllib.parse.unquote(parsed.netloc + parsed.path))
    path = base_dir / rel
    if not path.exists() and rel.parts[0] == "fixtures":
        path = BUNDLED_FIXTURES.joinpath(*rel.parts[1:])
    return path


def fetch_mud(url: str, timeout: float = FETCH_TIMEOUT, base_dir=None) -> bytes:
    """Return the raw bytes at ``url`` (http, https or file).

    HTTP failures raise FetchError with the status code; a timeout raises
    FetchTimeout. ``base_dir`` anchors relative ``file://`` URLs and plain
    paths (default: the working directory).
    """
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    parsed = urllib.parse.urlparse(url)
    scheme = parsed.scheme.lower()
    if scheme in ("", "file"):
        path = _local_path(url, parsed, base) if scheme else base / url
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise FetchError(f"{url}: no such file {path}", 404) from None
        except OSError as exc:
            raise FetchError(f"{url}: {exc.strerror or exc}") from None
    if scheme not in ("http", "https"):
        raise FetchError(f"{url}: unsupported URL scheme {scheme!r}")
    req = urllib.request.Request(url, headers={"Accept": "application/mud+json, application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        raise FetchError(f"{url}: HTTP {exc.code} {exc.reason}", exc.code) from None
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise FetchTimeout(f"{url}: timed out after {timeout} s") from None
        raise FetchError(f"{url}: {exc.reason}") from None
    except (socket.timeout, TimeoutError):
        raise FetchTimeout(f"{url}: timed out after {timeout} s") from None


@dataclass(frozen=True)
class DeviceEvent:
    kind: str
    device_id: str
    mud_url: Optional[str] = None
    addresses: tuple = ()

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"event kind must be one of {EVENT_KINDS}")
        if not self.device_id:
            raise ValueError("event needs a device_id")
        if self.kind == "join" and not self.mud_url:
            raise ValueError(f"join event for {self.device_id} has no mud_url")
        object.__setattr__(self, "addresses", tuple(self.addresses))

    @classmethod
    def from_json(cls, obj: dict) -> "DeviceEvent":
        return cls(obj["kind"], obj["device_id"], obj.get("mud_url"), obj.get("addresses", ()))


def parse_events(text: str) -> list[DeviceEvent]:
    """Accept a JSON list of events or one JSON object per line."""
    text = text.strip()
    if not text:
        return []
    if text.startswith("["):
        items = json.loads(text)
    else:
        items = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [DeviceEvent.from_json(obj) for obj in items]


@dataclass
class EventOutcome:
    """What one event did. Times are milliseconds, rounded to the microsecond."""

    kind: str
    device_id: str
    status: str
    policies: int = 0
    rules: int = 0
    fetch_ms: float = 0.0
    parse_ms: float = 0.0
    enforce_ms: float = 0.0
    cached: bool = False
    error: Optional[str] = None
    exit_code: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class _CacheEntry:
    mud: MudFile
    fetched_at: float


@dataclass
class ManagerState:
    installed: dict[str, list[FlowRule]] = field(default_factory=dict)
    policies: dict[str, int] = field(default_factory=dict)
    mud_cache: dict[str, _CacheEntry] = field(default_factory=dict)


def _ms(seconds: float) -> float:
    return round(seconds * 1000, 3)


class MudManager:
    """Drives parse, compile and install for joining devices, and removal on leave.

    ``dns`` maps host names to addresses for every device; each event
    supplies the device's own addresses. A failed join leaves the state
    and the datapath exactly as they were.
    """

    def __init__(self, datapath: Optional[Datapath] = None, dns: Optional[dict] = None,
                 window: float = DEFAULT_WINDOW, base_dir=None, timeout: float = FETCH_TIMEOUT,
                 fetch: Callable[..., bytes] = fetch_mud, clock: Callable[[], float] = time.monotonic):
        self.datapath = datapath if datapath is not None else Datapath()
        self.dns = dict(dns or {})
        self.window = window
        self.base_dir = base_dir
        self.timeout = timeout
        self.state = ManagerState()
        self._fetch = fetch
        self._clock = clock
        self._owner: dict[FlowKey, str] = {}

    def _document(self, url: str) -> tuple[MudFile, bool, float, float]:
        """(document, from_cache, fetch seconds, parse seconds)."""
        entry = self.state.mud_cache.get(url)
        now = self._clock()
        if entry is not None:
            hours = entry.mud.cache_validity or DEFAULT_CACHE_VALIDITY
            if now - entry.fetched_at < hours * 3600:
                return entry.mud, True, 0.0, 0.0
        t0 = time.perf_counter()
        raw = self._fetch(url, timeout=self.timeout, base_dir=self.base_dir)
        t1 = time.perf_counter()
        mud = parse_mud_file(raw)
        t2 = time.perf_counter()
        self.state.mud_cache[url] = _CacheEntry(mud, now)
        return mud, False, t1 - t0, t2 - t1

    def on_device_event(self, event: DeviceEvent) -> EventOutcome:
        try:
            if event.kind == "join":
                return self._join(event)
            return self._leave(event)
        except MudGuardError as exc:
            log.error("%s %s: %s", event.kind, event.device_id, exc)
            return EventOutcome(event.kind, event.device_id, "error", error=str(exc),
                                exit_code=exc.exit_code)

    def _join(self, event: DeviceEvent) -> EventOutcome:
        mud, cached, fetch_s, parse_s = self._document(event.mud_url)
        t0 = time.perf_counter()
        ctx = DeviceContext(event.device_id, list(event.addresses), self.dns)
        policy = compile_policy(mud, ctx, self.window)
        for r in policy.rules:
            owner = self._owner.get(r.key)
            if owner is not None and owner != event.device_id:
                return EventOutcome("join", event.device_id, "error",
                                    error=f"rule {r.key} already belongs to {owner}", exit_code=1)
        self._install(event.device_id, policy)
        enforce_s = time.perf_counter() - t0
        for w in policy.warnings:
            log.warning("%s: %s", event.device_id, w)
        return EventOutcome("join", event.device_id, "installed", policy.policy_count,
                            len(policy.rules), _ms(fetch_s), _ms(parse_s), _ms(enforce_s), cached)

    def _install(self, device_id: str, policy: CompiledPolicy) -> None:
        dp = self.datapath
        old = self.state.installed.get(device_id, [])
        new_keys = {r.key for r in policy.rules}
        done: list[FlowRule] = []
        try:
            for r in policy.rules:
                dp.insert_rule(r)
                done.append(r)
        except Exception:
            # put the table back the way it was: drop what was added, restore what was replaced
            for r in done:
                dp.delete_rule(r.key)
            for r in old:
                dp.insert_rule(r)
            raise
        for r in old:
            if r.key not in new_keys:
                dp.delete_rule(r.key)
                self._owner.pop(r.key, None)
        for r in policy.rules:
            self._owner[r.key] = device_id
        self.state.installed[device_id] = list(policy.rules)
        self.state.policies[device_id] = policy.policy_count

    def _leave(self, event: DeviceEvent) -> EventOutcome:
        t0 = time.perf_counter()
        rules = self.state.installed.pop(event.device_id, None)
        if rules is None:
            return EventOutcome("leave", event.device_id, "not-found")
        policies = self.state.policies.pop(event.device_id, 0)
        for r in rules:
            self.datapath.delete_rule(r.key)
            self._owner.pop(r.key, None)
        return EventOutcome("leave", event.device_id, "removed", policies, len(rules),
                            enforce_ms=_ms(time.perf_counter() - t0))

    def process(self, events: Iterable[DeviceEvent]) -> list[EventOutcome]:
        return [self.on_device_event(e) for e in events]

    def installed_keys(self) -> set[FlowKey]:
        return {r.key for rules in self.state.installed.values() for r in rules}


def watch_events(path, manager: MudManager, interval: float,
                 on_outcome: Callable[[EventOutcome], None],
                 stop: Optional[threading.Event] = None, max_polls: Optional[int] = None) -> None:
    """Re-read an events file every ``interval`` seconds, handling only new entries."""
    path = Path(path)
    seen = 0
    polls = 0
    stop = stop or threading.Event()
    while not stop.is_set():
        try:
            events = parse_events(path.read_text())
        except FileNotFoundError:
            events = []
        for e in events[seen:]:
            on_outcome(manager.on_device_event(e))
        seen = max(seen, len(events))
        polls += 1
        if max_polls is not None and polls >= max_polls:
            return
        stop.wait(interval)


# -- fixture file server ----------------------------------------------------


class _FixtureHandler(SimpleHTTPRequestHandler):
    extensions_map = {**SimpleHTTPRequestHandler.extensions_map, ".json": "application/json"}

    def log_message(self, fmt, *args):
        log.debug("fixture server: " + fmt, *args)


class FixtureServer(ThreadingHTTPServer):
    """Plain-HTTP server for a directory of MUD files, for tests and demos."""

    daemon_threads = True

    def __init__(self, directory, port: int = 0, host: str = "127.0.0.1"):
        directory = str(Path(directory).resolve())

        def handler(*args, **kwargs):
            return _FixtureHandler(*args, directory=directory, **kwargs)

        super().__init__((host, port), handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "FixtureServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def read_events_source(source: str) -> list[DeviceEvent]:
    text = sys.stdin.read() if source == "-" else Path(source).read_text()
    return parse_events(text)
