"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/simnet.py
VERSION:    1.6 (Star topology presets + churn replay + anonymity-set series)
================================================================================

ABSTRACT:
    Deterministic discrete-event network simulator.

    - Time base: integer microseconds, one heap-ordered event queue.
    - Star topology around the relay: every client, guard and the exit service
      have one link to the relay (latency, jitter, bandwidth, LAN or WAN).
    - Delivery time = max(now, link busy) + serialization + latency + jitter,
      jitter drawn from the simulation's seeded RNG.
    - Every send and every protocol event lands in one event log
      (pandas.DataFrame); reports are derived views of it.

    Churn side:
    - ChurnTrace CSV `time_ms,device_id,event` (assoc | disassoc).
    - Synthetic cafe trace (222 assoc / 33 devices, 32 disassoc / 12 devices,
      240 min) and a population trace with controlled mean and swing.
    - replay_churn: downtime windows per strategy, merged, availability.
    - anonymity_set_series: associated count per window, linear detrend.

NOTE:
    Simulated figures stand in for a hardware testbed; absolute milliseconds
    are model outputs.
================================================================================
"""
from __future__ import annotations

import heapq
import logging
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from lldc.errors import ConfigError, TraceParseError
from lldc.lib.config import read_key_values

logger = logging.getLogger(__name__)

RELAY = "relay"
EXIT = "exit"
US_PER_MS = 1000

EVENT_COLUMNS = ["seq", "time_us", "event", "src", "dst", "kind", "bytes", "lan_bytes",
                 "wan_bytes", "epoch", "round", "entity", "value", "detail"]

ASSOC = "assoc"
DISASSOC = "disassoc"
STRATEGIES = ("naive", "abrupt", "graceful")


def client_id(i: int) -> str:
    return f"client-{i}"


def guard_id(j: int) -> str:
    return f"guard-{j}"


# =============================================================================
# TOPOLOGY
# =============================================================================
@dataclass(frozen=True)
class Link:
    latency_ms: float
    bandwidth_mbps: float
    jitter_ms: float = 0.0
    lan: bool = True

    @property
    def latency_us(self) -> int:
        return int(round(self.latency_ms * US_PER_MS))

    def serialization_us(self, nbytes: int) -> int:
        # bits / Mbps = microseconds
        return int(round(nbytes * 8 / self.bandwidth_mbps))


PRESETS: dict[str, dict[str, Link]] = {
    "lan_default": {"client": Link(10.0, 100.0), "guard": Link(100.0, 10.0, lan=False)},
    "local_guard": {"client": Link(10.0, 100.0), "guard": Link(100.0, 10.0, lan=False),
                    "local_guard": Link(10.0, 100.0)},
    "vpn": {"client": Link(100.0, 100.0), "guard": Link(100.0, 10.0, lan=False)},
    # zero-latency bench for unit tests
    "local": {"client": Link(0.0, 1e6), "guard": Link(0.0, 1e6, lan=False)},
}
PRESET_ALIASES = {"lan": "lan_default", "local-guard": "local_guard"}


@dataclass
class Topology:
    name: str
    clients: list[str]
    guards: list[str]
    links: dict[str, Link]
    relay: str = RELAY

    @classmethod
    def preset(cls, name: str, n: int, m: int, exit_latency_ms: float = 0.0,
               jitter_ms: float = 0.0) -> "Topology":
        key = PRESET_ALIASES.get(name, name)
        if key not in PRESETS:
            raise ConfigError(f"unknown topology preset {name!r} (known: {sorted(PRESETS)})")
        if n < 1 or m < 1:
            raise ConfigError(f"topology needs n >= 1 and m >= 1 (got n={n}, m={m})")
        p = PRESETS[key]
        clients = [client_id(i) for i in range(n)]
        guards = [guard_id(j) for j in range(m)]
        links = {c: replace(p["client"], jitter_ms=jitter_ms) for c in clients}
        for j, g in enumerate(guards):
            base = p["local_guard"] if (j == 0 and "local_guard" in p) else p["guard"]
            links[g] = replace(base, jitter_ms=jitter_ms)
        links[EXIT] = Link(exit_latency_ms, 1000.0, lan=False)
        return cls(key, clients, guards, links)

    @classmethod
    def from_file(cls, path: str | Path) -> "Topology":
        data = read_key_values(path)
        known = {"preset", "n", "m", "exit_latency_ms", "jitter_ms", "client_latency_ms",
                 "client_bandwidth_mbps", "guard_latency_ms", "guard_bandwidth_mbps"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown topology keys: {', '.join(unknown)}")
        topo = cls.preset(str(data.get("preset", "lan_default")), int(data.get("n", 2)),
                          int(data.get("m", 1)), float(data.get("exit_latency_ms", 0.0)),
                          float(data.get("jitter_ms", 0.0)))
        for role, nodes in (("client", topo.clients), ("guard", topo.guards)):
            lat = data.get(f"{role}_latency_ms")
            bw = data.get(f"{role}_bandwidth_mbps")
            for node in nodes:
                link = topo.links[node]
                topo.links[node] = replace(link,
                                           latency_ms=float(lat) if lat is not None else link.latency_ms,
                                           bandwidth_mbps=float(bw) if bw is not None else link.bandwidth_mbps)
        return topo

    @property
    def nodes(self) -> list[str]:
        return [self.relay, *self.clients, *self.guards, EXIT]

    def link(self, a: str, b: str) -> Link:
        if a == self.relay and b in self.links:
            return self.links[b]
        if b == self.relay and a in self.links:
            return self.links[a]
        raise ConfigError(f"no link between {a} and {b}")

    def rtt_us(self, node: str) -> int:
        return 2 * self.link(self.relay, node).latency_us

    def max_rtt_us(self, nodes: Iterable[str]) -> int:
        return max((self.rtt_us(n) for n in nodes), default=0)


# =============================================================================
# SIMULATOR
# =============================================================================
class Simulator:
    """Single-threaded event loop. Handlers are `fn(src, payload)`."""

    def __init__(self, topology: Topology, seed: int):
        self.topology = topology
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = 0
        self._busy: dict[tuple[str, str], int] = {}
        self._handlers: dict[str, Callable[[str, bytes], None]] = {}
        self._records: list[dict[str, Any]] = []
        self._stopped = False
        self.lan_bytes = 0
        self.wan_bytes = 0

    def register(self, node: str, handler: Callable[[str, bytes], None]) -> None:
        self._handlers[node] = handler

    # --- scheduling -----------------------------------------------------------
    def at(self, time_us: int, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (max(int(time_us), self.now), self._seq, fn, args))

    def after(self, delay_us: int, fn: Callable, *args) -> None:
        self.at(self.now + int(delay_us), fn, *args)

    def stop(self) -> None:
        self._stopped = True

    def run(self, until_us: int | None = None, max_events: int | None = None) -> int:
        self._stopped = False
        handled = 0
        while self._queue and not self._stopped:
            t, _, fn, args = self._queue[0]
            if until_us is not None and t > until_us:
                break
            heapq.heappop(self._queue)
            self.now = t
            fn(*args)
            handled += 1
            if max_events is not None and handled >= max_events:
                break
        if until_us is not None and not self._stopped:
            self.now = max(self.now, until_us)
        return handled

    @property
    def idle(self) -> bool:
        return not self._queue

    # --- links ----------------------------------------------------------------
    def _delay(self, src: str, dst: str, nbytes: int, start: int) -> tuple[int, int]:
        link = self.topology.link(src, dst)
        begin = max(start, self._busy.get((src, dst), 0))
        ser = link.serialization_us(nbytes)
        self._busy[(src, dst)] = begin + ser
        jitter = int(self.rng.uniform(0, link.jitter_ms) * US_PER_MS) if link.jitter_ms > 0 else 0
        return begin + ser + link.latency_us + jitter, ser

    def _count(self, link: Link, nbytes: int) -> tuple[int, int]:
        if link.lan:
            self.lan_bytes += nbytes
            return nbytes, 0
        self.wan_bytes += nbytes
        return 0, nbytes

    def send(self, src: str, dst: str, payload: bytes, kind: str = "", **fields) -> int:
        arrival, _ = self._delay(src, dst, len(payload), self.now)
        lan, wan = self._count(self.topology.link(src, dst), len(payload))
        self.record("send", src=src, dst=dst, kind=kind, bytes=len(payload), lan_bytes=lan,
                    wan_bytes=wan, **fields)
        handler = self._handlers.get(dst)
        if handler is not None:
            self.at(arrival, handler, src, payload)
        return arrival

    def broadcast(self, src: str, dsts: Sequence[str], payloads: bytes | Mapping[str, bytes],
                  kind: str = "", **fields) -> None:
        """LAN broadcast is counted once; WAN destinations each."""
        lan_counted = False
        for dst in dsts:
            payload = payloads if isinstance(payloads, (bytes, bytearray)) else payloads[dst]
            link = self.topology.link(src, dst)
            arrival, _ = self._delay(src, dst, len(payload), self.now)
            if link.lan and lan_counted and isinstance(payloads, (bytes, bytearray)):
                lan, wan = 0, 0
            else:
                lan, wan = self._count(link, len(payload))
                lan_counted = lan_counted or link.lan
            self.record("send", src=src, dst=dst, kind=kind, bytes=len(payload), lan_bytes=lan,
                        wan_bytes=wan, **fields)
            handler = self._handlers.get(dst)
            if handler is not None:
                self.at(arrival, handler, src, bytes(payload))

    def account(self, src: str, dst: str, nbytes: int, kind: str = "", start_us: int | None = None,
                **fields) -> int:
        """Charges a message that is not delivered through a handler (RPC-style
        exchanges); returns its arrival time."""
        arrival, _ = self._delay(src, dst, nbytes, self.now if start_us is None else start_us)
        lan, wan = self._count(self.topology.link(src, dst), nbytes)
        self.record("send", src=src, dst=dst, kind=kind, bytes=nbytes, lan_bytes=lan,
                    wan_bytes=wan, **fields)
        return arrival

    # --- event log ------------------------------------------------------------
    def record(self, event: str, **fields) -> None:
        row = {"seq": len(self._records), "time_us": self.now, "event": event}
        row.update(fields)
        self._records.append(row)

    def event_log(self) -> pd.DataFrame:
        df = pd.DataFrame.from_records(self._records)
        for col in EVENT_COLUMNS:
            if col not in df.columns:
                df[col] = None
        return df[EVENT_COLUMNS]


# =============================================================================
# PING BASELINE
# =============================================================================
@dataclass
class SimulationResult:
    log: pd.DataFrame
    metrics: dict[str, Any]


def simulate(topology: Topology, seed: int, pings: int = 10, payload_bytes: int = 1,
             interval_ms: float = 50.0, source: str | None = None) -> SimulationResult:
    """Plain request/response between one client and the relay, without the
    anonymizer. Gives the latency baseline (twice the one-way latency)."""
    source = source or (topology.clients[0] if topology.clients else "")
    if source not in topology.links:
        raise ConfigError(f"ping source {source!r} is not connected to the relay")
    sim = Simulator(topology, seed)
    sent: dict[int, int] = {}
    rtts: list[float] = []

    def at_relay(src: str, payload: bytes) -> None:
        sim.send(RELAY, src, payload, kind="pong")

    def at_client(src: str, payload: bytes) -> None:
        k = int.from_bytes(payload[:4].ljust(4, b"\x00"), "little")
        rtt_ms = (sim.now - sent[k]) / US_PER_MS
        rtts.append(rtt_ms)
        sim.record("ping_rtt", entity=source, value=rtt_ms, round=k)

    def fire(k: int) -> None:
        sent[k] = sim.now
        body = k.to_bytes(4, "little") + bytes(max(0, payload_bytes - 4))
        sim.send(source, RELAY, body[:max(payload_bytes, 4)], kind="ping")

    sim.register(RELAY, at_relay)
    sim.register(source, at_client)
    for k in range(pings):
        sim.at(int(k * interval_ms * US_PER_MS), fire, k)
    sim.run()
    metrics = {
        "pings": len(rtts),
        "rtt_mean_ms": float(np.mean(rtts)) if rtts else float("nan"),
        "rtt_p50_ms": float(np.percentile(rtts, 50)) if rtts else float("nan"),
        "lan_bytes": sim.lan_bytes,
        "wan_bytes": sim.wan_bytes,
    }
    return SimulationResult(sim.event_log(), metrics)


# =============================================================================
# CHURN TRACES
# =============================================================================
@dataclass(frozen=True)
class ChurnEvent:
    time_ms: float
    device: str
    kind: str


@dataclass
class ChurnTrace:
    events: list[ChurnEvent]
    duration_ms: float

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        online: set[str] = set()
        last = float("-inf")
        for i, ev in enumerate(self.events):
            if ev.kind not in (ASSOC, DISASSOC):
                raise TraceParseError(f"unknown event {ev.kind!r}", line=i + 2)
            if ev.time_ms < last:
                raise TraceParseError("event times must be non-decreasing", line=i + 2)
            last = ev.time_ms
            if ev.kind == ASSOC:
                online.add(ev.device)
            elif ev.device not in online:
                raise TraceParseError(f"{ev.device} disassociates while not associated", line=i + 2)
            else:
                online.discard(ev.device)
        if self.events and self.duration_ms < self.events[-1].time_ms:
            raise TraceParseError("trace duration ends before its last event")

    def counts(self) -> dict[str, int]:
        assoc = [e for e in self.events if e.kind == ASSOC]
        dis = [e for e in self.events if e.kind == DISASSOC]
        return {"assoc": len(assoc), "disassoc": len(dis),
                "assoc_devices": len({e.device for e in assoc}),
                "disassoc_devices": len({e.device for e in dis})}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"time_ms": [e.time_ms for e in self.events],
                             "device_id": [e.device for e in self.events],
                             "event": [e.kind for e in self.events]})

    def write_csv(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(p, index=False)
        return p

    @classmethod
    def read_csv(cls, path: str | Path, duration_ms: float | None = None) -> "ChurnTrace":
        p = Path(path)
        if not p.exists():
            raise TraceParseError(f"trace not found: {p}")
        try:
            df = pd.read_csv(p, dtype=str, keep_default_na=False)
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise TraceParseError(f"{p}: {e}") from e
        expected = ["time_ms", "device_id", "event"]
        if list(df.columns) != expected:
            raise TraceParseError(f"header must be {','.join(expected)}", line=1)
        events = []
        for idx, row in enumerate(df.itertuples(index=False)):
            line = idx + 2
            try:
                t = float(row.time_ms)
            except ValueError as e:
                raise TraceParseError(f"bad time {row.time_ms!r}", line=line) from e
            if not row.device_id:
                raise TraceParseError("empty device id", line=line)
            events.append(ChurnEvent(t, row.device_id, row.event.strip()))
        end = duration_ms if duration_ms is not None else (events[-1].time_ms if events else 0.0)
        return cls(events, end)


def _interleave(sequences: Mapping[str, list[str]], duration_ms: float,
                rng: random.Random) -> list[ChurnEvent]:
    """Random global order that keeps each device's own order."""
    labels = [dev for dev, seq in sequences.items() for _ in seq]
    rng.shuffle(labels)
    times = sorted(rng.uniform(0, duration_ms) for _ in labels)
    cursor = {dev: 0 for dev in sequences}
    events = []
    for t, dev in zip(times, labels):
        kind = sequences[dev][cursor[dev]]
        cursor[dev] += 1
        events.append(ChurnEvent(round(t, 3), dev, kind))
    return events


def synthetic_cafe_trace(seed: int, duration_ms: float = 240 * 60 * 1000.0, n_devices: int = 33,
                         n_assoc: int = 222, disassoc_counts: Sequence[int] = (3,) * 8 + (2,) * 4
                         ) -> ChurnTrace:
    """Summary statistics of a four-hour public hotspot capture."""
    if sum(disassoc_counts) > n_assoc or len(disassoc_counts) > n_devices:
        raise ConfigError("more disassociations than associations")
    rng = random.Random(seed)
    devices = [f"dev-{i:02d}" for i in range(n_devices)]
    base, extra = divmod(n_assoc, n_devices)
    assoc = {d: base + (1 if i < extra else 0) for i, d in enumerate(devices)}
    leavers = rng.sample(devices, len(disassoc_counts))
    sequences: dict[str, list[str]] = {}
    for d in devices:
        k = disassoc_counts[leavers.index(d)] if d in leavers else 0
        if assoc[d] < k:
            raise ConfigError(f"{d} needs at least {k} associations")
        sequences[d] = [ASSOC, DISASSOC] * k + [ASSOC] * (assoc[d] - k)
    return ChurnTrace(_interleave(sequences, duration_ms, rng), duration_ms)


def _bounded_bridge(half: int, swing: int, rng: random.Random) -> list[int]:
    """Palindromic +-1 walk from 0 back to 0, never leaving [-swing, swing]."""
    h = [0]
    for _ in range(half):
        cur = h[-1]
        step = rng.choice((-1, 1))
        if abs(cur + step) > swing:
            step = -step
        h.append(cur + step)
    return h + h[-2::-1]


def synthetic_population_trace(seed: int, mean: int = 50, swing: int = 4, half_steps: int = 30,
                               step_ms: float = 60_000.0) -> ChurnTrace:
    """Membership that wanders around `mean` by at most `swing` devices with
    no linear trend, so detrended deviation stays within swing/mean."""
    if swing >= mean:
        raise ConfigError("swing must be smaller than the mean")
    rng = random.Random(seed)
    w = _bounded_bridge(half_steps, swing, rng)
    neg = [-v for v in w]
    d = w + neg[1:] + neg[1:] + w[1:]
    online: list[str] = [f"dev-{i:03d}" for i in range(mean)]
    offline: list[str] = []
    events = [ChurnEvent(0.0, dev, ASSOC) for dev in online]
    fresh = mean
    for i in range(1, len(d)):
        t = (i - 0.5) * step_ms
        if d[i] > d[i - 1]:
            if offline and rng.random() < 0.5:
                dev = offline.pop(rng.randrange(len(offline)))
            else:
                dev = f"dev-{fresh:03d}"
                fresh += 1
            online.append(dev)
            events.append(ChurnEvent(t, dev, ASSOC))
        else:
            dev = online.pop(rng.randrange(len(online)))
            offline.append(dev)
            events.append(ChurnEvent(t, dev, DISASSOC))
    return ChurnTrace(events, (len(d) - 1) * step_ms)


# =============================================================================
# AVAILABILITY
# =============================================================================
@dataclass(frozen=True)
class AvailabilityReport:
    strategy: str
    interruptions: int
    availability: float
    max_downtime_s: float
    total_downtime_s: float
    total_time_s: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def merge_windows(windows: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for a, b in sorted(windows):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def churn_windows(trace: ChurnTrace, strategy: str, D_s: float) -> list[tuple[float, float]]:
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES} (got {strategy!r})")
    if strategy == "graceful":
        return []
    if D_s <= 0:
        raise ConfigError(f"D must be positive for {strategy} (got {D_s})")
    d_ms = D_s * 1000.0
    hits = trace.events if strategy == "naive" else [e for e in trace.events if e.kind == DISASSOC]
    return [(e.time_ms, e.time_ms + d_ms) for e in hits]


def replay_churn(trace: ChurnTrace, strategy: str, D_s: float) -> AvailabilityReport:
    windows = churn_windows(trace, strategy, D_s)
    merged = merge_windows(windows)
    total_ms = trace.duration_ms
    if merged and total_ms > 0:
        # downtime past the end of the trace is not observed
        merged = [(a, min(b, max(total_ms, a))) for a, b in merged]
    down_ms = sum(b - a for a, b in merged)
    availability = 1.0 - down_ms / total_ms if total_ms > 0 else 1.0
    report = AvailabilityReport(strategy, len(windows), availability,
                                max((b - a for a, b in merged), default=0.0) / 1000.0,
                                down_ms / 1000.0, total_ms / 1000.0)
    logger.info("churn %s: %d interruptions, availability %.5f", strategy, report.interruptions,
                report.availability)
    return report


def anonymity_set_series(trace: ChurnTrace, window_ms: float, detrend: bool = True) -> pd.DataFrame:
    if window_ms <= 0:
        raise ConfigError("window must be positive")
    times = np.arange(0.0, trace.duration_ms + window_ms / 2, window_ms)
    online: set[str] = set()
    sizes = []
    k = 0
    events = trace.events
    for t in times:
        while k < len(events) and events[k].time_ms <= t:
            ev = events[k]
            (online.add if ev.kind == ASSOC else online.discard)(ev.device)
            k += 1
        sizes.append(len(online))
    df = pd.DataFrame({"time_ms": times, "size": np.asarray(sizes, dtype=float)})
    if detrend and len(df) >= 2 and df["size"].nunique() > 1:
        fit = stats.linregress(df["time_ms"], df["size"])
        df["trend"] = fit.intercept + fit.slope * df["time_ms"]
    else:
        df["trend"] = float(df["size"].mean()) if len(df) else 0.0
    df["deviation_pct"] = np.where(df["trend"] > 0, 100.0 * (df["size"] - df["trend"]) / df["trend"], 0.0)
    return df
