"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/harness.py
VERSION:    3.1 (Sweeps on worker processes + blame drills + churn replay)
================================================================================

ABSTRACT:
    Command-line front end over the simulator.

        run          one experiment (optionally with scripted adversaries)
        sweep        mean RTT over a list of client counts, presets, windows
        churn        availability under naive/abrupt/graceful resync
        blame-demo   scripted-adversary matrix or premask Monte-Carlo
        setup-bench  measured setup duration D over (n, m)

    Reports are derived views of the simulator's event log: every number in
    report.json can be recomputed from events.csv.

OUTPUTS (under --out):
    CSV + JSON for every table, XLSX copy with --xlsx.

EXIT CODES:
    0 success, 1 invariant violation, 2 usage / configuration error.
================================================================================
"""
from __future__ import annotations

import argparse
import json
import math
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from tabulate import tabulate

from lldc import crypto
from lldc.crypto import KeyPair
from lldc.dcnet import CONTROL_CONN, client_cipher, data_capacity, guard_cipher, relay_combine, seal_cell
from lldc.disruption import (EXCLUDED, UNTRACEABLE, BitReveal, BlameContext, BlameRequest,
                             BlameTranscript, SecretReveal, Verdict, apply_premask,
                             find_flipped_zero, run_disruption_blame)
from lldc.equivocation import EquivocationResponder
from lldc.errors import BlameInconsistent, ConfigError, InvariantViolation, ProtocolError, SetupFailed
from lldc.lib.config import Settings, env_seed, read_key_values, settings_from_mapping
from lldc.lib.logger import configure_logging, get_logger
from lldc.lib.safeguard import ReportGuard
from lldc.nodes import (FAULTS, REVEAL_STRATEGIES, WORKLOADS, FaultSpec, ScriptedResponder, Session,
                        SessionConfig, Workload, derive_rng, flip_bit, run_session)
from lldc.setup_phase import derive_all_secrets
from lldc.simnet import (ASSOC, STRATEGIES, US_PER_MS, ChurnEvent, ChurnTrace, Topology,
                         anonymity_set_series, replay_churn, synthetic_cafe_trace,
                         synthetic_population_trace)

logger = get_logger(__name__)

VERSION = "3.1"
DEFAULT_OUT = Path("out")
SCRIPTED_MESSAGE = b"hello from lldc"

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2


# =============================================================================
# EXPERIMENT
# =============================================================================
def _int_list(value: Any) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,)
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
    else:
        parts = list(value)
    try:
        return tuple(int(p) for p in parts)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"expected a comma separated list of integers (got {value!r})") from e


def _str_list(value: Any) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(p for p in value.split(",") if p)
    return tuple(str(v) for v in value)


@dataclass(frozen=True)
class Experiment:
    name: str = "run"
    preset: str = "lan_default"
    n: tuple[int, ...] = (10,)
    m: int = 3
    window: int = 1
    workload: str = "ping"
    active_fraction: float = 0.05
    interval_ms: float = 50.0
    payload_bytes: int = 16
    rounds: int = 200
    duration_ms: float | None = None
    seed: int = 42
    adversary: tuple[str, ...] = ()
    strategy: str = "truthful"
    jitter_ms: float = 0.0
    topology_file: str | None = None
    churn_trace: str | None = None
    settings: Settings = field(default_factory=Settings)

    def validate(self) -> "Experiment":
        problems = []
        if not self.n or any(k < 2 for k in self.n):
            problems.append(f"every n must be >= 2 (got {list(self.n)})")
        if self.m < 1:
            problems.append(f"m must be >= 1 (got {self.m})")
        if not 0.0 <= self.active_fraction <= 1.0:
            problems.append(f"active fraction must be in [0, 1] (got {self.active_fraction})")
        if self.workload not in WORKLOADS:
            problems.append(f"workload must be one of {WORKLOADS} (got {self.workload!r})")
        if self.rounds < 1:
            problems.append("rounds must be >= 1")
        if self.window < 1:
            problems.append("window must be >= 1")
        if self.strategy not in REVEAL_STRATEGIES:
            problems.append(f"strategy must be one of {REVEAL_STRATEGIES} (got {self.strategy!r})")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "Experiment":
        """Experiment keys plus any Settings key, as read from a YAML spec."""
        data = dict(data)
        own_names = {f.name for f in fields(cls)} - {"settings"}
        own = {k: data.pop(k) for k in list(data) if k in own_names}
        settings = settings_from_mapping(data)
        if "n" in own:
            own["n"] = _int_list(own["n"])
        if "adversary" in own:
            own["adversary"] = _str_list(own["adversary"])
        try:
            exp = cls(**own, settings=settings)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return replace(exp, seed=env_seed(int(exp.seed))).validate()

    @classmethod
    def from_yaml(cls, path: str | Path, **overrides: Any) -> "Experiment":
        data = read_key_values(path)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(data)

    def topology(self, n: int, preset: str | None = None) -> Topology:
        if self.topology_file:
            return Topology.from_file(self.topology_file)
        return Topology.preset(preset or self.preset, n, self.m, self.settings.exit_latency_ms,
                               self.jitter_ms)

    def workload_spec(self, topo: Topology) -> Workload:
        messages = ((topo.clients[0], SCRIPTED_MESSAGE),) if self.workload == "scripted" else ()
        return Workload(self.workload, self.active_fraction, self.interval_ms, self.payload_bytes,
                        messages)


def trace_to_churn(trace: ChurnTrace, clients: Sequence[str]
                   ) -> tuple[tuple[ChurnEvent, ...], frozenset[str]]:
    """Maps trace devices onto clients in order of first appearance. Devices
    associated at time 0 start present; unmapped clients stay present."""
    order: list[str] = []
    for ev in trace.events:
        if ev.device not in order:
            order.append(ev.device)
    if len(order) > len(clients):
        raise ConfigError(f"trace has {len(order)} devices but only {len(clients)} clients")
    mapping = dict(zip(order, clients))
    first = {}
    for ev in trace.events:
        first.setdefault(ev.device, ev)
    absent = {mapping[d] for d, ev in first.items() if not (ev.kind == ASSOC and ev.time_ms <= 0.0)}
    events = tuple(ChurnEvent(ev.time_ms, mapping[ev.device], ev.kind) for ev in trace.events
                   if not (first[ev.device] is ev and ev.time_ms <= 0.0))
    return events, frozenset(c for c in clients if c not in absent)


def build_session_config(exp: Experiment, n: int, preset: str | None = None,
                         window: int | None = None) -> SessionConfig:
    topo = exp.topology(n, preset)
    settings = exp.settings.with_overrides(seed=exp.seed, window=window or exp.window)
    faults = tuple(FaultSpec.parse(a, topo.clients, topo.guards, exp.strategy) for a in exp.adversary)
    churn: tuple[ChurnEvent, ...] = ()
    present = None
    if exp.churn_trace:
        churn, present = trace_to_churn(ChurnTrace.read_csv(exp.churn_trace), topo.clients)
    return SessionConfig(settings, topo, exp.workload_spec(topo), exp.rounds, exp.duration_ms,
                         faults, churn, present)


# =============================================================================
# REPORT
# =============================================================================
def _stats(values: Sequence[float]) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan, math.nan
    return float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95))


@dataclass
class Report:
    name: str
    preset: str
    n: int
    m: int
    window: int
    seed: int
    rounds: int
    pings: int
    rtt_mean_ms: float
    rtt_p50_ms: float
    rtt_p95_ms: float
    round_mean_ms: float
    round_p50_ms: float
    round_p95_ms: float
    lan_bytes: int
    wan_bytes: int
    payload_bytes: int
    availability: float
    downtime_ms: float
    epochs: int
    setup_ms: float
    verdicts: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    stop_reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {k: _jsonable(v) for k, v in asdict(self).items()}

    def row(self) -> dict[str, Any]:
        d = self.to_dict()
        d["verdicts"] = ";".join(self.verdicts)
        d["excluded"] = ";".join(self.excluded)
        return d


def report_from_log(log: pd.DataFrame, name: str, preset: str, n: int, m: int, window: int,
                    seed: int, stop_reason: str = "") -> Report:
    ev = log["event"]
    pings = log[ev == "ping_rtt"]["value"].astype(float)
    rounds = log[ev == "round_done"]["value"].astype(float)
    sends = log[ev == "send"]
    exits = log[ev == "exit_packet"]
    down = log[(ev == "downtime") & (log["detail"] != "initial")]["value"].astype(float)
    starts = log[ev == "epoch_start"]
    setups = log[ev == "setup"]["value"].astype(float)
    blames = log[ev == "blame"]

    if starts.empty:
        availability = 0.0
    else:
        span_ms = (int(log["time_us"].max()) - int(starts["time_us"].iloc[0])) / US_PER_MS
        availability = 1.0 - float(down.sum()) / span_ms if span_ms > 0 else 1.0
    rtt = _stats(pings.tolist())
    rnd = _stats(rounds.tolist())
    verdicts = [f"{k}({e})" if isinstance(e, str) and e else str(k)
                for k, e in zip(blames["detail"], blames["entity"])]
    excluded = [e for k, e in zip(blames["detail"], blames["entity"]) if k == EXCLUDED and isinstance(e, str) and e]
    return Report(name, preset, n, m, window, seed, len(rounds), len(pings), *rtt, *rnd,
                  int(pd.to_numeric(sends["lan_bytes"], errors="coerce").fillna(0).sum()),
                  int(pd.to_numeric(sends["wan_bytes"], errors="coerce").fillna(0).sum()),
                  int(pd.to_numeric(exits["bytes"], errors="coerce").fillna(0).sum()),
                  float(availability), float(down.sum()), len(starts),
                  float(setups.mean()) if not setups.empty else 0.0,
                  verdicts, excluded, stop_reason)


def run_experiment(exp: Experiment, n: int | None = None, preset: str | None = None,
                   window: int | None = None) -> tuple[Report, pd.DataFrame, list[BlameTranscript]]:
    n = n if n is not None else exp.n[0]
    config = build_session_config(exp, n, preset, window)
    logger.info("running %s: preset=%s n=%d m=%d W=%d", exp.name, config.topology.name, n, exp.m,
                config.settings.window)
    result = run_session(config)
    report = report_from_log(result.log, exp.name, config.topology.name, n, exp.m,
                             config.settings.window, exp.seed, result.stop_reason)
    return report, result.log, result.transcripts


def honest_entities(exp: Experiment, topo: Topology) -> list[str]:
    faulty = {FaultSpec.parse(a, topo.clients, topo.guards).entity for a in exp.adversary}
    return [e for e in (*topo.clients, *topo.guards) if e not in faulty]


def check_run(report: Report, exp: Experiment, topo: Topology, strict: bool = True) -> bool:
    df = pd.DataFrame([report.row()])
    guard = ReportGuard(df, f"run {report.name}")
    guard.check_columns(["rtt_mean_ms", "lan_bytes", "wan_bytes", "availability"])
    guard.check_range(["availability"], 0.0, 1.0)
    if report.preset == "lan_default" and report.n >= report.m:
        guard.check_greater("lan_bytes", "wan_bytes", strict=False)
    excluded = pd.DataFrame({"excluded": report.excluded})
    blame = ReportGuard(excluded, f"blame {report.name}").check_not_excluded(honest_entities(exp, topo))
    guard.errors.extend(blame.errors)
    return guard.validate(strict)


# =============================================================================
# SWEEP
# =============================================================================
def _sweep_job(job: tuple[Experiment, str, int, int]) -> dict[str, Any]:
    exp, preset, n, window = job
    report, _, _ = run_experiment(exp, n=n, preset=preset, window=window)
    return report.row()


def sweep_latency(exp: Experiment, presets: Sequence[str] | None = None,
                  windows: Sequence[int] | None = None, workers: int = 1) -> pd.DataFrame:
    """One simulation per (preset, window, n); rows merge by concatenation."""
    if not exp.n:
        raise ConfigError("sweep needs at least one client count")
    jobs = [(exp, p, n, w) for p in (presets or [exp.preset]) for w in (windows or [exp.window])
            for n in exp.n]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    return pd.concat([pd.DataFrame([r]) for r in rows], ignore_index=True)


def check_sweep(df: pd.DataFrame, strict: bool = True, rel_tolerance: float = 0.05) -> bool:
    guard = ReportGuard(df, "latency sweep")
    guard.check_columns(["preset", "window", "n", "rtt_mean_ms", "lan_bytes", "wan_bytes"])
    tol = rel_tolerance * float(df["rtt_mean_ms"].max()) if len(df) else 0.0
    for (_, _), g in df.groupby(["preset", "window"]):
        sub = ReportGuard(g, "").check_monotone("n", "rtt_mean_ms", tolerance=tol)
        guard.errors.extend(f"{e} [{g['preset'].iloc[0]}, W={g['window'].iloc[0]}]" for e in sub.errors)
    lan = df[(df["preset"] == "lan_default") & (df["n"] >= df["m"])]
    guard.errors.extend(ReportGuard(lan, "").check_greater("lan_bytes", "wan_bytes", strict=False).errors)
    guard.check_nulls()
    return guard.validate(strict)


# =============================================================================
# BLAME DRILLS (in memory, no network)
# =============================================================================
@dataclass
class DrillWorld:
    group: crypto.GroupParams
    relay: KeyPair
    long_term: dict[str, KeyPair]
    ephemerals: dict[str, KeyPair]
    guard_keys: dict[str, KeyPair]
    client_side: list[list[crypto.SharedSecret]]
    guard_side: list[list[crypto.SharedSecret]]
    slot_secret: bytes

    @property
    def client_ids(self) -> list[str]:
        return list(self.ephemerals)

    @property
    def guard_ids(self) -> list[str]:
        return list(self.guard_keys)

    def guard_secrets(self, j: int) -> list[crypto.SharedSecret]:
        return [row[j] for row in self.guard_side]

    def roster_keys(self) -> dict[str, crypto.Element]:
        return ({c: k.public for c, k in self.long_term.items()}
                | {g: k.public for g, k in self.guard_keys.items()})


def build_drill_world(n: int, m: int, seed: int, group: str = "toy101") -> DrillWorld:
    g = crypto.get_group(group)
    rng = derive_rng(seed, "drill/keys")
    relay = crypto.keygen(g, rng)
    clients = [f"client-{i}" for i in range(n)]
    long_term = {c: crypto.keygen(g, rng) for c in clients}
    ephemerals = {c: crypto.keygen(g, rng) for c in clients}
    guard_keys = {f"guard-{j}": crypto.keygen(g, rng) for j in range(m)}
    client_side, guard_side = derive_all_secrets(g, ephemerals, guard_keys)
    return DrillWorld(g, relay, long_term, ephemerals, guard_keys, client_side, guard_side,
                      rng.randbytes(crypto.SECRET_BYTES))


class InMemoryParties:
    """`BlameParties` over plain responder objects."""

    def __init__(self, responders: Mapping[str, EquivocationResponder], roster_keys: Mapping[str, Any]):
        self.responders = dict(responders)
        self.roster_keys = roster_keys

    def bit_reveal(self, entity: str, request: BlameRequest) -> BitReveal | None:
        return self.responders[entity].bit_reveal(request)

    def hash_reveal(self, entity: str, request):
        return self.responders[entity].hash_reveal(request)

    def pair_answer(self, entity: str, evidence: Any) -> SecretReveal | None:
        return self.responders[entity].pair_answer(evidence, self.roster_keys)


def _positions(data: bytes, want: int) -> list[int]:
    return [k for k in range(8 * len(data)) if crypto.bit_at(data, k) == want]


def drill_round(world: DrillWorld, faulty: str, fault: str, round: int, cell_bits: int,
                rng: random.Random, strategy: str = "truthful", premask: bool = False,
                flips: int = 1, bit: int | None = None) -> tuple[BlameTranscript, bool]:
    """One corrupted round and its blame. Returns the transcript and whether
    any flip hit a 0 of the DC-net plaintext.

    Faults: flip0 / flip1 (`flips` bits chosen among the 0s / 1s of the
    plaintext), flip-bit (bit index `bit`, default the first 0 of the plaintext), random-cipher, and blind (`flips`
    bits among the 1s of the unmasked cell, as an attacker that cannot see
    the premask would pick them)."""
    g = world.group
    cell_bytes = cell_bits // 8
    payload = rng.randbytes(data_capacity(cell_bytes))
    plain = seal_cell(rng.randrange(1, CONTROL_CONN), payload, world.slot_secret).encode(cell_bytes)
    x = apply_premask(plain, world.slot_secret, round) if premask else plain

    owner = world.client_ids[0]
    c_ciphers = {c: client_cipher(world.client_side[i], round, c == owner, x, cell_bits, c).bits
                 for i, c in enumerate(world.client_ids)}
    g_ciphers = {gid: guard_cipher(world.guard_secrets(j), round, cell_bits, gid).bits
                 for j, gid in enumerate(world.guard_ids)}
    target = c_ciphers if faulty in c_ciphers else g_ciphers
    honest_bits = target[faulty]

    if fault == "random-cipher":
        target[faulty] = rng.randbytes(cell_bytes)
    else:
        if fault == "flip-bit":
            chosen = [bit % cell_bits if bit is not None else _positions(x, 0)[0]]
        elif fault == "blind":
            ones = _positions(plain, 1)
            chosen = rng.sample(ones, min(flips, len(ones)))
        elif fault in ("flip0", "flip1"):
            pool = _positions(x, 0 if fault == "flip0" else 1)
            chosen = rng.sample(pool, min(flips, len(pool)))
        else:
            raise ConfigError(f"fault {fault!r} has no in-memory drill")
        bits = honest_bits
        for k in chosen:
            bits = flip_bit(bits, k)
        target[faulty] = bits

    disrupted = relay_combine(g_ciphers.values(), c_ciphers.values())
    hits_zero = find_flipped_zero(x, disrupted) is not None

    responders: dict[str, EquivocationResponder] = {}
    for i, cid in enumerate(world.client_ids):
        args = (g, cid, "client", world.long_term[cid], world.ephemerals[cid].private,
                [(gid, kp.public) for gid, kp in world.guard_keys.items()], world.client_side[i],
                world.relay.public, i, derive_rng(rng.getrandbits(32), cid))
        responders[cid] = _responder(args, cid == faulty, strategy, round, target[faulty], cell_bits)
    for j, gid in enumerate(world.guard_ids):
        kp = world.guard_keys[gid]
        args = (g, gid, "guard", kp, kp.private,
                [(cid, e.public) for cid, e in world.ephemerals.items()], world.guard_secrets(j),
                world.relay.public, j, derive_rng(rng.getrandbits(32), gid))
        responders[gid] = _responder(args, gid == faulty, strategy, round, target[faulty], cell_bits)

    ctx = BlameContext(g, world.relay, world.roster_keys(),
                       [(c, e.public) for c, e in world.ephemerals.items()],
                       [(gid, kp.public) for gid, kp in world.guard_keys.items()],
                       c_ciphers, g_ciphers, cell_bits)
    parties = InMemoryParties(responders, world.roster_keys())
    try:
        tr = run_disruption_blame(ctx, parties, round, x, disrupted)
    except BlameInconsistent as e:
        tr = BlameTranscript(round, x, disrupted, verdict=Verdict(UNTRACEABLE, reason=str(e)))
    return tr, hits_zero


def _responder(args: tuple, faulty: bool, strategy: str, round: int, sent: bytes,
               cell_bits: int) -> EquivocationResponder:
    if faulty:
        return ScriptedResponder(*args, strategy=strategy, sent_bits={round: sent}, cell_bits=cell_bits)
    return EquivocationResponder(*args, cell_bits=cell_bits)


MATRIX_FAULTS = ("flip0", "flip-bit", "random-cipher", "flip1")


def blame_matrix(n: int = 3, m: int = 2, seed: int = 42, cell_bits: int = 1024,
                 group: str = "toy101", strategies: Sequence[str] = ("truthful",),
                 round: int = 4) -> pd.DataFrame:
    """Every single-faulty-entity script: each client and guard, each fault
    type, each reveal strategy."""
    world = build_drill_world(n, m, seed, group)
    rows = []
    for strategy in strategies:
        for entity in (*world.client_ids, *world.guard_ids):
            for fault in MATRIX_FAULTS:
                rng = derive_rng(seed, f"drill/{strategy}/{entity}/{fault}")
                tr, hits_zero = drill_round(world, entity, fault, round, cell_bits, rng, strategy)
                v = tr.verdict
                expected = EXCLUDED if hits_zero else UNTRACEABLE
                wrong = v.entity if v.kind == EXCLUDED and v.entity != entity else None
                rows.append({"strategy": strategy, "entity": entity, "fault": fault,
                             "flipped_zero": hits_zero, "position": tr.position, "verdict": v.kind,
                             "convicted": v.entity, "expected": expected,
                             "correct": int(v.kind == expected and (v.kind != EXCLUDED or v.entity == entity)),
                             "wrongly_excluded": wrong})
    return pd.DataFrame(rows)


def premask_trials(trials: int, flips: Sequence[int], premask: bool = True, n: int = 3, m: int = 2,
                   seed: int = 42, cell_bits: int = 1024, group: str = "toy101") -> pd.DataFrame:
    """Fraction of trials with a convicting verdict when the attacker flips b
    bits it believes are 1s."""
    world = build_drill_world(n, m, seed, group)
    faulty = world.client_ids[-1]
    rows = []
    for b in flips:
        rng = derive_rng(seed, f"premask/{b}/{int(premask)}")
        convicting = 0
        for t in range(trials):
            tr, _ = drill_round(world, faulty, "blind", t + 1, cell_bits, rng, premask=premask, flips=b)
            if tr.verdict.convicting:
                if tr.verdict.entity != faulty:
                    raise InvariantViolation(f"trial {t}: honest {tr.verdict.entity} convicted",
                                             entity=tr.verdict.entity)
                convicting += 1
        bound = 1.0 - 2.0 ** -b if premask else 0.0
        rows.append({"flips": b, "premask": premask, "trials": trials, "convicting": convicting,
                     "fraction": convicting / trials if trials else 0.0, "bound": bound,
                     "floor": max(0.0, bound - 0.05)})
    return pd.DataFrame(rows)


# =============================================================================
# CHURN / SETUP BENCH
# =============================================================================
def measure_setup(exp: Experiment, n: int, m: int, preset: str | None = None) -> dict[str, Any]:
    """Runs one Setup at (n, m) on the simulated network and reports D."""
    e = replace(exp, m=m, workload="idle", adversary=(), churn_trace=None)
    session = Session(build_session_config(e, n, preset))
    session.begin_setup(halting=True, reason="bench")
    if not session.setup_durations_ms:
        raise SetupFailed(f"setup did not complete at n={n}, m={m}")
    log = session.sim.event_log()
    sends = log[(log["event"] == "send") & log["kind"].astype(str).str.startswith("setup_")]
    return {"preset": session.topology.name, "n": n, "m": m, "group": e.settings.group,
            "D_ms": session.setup_durations_ms[-1], "messages": len(sends),
            "bytes": int(sends["bytes"].sum())}


def setup_bench(exp: Experiment, ns: Sequence[int], ms: Sequence[int]) -> pd.DataFrame:
    return pd.DataFrame([measure_setup(exp, n, m) for m in ms for n in ns])


def load_trace(trace: str | None, synthetic: str, seed: int) -> ChurnTrace:
    if trace:
        return ChurnTrace.read_csv(trace)
    if synthetic == "cafe":
        return synthetic_cafe_trace(seed)
    if synthetic == "population":
        return synthetic_population_trace(seed)
    raise ConfigError(f"unknown synthetic trace {synthetic!r}")


def churn_analysis(trace: ChurnTrace, strategies: Sequence[str], D_s: float) -> pd.DataFrame:
    return pd.DataFrame([replay_churn(trace, s, D_s).to_dict() for s in strategies])


# =============================================================================
# OUTPUT
# =============================================================================
def _jsonable(v: Any) -> Any:
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return None if math.isnan(float(v)) else float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, bytes):
        return v.hex()
    return v


def _frame_records(df: pd.DataFrame) -> list[dict[str, Any]]:
    return [{k: _jsonable(v) for k, v in row.items()} for row in df.to_dict(orient="records")]


def write_outputs(out_dir: Path, stem: str, summary: Mapping[str, Any] | None,
                  tables: Mapping[str, pd.DataFrame], xlsx: bool = False) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, df in tables.items():
        p = out_dir / f"{name}.csv"
        df.to_csv(p, index=False)
        written.append(p)
    if summary is not None:
        p = out_dir / f"{stem}.json"
        p.write_text(json.dumps(summary, sort_keys=True, indent=2, default=_jsonable) + "\n",
                     encoding="utf-8")
        written.append(p)
    if xlsx:
        p = out_dir / f"{stem}.xlsx"
        with pd.ExcelWriter(p, engine="openpyxl") as writer:
            for name, df in tables.items():
                sheet = name[:31]
                df.to_excel(writer, sheet_name=sheet, index=False)
                worksheet = writer.sheets[sheet]
                for idx, col in enumerate(worksheet.columns):
                    max_len = max([len(str(df.columns[idx]))]
                                  + [len(str(c.value)) for c in col if c.value is not None])
                    worksheet.column_dimensions[col[0].column_letter].width = min(max_len + 2, 60)
        written.append(p)
    for p in written:
        print(f"   -> {p}")
    return written


def _table(df: pd.DataFrame, columns: Sequence[str] | None = None) -> str:
    view = df[[c for c in columns if c in df.columns]] if columns else df
    return tabulate(view, headers="keys", tablefmt="github", showindex=False, floatfmt=".3f")


def _banner(cmd: str) -> None:
    print(f"\n=== LLDC {cmd.upper()} v{VERSION} ===")


# =============================================================================
# CLI
# =============================================================================
SETTING_FLAGS = ("group", "cell_bits", "equivocation", "premask", "churn_mode", "load_period",
                 "sleep_ms", "guard_depth", "exit_latency_ms")
EXPERIMENT_FLAGS = ("name", "preset", "n", "m", "window", "workload", "active_fraction",
                    "interval_ms", "payload_bytes", "rounds", "duration_ms", "seed", "adversary",
                    "strategy", "jitter_ms", "topology_file", "churn_trace")


def experiment_from_args(args: argparse.Namespace) -> Experiment:
    cli = {k: getattr(args, k) for k in (*EXPERIMENT_FLAGS, *SETTING_FLAGS)
           if getattr(args, k, None) is not None}
    if "adversary" in cli and not cli["adversary"]:
        cli.pop("adversary")
    if args.spec:
        return Experiment.from_yaml(args.spec, **cli)
    return Experiment.from_mapping(cli)


def cmd_run(args: argparse.Namespace) -> int:
    _banner("run")
    exp = experiment_from_args(args)
    report, log, transcripts = run_experiment(exp)
    out = Path(args.out) / exp.name
    rounds = log[log["event"] == "round_done"][["epoch", "round", "entity", "value", "detail"]]
    rounds = rounds.rename(columns={"entity": "slot", "value": "latency_ms", "detail": "status"})
    pings = log[log["event"] == "ping_rtt"][["time_us", "entity", "round", "value"]]
    pings = pings.rename(columns={"round": "seq", "value": "rtt_ms"})
    summary = report.to_dict() | {"blame": [t.to_dict() for t in transcripts]}
    print(_table(pd.DataFrame([report.row()]),
                 ["preset", "n", "m", "window", "rounds", "pings", "rtt_mean_ms", "rtt_p95_ms",
                  "lan_bytes", "wan_bytes", "availability", "verdicts"]))
    write_outputs(out, "report", summary,
                  {"events": log, "rounds": rounds, "pings": pings}, args.xlsx)
    check_run(report, exp, exp.topology(exp.n[0]))
    print("[OK] run complete.")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    _banner("sweep")
    exp = experiment_from_args(args)
    presets = list(_str_list(args.presets)) if args.presets else None
    windows = list(_int_list(args.windows)) if args.windows else None
    df = sweep_latency(exp, presets, windows, args.workers)
    print(_table(df, ["preset", "window", "n", "m", "pings", "rtt_mean_ms", "rtt_p50_ms",
                      "rtt_p95_ms", "lan_bytes", "wan_bytes"]))
    write_outputs(Path(args.out) / exp.name, "sweep", {"rows": _frame_records(df)}, {"sweep": df},
                  args.xlsx)
    check_sweep(df, rel_tolerance=args.tolerance)
    print("[OK] sweep complete.")
    return EXIT_OK


def cmd_churn(args: argparse.Namespace) -> int:
    _banner("churn")
    exp = experiment_from_args(args)
    trace = load_trace(args.trace, args.synthetic, exp.seed)
    strategies = list(STRATEGIES) if args.churn_strategy == "all" else [args.churn_strategy]
    if args.measure_d:
        bench = measure_setup(exp, exp.n[0], exp.m)
        D_s = bench["D_ms"] / 1000.0
        print(f"[INFO] measured D = {D_s:.3f} s at n={exp.n[0]}, m={exp.m}")
    elif args.D is not None:
        D_s = float(args.D)
    else:
        raise ConfigError("churn needs --D or --measure-d")
    df = churn_analysis(trace, strategies, D_s)
    df.insert(1, "D_s", D_s)
    series = anonymity_set_series(trace, args.window_ms, detrend=not args.no_detrend)
    counts = trace.counts()
    print(f"[INFO] trace: {counts['assoc']} assoc / {counts['disassoc']} disassoc, "
          f"{trace.duration_ms / 60000:.1f} min")
    print(_table(df))
    tables = {"availability": df, "anonymity_set": series}
    if not args.trace:
        tables["trace"] = trace.to_frame()
    write_outputs(Path(args.out) / "churn", "churn",
                  {"trace": counts, "D_s": D_s, "strategies": _frame_records(df),
                   "max_deviation_pct": float(series["deviation_pct"].abs().max()) if len(series) else 0.0},
                  tables, args.xlsx)
    guard = ReportGuard(df, "churn availability").check_range(["availability"], 0.0, 1.0)
    graceful = df[df["strategy"] == "graceful"]
    guard.errors.extend(ReportGuard(graceful, "").check_range(["interruptions", "max_downtime_s"], 0, 0).errors)
    guard.validate()
    print("[OK] churn analysis complete.")
    return EXIT_OK


def cmd_blame_demo(args: argparse.Namespace) -> int:
    _banner("blame-demo")
    seed = env_seed(args.seed if args.seed is not None else 42)
    out = Path(args.out) / "blame"
    if args.trials:
        df = premask_trials(args.trials, _int_list(args.flips), args.premask, args.n, args.m, seed,
                            args.cell_bits, args.group)
        print(_table(df))
        write_outputs(out, "premask", {"rows": _frame_records(df)}, {"premask": df}, args.xlsx)
        guard = ReportGuard(df, "premask coverage")
        if args.premask:
            guard.check_greater("fraction", "floor", strict=False)
        guard.validate()
    else:
        strategies = list(REVEAL_STRATEGIES) if args.strategy == "all" else [args.strategy]
        df = blame_matrix(args.n, args.m, seed, args.cell_bits, args.group, strategies)
        print(_table(df, ["strategy", "entity", "fault", "flipped_zero", "verdict", "convicted", "correct"]))
        write_outputs(out, "blame_matrix", {"rows": _frame_records(df)}, {"blame_matrix": df}, args.xlsx)
        everyone = sorted(set(df["entity"]))
        guard = ReportGuard(df, "blame matrix").check_range(["correct"], 1, 1)
        guard.check_not_excluded(everyone, column="wrongly_excluded")
        guard.validate()
    print("[OK] blame demo complete.")
    return EXIT_OK


def cmd_setup_bench(args: argparse.Namespace) -> int:
    _banner("setup-bench")
    exp = experiment_from_args(args)
    ms = _int_list(args.ms) if args.ms else (exp.m,)
    df = setup_bench(exp, exp.n, ms)
    print(_table(df))
    write_outputs(Path(args.out) / "setup", "setup_bench", {"rows": _frame_records(df)},
                  {"setup_bench": df}, args.xlsx)
    ReportGuard(df, "setup bench").check_range(["D_ms"], 0.0, math.inf) \
        .check_monotone("n", "D_ms", by="m").validate()
    print("[OK] setup bench complete.")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", help="YAML experiment spec (CLI flags override it)")
    p.add_argument("--out", default=str(DEFAULT_OUT))
    p.add_argument("--xlsx", action="store_true", help="also write an XLSX copy")
    p.add_argument("--log-level", default="INFO")
    p.add_argument("--log-file", help="JSON log file under logs/")


def _add_experiment(p: argparse.ArgumentParser, reveal_strategy: bool = True) -> None:
    p.add_argument("--name")
    p.add_argument("--preset")
    p.add_argument("--n", help="client count or comma separated list")
    p.add_argument("--m", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--workload", choices=WORKLOADS)
    p.add_argument("--active-fraction", dest="active_fraction", type=float)
    p.add_argument("--interval-ms", dest="interval_ms", type=float)
    p.add_argument("--payload-bytes", dest="payload_bytes", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--duration-ms", dest="duration_ms", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--adversary", action="append", default=[],
                   help=f"entity:fault[@round], fault in {', '.join(FAULTS)}")
    if reveal_strategy:
        p.add_argument("--strategy", choices=REVEAL_STRATEGIES)
    p.add_argument("--jitter-ms", dest="jitter_ms", type=float)
    p.add_argument("--topology", dest="topology_file")
    p.add_argument("--churn-trace", dest="churn_trace")
    p.add_argument("--group", choices=("p256", "toy101"))
    p.add_argument("--cell-bits", dest="cell_bits", type=int)
    p.add_argument("--equivocation", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--premask", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--churn-mode", dest="churn_mode", choices=STRATEGIES)
    p.add_argument("--load-period", dest="load_period", type=int)
    p.add_argument("--sleep-ms", dest="sleep_ms", type=int)
    p.add_argument("--guard-depth", dest="guard_depth", type=int)
    p.add_argument("--exit-latency-ms", dest="exit_latency_ms", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lldc", description="LAN DC-net anonymizer simulator and harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_common(run)
    _add_experiment(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="mean RTT over client counts")
    _add_common(sweep)
    _add_experiment(sweep)
    sweep.add_argument("--presets", help="comma separated presets")
    sweep.add_argument("--windows", help="comma separated pipelining windows")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--tolerance", type=float, default=0.05,
                       help="allowed RTT dip between consecutive n, as a fraction of the max RTT")
    sweep.set_defaults(func=cmd_sweep)

    churn = sub.add_parser("churn", help="availability under churn")
    _add_common(churn)
    _add_experiment(churn, reveal_strategy=False)
    churn.add_argument("--trace", help="CSV time_ms,device_id,event")
    churn.add_argument("--synthetic", choices=("cafe", "population"), default="cafe")
    churn.add_argument("--strategy", dest="churn_strategy", default="all",
                       choices=(*STRATEGIES, "all"))
    churn.add_argument("--D", type=float, help="resync duration in seconds")
    churn.add_argument("--measure-d", dest="measure_d", action="store_true")
    churn.add_argument("--window-ms", dest="window_ms", type=float, default=60_000.0)
    churn.add_argument("--no-detrend", dest="no_detrend", action="store_true")
    churn.set_defaults(func=cmd_churn)

    blame = sub.add_parser("blame-demo", help="scripted-adversary blame matrix or premask Monte-Carlo")
    _add_common(blame)
    blame.add_argument("--n", type=int, default=3)
    blame.add_argument("--m", type=int, default=2)
    blame.add_argument("--seed", type=int)
    blame.add_argument("--group", choices=("p256", "toy101"), default="toy101")
    blame.add_argument("--cell-bits", dest="cell_bits", type=int, default=1024)
    blame.add_argument("--strategy", default="all", choices=(*REVEAL_STRATEGIES, "all"))
    blame.add_argument("--trials", type=int, default=0, help="Monte-Carlo trials (0 = matrix)")
    blame.add_argument("--flips", default="1,2,4")
    blame.add_argument("--premask", action=argparse.BooleanOptionalAction, default=True)
    blame.set_defaults(func=cmd_blame_demo)

    bench = sub.add_parser("setup-bench", help="measured setup duration over (n, m)")
    _add_common(bench)
    _add_experiment(bench)
    bench.add_argument("--ms", help="comma separated guard counts")
    bench.set_defaults(func=cmd_setup_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        path = configure_logging(args.log_level, args.log_file)
        if path:
            print(f"[INFO] JSON log: {path}")
        return args.func(args)
    except InvariantViolation as e:
        print(f"[ERROR] {e}")
        return EXIT_INVARIANT
    except (ConfigError, ValueError) as e:
        print(f"[ERROR] {e}")
        return EXIT_USAGE
    except ProtocolError as e:
        logger.error("run aborted: %s", e, extra=e.context)
        print(f"[ERROR] {e}")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
