import pytest

from lldc.errors import ConfigError, TraceParseError
from lldc.simnet import (ASSOC, DISASSOC, EXIT, RELAY, ChurnEvent, ChurnTrace, Link, Simulator, Topology,
                         anonymity_set_series, merge_windows, replay_churn, simulate,
                         synthetic_cafe_trace, synthetic_population_trace)


def test_presets_build_a_star():
    topo = Topology.preset("lan", 3, 2)
    assert topo.name == "lan_default"
    assert topo.nodes == [RELAY, "client-0", "client-1", "client-2", "guard-0", "guard-1", EXIT]
    assert topo.link("client-1", RELAY).lan
    assert not topo.link(RELAY, "guard-0").lan
    assert topo.rtt_us("client-0") == 20_000
    assert topo.max_rtt_us(topo.guards) == 200_000
    local = Topology.preset("local-guard", 2, 2)
    assert local.rtt_us("guard-0") == 20_000 and local.rtt_us("guard-1") == 200_000
    with pytest.raises(ConfigError):
        Topology.preset("mesh", 2, 1)
    with pytest.raises(ConfigError):
        Topology.preset("lan", 0, 1)
    with pytest.raises(ConfigError):
        topo.link("client-0", "guard-0")


def test_topology_file_overrides(tmp_path):
    path = tmp_path / "topo.yaml"
    path.write_text("preset: vpn\nn: 3\nm: 2\nclient_latency_ms: 5\n", encoding="utf-8")
    topo = Topology.from_file(path)
    assert topo.name == "vpn" and len(topo.clients) == 3
    assert topo.link("client-2", RELAY).latency_ms == 5.0
    assert topo.link("guard-1", RELAY).latency_ms == 100.0
    path.write_text("preset: vpn\nradius: 3\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        Topology.from_file(path)


def test_ping_baseline_is_twice_the_latency():
    assert simulate(Topology.preset("lan", 1, 1), seed=1).metrics["rtt_mean_ms"] == pytest.approx(20.0, abs=0.01)
    assert simulate(Topology.preset("vpn", 1, 1), seed=1).metrics["rtt_mean_ms"] == pytest.approx(200.0, abs=0.01)
    res = simulate(Topology.preset("lan", 1, 1), seed=1, pings=4)
    assert res.metrics["pings"] == 4
    assert (res.log["event"] == "ping_rtt").sum() == 4
    with pytest.raises(ConfigError):
        simulate(Topology.preset("lan", 1, 1), seed=1, source="client-9")


def test_events_run_in_time_order_and_never_in_the_past():
    sim = Simulator(Topology.preset("local", 1, 1), seed=0)
    seen = []
    sim.at(30, lambda: seen.append(("b", sim.now)))
    sim.at(10, lambda: seen.append(("a", sim.now)))
    sim.at(30, lambda: seen.append(("c", sim.now)))
    sim.run(until_us=20)
    assert seen == [("a", 10)]
    assert sim.now == 20
    sim.at(5, lambda: seen.append(("late", sim.now)))
    sim.run()
    assert seen == [("a", 10), ("late", 20), ("b", 30), ("c", 30)]
    assert sim.idle


def test_link_serialization_queues_back_to_back_sends():
    topo = Topology.preset("lan", 1, 1)
    topo.links["client-0"] = Link(1.0, 1.0)
    sim = Simulator(topo, seed=0)
    arrivals = []
    sim.register(RELAY, lambda src, data: arrivals.append(sim.now))
    sim.send("client-0", RELAY, bytes(1000))
    sim.send("client-0", RELAY, bytes(1000))
    sim.run()
    assert arrivals == [9000, 17000]
    assert sim.lan_bytes == 2000 and sim.wan_bytes == 0


def test_broadcast_counts_lan_once_and_wan_per_guard():
    sim = Simulator(Topology.preset("lan", 3, 2), seed=0)
    sim.broadcast(RELAY, ["client-0", "client-1", "client-2", "guard-0", "guard-1"], bytes(100))
    assert sim.lan_bytes == 100
    assert sim.wan_bytes == 200
    assert len(sim.event_log()) == 5


def test_jittered_runs_are_reproducible():
    def run(seed):
        topo = Topology.preset("lan", 2, 1, jitter_ms=3.0)
        sim = Simulator(topo, seed)
        sim.register(RELAY, lambda src, data: sim.record("got", src=src))
        for i in range(20):
            sim.at(i * 100, sim.send, f"client-{i % 2}", RELAY, bytes(10))
        sim.run()
        return sim.event_log()

    assert run(3).equals(run(3))
    assert not run(3)["time_us"].equals(run(4)["time_us"])


def test_cafe_trace_interruption_counts():
    trace = synthetic_cafe_trace(seed=1)
    assert trace.counts() == {"assoc": 222, "disassoc": 32, "assoc_devices": 33, "disassoc_devices": 12}
    assert trace.duration_ms == 240 * 60 * 1000.0
    reports = {s: replay_churn(trace, s, D_s=0.82) for s in ("naive", "abrupt", "graceful")}
    assert reports["naive"].interruptions == 254
    assert reports["abrupt"].interruptions == 32
    assert reports["graceful"].interruptions == 0
    assert reports["graceful"].availability == 1.0
    assert reports["graceful"].max_downtime_s == 0.0
    naive = reports["naive"]
    assert naive.availability == pytest.approx(1.0 - naive.total_downtime_s / naive.total_time_s)
    assert naive.total_downtime_s <= 254 * 0.82 + 1e-9


def test_single_disassociation_downtime():
    trace = ChurnTrace([ChurnEvent(0.0, "d", ASSOC), ChurnEvent(60_000.0, "d", DISASSOC)], 120_000.0)
    report = replay_churn(trace, "abrupt", D_s=0.82)
    assert report.interruptions == 1
    assert report.max_downtime_s == pytest.approx(0.82)
    with pytest.raises(ConfigError):
        replay_churn(trace, "abrupt", D_s=0.0)
    with pytest.raises(ConfigError):
        replay_churn(trace, "lazy", D_s=1.0)


def test_merge_windows():
    assert merge_windows([(5, 7), (0, 2), (1, 3), (3, 4)]) == [(0, 4), (5, 7)]
    assert merge_windows([]) == []


def test_trace_csv_round_trip_and_errors(tmp_path):
    trace = synthetic_cafe_trace(seed=2, duration_ms=600_000.0, n_devices=4, n_assoc=8,
                                 disassoc_counts=(1, 1))
    path = trace.write_csv(tmp_path / "trace.csv")
    back = ChurnTrace.read_csv(path, duration_ms=600_000.0)
    assert back.counts() == trace.counts()

    bad = tmp_path / "bad.csv"
    bad.write_text("t,device,event\n1,a,assoc\n", encoding="utf-8")
    with pytest.raises(TraceParseError) as info:
        ChurnTrace.read_csv(bad)
    assert info.value.line == 1
    bad.write_text("time_ms,device_id,event\n1,a,disassoc\n", encoding="utf-8")
    with pytest.raises(TraceParseError):
        ChurnTrace.read_csv(bad)
    bad.write_text("time_ms,device_id,event\n5,a,assoc\n1,a,disassoc\n", encoding="utf-8")
    with pytest.raises(TraceParseError):
        ChurnTrace.read_csv(bad)
    with pytest.raises(TraceParseError):
        ChurnTrace.read_csv(tmp_path / "missing.csv")


def test_population_trace_stays_within_eight_percent():
    trace = synthetic_population_trace(seed=9)
    df = anonymity_set_series(trace, window_ms=60_000.0)
    assert df["size"].between(46, 54).all()
    assert df["deviation_pct"].abs().max() <= 8.0 + 1e-6
    flat = anonymity_set_series(trace, window_ms=60_000.0, detrend=False)
    assert flat["trend"].nunique() == 1
    with pytest.raises(ConfigError):
        anonymity_set_series(trace, window_ms=0)
