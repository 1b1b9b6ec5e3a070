import random
from dataclasses import replace

import pytest

from lldc.errors import ConfigError, FrameError
from lldc.lib.config import Settings
from lldc.nodes import (ClientNode, MsgType, FaultSpec, Session, SessionConfig, Workload, churn_handler,
                        cipher_body, decode_frame, encode_frame, flip_bit, pick_active, run_epoch,
                        run_session, split_cipher_body)
from lldc.simnet import ASSOC, DISASSOC, US_PER_MS, ChurnEvent, Topology

SETTINGS = Settings(group="p256", cell_bits=1024, seed=5)


def session(n=3, m=2, preset="local", workload=None, rounds=40, faults=(), **kw):
    topo = Topology.preset(preset, n, m)
    workload = workload or Workload("scripted", messages=(("client-0", b"hello relay"),))
    return SessionConfig(SETTINGS.with_overrides(**kw), topo, workload, rounds, faults=tuple(faults))


def test_frames_are_checked():
    raw = encode_frame(MsgType.CIPHER, 2, 9, b"body")
    frame = decode_frame(raw)
    assert (frame.type, frame.epoch, frame.round, frame.body) == (MsgType.CIPHER, 2, 9, b"body")
    with pytest.raises(FrameError):
        decode_frame(raw[:5])
    with pytest.raises(FrameError):
        decode_frame(raw + b"x")
    with pytest.raises(FrameError):
        decode_frame(b"\x00\x00" + raw[2:])
    with pytest.raises(FrameError):
        decode_frame(raw[:3] + b"\x63" + raw[4:])


def test_cipher_body_carries_the_tag():
    body = cipher_body(bytes(128), b"tag")
    assert split_cipher_body(body, 128) == (bytes(128), b"tag")
    with pytest.raises(FrameError):
        split_cipher_body(body[:-1], 128)
    with pytest.raises(FrameError):
        split_cipher_body(bytes(10), 128)


def test_fault_specs():
    clients, guards = ["client-0", "client-1"], ["guard-0", "guard-1"]
    assert FaultSpec.parse("disrupt-guard:flip0", clients, guards).entity == "guard-0"
    assert FaultSpec.parse("disrupt-client:flip1", clients, guards).entity == "client-1"
    spec = FaultSpec.parse("client-0:flip-bit=17@9", clients, guards, strategy="refuse")
    assert (spec.fault, spec.bit, spec.round, spec.strategy) == ("flip-bit", 17, 9, "refuse")
    assert spec.hits(9) and not spec.hits(10)
    withhold = FaultSpec.parse("client-1:withhold@3")
    assert withhold.hits(3) and withhold.hits(50) and not withhold.hits(2)
    assert FaultSpec.parse("relay:equivocate-z").fire_round == 4
    for bad in ("client-0", "client-0:melt", "client-0:flip0@x", "client-0:flip-bit=k"):
        with pytest.raises(ConfigError):
            FaultSpec.parse(bad, clients, guards)
    with pytest.raises(ConfigError):
        FaultSpec.parse("client-0:flip0", clients, guards, strategy="bribe")
    with pytest.raises(ConfigError):
        FaultSpec.parse("disrupt-guard:flip0")


def test_flip_bit_counts_from_the_most_significant_bit():
    assert flip_bit(b"\x00\x00", 0) == b"\x80\x00"
    assert flip_bit(b"\x00\x00", 15) == b"\x00\x01"


@pytest.mark.parametrize("mode, event, halt", [
    ("naive", "join", True), ("naive", "leave", True),
    ("abrupt", "join", False), ("abrupt", "leave", True),
    ("graceful", "join", False), ("graceful", "leave", False),
])
def test_churn_plans(mode, event, halt):
    plan = churn_handler(event, mode)
    assert plan.halt is halt
    assert plan.background_setup is not halt


def test_churn_plan_rejects_unknown_input():
    with pytest.raises(ConfigError):
        churn_handler("leave", "lazy")
    with pytest.raises(ConfigError):
        churn_handler("reboot", "naive")


def test_workloads():
    clients = [f"client-{i}" for i in range(20)]
    rng = random.Random(1)
    assert pick_active(clients, Workload("idle"), rng) == set()
    assert len(pick_active(clients, Workload("ping", active_fraction=0.05), rng)) == 1
    assert len(pick_active(clients, Workload("cbr", active_fraction=0.5), rng)) == 10
    scripted = Workload("scripted", messages=(("client-3", b"x"),))
    assert pick_active(clients, scripted, rng) == {"client-3"}
    with pytest.raises(ConfigError):
        Workload("burst")
    with pytest.raises(ConfigError):
        Workload("ping", active_fraction=1.5)


def test_scripted_message_reaches_the_exit():
    result = run_session(session(rounds=30))
    log = result.log
    exits = log[log["event"] == "exit_packet"]
    assert b"hello relay".hex() in exits["detail"].tolist()
    assert result.stop_reason == "round budget"
    assert result.rounds_completed == 30
    assert result.epochs == 1
    assert result.verdicts == []
    done = log[log["event"] == "round_done"]
    assert (done["detail"] == "ok").all()


def test_disrupting_guard_is_excluded():
    fault = FaultSpec.parse("guard-1:flip0", ["client-0", "client-1", "client-2"], ["guard-0", "guard-1"])
    result = run_session(session(rounds=60, faults=[fault]))
    assert result.excluded == ["guard-1"]
    assert [v.kind for v in result.verdicts if v.entity] == ["Excluded"]
    assert result.epochs >= 2


def test_corrupted_kappa_is_excluded():
    fault = FaultSpec.parse("client-2:bad-kappa")
    result = run_session(session(rounds=60, faults=[fault]))
    assert result.excluded == ["client-2"]
    assert result.transcripts[0].kind == "equivocation"


def test_withholding_client_is_dropped_after_a_timeout():
    fault = FaultSpec.parse("client-1:withhold@3")
    result = run_session(session(rounds=40, faults=[fault], workload=Workload("ping", active_fraction=0.4)))
    log = result.log
    assert (log["event"] == "round_timeout").any()
    assert result.epochs >= 2
    assert "client-1" not in result.excluded


def test_one_epoch_statistics():
    stats = run_epoch(session(preset="lan", rounds=20))
    assert stats.rounds == 20
    assert stats.stop_reason == "round budget"
    assert stats.setup_ms > 0
    assert stats.bytes_up > 0 and stats.bytes_down > 0
    assert all(v > 0 for v in stats.round_latency_ms)


def test_epoch_ends_at_churn_and_reports_downtime():
    cfg = replace(session(n=4, preset="lan", workload=Workload("idle"), rounds=100_000, equivocation=False),
                  churn=(ChurnEvent(3_000.0, "client-3", DISASSOC),), duration_ms=8_000.0)
    stats = run_epoch(cfg)
    assert stats.stop_reason == "epoch limit"
    assert stats.rounds > 0
    ((start, end),) = stats.downtime_intervals
    assert start == pytest.approx(0.0)
    assert end == pytest.approx(stats.setup_ms)
    assert stats.downtime_ms == pytest.approx(stats.setup_ms)


def events(log, name):
    return log[log["event"] == name]


def ping_log(load_period):
    return run_session(session(n=10, m=1, preset="lan", workload=Workload("ping", active_fraction=0.1),
                               rounds=300, equivocation=False, load_period=load_period)).log


def test_load_passes_close_the_slots_of_idle_clients():
    log = ping_log(20)
    states = events(log, "load_state")
    assert len(states) >= 3
    assert (states["value"].astype(float) == 1.0).all()
    done = events(log, "round_done")
    after = done[done["seq"] > states["seq"].iloc[0]]
    # pass rounds aside, only the pinging client's slot is scheduled
    assert after["entity"].value_counts(normalize=True).max() > 0.4


def test_load_tuning_lowers_ping_latency():
    tuned = events(ping_log(20), "ping_rtt")["value"].astype(float)
    untuned = events(ping_log(10_000), "ping_rtt")["value"].astype(float)
    assert len(tuned) > 0 and len(untuned) > 0
    assert tuned.mean() < untuned.mean()


def test_relay_sleeps_when_every_slot_closes_and_reopens_a_returning_sender():
    cfg = replace(session(n=4, m=1, preset="lan", workload=Workload("idle"), rounds=100_000,
                          equivocation=False, load_period=10), duration_ms=9_000.0)
    s = Session(cfg)
    late = s.clients["client-3"]
    pushed = 5_000 * US_PER_MS
    s.sim.at(pushed, late.queue.push, late.conn_id, b"late hello")
    log = s.run().log
    before, after = log[log["time_us"] < pushed], log[log["time_us"] >= pushed]
    assert len(events(before, "sleep")) > 0
    assert set(events(before, "load_state")["value"].astype(float)) == {0.0}
    assert b"late hello".hex() in events(after, "exit_packet")["detail"].tolist()
    assert 1.0 in set(events(after, "load_state")["value"].astype(float))


@pytest.mark.parametrize("window", [1, 3])
def test_open_slots_rotate_evenly(window):
    n, k = 4, 5
    log = run_session(session(n=n, m=1, workload=Workload("idle"), rounds=n * k + window, window=window,
                              load_period=10_000, equivocation=False)).log
    owners = events(log, "round_done")["entity"].head(n * k)
    assert len(owners) == n * k
    assert owners.value_counts().to_dict() == {str(slot): k for slot in range(n)}


def test_pipelining_keeps_the_decoded_stream():
    messages = (("client-0", b"first"), ("client-0", b"second"), ("client-1", b"third"))

    def exits(window):
        log = run_session(session(workload=Workload("scripted", messages=messages), window=window)).log
        return events(log, "exit_packet")["detail"].tolist()

    one = exits(1)
    assert sorted(one) == sorted(m.hex() for _, m in messages)
    assert exits(4) == one


def test_every_epoch_derives_fresh_secrets(monkeypatch):
    seen = []
    activate = ClientNode.activate

    def spy(node, epoch):
        activate(node, epoch)
        if node.id == "client-0" and node.state is not None:
            seen.append(node.state)

    monkeypatch.setattr(ClientNode, "activate", spy)
    cfg = replace(session(n=4, preset="lan", workload=Workload("idle"), rounds=100_000, equivocation=False),
                  churn=(ChurnEvent(3_000.0, "client-3", DISASSOC),), duration_ms=8_000.0)
    assert run_session(cfg).epochs == 2
    first, second = seen
    assert (first.epoch, second.epoch) == (1, 2)
    assert not {s.seed for s in first.secrets} & {s.seed for s in second.secrets}
    assert first.r != second.r
    assert first.ephemeral.private != second.ephemeral.private


def slow_client_log(window):
    cfg = session(n=3, m=1, preset="lan", rounds=24, window=window, equivocation=False)
    cfg.topology.links["client-2"] = replace(cfg.topology.links["client-2"], latency_ms=150.0)
    return run_session(cfg).log


@pytest.mark.parametrize("window", [1, 4])
def test_rounds_wait_for_the_slowest_client(window):
    done = events(slow_client_log(window), "round_done")
    assert len(done) >= 24
    assert (done["value"].astype(float) >= 150.0).all()


def test_pipelining_hides_a_slow_client():
    def spacing(window):
        t = events(slow_client_log(window), "round_done")["time_us"]
        return (t.iloc[-1] - t.iloc[0]) / (len(t) - 1)

    assert spacing(4) < spacing(1)


@pytest.mark.parametrize("mode, event, halts", [
    ("naive", ChurnEvent(3_000.0, "client-3", ASSOC), True),
    ("abrupt", ChurnEvent(3_000.0, "client-3", ASSOC), False),
    ("abrupt", ChurnEvent(3_000.0, "client-2", DISASSOC), True),
    ("graceful", ChurnEvent(3_000.0, "client-2", DISASSOC), False),
])
def test_churn_downtime(mode, event, halts):
    present = frozenset({"client-0", "client-1", "client-2"}) if event.kind == ASSOC else None
    cfg = replace(session(n=4, preset="lan", workload=Workload("idle"), rounds=100_000, churn_mode=mode,
                          equivocation=False),
                  churn=(event,), present=present, duration_ms=8_000.0)
    log = run_session(cfg).log
    down = events(log, "downtime")
    down = down[down["detail"] != "initial"]["value"].astype(float).tolist()
    assert len(down) == 1
    if halts:
        setup = events(log, "setup")["value"].astype(float).iloc[-1]
        assert setup > 0
        assert down[0] == pytest.approx(setup)
    else:
        assert down == [0.0]


def test_every_trap_failure_is_queued_for_retransmission():
    faults = [FaultSpec("guard-0", "flip-bit", 5, 3), FaultSpec("guard-1", "flip-bit", 6, 3)]
    s = Session(session(rounds=7, faults=faults, equivocation=False))
    log = s.run().log
    done = events(log, "round_done")
    assert done[done["detail"] == "trap_failed"]["round"].astype(int).tolist() == [5, 6]
    assert sorted(s.relay.ep.failed) == [5, 6]
