import json

import pandas as pd
import pytest
from health_check_outputs import run_health_check

from lldc import harness
from lldc.errors import ConfigError
from lldc.harness import (EXIT_INVARIANT, EXIT_OK, EXIT_USAGE, Experiment, blame_matrix, check_sweep,
                          main, measure_setup, premask_trials, run_experiment, trace_to_churn)
from lldc.lib.config import SEED_ENV, Settings
from lldc.nodes import REVEAL_STRATEGIES
from lldc.simnet import ASSOC, DISASSOC, ChurnEvent, ChurnTrace

# equivocation tags cost two P-256 exponentiations per client and round
FAST = Settings(group="p256", cell_bits=1024, equivocation=False, load_period=10_000)


def experiment(**kw):
    base = dict(n=(2,), m=1, rounds=120, seed=7, active_fraction=0.05, settings=FAST)
    base.update(kw)
    return Experiment(**base).validate()


def rtt(exp, **kw):
    report, _, _ = run_experiment(exp, **kw)
    assert report.pings > 0
    return report.rtt_mean_ms


def test_blame_matrix_convicts_exactly_the_faulty_entity():
    df = blame_matrix(3, 2, seed=42, strategies=REVEAL_STRATEGIES)
    assert len(df) == len(REVEAL_STRATEGIES) * 5 * 4
    assert df["correct"].eq(1).all(), df[df["correct"] == 0].to_string()
    assert df["wrongly_excluded"].isna().all()
    flip1 = df[df["fault"] == "flip1"]
    assert (flip1["verdict"] == "Untraceable").all()
    convicting = df[df["fault"] != "flip1"]
    assert (convicting["convicted"] == convicting["entity"]).all()


def test_premask_coverage():
    df = premask_trials(2000, (1, 2, 4))
    assert (df["fraction"] >= df["floor"]).all(), df.to_string()
    assert df["bound"].tolist() == [0.5, 0.75, 0.9375]


def test_without_premask_blind_flips_go_untraced():
    df = premask_trials(50, (1, 2), premask=False)
    assert (df["convicting"] == 0).all()


def test_rtt_grows_with_client_count():
    exp = experiment(rounds=240)
    values = [rtt(exp, n=n) for n in (2, 10, 20)]
    assert values == sorted(values)
    assert values[-1] > values[0]


def test_local_guard_beats_lan_default():
    exp = experiment(n=(4,))
    assert rtt(exp, preset="local_guard") < rtt(exp, preset="lan_default")


GRID = (2, 10, 20, 50, 100)


@pytest.mark.slow
def test_rtt_over_the_full_client_grid():
    lan, local = [], []
    for n in GRID:
        # every pinging client needs several slot turns
        exp = experiment(rounds=max(240, 8 * n))
        lan.append(rtt(exp, n=n, preset="lan_default"))
        local.append(rtt(exp, n=n, preset="local_guard"))
    assert lan == sorted(lan), lan
    assert local == sorted(local), local
    assert all(a < b for a, b in zip(local, lan)), list(zip(GRID, local, lan))


def test_vpn_exceeds_its_baseline():
    assert rtt(experiment(preset="vpn")) > 200.0


def test_pipelining_reduces_latency():
    exp = experiment(n=(4,))
    assert rtt(exp, window=7) < rtt(exp, window=1)


def test_reruns_are_identical():
    exp = experiment(n=(3,), rounds=40)
    first, log1, _ = run_experiment(exp)
    second, log2, _ = run_experiment(exp)
    assert log1.equals(log2)
    assert first.to_dict() == second.to_dict()


def test_sweep_check_tolerates_small_dips():
    df = pd.DataFrame({"preset": ["lan_default"] * 3, "window": [1] * 3, "n": [2, 10, 20],
                       "m": [1] * 3, "rtt_mean_ms": [100.0, 99.0, 150.0],
                       "lan_bytes": [10, 20, 30], "wan_bytes": [1, 2, 3]})
    assert check_sweep(df, strict=False)
    assert not check_sweep(df, strict=False, rel_tolerance=0.0)


def test_experiment_validation_and_env_seed(monkeypatch, tmp_path):
    with pytest.raises(ConfigError):
        Experiment(n=(1,)).validate()
    with pytest.raises(ConfigError):
        Experiment.from_mapping({"n": "2,x"})
    with pytest.raises(ConfigError):
        Experiment.from_mapping({"colour": "red"})
    spec = tmp_path / "exp.yaml"
    spec.write_text("name: small\nn: 2,4\nm: 2\ngroup: toy101\nseed: 3\n", encoding="utf-8")
    monkeypatch.delenv(SEED_ENV, raising=False)
    exp = Experiment.from_yaml(spec, m=1)
    assert (exp.name, exp.n, exp.m, exp.seed, exp.settings.group) == ("small", (2, 4), 1, 3, "toy101")
    monkeypatch.setenv(SEED_ENV, "11")
    assert Experiment.from_yaml(spec).seed == 11


def test_trace_devices_map_onto_clients():
    trace = ChurnTrace([ChurnEvent(0.0, "a", ASSOC), ChurnEvent(5.0, "b", ASSOC),
                        ChurnEvent(9.0, "a", DISASSOC)], 10.0)
    events, present = trace_to_churn(trace, ["client-0", "client-1", "client-2"])
    assert [(e.device, e.kind) for e in events] == [("client-1", ASSOC), ("client-0", DISASSOC)]
    assert present == frozenset({"client-0", "client-2"})
    with pytest.raises(ConfigError):
        trace_to_churn(trace, ["client-0"])


def test_setup_cost_grows_with_clients():
    exp = experiment()
    small = measure_setup(exp, 2, 1, "lan_default")
    large = measure_setup(exp, 6, 1, "lan_default")
    assert 0 < small["D_ms"] < large["D_ms"]
    assert large["messages"] > small["messages"]


def test_cli_run_writes_reports(tmp_path):
    code = main(["run", "--n", "3", "--m", "2", "--preset", "local", "--rounds", "30",
                 "--cell-bits", "1024", "--workload", "scripted", "--out", str(tmp_path)])
    assert code == EXIT_OK
    out = tmp_path / "run"
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["n"] == 3 and report["rounds"] == 30
    assert report["blame"] == []
    assert report["payload_bytes"] > 0
    events = pd.read_csv(out / "events.csv")
    assert (events["event"] == "round_done").sum() == 30


def test_cli_churn_reproduces_interruption_counts(tmp_path):
    assert main(["churn", "--D", "0.82", "--out", str(tmp_path)]) == EXIT_OK
    df = pd.read_csv(tmp_path / "churn" / "availability.csv").set_index("strategy")
    assert df.loc["naive", "interruptions"] == 254
    assert df.loc["abrupt", "interruptions"] == 32
    assert df.loc["graceful", "interruptions"] == 0


def test_cli_blame_demo(tmp_path):
    code = main(["blame-demo", "--n", "2", "--m", "1", "--strategy", "truthful", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "blame" / "blame_matrix.csv").exists()
    assert run_health_check(tmp_path)
    (tmp_path / "blame" / "blame_matrix.json").write_text("{broken", encoding="utf-8")
    assert not run_health_check(tmp_path)


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run", "--n", "1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["churn", "--out", str(tmp_path)]) == EXIT_USAGE

    def broken_matrix(*args, **kw):
        return pd.DataFrame({"strategy": ["truthful"], "entity": ["client-0"], "fault": ["flip0"],
                             "flipped_zero": [True], "verdict": ["NoFault"], "convicted": [None],
                             "correct": [0], "wrongly_excluded": [None]})

    monkeypatch.setattr(harness, "blame_matrix", broken_matrix)
    assert main(["blame-demo", "--out", str(tmp_path)]) == EXIT_INVARIANT
