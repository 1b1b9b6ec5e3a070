import pandas as pd
import pytest

from lldc.errors import InvariantViolation
from lldc.lib.safeguard import ReportGuard


def test_clean_report_passes(capsys):
    df = pd.DataFrame({"n": [2, 4, 8], "rtt": [20.0, 21.0, 23.5], "lan": [10, 20, 30], "wan": [1, 2, 3]})
    guard = (ReportGuard(df, "sweep").check_columns(["n", "rtt"]).check_range(["rtt"], 0, 1000)
             .check_monotone("n", "rtt").check_greater("lan", "wan"))
    assert guard.validate()
    assert "[REPORTGUARD] sweep passed." in capsys.readouterr().out


def test_violations_are_collected():
    df = pd.DataFrame({"n": [2, 4, 8], "rtt": [20.0, 19.0, 30.0], "excluded": ["guard-0", None, "client-1"]})
    guard = (ReportGuard(df, "run").check_columns(["n", "lan"]).check_range(["rtt"], 0, 25)
             .check_monotone("n", "rtt").check_not_excluded(["client-1", "client-2"]))
    assert len(guard.errors) == 4
    assert guard.validate(strict=False) is False
    with pytest.raises(InvariantViolation):
        guard.validate()


def test_monotone_tolerance_and_groups():
    df = pd.DataFrame({"preset": ["a", "a", "b", "b"], "n": [2, 4, 2, 4], "rtt": [10.0, 9.6, 10.0, 12.0]})
    assert ReportGuard(df, "").check_monotone("n", "rtt", by="preset").errors
    assert ReportGuard(df, "").check_monotone("n", "rtt", by="preset", tolerance=0.5).errors == []


def test_sparse_columns_only_warn():
    df = pd.DataFrame({"a": [1, None, None, None]})
    guard = ReportGuard(df, "sparse").check_nulls()
    assert guard.errors == [] and guard.warnings
    assert guard.validate()
