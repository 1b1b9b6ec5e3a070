"""
MODULE:      ReportGuard
FILE:        src/lldc/lib/safeguard.py
DESCRIPTION: Sanity checks on run reports and sweep tables before they are
             written. A strict failure stops the harness with exit code 1.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np
import pandas as pd

from lldc.errors import InvariantViolation


class ReportGuard:
    def __init__(self, df: pd.DataFrame, name: str):
        self.df = df
        self.name = name
        self.errors: list[str] = []
        self.warnings: list[str] = []

    def check_columns(self, columns: Iterable[str]) -> "ReportGuard":
        missing = [c for c in columns if c not in self.df.columns]
        if missing:
            self.errors.append(f"[COLUMNS] missing: {', '.join(missing)}")
        return self

    def check_range(self, columns: Iterable[str], min_val: float, max_val: float) -> "ReportGuard":
        """Values of numeric columns within [min_val, max_val]."""
        for col in columns:
            if col not in self.df.columns or self.df[col].dropna().empty:
                continue
            vals = pd.to_numeric(self.df[col], errors="coerce").dropna()
            vmin, vmax = vals.min(), vals.max()
            if vmin < min_val or vmax > max_val:
                self.errors.append(f"[RANGE] {col} out of bounds: min={vmin}, max={vmax} "
                                   f"(expected {min_val}..{max_val})")
        return self

    def check_monotone(self, x: str, y: str, by: str | None = None, tolerance: float = 0.0) -> "ReportGuard":
        """y non-decreasing in x (within each `by` group)."""
        if x not in self.df.columns or y not in self.df.columns:
            self.warnings.append(f"[MONOTONE] cannot check {y} over {x}: columns absent")
            return self
        groups = self.df.groupby(by) if by else [(None, self.df)]
        for key, g in groups:
            ys = g.sort_values(x)[y].to_numpy(dtype=float)
            drops = np.diff(ys)
            if (drops < -tolerance).any():
                label = f" ({by}={key})" if by else ""
                self.errors.append(f"[MONOTONE] {y} decreases over {x}{label}: {ys.round(3).tolist()}")
        return self

    def check_greater(self, larger: str, smaller: str, strict: bool = True) -> "ReportGuard":
        """Row-wise larger > smaller (or >= when not strict)."""
        if larger not in self.df.columns or smaller not in self.df.columns:
            return self
        a = pd.to_numeric(self.df[larger], errors="coerce")
        b = pd.to_numeric(self.df[smaller], errors="coerce")
        bad = (a <= b) if strict else (a < b)
        if bad.any():
            op = ">" if strict else ">="
            self.errors.append(f"[ORDER] {larger} {op} {smaller} fails on {int(bad.sum())} row(s)")
        return self

    def check_not_excluded(self, honest: Iterable[str], column: str = "excluded") -> "ReportGuard":
        """No honest entity appears in the excluded column."""
        if column not in self.df.columns:
            return self
        honest = set(honest)
        hit = sorted({e for e in self.df[column].dropna() if e in honest})
        if hit:
            self.errors.append(f"[BLAME] honest entities excluded: {', '.join(hit)}")
        return self

    def check_nulls(self, threshold: float = 0.3) -> "ReportGuard":
        for col, pct in self.df.isnull().mean().items():
            if pct > threshold:
                self.warnings.append(f"[NULLS] column {col} is {pct:.1%} empty")
        return self

    def validate(self, strict: bool = True) -> bool:
        if self.errors:
            print(f"\n[REPORTGUARD] FAILED: {self.name}")
            for e in self.errors:
                print(f"   - {e}")
            if strict:
                raise InvariantViolation(f"{self.name}: {len(self.errors)} invariant violation(s)")
            return False
        if self.warnings:
            print(f"\n[REPORTGUARD] Warnings in {self.name}:")
            for w in self.warnings:
                print(f"   - {w}")
        print(f"[REPORTGUARD] {self.name} passed.")
        return True
