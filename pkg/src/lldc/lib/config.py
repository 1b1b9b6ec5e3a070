"""
MODULE:      Settings
FILE:        src/lldc/lib/config.py
DESCRIPTION: Protocol knobs for one deployment. Node config and topology files
             are `key: value` text read with PyYAML; LLDC_SEED overrides seeds.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from lldc.errors import ConfigError

SEED_ENV = "LLDC_SEED"
DEFAULT_SEED = 42

GROUP_IDS = ("p256", "toy101")
CHURN_MODES = ("naive", "abrupt", "graceful")
MIN_CELL_BYTES = 128


@dataclass(frozen=True)
class Settings:
    cell_bits: int = 8192
    downstream_cap: int = 16 * 1024
    window: int = 1
    load_period: int = 50
    sleep_ms: int = 100
    round_timeout_rtt: int = 5
    blame_timeout_rtt: int = 3
    setup_timeout_s: float = 10.0
    setup_retries: int = 3
    retransmit_limit: int = 3
    reassembly_cap: int = 64 * 1024
    guard_depth: int = 0
    group: str = "p256"
    equivocation: bool = True
    premask: bool = False
    trusted_guards: tuple[str, ...] = field(default_factory=tuple)
    seed: int = DEFAULT_SEED
    churn_mode: str = "graceful"
    exit_latency_ms: float = 0.0

    @property
    def cell_bytes(self) -> int:
        return self.cell_bits // 8

    @property
    def effective_guard_depth(self) -> int:
        if self.guard_depth > 0:
            return self.guard_depth
        return 2 * self.window

    def with_overrides(self, **kw: Any) -> "Settings":
        return validate(replace(self, **{k: v for k, v in kw.items() if v is not None}))


def validate(s: Settings) -> Settings:
    """Collects every problem before failing once."""
    problems: list[str] = []
    if s.cell_bits % 8 or s.cell_bytes < MIN_CELL_BYTES:
        problems.append(f"cell_bits must be a multiple of 8 and >= {MIN_CELL_BYTES * 8} (got {s.cell_bits})")
    if s.window < 1:
        problems.append(f"window must be >= 1 (got {s.window})")
    if s.load_period < 1:
        problems.append(f"load_period must be >= 1 (got {s.load_period})")
    if s.downstream_cap < 64:
        problems.append(f"downstream_cap too small (got {s.downstream_cap})")
    if s.group not in GROUP_IDS:
        problems.append(f"group must be one of {GROUP_IDS} (got {s.group!r})")
    if s.churn_mode not in CHURN_MODES:
        problems.append(f"churn_mode must be one of {CHURN_MODES} (got {s.churn_mode!r})")
    if s.retransmit_limit < 1:
        problems.append("retransmit_limit must be >= 1")
    if s.setup_timeout_s <= 0 or s.sleep_ms < 0:
        problems.append("timeouts must be positive")
    if problems:
        raise ConfigError("; ".join(problems))
    return s


def env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be an integer (got {raw!r})") from e


def read_key_values(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected `key: value` lines")
    return data


def settings_from_mapping(data: dict[str, Any], base: Settings | None = None) -> Settings:
    base = base or Settings()
    known = {f.name for f in fields(Settings)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(unknown)}")
    kw = dict(data)
    if "trusted_guards" in kw:
        tg = kw["trusted_guards"]
        kw["trusted_guards"] = tuple(tg.split(",")) if isinstance(tg, str) else tuple(tg or ())
    try:
        s = replace(base, **kw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return validate(replace(s, seed=env_seed(s.seed)))


def load_settings(path: str | Path | None = None, **overrides: Any) -> Settings:
    data = read_key_values(path) if path else {}
    # node identity keys live in the same file but are not protocol knobs
    for k in ("id", "role"):
        data.pop(k, None)
    s = settings_from_mapping(data)
    return s.with_overrides(**overrides) if overrides else s
