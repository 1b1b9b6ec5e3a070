"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/errors.py
VERSION:    1.2 (Structured context on every protocol error)
================================================================================

ABSTRACT:
    Exception hierarchy shared by the library, the simulator and the CLI.
    Every error carries optional (epoch, round, entity) context so log records
    and blame transcripts can point at the exact place a run went wrong.
================================================================================
"""
from __future__ import annotations


class ProtocolError(Exception):
    """Base class. `context` is merged into structured log records."""

    def __init__(self, message: str = "", *, epoch: int | None = None,
                 round: int | None = None, entity: str | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.round = round
        self.entity = entity

    @property
    def context(self) -> dict:
        return {k: v for k, v in (("epoch", self.epoch), ("round", self.round),
                                   ("entity", self.entity)) if v is not None}


# --- crypto ---
class DegenerateKey(ProtocolError):
    pass


class DecryptFailed(ProtocolError):
    pass


class MapRangeError(ProtocolError):
    pass


# --- setup ---
class UnknownClient(ProtocolError):
    pass


class BadSignature(ProtocolError):
    pass


class TooFewClients(ProtocolError):
    pass


class TranscriptTampered(ProtocolError):
    pass


class NoTrustedSignature(ProtocolError):
    pass


class SlotNotFound(ProtocolError):
    pass


class SetupFailed(ProtocolError):
    def __init__(self, message: str = "", *, elapsed_us: int = 0, **kw):
        super().__init__(message, **kw)
        self.elapsed_us = elapsed_us


# --- rounds ---
class CellOverflow(ProtocolError):
    pass


class RoundTimeout(ProtocolError):
    def __init__(self, message: str = "", *, missing: tuple[str, ...] = (), **kw):
        super().__init__(message, **kw)
        self.missing = missing


class FrameError(ProtocolError):
    pass


class GuardBufferFull(ProtocolError):
    pass


class HistoryMismatch(ProtocolError):
    pass


class BlameInconsistent(ProtocolError):
    pass


# --- ambient ---
class ConfigError(ProtocolError):
    pass


class TraceParseError(ProtocolError):
    def __init__(self, message: str = "", *, line: int | None = None, **kw):
        super().__init__(f"line {line}: {message}" if line is not None else message, **kw)
        self.line = line


class InvariantViolation(ProtocolError):
    pass
