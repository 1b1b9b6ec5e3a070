"""lldc: DC-net anonymizer for a local network (relay, guards, clients) with a
deterministic network simulator and an experiment harness."""

__version__ = "0.4.0"
