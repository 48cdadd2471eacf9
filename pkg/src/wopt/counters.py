"""Multiply-accumulate instrumentation shared by the whitening paths."""

from dataclasses import dataclass


@dataclass
class MacCounter:
    """Accumulates multiply-accumulate counts for complexity checks."""

    macs: int = 0

    def add(self, n):
        self.macs += int(n)

    def reset(self):
        self.macs = 0


def add_macs(counter, n):
    """Increment ``counter`` if one was supplied."""
    if counter is not None:
        counter.add(n)
