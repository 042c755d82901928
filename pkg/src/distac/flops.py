"""Analytic floating-point operation accounting.

Instrumented code calls :func:`record` with operation counts derived from
array shapes.  Counting is active only inside a :func:`counting` block, so the
hot paths pay one attribute lookup when no counter is attached.

Convention: a multiply-add is 2 FLOPs; every other elementwise arithmetic op,
transcendental (exp, log, erf, sqrt, tanh) and comparison is 1 FLOP.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

PHASES = ("inference", "update")
KINDS = ("madd", "elementwise", "special", "compare")

_state = threading.local()


@dataclass
class PhaseCounts:
    madd: int = 0
    elementwise: int = 0
    special: int = 0
    compare: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.madd + self.elementwise + self.special + self.compare

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in KINDS} | {"flops": self.flops}


@dataclass
class FlopCounter:
    phases: dict = field(default_factory=lambda: {p: PhaseCounts() for p in PHASES})

    def add(self, phase: str, **counts: int) -> None:
        target = self.phases[phase]
        for kind, n in counts.items():
            if n < 0:
                raise ValueError("operation counts are nonnegative")
            setattr(target, kind, getattr(target, kind) + int(n))

    def reset(self, phase: str) -> None:
        self.phases[phase] = PhaseCounts()

    def total(self, phase: str) -> int:
        return self.phases[phase].flops


@contextmanager
def counting(counter: FlopCounter, phase: str):
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    prev = getattr(_state, "active", None)
    _state.active = (counter, phase)
    try:
        yield counter
    finally:
        _state.active = prev


def record(madd: int = 0, elementwise: int = 0, special: int = 0, compare: int = 0) -> None:
    active = getattr(_state, "active", None)
    if active is None:
        return
    counter, phase = active
    counter.add(phase, madd=madd, elementwise=elementwise, special=special, compare=compare)
