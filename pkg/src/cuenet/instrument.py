"""Execution instrumentation: multiply-add counters and buffer liveness meters.

Two independent facilities, both installed through context variables so the
numeric kernels stay free of plumbing arguments:

* ``MacCounter`` accumulates fused multiply-add counts into named stages.
  Kernels report work through :func:`add_macs`; when no counter is active the
  call is a no-op.  One multiply-add pair counts as one unit.
* ``MemoryMeter`` tracks live intermediate buffers through explicit
  alloc/free events and records the high-water mark in elements.

Counters attribute work to the innermost active stage.  Work reported with no
stage open lands in the ``"unattributed"`` bucket, which verification passes
require to stay at zero.
"""

from contextlib import contextmanager
from contextvars import ContextVar

UNATTRIBUTED = "unattributed"

_active_counter: ContextVar = ContextVar("cuenet_mac_counter", default=None)
_active_meter: ContextVar = ContextVar("cuenet_memory_meter", default=None)


class MacCounter:
    """Accumulates executed multiply-add counts keyed by stage name."""

    def __init__(self):
        self.stages = {}
        self._stack = []

    @contextmanager
    def stage(self, name):
        """Attribute counts reported inside the block to ``name``."""
        self._stack.append(name)
        try:
            yield self
        finally:
            self._stack.pop()

    def add(self, macs):
        if macs < 0:
            raise ValueError(f"negative MAC count: {macs}")
        key = self._stack[-1] if self._stack else UNATTRIBUTED
        self.stages[key] = self.stages.get(key, 0) + int(macs)

    @property
    def total(self):
        return sum(self.stages.values())

    def stage_total(self, name):
        return self.stages.get(name, 0)


@contextmanager
def counting(counter):
    """Install ``counter`` as the active multiply-add sink for the block."""
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def active_counter():
    return _active_counter.get()


def add_macs(macs):
    """Report ``macs`` executed multiply-adds to the active counter, if any."""
    counter = _active_counter.get()
    if counter is not None:
        counter.add(macs)


@contextmanager
def stage(name):
    """Open a counting stage on the active counter; no-op without one."""
    counter = _active_counter.get()
    if counter is None:
        yield None
        return
    with counter.stage(name):
        yield counter


class MemoryMeter:
    """High-water mark of live intermediate elements.

    Kernels announce buffer lifetimes with :func:`meter_alloc` and
    :func:`meter_free`.  The meter charges each buffer its element count for
    the span between the two events and keeps the peak total.  Input and
    parameter storage is deliberately out of scope; only intermediates that
    the caller declares are charged.
    """

    def __init__(self):
        self.live = 0
        self.high_water = 0
        self._sizes = {}

    def alloc(self, name, elements):
        if name in self._sizes:
            raise ValueError(f"buffer {name!r} already live")
        if elements < 0:
            raise ValueError(f"negative buffer size for {name!r}")
        self._sizes[name] = int(elements)
        self.live += int(elements)
        if self.live > self.high_water:
            self.high_water = self.live

    def free(self, name):
        if name not in self._sizes:
            raise ValueError(f"buffer {name!r} is not live")
        self.live -= self._sizes.pop(name)

    @property
    def live_buffers(self):
        return dict(self._sizes)


@contextmanager
def metering(meter):
    """Install ``meter`` as the active buffer-liveness sink for the block."""
    token = _active_meter.set(meter)
    try:
        yield meter
    finally:
        _active_meter.reset(token)


def meter_alloc(name, elements):
    meter = _active_meter.get()
    if meter is not None:
        meter.alloc(name, elements)


def meter_free(name):
    meter = _active_meter.get()
    if meter is not None:
        meter.free(name)
