"""Single-threaded discrete-event loop over virtual CPU cycles."""

from __future__ import annotations

import heapq
from typing import Callable

# Tie-break order for events at the same instant.
ARRIVAL = 0  # packet reaches a NIC or the remote peer
WORKLOAD = 1  # peer timers and application actions
SLOWPATH = 2  # slow-path completions and resolutions
TICK = 3  # allocator replenish
CORE = 4  # fast-path core steps


class EventLoop:
    """Events run in (time, priority, insertion order); callbacks get ``now``
    as their first argument."""

    def __init__(self) -> None:
        self._q: list = []
        self._seq = 0
        self.now = 0
        self.executed = 0

    def __len__(self) -> int:
        return len(self._q)

    def at(self, time: int, prio: int, fn: Callable, *args) -> None:
        if time < self.now:
            raise ValueError(f"event at {time} is in the past (now={self.now})")
        self._seq += 1
        heapq.heappush(self._q, (time, prio, self._seq, fn, args))

    def run(self, until: int) -> None:
        """Execute every event with time <= ``until``; the clock ends at ``until``."""
        q = self._q
        pop = heapq.heappop
        while q and q[0][0] <= until:
            t, _, _, fn, args = pop(q)
            self.now = t
            self.executed += 1
            fn(t, *args)
        self.now = max(self.now, until)
