"""Per-tenant attachment to the shared stack: queues and identity."""

from __future__ import annotations

from collections import deque
from typing import Callable, List, NamedTuple, Optional

from .packetmodel import FlowKey


class TxRequest(NamedTuple):
    """A guest asking the stack to send ``nbytes`` more on connection ``key``."""

    key: FlowKey
    nbytes: int


class GuestContext:
    """Weight, transmit queues (one per fast-path core), receive notifications.

    ``on_notify`` is invoked by the driver when new receive notifications
    become visible to the guest; ``on_event`` receives connection lifecycle
    events (``accepted``, ``connected``, ``closed``, ``failed``).
    """

    def __init__(self, gid: int, num_cores: int, weight: float = 1.0, name: str = ""):
        self.id = gid
        self.name = name or f"guest{gid}"
        self.weight = weight
        self.tx_queues: List[deque] = [deque() for _ in range(num_cores)]
        self.rx_notify: deque = deque()
        self.on_notify: Optional[Callable[[int], None]] = None
        self.on_event: Optional[Callable[..., None]] = None
        self.rx_drops = 0
        self.bad_requests = 0
        self.slowpath_events = 0

    def post(self, core: int, key: FlowKey, nbytes: int) -> None:
        self.tx_queues[core].append(TxRequest(key, nbytes))

    def queued_requests(self) -> int:
        return sum(len(q) for q in self.tx_queues)

    def __repr__(self) -> str:
        return f"GuestContext({self.id}, {self.name!r}, weight={self.weight})"
