"""One direction of the bottleneck link: FIFO serializer plus propagation."""

from __future__ import annotations

import math
import random
from typing import Callable, Optional

from ..packetmodel import Packet
from .events import ARRIVAL, EventLoop


class Link:
    def __init__(
        self,
        loop: EventLoop,
        bandwidth_bps: float,
        cpu_hz: float,
        propagation: int,
        deliver: Callable[[int, Packet], None],
        loss: float = 0.0,
        rng: Optional[random.Random] = None,
    ):
        self.loop = loop
        self.cycles_per_byte = 8 * cpu_hz / bandwidth_bps
        self.propagation = propagation
        self.deliver = deliver
        self.loss = loss
        self.rng = rng or random.Random(0)
        self.free_at = 0
        self.sent = 0
        self.lost = 0
        self.bytes = 0

    def serialization(self, wire_len: int) -> int:
        return max(1, math.ceil(wire_len * self.cycles_per_byte))

    def send(self, p: Packet, now: int) -> None:
        start = now if now > self.free_at else self.free_at
        self.free_at = start + self.serialization(p.wire_len)
        self.sent += 1
        self.bytes += p.wire_len
        if self.loss and self.rng.random() < self.loss:
            self.lost += 1
            return
        self.loop.at(self.free_at + self.propagation, ARRIVAL, self.deliver, p)
