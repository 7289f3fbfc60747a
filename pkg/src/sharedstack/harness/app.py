"""RPC echo server running inside a guest."""

from __future__ import annotations

from ..flowtable import ConsolidatedFlowState
from ..guest import GuestContext
from .events import WORKLOAD, EventLoop


class EchoApp:
    """Answers every complete ``message_size`` request with an equal-sized
    response.

    ``app_delay`` cycles of guest-side processing (notification, syscall and
    handler time on the guest's own vCPUs) separate the request's arrival
    from the response being posted; requests are handled independently.
    """

    def __init__(self, loop: EventLoop, guest: GuestContext, message_size: int,
                 app_delay: int, wake):
        self.loop = loop
        self.guest = guest
        self.message_size = message_size
        self.app_delay = app_delay
        self.wake = wake
        self.requests = 0
        guest.on_event = self.on_event

    def on_event(self, what: str, obj) -> None:
        if what in ("accepted", "connected"):
            obj.app = 0

    def on_notify(self, now: int) -> None:
        q = self.guest.rx_notify
        msg = self.message_size
        while q:
            flow, n = q.popleft()
            flow.rx_buffer.read(n)
            k, flow.app = divmod((flow.app or 0) + n, msg)
            for _ in range(k):
                self.requests += 1
                if self.app_delay:
                    self.loop.at(now + self.app_delay, WORKLOAD, self._respond, flow)
                else:
                    self._respond(now, flow)

    def _respond(self, now: int, flow: ConsolidatedFlowState) -> None:
        self.guest.post(flow.core, flow.key, self.message_size)
        self.wake(flow.core, now)
