"""Two-level per-core scheduling gated by guest cycle budgets.

Level one picks guests round-robin, skipping those whose budget on this core
is not positive. Level two picks, within a guest, transmit queues to drain
(POLL) or flows to send on (TX), the latter in earliest-next-send-time order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Sequence, Tuple

from .accounting import BudgetTable
from .flowtable import ConnState, ConsolidatedFlowState
from .guest import GuestContext

DEFAULT_BATCH = 16
DEFAULT_MSS = 1460


class PollItem(NamedTuple):
    guest: int
    queue: int
    max_items: int


@dataclass
class CoreSchedState:
    core: int = 0
    batch_size: int = DEFAULT_BATCH
    guest_rr_cursor: int = 0
    guest_tx_rr_cursor: int = 0
    # guest -> heap of (next_send_time, tiebreak, flow)
    flowq: Dict[int, list] = field(default_factory=dict)
    _tiebreak: int = 0

    def push_flow(self, flow: ConsolidatedFlowState) -> None:
        self._tiebreak += 1
        heapq.heappush(
            self.flowq.setdefault(flow.guest, []),
            (flow.next_send_time, self._tiebreak, flow),
        )
        flow.in_txq = True

    def next_ready_time(self, guest: int) -> float:
        heap = self.flowq.get(guest)
        while heap and not _sendable(heap[0][2]):
            heapq.heappop(heap)[2].in_txq = False
        return heap[0][0] if heap else math.inf


def _sendable(flow: ConsolidatedFlowState) -> bool:
    return flow.pending_tx_bytes > 0 and flow.state is ConnState.ESTABLISHED


def _rotation(n: int, start: int) -> range:
    return range(start, start + n)


def schedule_poll(
    sched: CoreSchedState,
    guests: Sequence[GuestContext],
    budgets: BudgetTable,
    cost_of: Callable[[int], int],
    gating: bool = True,
) -> List[PollItem]:
    """Plan one POLL batch on ``sched.core``.

    Guests are visited from the round-robin cursor. Each guest with budget
    has its transmit queue for this core drained until the batch is full, the
    queue is empty, or its projected balance (current balance minus the
    estimated cost of what was already taken) runs out.
    """
    core = sched.core
    room = sched.batch_size
    plan: List[PollItem] = []
    n = len(guests)
    last = None
    for i in _rotation(n, sched.guest_rr_cursor):
        if room == 0:
            break
        g = guests[i % n]
        queue = g.tx_queues[core]
        if not queue:
            continue
        balance = budgets.balance[core][g.id]
        if gating and balance <= 0:
            continue
        take = 0
        for req in queue:
            if take == room:
                break
            if gating and balance <= 0:
                break
            balance -= cost_of(req.nbytes)
            take += 1
        plan.append(PollItem(g.id, core, take))
        room -= take
        last = i
    if last is not None:
        sched.guest_rr_cursor = (last + 1) % n
    return plan


def schedule_tx(
    sched: CoreSchedState,
    guests: Sequence[GuestContext],
    budgets: BudgetTable,
    now: int,
    mss: int = DEFAULT_MSS,
    initial_rate: float = 1.0,
    gating: bool = True,
) -> List[Tuple[ConsolidatedFlowState, int]]:
    """Plan one TX batch: round-robin over budgeted guests, then flows by
    earliest next-send time, for flows whose send time has arrived.

    Each planned segment pushes its flow's next-send time forward by
    ``segment / rate`` cycles and re-queues the flow if it still has data.
    """
    core = sched.core
    room = sched.batch_size
    plan: List[Tuple[ConsolidatedFlowState, int]] = []
    n = len(guests)
    last = None
    for i in _rotation(n, sched.guest_tx_rr_cursor):
        g = guests[i % n]
        if room == 0:
            break
        if gating and budgets.balance[core][g.id] <= 0:
            continue
        heap = sched.flowq.get(g.id)
        if not heap:
            continue
        taken = 0
        planned: Dict[int, int] = {}
        while heap and taken < room:
            nst, _, flow = heap[0]
            if not _sendable(flow):
                heapq.heappop(heap)
                flow.in_txq = False
                continue
            if nst > now:
                break
            heapq.heappop(heap)
            left = flow.pending_tx_bytes - planned.get(id(flow), 0)
            seg = min(left, mss)
            planned[id(flow)] = planned.get(id(flow), 0) + seg
            plan.append((flow, seg))
            taken += 1
            rate = flow.rate or initial_rate
            flow.next_send_time = nst + math.ceil(seg / rate)
            if left > seg:
                sched._tiebreak += 1
                heapq.heappush(heap, (flow.next_send_time, sched._tiebreak, flow))
            else:
                flow.in_txq = False
        if taken:
            room -= taken
            last = i
    if last is not None:
        sched.guest_tx_rr_cursor = (last + 1) % n
    return plan


def rx_admit(budgets: BudgetTable, guest: int, core: int, gating: bool = True) -> bool:
    """Admit an RX packet only if its guest has budget left on this core."""
    return not gating or budgets.balance[core][guest] > 0
