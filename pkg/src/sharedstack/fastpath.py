"""Per-core run-to-completion engine: batched RX, POLL and TX tasks.

Each batch's cost comes from the cost model (standing in for timestamp
counter reads around the batch) and is split over the guests that had
packets in it. Work that cannot be attributed to a guest (empty polls,
packets punted to the slow path) is booked as unaccounted overhead.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from .accounting import BudgetTable, CostModel, TaskKind
from .flowtable import (
    ConnState,
    ConsolidatedFlowState,
    Deposit,
    FlowTable,
    validate_and_deposit,
)
from .guest import GuestContext
from .packetmodel import (
    CONTROL_FLAGS,
    Packet,
    TcpFlags,
    assemble_packet,
    make_ack,
    parse_packet,
    seq_add,
    seq_diff,
)
from .scheduler import CoreSchedState, rx_admit, schedule_poll, schedule_tx

RX, POLL, TX = TaskKind.RX, TaskKind.POLL, TaskKind.TX
SEND_FLAGS = TcpFlags.ACK | TcpFlags.PSH


@dataclass
class FastPathParams:
    batch_size: int = 16
    mss: int = 1460
    initial_rate: float = 10e9 / 8 / 2.1e9  # 10 Gbit/s in bytes per cycle
    gating: bool = True
    nic_rx_ring: int = 4096


@dataclass
class CoreStats:
    cycles_total: int = 0
    cycles_accounted: int = 0
    cycles_unaccounted: int = 0
    tasks: Dict[str, int] = field(default_factory=lambda: {"rx": 0, "poll": 0, "tx": 0})
    rx_packets: int = 0
    rx_drops: int = 0
    rx_misses: int = 0
    nic_overflow: int = 0
    acks_sent: int = 0
    data_sent: int = 0
    bad_requests: int = 0
    iterations: int = 0

    @property
    def accounted_fraction(self) -> float:
        return self.cycles_accounted / self.cycles_total if self.cycles_total else 0.0


class FastPathCore:
    """One fast-path core.

    ``to_slowpath(packet)`` receives packets the fast path does not handle.
    Packets bound for the wire accumulate in ``nic_tx`` and guests with new
    receive notifications in ``notified``; the driver drains both when the
    batch that produced them finishes.
    """

    def __init__(
        self,
        core_id: int,
        table: FlowTable,
        budgets: BudgetTable,
        guests: Sequence[GuestContext],
        costs: CostModel,
        params: Optional[FastPathParams] = None,
        to_slowpath: Optional[Callable[[Packet], None]] = None,
    ):
        self.core_id = core_id
        self.table = table
        self.budgets = budgets
        self.guests = sorted(guests, key=lambda g: g.id)
        self.guests_by_id = {g.id: g for g in self.guests}
        self.costs = costs
        self.params = params or FastPathParams()
        self.sched = CoreSchedState(core=core_id, batch_size=self.params.batch_size)
        # Decorrelate the cores' round-robin starting points.
        if self.guests:
            self.sched.guest_rr_cursor = core_id % len(self.guests)
            self.sched.guest_tx_rr_cursor = core_id % len(self.guests)
        self.nic_rx: deque = deque()
        self.nic_tx: List[Packet] = []
        self.notified: Dict[int, None] = {}
        self.to_slowpath = to_slowpath or (lambda p: None)
        self.stats = CoreStats()
        self.trace: Optional[list] = None  # (time, core, task, guest, balance, outcome)

    # -- helpers --------------------------------------------------------

    def _book(self, kind: TaskKind, counts: Dict[int, int], guest_cycles: int, overhead: int) -> int:
        st = self.stats
        if counts:
            self.budgets.charge_batch(self.core_id, counts, guest_cycles)
            st.cycles_accounted += guest_cycles
            st.tasks[kind.value] += sum(counts.values())
        st.cycles_unaccounted += overhead
        total = guest_cycles + overhead
        st.cycles_total += total
        return total

    def enqueue_flow(self, flow: ConsolidatedFlowState, now: int) -> None:
        """Make a flow with pending bytes eligible for TX on this core."""
        if not flow.in_txq and flow.pending_tx_bytes > 0:
            if flow.next_send_time < now:
                flow.next_send_time = now
            self.sched.push_flow(flow)

    def nic_receive(self, p: Packet) -> bool:
        if len(self.nic_rx) >= self.params.nic_rx_ring:
            self.stats.nic_overflow += 1
            return False
        self.nic_rx.append(p)
        return True

    # -- tasks ----------------------------------------------------------

    def run_rx_batch(self, now: int) -> int:
        costs = self.costs
        core = self.core_id
        gating = self.params.gating
        balance = self.budgets.balance[core]
        nic = self.nic_rx
        trace = self.trace
        counts: Dict[int, int] = {}
        guest_cycles = 0
        overhead = 0
        n = min(len(nic), self.params.batch_size)
        if n == 0:
            return self._book(RX, counts, 0, costs.empty_cost(RX))
        for _ in range(n):
            p = nic.popleft()
            self.stats.rx_packets += 1
            parsed = parse_packet(p)
            flow = None if parsed is None else self.table.lookup(parsed.key)
            if (
                flow is None
                or parsed.flags & CONTROL_FLAGS
                or flow.state is not ConnState.ESTABLISHED
            ):
                overhead += costs.task_cost(RX, p.payload_len)
                self.stats.rx_misses += 1
                self.to_slowpath(p)
                continue
            g = flow.guest
            counts[g] = counts.get(g, 0) + 1
            if not rx_admit(self.budgets, g, core, gating):
                guest_cycles += costs.drop_cost()
                self.stats.rx_drops += 1
                self.guests_by_id[g].rx_drops += 1
                if trace is not None:
                    trace.append((now, core, "rx", g, balance[g], "drop"))
                continue
            if trace is not None:
                trace.append((now, core, "rx", g, balance[g], "admit"))
            guest_cycles += costs.task_cost(RX, parsed.payload_len)
            if parsed.flags & TcpFlags.ACK:
                flow.ack_to(parsed.ack, now)
            if parsed.payload_len:
                res = validate_and_deposit(flow, parsed.seq, parsed.payload_len)
                self.nic_tx.append(make_ack(p, flow.tx_next_seq, flow.rx_next_expected))
                self.stats.acks_sent += 1
                if res is Deposit.ACCEPTED:
                    self.notified[g] = None
        return self._book(RX, counts, guest_cycles, overhead)

    def run_poll_batch(self, now: int) -> int:
        costs = self.costs
        core = self.core_id
        plan = schedule_poll(
            self.sched,
            self.guests,
            self.budgets,
            lambda nbytes: costs.task_cost(POLL, nbytes),
            self.params.gating,
        )
        counts: Dict[int, int] = {}
        guest_cycles = 0
        for item in plan:
            g = self.guests_by_id[item.guest]
            queue = g.tx_queues[item.queue]
            if self.trace is not None:
                self.trace.append(
                    (now, core, "poll", g.id, self.budgets.balance[core][g.id], item.max_items)
                )
            for _ in range(item.max_items):
                req = queue[0]
                flow = self.table.lookup(req.key)
                if flow is not None and flow.tx_buffer.free < req.nbytes:
                    break  # send buffer full; retry on a later poll
                queue.popleft()
                counts[g.id] = counts.get(g.id, 0) + 1
                guest_cycles += costs.task_cost(POLL, req.nbytes)
                if flow is None or flow.state is not ConnState.ESTABLISHED:
                    self.stats.bad_requests += 1
                    g.bad_requests += 1
                    continue
                flow.tx_buffer.write(req.nbytes)
                flow.pending_tx_bytes += req.nbytes
                self.enqueue_flow(flow, now)
        if not counts:
            return self._book(POLL, counts, 0, costs.empty_cost(POLL))
        return self._book(POLL, counts, guest_cycles, 0)

    def run_tx_batch(self, now: int) -> int:
        costs = self.costs
        core = self.core_id
        plan = schedule_tx(
            self.sched,
            self.guests,
            self.budgets,
            now,
            self.params.mss,
            self.params.initial_rate,
            self.params.gating,
        )
        if not plan:
            return self._book(TX, {}, 0, costs.empty_cost(TX))
        counts: Dict[int, int] = {}
        guest_cycles = 0
        trace = self.trace
        for flow, seg in plan:
            g = flow.guest
            if trace is not None:
                trace.append((now, core, "tx", g, self.budgets.balance[core][g], seg))
            counts[g] = counts.get(g, 0) + 1
            guest_cycles += costs.task_cost(TX, seg)
            if flow.tx_next_seq == flow.tx_acked_seq:
                flow.last_ack_time = now  # retransmission timer starts
            self.nic_tx.append(
                assemble_packet(
                    flow.template, flow.tx_next_seq, flow.rx_next_expected, SEND_FLAGS, seg
                )
            )
            flow.tx_next_seq = seq_add(flow.tx_next_seq, seg)
            if seq_diff(flow.tx_next_seq, flow.tx_sent_max) > 0:
                flow.tx_sent_max = flow.tx_next_seq
            flow.pending_tx_bytes -= seg
            self.stats.data_sent += 1
        return self._book(TX, counts, guest_cycles, 0)

    def run_iteration(self, now: int) -> int:
        self.stats.iterations += 1
        c = self.run_rx_batch(now)
        c += self.run_poll_batch(now + c)
        c += self.run_tx_batch(now + c)
        return c

    # -- idle detection -------------------------------------------------

    def has_work(self, now: int) -> bool:
        """Whether another iteration right now could do guest work."""
        if self.nic_rx:
            return True
        core = self.core_id
        gating = self.params.gating
        for g in self.guests:
            if gating and self.budgets.balance[core][g.id] <= 0:
                continue
            if g.tx_queues[core]:
                return True
            if self.sched.next_ready_time(g.id) <= now:
                return True
        return False

    def next_pacing_time(self, now: int) -> float:
        """Earliest future send time among budgeted guests' flows."""
        core = self.core_id
        gating = self.params.gating
        t = math.inf
        for g in self.guests:
            if gating and self.budgets.balance[core][g.id] <= 0:
                continue
            t = min(t, self.sched.next_ready_time(g.id))
        return t

