"""Slow path: connection setup/teardown, virtualization resolution,
retransmission timeouts, rate updates and the periodic budget tick.

The slow path runs on its own core and by default does not charge guest
budgets (``charge_guests`` bills each served item to the guest on the core
that owns the flow). Work items are kept in per-guest queues and served
round-robin so that a guest with a flood of control traffic cannot delay
another guest's handshakes.
"""

from __future__ import annotations

import struct
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Protocol, Tuple

from .accounting import BudgetTable
from .allocator import Allocator
from .flowtable import (
    ByteRing,
    ConnState,
    ConsolidatedFlowState,
    FlowExistsError,
    FlowTable,
)
from .guest import GuestContext
from .packetmodel import (
    FlowKey,
    HeaderTemplate,
    Packet,
    TcpFlags,
    assemble_packet,
    parse_packet,
    reverse_template,
    seq_add,
    seq_diff,
    template_of,
)

GRE_UDP_PORT = 4754
LEGACY = -1  # queue for packets that cannot be attributed to a guest


class TunnelInfo(NamedTuple):
    outer_ip: int
    outer_port: int
    mac: int
    gre_key: int
    guest: Optional[int] = None  # set when the address belongs to a local guest


def entropy_port(key: FlowKey) -> int:
    """Outer UDP source port derived from the inner flow, for ECMP spreading."""
    return 0xC000 | (flow_hash(key) & 0x3FFF)


def flow_hash(key: FlowKey) -> int:
    return zlib.crc32(struct.pack("!IHIHI", *key))


def rss_core(key: FlowKey, num_cores: int) -> int:
    # CRC32 is affine over GF(2): its low bits are fixed parities of the key
    # and can put every flow of a port range on one core. A multiplicative
    # step mixes all bits into the high half, which picks the core.
    mixed = (flow_hash(key) * 0x9E3779B1) & 0xFFFFFFFF
    return (mixed >> 16) % num_cores


class TunnelRegistry:
    """(tenant, virtual IP) -> physical location of that endpoint.

    Stands in for the virtual switch that owns tunnelling information.
    """

    def __init__(self, local_mac: int, local_ip: int, resolution_latency: int = 2000):
        self.local_mac = local_mac
        self.local_ip = local_ip
        self.resolution_latency = resolution_latency
        self._entries: Dict[Tuple[int, int], TunnelInfo] = {}

    def register(self, tenant: int, vip: int, info: TunnelInfo) -> None:
        self._entries[(tenant, vip)] = info

    def register_local(self, tenant: int, vip: int, guest: int) -> None:
        self._entries[(tenant, vip)] = TunnelInfo(
            self.local_ip, GRE_UDP_PORT, self.local_mac, tenant, guest
        )

    def lookup(self, tenant: int, vip: int) -> Optional[TunnelInfo]:
        return self._entries.get((tenant, vip))

    def local_guest(self, key: FlowKey) -> Optional[int]:
        info = self._entries.get((key.tunnel_id, key.guest_local_ip))
        return None if info is None else info.guest

    def resolve(self, key: FlowKey) -> Optional[TunnelInfo]:
        return self._entries.get((key.tunnel_id, key.remote_ip))

    def template_for(self, key: FlowKey, remote: TunnelInfo) -> HeaderTemplate:
        return HeaderTemplate(
            self.local_mac,
            remote.mac,
            self.local_ip,
            remote.outer_ip,
            entropy_port(key),
            remote.outer_port,
            key.tunnel_id,
            key.guest_local_ip,
            key.remote_ip,
            key.guest_local_port,
            key.remote_port,
        )


class Env(Protocol):
    """What the slow path needs from its surroundings."""

    def schedule(self, time: int, fn: Callable, *args) -> None: ...

    def send(self, packet: Packet, time: int) -> None: ...

    def wake(self, core: int, time: int) -> None: ...


# -- rate policies ------------------------------------------------------


class ConstantRate:
    name = "constant"

    def __init__(self, rate: float):
        self.rate = rate

    def initial(self) -> float:
        return self.rate

    def on_timeout(self, flow: ConsolidatedFlowState) -> bool:
        return False

    def on_period(self, flow: ConsolidatedFlowState) -> bool:
        return False


class AimdRate(ConstantRate):
    """Fixed rate, halved on timeout, recovering by a fixed fraction of the
    configured rate each update period."""

    name = "aimd"

    def __init__(self, rate: float, recovery: float = 0.1):
        super().__init__(rate)
        self.recovery = recovery

    def on_timeout(self, flow: ConsolidatedFlowState) -> bool:
        flow.rate = (flow.rate or self.rate) / 2
        return True

    def on_period(self, flow: ConsolidatedFlowState) -> bool:
        if flow.rate >= self.rate:
            return False
        flow.rate = min(self.rate, flow.rate + self.recovery * self.rate)
        return True


RATE_POLICIES = {"constant": ConstantRate, "aimd": AimdRate}


@dataclass
class SlowPathParams:
    rto: int = 420_000  # 200 us at 2.1 GHz
    service_cycles: int = 1000
    buffer_bytes: int = 64 * 1024
    isn_seed: int = 0
    charge_guests: bool = False


class SlowPath:
    def __init__(
        self,
        env: Env,
        table: FlowTable,
        budgets: BudgetTable,
        allocator: Allocator,
        guests: Dict[int, GuestContext],
        cores: list,
        registry: TunnelRegistry,
        rate_policy: ConstantRate,
        params: Optional[SlowPathParams] = None,
    ):
        self.env = env
        self.table = table
        self.budgets = budgets
        self.allocator = allocator
        self.guests = guests
        self.cores = cores
        self.registry = registry
        self.rate_policy = rate_policy
        self.params = params or SlowPathParams()
        self.listeners: Dict[Tuple[int, int], bool] = {}
        self.queues: Dict[int, deque] = {g: deque() for g in sorted(guests)}
        self.queues[LEGACY] = deque()
        self._order = list(self.queues)
        self._cursor = 0
        self.busy = False
        self.pending: Dict[FlowKey, str] = {}  # handshakes awaiting resolution
        self.recovering: Dict[FlowKey, ConsolidatedFlowState] = {}
        self.events: List[Tuple[int, str, int]] = []
        self.served: Dict[int, int] = {g: 0 for g in self._order}
        self.counters: Dict[str, int] = {}
        self.charged_cycles = 0  # only with charge_guests

    # -- bookkeeping ----------------------------------------------------

    def _log(self, now: int, kind: str, guest: Optional[int] = None) -> None:
        g = LEGACY if guest is None else guest
        self.events.append((now, kind, g))
        self.counters[kind] = self.counters.get(kind, 0) + 1
        if g in self.guests and kind != "tick":
            self.guests[g].slowpath_events += 1

    def events_after(self, t: int, exclude: Tuple[str, ...] = ("tick",)) -> list:
        return [e for e in self.events if e[0] > t and e[1] not in exclude]

    def listen(self, guest: int, port: int) -> None:
        self.listeners[(guest, port)] = True

    def _isn(self, key: FlowKey) -> int:
        return (flow_hash(key) * 2654435761 + self.params.isn_seed) % (1 << 32)

    # -- per-guest round-robin work queue -------------------------------

    def submit(self, guest: Optional[int], item: tuple, now: int) -> None:
        g = LEGACY if guest is None or guest not in self.queues else guest
        self.queues[g].append(item)
        if not self.busy:
            self.busy = True
            self.env.schedule(now, self._serve)

    def enqueue_packet(self, p: Packet, now: int) -> None:
        """Entry point for packets the fast path punts."""
        parsed = parse_packet(p)
        guest = None if parsed is None else self.registry.local_guest(parsed.key)
        self.submit(guest, ("pkt", p), now)

    def next_item(self) -> Optional[Tuple[int, tuple]]:
        n = len(self._order)
        for i in range(self._cursor, self._cursor + n):
            g = self._order[i % n]
            q = self.queues[g]
            if q:
                self._cursor = (i + 1) % n
                return g, q.popleft()
        return None

    def _serve(self, now: int) -> None:
        nxt = self.next_item()
        if nxt is None:
            self.busy = False
            return
        g, item = nxt
        self.served[g] += 1
        if self.params.charge_guests and g != LEGACY:
            cycles = self.params.service_cycles
            self.budgets.charge(self._item_core(item), g, cycles)
            self.charged_cycles += cycles
        self.env.schedule(now + self.params.service_cycles, self._complete, item)

    def _item_core(self, item: tuple) -> int:
        kind = item[0]
        if kind == "timeout":
            return item[1].core
        key = item[2] if kind == "connect" else parse_packet(item[1]).key
        return rss_core(key, len(self.cores))

    def _complete(self, now: int, item: tuple) -> None:
        kind = item[0]
        if kind == "pkt":
            self.handle_packet(item[1], now)
        elif kind == "connect":
            self.handle_connect(now, *item[1:])
        elif kind == "timeout":
            self._retransmit(item[1], now)
        self._serve(now)

    # -- virtualization -------------------------------------------------

    def resolve_virtualization(
        self, key: FlowKey, now: int, done: Callable[[int, Optional[TunnelInfo]], None]
    ) -> None:
        """Ask the tunnel registry about ``key``'s remote end; ``done(t, info)``
        runs ``resolution_latency`` cycles later with the entry or None."""
        info = self.registry.resolve(key)
        self.env.schedule(now + self.registry.resolution_latency, done, info)

    # -- connection lifecycle -------------------------------------------

    def _control(self, flow_or_tmpl, seq: int, ack: int, flags: TcpFlags, now: int) -> None:
        tmpl = flow_or_tmpl.template if isinstance(flow_or_tmpl, ConsolidatedFlowState) else flow_or_tmpl
        self.env.send(assemble_packet(tmpl, seq, ack, flags, 0), now)

    def _reset(self, p: Packet, ack: int, now: int) -> None:
        tmpl = reverse_template(template_of(p))
        self.env.send(assemble_packet(tmpl, p.ack, ack, TcpFlags.RST | TcpFlags.ACK, 0), now)
        self._log(now, "rst")

    def _new_flow(self, key: FlowKey, guest: int, info: TunnelInfo, state: ConnState) -> ConsolidatedFlowState:
        isn = self._isn(key)
        flow = ConsolidatedFlowState(
            key=key,
            guest=guest,
            template=self.registry.template_for(key, info),
            tx_next_seq=seq_add(isn, 1),
            tx_acked_seq=isn,
            isn=isn,
            tx_buffer=ByteRing(self.params.buffer_bytes),
            rx_buffer=ByteRing(self.params.buffer_bytes),
            rate=self.rate_policy.initial(),
            core=rss_core(key, len(self.cores)),
            state=state,
        )
        flow.rx_notify = self.guests[guest].rx_notify
        return flow

    def handle_packet(self, p: Packet, now: int) -> None:
        parsed = parse_packet(p)
        if parsed is None:
            self._log(now, "legacy")
            return
        key, seq, ack, flags, plen = parsed
        flow = self.table.lookup(key)
        guest = flow.guest if flow is not None else self.registry.local_guest(key)
        self._log(now, "miss", guest)
        if flags & TcpFlags.RST:
            if flow is not None:
                self._close(flow, now, "reset")
            return
        if flags & TcpFlags.SYN and not flags & TcpFlags.ACK:
            self._on_syn(key, seq, guest, flow, p, now)
        elif flow is None:
            if plen or flags & TcpFlags.FIN:
                self._reset(p, seq_add(seq, plen), now)
        elif flow.state is ConnState.SYN_SENT:
            if flags & TcpFlags.SYN and ack == flow.tx_next_seq:
                flow.state = ConnState.ESTABLISHED
                flow.rx_next_expected = seq_add(seq, 1)
                flow.ack_to(ack, now)
                self._control(flow, flow.tx_next_seq, flow.rx_next_expected, TcpFlags.ACK, now)
                self._event(flow.guest, "connected", flow)
                self.cores[flow.core].enqueue_flow(flow, now)
                self.env.wake(flow.core, now)
        elif flags & TcpFlags.FIN:
            self._on_fin(flow, seq, ack, plen, now)
        elif flow.state is ConnState.CLOSING:
            if flags & TcpFlags.ACK and ack == flow.tx_next_seq:
                self._close(flow, now, None)

    def _on_syn(self, key, seq, guest, flow, p, now) -> None:
        if flow is not None:
            # Retransmitted SYN for an installed connection: repeat SYN-ACK.
            self._control(flow, flow.tx_acked_seq, flow.rx_next_expected,
                          TcpFlags.SYN | TcpFlags.ACK, now)
            return
        if key in self.pending:
            return
        if guest is None or (guest, key.guest_local_port) not in self.listeners:
            self._reset(p, seq_add(seq, 1), now)
            return
        self.pending[key] = "passive"

        def resolved(t: int, info: Optional[TunnelInfo]) -> None:
            self.pending.pop(key, None)
            if info is None:
                self._log(t, "no_route", guest)
                self._reset(p, seq_add(seq, 1), t)
                return
            self._log(t, "resolve", guest)
            flow = self._new_flow(key, guest, info, ConnState.ESTABLISHED)
            flow.rx_next_expected = seq_add(seq, 1)
            flow.tx_sent_max = flow.tx_next_seq
            flow.last_ack_time = t
            try:
                self.table.install(flow)
            except FlowExistsError:
                flow = self.table.lookup(key)
            self._control(flow, flow.tx_acked_seq, flow.rx_next_expected,
                          TcpFlags.SYN | TcpFlags.ACK, t)
            self._event(guest, "accepted", flow)

        self.resolve_virtualization(key, now, resolved)

    def _on_fin(self, flow: ConsolidatedFlowState, seq: int, ack: int, plen: int, now: int) -> None:
        flow.ack_to(ack, now)
        fin_seq = seq_add(seq, plen)
        if flow.state is ConnState.CLOSING:
            # Peer retransmitted its FIN: our FIN-ACK was lost.
            self._control(flow, seq_add(flow.tx_next_seq, -1), flow.rx_next_expected,
                          TcpFlags.FIN | TcpFlags.ACK, now)
            return
        if seq_diff(fin_seq, flow.rx_next_expected) != 0 or plen:
            return  # data still missing; the peer will retransmit
        flow.rx_next_expected = seq_add(fin_seq, 1)
        flow.state = ConnState.CLOSING
        self._control(flow, flow.tx_next_seq, flow.rx_next_expected,
                      TcpFlags.FIN | TcpFlags.ACK, now)
        flow.tx_next_seq = seq_add(flow.tx_next_seq, 1)
        flow.tx_sent_max = flow.tx_next_seq
        self._event(flow.guest, "closed", flow)

    def _close(self, flow: ConsolidatedFlowState, now: int, why: Optional[str]) -> None:
        if flow.key in self.table:
            self.table.remove(flow.key)
        self.recovering.pop(flow.key, None)
        flow.state = ConnState.CLOSING
        flow.pending_tx_bytes = 0
        if why:
            self._event(flow.guest, why, flow)

    def connect(self, guest: int, key: FlowKey, now: int) -> None:
        """Guest-initiated open; completes through the slow-path queue."""
        self.submit(guest, ("connect", guest, key), now)

    def handle_connect(self, now: int, guest: int, key: FlowKey) -> None:
        self._log(now, "connect", guest)
        if key in self.table or key in self.pending:
            return
        self.pending[key] = "active"

        def resolved(t: int, info: Optional[TunnelInfo]) -> None:
            self.pending.pop(key, None)
            if info is None:
                self._log(t, "no_route", guest)
                self._event(guest, "failed", key)
                return
            self._log(t, "resolve", guest)
            flow = self._new_flow(key, guest, info, ConnState.SYN_SENT)
            flow.last_ack_time = t
            self.table.install(flow)
            self._control(flow, flow.tx_acked_seq, 0, TcpFlags.SYN, t)

        self.resolve_virtualization(key, now, resolved)

    def _event(self, guest: int, what: str, obj) -> None:
        g = self.guests.get(guest)
        if g is not None and g.on_event is not None:
            g.on_event(what, obj)

    # -- timeouts and rates ---------------------------------------------

    def handle_timeouts(self, now: int) -> List[ConsolidatedFlowState]:
        """Go-back-N every flow whose oldest unacked byte is older than the
        RTO. Timed-out flows are queued per guest and served round-robin."""
        rto = self.params.rto
        expired: List[ConsolidatedFlowState] = []
        for flow in self.table:
            if flow.tx_sent_max == flow.tx_acked_seq:
                continue
            if now - flow.last_ack_time >= rto:
                expired.append(flow)
        for flow in expired:
            flow.last_ack_time = now  # not again until this one is served
            self.submit(flow.guest, ("timeout", flow), now)
        return expired

    def _retransmit(self, flow: ConsolidatedFlowState, now: int) -> None:
        if flow.key not in self.table:
            return
        self._log(now, "timeout", flow.guest)
        flow.timeouts += 1
        flow.last_ack_time = now
        if flow.state is ConnState.SYN_SENT:
            self._control(flow, flow.isn, 0, TcpFlags.SYN, now)
            return
        if flow.tx_acked_seq == flow.isn:
            self._control(flow, flow.isn, flow.rx_next_expected, TcpFlags.SYN | TcpFlags.ACK, now)
            return
        if flow.state is ConnState.CLOSING:
            self._control(flow, seq_add(flow.tx_next_seq, -1), flow.rx_next_expected,
                          TcpFlags.FIN | TcpFlags.ACK, now)
            return
        unacked = seq_diff(flow.tx_sent_max, flow.tx_acked_seq)
        outstanding = seq_diff(flow.tx_next_seq, flow.tx_acked_seq)
        if unacked <= 0:
            return
        if outstanding > 0:
            flow.pending_tx_bytes += outstanding
            flow.tx_next_seq = flow.tx_acked_seq
        if self.rate_policy.on_timeout(flow):
            self.recovering[flow.key] = flow
        core = self.cores[flow.core]
        core.enqueue_flow(flow, now)
        self.env.wake(flow.core, now)

    def update_flow_rates(self, now: int) -> None:
        done = []
        for key, flow in self.recovering.items():
            self.rate_policy.on_period(flow)
            if flow.rate >= self.rate_policy.rate:
                done.append(key)
        for key in done:
            del self.recovering[key]

    # -- periodic tick --------------------------------------------------

    def tick(self, now: int) -> None:
        self._log(now, "tick")
        self.allocator.replenish_all(now, self.budgets)
        self.handle_timeouts(now)
        self.update_flow_rates(now)
        if not self.busy and any(self.queues.values()):
            self.busy = True
            self.env.schedule(now, self._serve)
        for c in range(len(self.cores)):
            self.env.wake(c, now)
