"""Wires the stack, the remote peer and the link into one simulation run.

Each fast-path core advances one task batch (RX, POLL or TX) per event. A
batch's side effects (packets for the wire, packets punted to the slow path,
guest notifications) become visible when the batch ends, i.e. at the start
of the core's next event. A core whose whole iteration found nothing to do
parks until a packet arrives, a guest posts work, a tick restores budget or
a paced flow becomes ready.
"""

from __future__ import annotations

import math
import random
from typing import Dict, List, Optional

from ..accounting import BudgetTable, CostModel
from ..allocator import Allocator, AllocatorConfig
from ..fastpath import FastPathCore, FastPathParams
from ..flowtable import FlowTable
from ..guest import GuestContext
from ..packetmodel import Packet, ip, parse_packet
from ..slowpath import (
    GRE_UDP_PORT,
    RATE_POLICIES,
    SlowPath,
    SlowPathParams,
    TunnelInfo,
    TunnelRegistry,
    rss_core,
)
from .app import EchoApp
from .config import SimConfig
from .events import CORE, SLOWPATH, TICK, EventLoop
from .link import Link
from .peer import PeerWorkload, RemotePeer

HOST_MAC = 0x02_00_00_00_00_01
HOST_IP = ip("192.168.0.1")
PEER_MAC = 0x02_00_00_00_00_02
PEER_IP = ip("192.168.0.2")
TENANT_BASE = 100


class InvariantError(AssertionError):
    """A runtime invariant of the simulation was violated."""


def guest_vip(i: int) -> int:
    return ip("10.0.0.2") + (i << 8)


def peer_vip(i: int) -> int:
    return ip("10.0.0.1") + (i << 8)


class Simulation:
    def __init__(self, config: SimConfig):
        cfg = config.validate()
        self.cfg = cfg
        self.loop = EventLoop()
        m = cfg.num_fastpath_cores
        seeds = random.Random(cfg.seed)
        self.guests = [
            GuestContext(i, m, g.weight, g.id) for i, g in enumerate(cfg.guests)
        ]
        self.table = FlowTable()
        self.budgets = BudgetTable(m, range(len(self.guests)), cfg.cap)
        self.allocator = Allocator(
            AllocatorConfig(
                boost=cfg.allocator.boost,
                cap=cfg.cap,
                update_period=cfg.update_period,
                weights={g.id: g.weight for g in self.guests},
            ),
            m,
        )
        self.allocator.prime(self.budgets)
        cm = cfg.cost_model
        self.costs = CostModel(
            base_cycles_per_task=cm.base_cycles,
            millicycles_per_byte=int(round(cm.cycles_per_byte * 1000)),
            poll_empty_cycles=cm.poll_empty_cycles,
            drop_cost_fraction=cm.drop_cost_fraction,
            jitter=cm.jitter,
            rng=random.Random(seeds.getrandbits(64)) if cm.jitter else None,
        )
        params = FastPathParams(
            batch_size=cfg.batch_size,
            mss=cfg.mss,
            initial_rate=cfg.flow_rate,
            gating=cfg.budget_gating,
            nic_rx_ring=cfg.nic_rx_ring,
        )
        self._punted: List[List[Packet]] = [[] for _ in range(m)]
        self.cores = [
            FastPathCore(c, self.table, self.budgets, self.guests, self.costs, params,
                         self._punted[c].append)
            for c in range(m)
        ]
        if cfg.trace:
            self.trace: Optional[list] = []
            for core in self.cores:
                core.trace = self.trace
        else:
            self.trace = None

        self.registry = TunnelRegistry(HOST_MAC, HOST_IP, cfg.slowpath.resolution_latency_cycles)
        for i in range(len(self.guests)):
            self.registry.register_local(TENANT_BASE + i, guest_vip(i), i)
            self.registry.register(
                TENANT_BASE + i, peer_vip(i),
                TunnelInfo(PEER_IP, GRE_UDP_PORT, PEER_MAC, TENANT_BASE + i),
            )
        self.slowpath = SlowPath(
            self,
            self.table,
            self.budgets,
            self.allocator,
            {g.id: g for g in self.guests},
            self.cores,
            self.registry,
            RATE_POLICIES[cfg.rate_policy](cfg.flow_rate),
            SlowPathParams(
                rto=cfg.cycles(cfg.slowpath.rto_us),
                service_cycles=cfg.slowpath.service_cycles,
                isn_seed=seeds.getrandbits(32),
                charge_guests=cfg.slowpath.charge_guests,
            ),
        )

        hz = cfg.cpu_ghz * 1e9
        lk = cfg.link
        self.peer = RemotePeer(
            self.loop,
            self._send_to_host,
            PEER_MAC,
            PEER_IP,
            HOST_MAC,
            HOST_IP,
            rto=cfg.cycles(cfg.peer.rto_us),
            max_backoff=cfg.peer.max_backoff,
            mss=cfg.mss,
            start_spread=cfg.cycles(cfg.peer.start_spread_us),
            rto_jitter=cfg.peer.rto_jitter,
            rng=random.Random(seeds.getrandbits(64)),
        )
        self.to_peer = Link(self.loop, lk.bandwidth_bps, hz, lk.propagation_cycles,
                            self.peer.receive, lk.loss, random.Random(seeds.getrandbits(64)))
        self.to_host = Link(self.loop, lk.bandwidth_bps, hz, lk.propagation_cycles,
                            self._nic_arrival, lk.loss, random.Random(seeds.getrandbits(64)))

        self.apps: Dict[int, EchoApp] = {}
        self.workloads: List[PeerWorkload] = []
        for i, g in enumerate(cfg.guests):
            w = g.workload
            self.slowpath.listen(i, w.listen_port)
            self.apps[i] = EchoApp(self.loop, self.guests[i], w.message_size,
                                   cfg.cycles(w.app_us), self.wake)
            wl = PeerWorkload(
                guest=i,
                name=g.id,
                tenant=TENANT_BASE + i,
                local_vip=peer_vip(i),
                guest_vip=guest_vip(i),
                guest_port=w.listen_port,
                connections=w.connections,
                message_size=w.message_size,
                mode=w.mode,
                burst_on=cfg.cycles(w.burst_on_ms * 1000),
                burst_off=cfg.cycles(w.burst_off_ms * 1000),
            )
            self.peer.add(wl)
            self.workloads.append(wl)

        self.phase = [0] * m
        self.parked = [True] * m
        self.worked = [False] * m  # did the current iteration do anything
        self._marks = [0] * m
        self.busy_until = [0] * m
        self.ran = False

    # -- environment for the slow path ----------------------------------

    def schedule(self, time: int, fn, *args) -> None:
        self.loop.at(time, SLOWPATH, fn, *args)

    def send(self, packet: Packet, time: int) -> None:
        self.to_peer.send(packet, time)

    def wake(self, c: int, now: int) -> None:
        if self.parked[c] and self.cores[c].has_work(now):
            self.parked[c] = False
            self.phase[c] = 0
            self.worked[c] = True
            self.loop.at(now, CORE, self._step, c)

    # -- packet plumbing ------------------------------------------------

    def _send_to_host(self, p: Packet, now: int) -> None:
        self.to_host.send(p, now)

    def _nic_arrival(self, now: int, p: Packet) -> None:
        parsed = parse_packet(p)
        c = 0 if parsed is None else rss_core(parsed.key, len(self.cores))
        if self.cores[c].nic_receive(p):
            self.wake(c, now)

    # -- core driver ----------------------------------------------------

    def _flush(self, c: int, now: int) -> None:
        core = self.cores[c]
        if core.nic_tx:
            send = self.to_peer.send
            for p in core.nic_tx:
                send(p, now)
            core.nic_tx.clear()
        punted = self._punted[c]
        if punted:
            for p in punted:
                self.slowpath.enqueue_packet(p, now)
            punted.clear()
        if core.notified:
            gids = list(core.notified)
            core.notified.clear()
            for g in gids:
                self.apps[g].on_notify(now)

    def _mark(self, c: int) -> int:
        st = self.cores[c].stats
        t = st.tasks
        return st.rx_packets + t["poll"] + t["tx"]

    def _step(self, now: int, c: int) -> None:
        core = self.cores[c]
        self._flush(c, now)
        ph = self.phase[c]
        if ph == 0:
            if not self.worked[c] and not core.has_work(now):
                self.parked[c] = True
                t = core.next_pacing_time(now)
                if t < math.inf:
                    self.loop.at(max(int(t), now), CORE, self._pace, c)
                return
            self.worked[c] = False
            core.stats.iterations += 1
            before = self._mark(c)
            cost = core.run_rx_batch(now)
        elif ph == 1:
            before = self._mark(c)
            cost = core.run_poll_batch(now)
        else:
            before = self._mark(c)
            cost = core.run_tx_batch(now)
        if self._mark(c) != before:
            self.worked[c] = True
        self.phase[c] = (ph + 1) % 3
        self.busy_until[c] = now + cost
        self.loop.at(now + cost, CORE, self._step, c)

    def _pace(self, now: int, c: int) -> None:
        self.wake(c, now)

    def _tick(self, now: int) -> None:
        self.slowpath.tick(now)
        self.loop.at(now + self.cfg.update_period, TICK, self._tick)

    # -- running --------------------------------------------------------

    def run(self, duration: Optional[int] = None) -> None:
        if self.ran:
            raise RuntimeError("a Simulation runs once")
        self.ran = True
        end = self.cfg.duration if duration is None else duration
        self.end = end
        self.peer.start(0)
        self.loop.at(self.cfg.update_period, TICK, self._tick)
        self.loop.run(end)
        self.check_ledger()

    def ledger(self) -> dict:
        stats = [core.stats for core in self.cores]
        consumed = sum(s.cycles_total for s in stats)
        unaccounted = sum(s.cycles_unaccounted for s in stats)
        charged = self.budgets.total_charged() - self.slowpath.charged_cycles
        return {
            "charged": charged,
            "unaccounted": unaccounted,
            "consumed": consumed,
            "ok": charged + unaccounted == consumed and self.budgets.conserved(),
        }

    def check_ledger(self) -> None:
        led = self.ledger()
        if not led["ok"]:
            raise InvariantError(
                f"cycle ledger mismatch: charged {led['charged']} + unaccounted "
                f"{led['unaccounted']} != consumed {led['consumed']}"
            )
