"""Remote client machine driving RPC echo traffic at the guests.

The peer runs an idealized TCP client per connection: no CPU cost, an RTO
with exponential backoff, go-back-N retransmission, and ACKs piggybacked on
the next request whenever one goes out in the same instant.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..packetmodel import (
    FlowKey,
    HeaderTemplate,
    Packet,
    TcpFlags,
    assemble_packet,
    parse_packet,
    seq_add,
    seq_diff,
)
from ..slowpath import GRE_UDP_PORT, entropy_port
from .events import WORKLOAD, EventLoop

SYN, ACK, FIN, RST, PSH = TcpFlags.SYN, TcpFlags.ACK, TcpFlags.FIN, TcpFlags.RST, TcpFlags.PSH
FIRST_PORT = 10000


@dataclass
class PeerWorkload:
    """Traffic one guest receives: ``connections`` parallel closed loops."""

    guest: int
    name: str
    tenant: int
    local_vip: int  # peer side virtual address in the guest's network
    guest_vip: int
    guest_port: int
    connections: int
    message_size: int
    mode: str = "closed_loop"
    burst_on: int = 0  # cycles
    burst_off: int = 0
    next_port: int = FIRST_PORT
    issued: int = 0
    completed: int = 0
    failed: int = 0
    timeouts: int = 0
    samples: List[Tuple[int, int]] = field(default_factory=list)  # (done at, latency)
    issue_times: List[int] = field(default_factory=list)  # only recorded when asked

    def allowed(self, now: int) -> bool:
        if self.mode != "burst":
            return True
        return now % (self.burst_on + self.burst_off) < self.burst_on

    def next_window(self, now: int) -> int:
        period = self.burst_on + self.burst_off
        return now - now % period + period


class PeerConn:
    __slots__ = (
        "key", "tmpl", "wl", "state", "isn", "snd_una", "snd_nxt", "snd_max",
        "rcv_nxt", "req_start", "resp_got", "waiting", "rto", "last_progress",
        "timer", "fin_seq", "slack",
    )

    def __init__(self, key: FlowKey, tmpl: HeaderTemplate, wl: PeerWorkload, isn: int, rto: int):
        self.key = key
        self.tmpl = tmpl
        self.wl = wl
        self.state = "syn_sent"
        self.isn = isn
        self.snd_una = isn
        self.snd_nxt = seq_add(isn, 1)
        self.snd_max = self.snd_nxt
        self.rcv_nxt = 0
        self.req_start = -1
        self.resp_got = 0
        self.waiting = False  # a request is outstanding
        self.rto = rto
        self.last_progress = 0
        self.timer = False
        self.fin_seq = None
        self.slack = 0  # timer jitter added after a timeout

    def unacked(self) -> bool:
        return self.state in ("syn_sent", "fin_sent") or self.snd_una != self.snd_max


class RemotePeer:
    def __init__(
        self,
        loop: EventLoop,
        send,  # send(packet, now): onto the link towards the host
        mac: int,
        ip: int,
        host_mac: int,
        host_ip: int,
        rto: int,
        max_backoff: int = 64,
        mss: int = 1460,
        start_spread: int = 0,
        record_issues: bool = False,
        rto_jitter: float = 0.0,
        rng: Optional[random.Random] = None,
    ):
        self.loop = loop
        self.send = send
        self.mac = mac
        self.ip = ip
        self.host_mac = host_mac
        self.host_ip = host_ip
        self.base_rto = rto
        self.max_rto = rto * max_backoff
        self.mss = mss
        self.start_spread = start_spread
        self.record_issues = record_issues
        # Timers fire up to rto_jitter * rto late, so connections that lost
        # packets together do not all retransmit in the same instant.
        self.rto_jitter = rto_jitter
        self.rng = rng or random.Random(0)
        self.workloads: List[PeerWorkload] = []
        self.conns: Dict[FlowKey, PeerConn] = {}
        self._isn = 0x1000
        self.stray = 0
        self.last_established = 0

    def add(self, wl: PeerWorkload) -> None:
        self.workloads.append(wl)

    def start(self, now: int) -> None:
        """Open every connection, spread evenly over ``start_spread`` cycles."""
        total = sum(wl.connections for wl in self.workloads)
        i = 0
        for wl in self.workloads:
            for _ in range(wl.connections):
                t = now + (self.start_spread * i // total if total else 0)
                self.loop.at(t, WORKLOAD, self._open, wl)
                i += 1

    # -- connection management ------------------------------------------

    def _new_port(self, wl: PeerWorkload) -> int:
        for _ in range(65536 - FIRST_PORT):
            port = wl.next_port
            wl.next_port = FIRST_PORT + (port + 1 - FIRST_PORT) % (65536 - FIRST_PORT)
            key = FlowKey(wl.local_vip, port, wl.guest_vip, wl.guest_port, wl.tenant)
            c = self.conns.get(key)
            if c is None or c.state == "closed":
                return port
        raise RuntimeError("peer ran out of ports")

    def _open(self, now: int, wl: PeerWorkload) -> None:
        port = self._new_port(wl)
        key = FlowKey(wl.local_vip, port, wl.guest_vip, wl.guest_port, wl.tenant)
        tmpl = HeaderTemplate(
            self.mac, self.host_mac, self.ip, self.host_ip, entropy_port(key), GRE_UDP_PORT,
            wl.tenant, wl.local_vip, wl.guest_vip, port, wl.guest_port,
        )
        self._isn = (self._isn * 1103515245 + 12345) % (1 << 32)
        conn = PeerConn(key, tmpl, wl, self._isn, self.base_rto)
        conn.last_progress = now
        if wl.mode == "short_lived":
            conn.req_start = now  # connection setup counts towards latency
            wl.issued += 1
            conn.waiting = True
            if self.record_issues:
                wl.issue_times.append(now)
        self.conns[key] = conn
        self._emit(conn, conn.isn, SYN, 0, now, ack=0)
        self._arm(conn, now)

    def _emit(self, conn: PeerConn, seq: int, flags, plen: int, now: int, ack: Optional[int] = None) -> None:
        self.send(assemble_packet(conn.tmpl, seq, conn.rcv_nxt if ack is None else ack, flags, plen), now)

    def _send_range(self, conn: PeerConn, start: int, end: int, now: int) -> None:
        seq = start
        while seq_diff(end, seq) > 0:
            n = min(self.mss, seq_diff(end, seq))
            self._emit(conn, seq, ACK | PSH, n, now)
            seq = seq_add(seq, n)

    def _issue(self, conn: PeerConn, now: int) -> bool:
        """Send the next request, or defer it to the next burst window."""
        wl = conn.wl
        if not wl.allowed(now):
            self.loop.at(wl.next_window(now), WORKLOAD, self._resume, conn)
            return False
        if wl.mode != "short_lived":
            conn.req_start = now
            wl.issued += 1
            conn.waiting = True
            if self.record_issues:
                wl.issue_times.append(now)
        conn.resp_got = 0
        start = conn.snd_nxt
        conn.snd_nxt = seq_add(start, wl.message_size)
        conn.snd_max = conn.snd_nxt
        if conn.snd_una == start:
            conn.last_progress = now
        self._send_range(conn, start, conn.snd_nxt, now)
        self._arm(conn, now)
        return True

    def _resume(self, now: int, conn: PeerConn) -> None:
        if conn.state == "established" and not conn.waiting:
            self._issue(conn, now)

    def _close(self, conn: PeerConn, now: int) -> None:
        conn.state = "fin_sent"
        conn.fin_seq = conn.snd_nxt
        self._emit(conn, conn.snd_nxt, FIN | ACK, 0, now)
        conn.snd_nxt = seq_add(conn.snd_nxt, 1)
        conn.snd_max = conn.snd_nxt
        conn.last_progress = now
        self._arm(conn, now)

    # -- receive --------------------------------------------------------

    def receive(self, now: int, p: Packet) -> None:
        parsed = parse_packet(p)
        conn = None if parsed is None else self.conns.get(parsed.key)
        if conn is None:
            self.stray += 1
            return
        _, seq, ack, flags, plen = parsed
        wl = conn.wl
        if flags & RST:
            if conn.state != "closed":
                conn.state = "closed"
                wl.failed += 1
                if conn.waiting:
                    conn.waiting = False
                    wl.issued -= 1  # never answered; retried on a new connection
                self.loop.at(now + self.base_rto, WORKLOAD, self._open, wl)
            return
        if conn.state == "closed":
            if flags & FIN:
                self._emit(conn, conn.snd_nxt, ACK, 0, now)  # our last ACK was lost
            return
        if conn.state == "syn_sent":
            if flags & SYN and flags & ACK and ack == seq_add(conn.isn, 1):
                conn.state = "established"
                self.last_established = now
                conn.rcv_nxt = seq_add(seq, 1)
                conn.snd_una = ack
                self._progress(conn, now)
                if wl.mode == "short_lived":
                    self._send_request_only(conn, now)
                elif not self._issue(conn, now):
                    self._emit(conn, conn.snd_nxt, ACK, 0, now)
            return
        if flags & SYN:
            self._emit(conn, conn.snd_nxt, ACK, 0, now)  # duplicate SYN-ACK
            return
        if flags & ACK:
            adv = seq_diff(ack, conn.snd_una)
            if 0 < adv <= seq_diff(conn.snd_max, conn.snd_una):
                conn.snd_una = ack
                self._progress(conn, now)
        sent = False
        if plen:
            if seq == conn.rcv_nxt:
                conn.rcv_nxt = seq_add(seq, plen)
                conn.resp_got += plen
                if conn.waiting and conn.resp_got >= wl.message_size:
                    sent = self._complete(conn, now)
            if not sent:
                self._emit(conn, conn.snd_nxt, ACK, 0, now)
        if flags & FIN and conn.state == "fin_sent" and seq == conn.rcv_nxt:
            conn.rcv_nxt = seq_add(seq, 1)
            self._emit(conn, conn.snd_nxt, ACK, 0, now)
            conn.state = "closed"
            self.loop.at(now, WORKLOAD, self._open, wl)

    def _send_request_only(self, conn: PeerConn, now: int) -> None:
        # Short-lived connections send their one request right after the
        # handshake, carrying the handshake's final ACK.
        conn.resp_got = 0
        start = conn.snd_nxt
        conn.snd_nxt = seq_add(start, conn.wl.message_size)
        conn.snd_max = conn.snd_nxt
        self._send_range(conn, start, conn.snd_nxt, now)
        self._arm(conn, now)

    def _complete(self, conn: PeerConn, now: int) -> bool:
        wl = conn.wl
        conn.waiting = False
        wl.completed += 1
        wl.samples.append((now, now - conn.req_start))
        if wl.mode == "short_lived":
            self._close(conn, now)
            return True
        return self._issue(conn, now)

    # -- retransmission -------------------------------------------------

    def _progress(self, conn: PeerConn, now: int) -> None:
        conn.last_progress = now
        conn.rto = self.base_rto
        conn.slack = 0

    def _arm(self, conn: PeerConn, now: int) -> None:
        if not conn.timer:
            conn.timer = True
            self.loop.at(conn.last_progress + conn.rto + conn.slack, WORKLOAD, self._on_timer, conn)

    def _on_timer(self, now: int, conn: PeerConn) -> None:
        conn.timer = False
        if conn.state == "closed" or not conn.unacked():
            return
        deadline = conn.last_progress + conn.rto + conn.slack
        if now < deadline:
            conn.timer = True
            self.loop.at(deadline, WORKLOAD, self._on_timer, conn)
            return
        conn.wl.timeouts += 1
        conn.rto = min(conn.rto * 2, self.max_rto)
        conn.last_progress = now
        if self.rto_jitter:
            conn.slack = int(conn.rto * self.rto_jitter * self.rng.random())
        if conn.state == "syn_sent":
            self._emit(conn, conn.isn, SYN, 0, now, ack=0)
        else:
            end = conn.fin_seq if conn.state == "fin_sent" else conn.snd_max
            self._send_range(conn, conn.snd_una, end, now)
            if conn.state == "fin_sent":
                self._emit(conn, conn.fin_seq, FIN | ACK, 0, now)
        self._arm(conn, now)

    # -- accounting -----------------------------------------------------

    def in_flight(self, wl: PeerWorkload) -> int:
        return sum(1 for c in self.conns.values() if c.wl is wl and c.waiting)
