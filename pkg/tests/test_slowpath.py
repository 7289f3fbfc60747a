import pytest

from sharedstack.accounting import BudgetTable, CostModel
from sharedstack.allocator import Allocator, AllocatorConfig
from sharedstack.fastpath import FastPathCore, FastPathParams
from sharedstack.flowtable import ConnState, FlowTable
from sharedstack.guest import GuestContext
from sharedstack.harness.events import EventLoop
from sharedstack.packetmodel import (
    FlowKey,
    HeaderTemplate,
    TcpFlags,
    assemble_packet,
    ip,
    parse_packet,
    reverse_template,
    seq_add,
    template_of,
)
from sharedstack.slowpath import (
    GRE_UDP_PORT,
    AimdRate,
    ConstantRate,
    SlowPath,
    SlowPathParams,
    TunnelInfo,
    TunnelRegistry,
    rss_core,
)

HOST_MAC, PEER_MAC = 0xA, 0xB
HOST_IP, PEER_IP = ip("192.168.0.1"), ip("192.168.0.2")
PERIOD = 210_000
LATENCY = 2000
SERVICE = 100
RTO = 5000
RATE = 1.0


def gvip(g):
    return ip("10.0.0.2") + (g << 8)


def pvip(g):
    return ip("10.0.0.1") + (g << 8)


class Env:
    def __init__(self):
        self.loop = EventLoop()
        self.sent = []
        self.woken = []

    def schedule(self, time, fn, *args):
        self.loop.at(time, 0, fn, *args)

    def send(self, packet, time):
        self.sent.append((time, packet))

    def wake(self, core, time):
        self.woken.append((time, core))


class Rig:
    def __init__(self, n_guests=2, policy=AimdRate, charge=False, balance=PERIOD):
        self.env = Env()
        self.table = FlowTable()
        self.budgets = BudgetTable(1, range(n_guests), PERIOD, initial=balance)
        self.allocator = Allocator(AllocatorConfig(cap=PERIOD, weights={g: 1 for g in range(n_guests)}), 1)
        self.guests = {g: GuestContext(g, 1) for g in range(n_guests)}
        self.events = []
        for g in self.guests.values():
            g.on_event = lambda what, obj, g=g.id: self.events.append((g, what))
        self.punted = []
        self.core = FastPathCore(0, self.table, self.budgets, list(self.guests.values()),
                                 CostModel(), FastPathParams(initial_rate=RATE), self.punted.append)
        self.registry = TunnelRegistry(HOST_MAC, HOST_IP, LATENCY)
        for g in range(n_guests):
            self.registry.register_local(100 + g, gvip(g), g)
            self.registry.register(100 + g, pvip(g), TunnelInfo(PEER_IP, GRE_UDP_PORT, PEER_MAC, 100 + g))
        self.sp = SlowPath(self.env, self.table, self.budgets, self.allocator, self.guests, [self.core],
                           self.registry, policy(RATE),
                           SlowPathParams(rto=RTO, service_cycles=SERVICE, charge_guests=charge))

    def run(self, until):
        self.env.loop.run(until)

    def peer_template(self, g, sport=5000, dport=7):
        return HeaderTemplate(PEER_MAC, HOST_MAC, PEER_IP, HOST_IP, 40000, GRE_UDP_PORT,
                              100 + g, pvip(g), gvip(g), sport, dport)

    def syn(self, g, sport=5000, dport=7, seq=1000):
        return assemble_packet(self.peer_template(g, sport, dport), seq, 0, TcpFlags.SYN, 0)

    def sent_flags(self):
        return [p.flags for _, p in self.env.sent]


def established(rig, g=0, sport=5000, at=0):
    rig.sp.listen(g, 7)
    rig.sp.enqueue_packet(rig.syn(g, sport), at)
    rig.run(at + SERVICE + LATENCY)
    key = FlowKey(gvip(g), 7, pvip(g), sport, 100 + g)
    return rig.table.lookup(key)


def test_resolution_latency_and_no_route():
    r = Rig()
    got = []
    k = FlowKey(gvip(0), 7, pvip(0), 5000, 100)
    r.sp.resolve_virtualization(k, 10, lambda t, info: got.append((t, info)))
    r.sp.resolve_virtualization(k._replace(remote_ip=ip("10.9.9.9")), 10,
                                lambda t, info: got.append((t, info)))
    r.run(10**6)
    assert got == [(10 + LATENCY, TunnelInfo(PEER_IP, GRE_UDP_PORT, PEER_MAC, 100)), (10 + LATENCY, None)]


def test_passive_open_installs_flow_and_answers_syn_ack():
    r = Rig()
    f = established(r)
    assert f is not None and f.state is ConnState.ESTABLISHED
    assert r.events == [(0, "accepted")]
    (t, synack), = r.env.sent
    assert t == SERVICE + LATENCY
    assert synack.flags == TcpFlags.SYN | TcpFlags.ACK and synack.ack == 1001
    assert parse_packet(synack).key == r.peer_template(0).flow_key()
    assert f.template.flow_key() == reverse_template(r.peer_template(0)).flow_key()
    assert (f.template.outer_dst_ip, f.template.outer_dst_mac) == (PEER_IP, PEER_MAC)


def test_syn_without_listener_is_reset():
    r = Rig()
    r.sp.enqueue_packet(r.syn(0, dport=99), 0)
    r.run(10**6)
    assert r.sent_flags() == [TcpFlags.RST | TcpFlags.ACK] and len(r.table) == 0


def test_syn_to_unroutable_remote_is_reset():
    r = Rig()
    r.sp.listen(0, 7)
    t = r.peer_template(0)._replace(inner_src_ip=ip("10.7.7.7"))
    r.sp.enqueue_packet(assemble_packet(t, 1, 0, TcpFlags.SYN, 0), 0)
    r.run(10**6)
    assert r.sent_flags() == [TcpFlags.RST | TcpFlags.ACK] and len(r.table) == 0
    assert r.sp.counters["no_route"] == 1


def test_retransmitted_syn_is_idempotent():
    r = Rig()
    r.sp.listen(0, 7)
    for t in (0, 10, 10_000):  # during and after resolution
        r.run(t)
        r.sp.enqueue_packet(r.syn(0), t)
    r.run(10**6)
    assert len(r.table) == 1
    assert r.sent_flags() == [TcpFlags.SYN | TcpFlags.ACK] * 2


def test_simultaneous_resolutions_complete_round_robin():
    r = Rig()
    r.sp.listen(0, 7)
    r.sp.listen(1, 7)
    for g, sport in ((0, 1), (0, 2), (1, 1)):
        r.sp.enqueue_packet(r.syn(g, sport), 0)
    r.run(10**6)
    resolved = [g for _, kind, g in r.sp.events if kind == "resolve"]
    assert resolved == [0, 1, 0]


def test_skewed_slow_path_load_serves_light_guest_early():
    r = Rig()
    r.sp.listen(0, 7)
    r.sp.listen(1, 7)
    for i in range(100):
        r.sp.enqueue_packet(r.syn(0, 1000 + i), 0)
    r.sp.enqueue_packet(r.syn(1, 1), 0)
    r.run(10**6)
    misses = [g for _, kind, g in r.sp.events if kind == "miss"]
    assert misses.index(1) <= 1


def test_active_open_then_data_stays_on_fast_path():
    r = Rig()
    k = FlowKey(gvip(0), 6000, pvip(0), 7, 100)
    r.sp.connect(0, k, 0)
    r.run(10**5)
    (_, syn), = r.env.sent
    assert syn.flags == TcpFlags.SYN and r.table.lookup(k).state is ConnState.SYN_SENT
    peer = reverse_template(template_of(syn))
    r.sp.enqueue_packet(assemble_packet(peer, 7000, seq_add(syn.seq, 1), TcpFlags.SYN | TcpFlags.ACK, 0), 10**5)
    r.run(2 * 10**5)
    f = r.table.lookup(k)
    assert f.state is ConnState.ESTABLISHED and r.events == [(0, "connected")]
    assert r.sent_flags()[-1] == TcpFlags.ACK
    setup_done = 2 * 10**5

    # request out, response in: both handled by the core alone
    r.guests[0].post(0, k, 64)
    now = setup_done + r.core.run_iteration(setup_done)
    (req,) = r.core.nic_tx
    r.core.nic_tx.clear()
    assert req.payload_len == 64
    r.core.nic_receive(assemble_packet(peer, 7001, seq_add(req.seq, 64), TcpFlags.ACK | TcpFlags.PSH, 64))
    now += r.core.run_iteration(now)
    assert f.rx_next_expected == 7001 + 64 and f.tx_acked_seq == seq_add(req.seq, 64)
    assert len(r.core.nic_tx) == 1  # the ACK for the response
    assert r.punted == [] and r.sp.events_after(setup_done) == []


def test_fin_closes_and_final_ack_removes_flow():
    r = Rig()
    f = established(r)
    peer = r.peer_template(0)
    fin = assemble_packet(peer, 1001, f.tx_next_seq, TcpFlags.FIN | TcpFlags.ACK, 0)
    r.sp.enqueue_packet(fin, 10**5)
    r.run(2 * 10**5)
    assert f.state is ConnState.CLOSING and r.sent_flags()[-1] == TcpFlags.FIN | TcpFlags.ACK
    r.sp.enqueue_packet(assemble_packet(peer, 1002, f.tx_next_seq, TcpFlags.ACK, 0), 2 * 10**5)
    r.run(3 * 10**5)
    assert len(r.table) == 0 and (0, "closed") in r.events


def test_data_for_unknown_flow_is_reset():
    r = Rig()
    r.sp.enqueue_packet(assemble_packet(r.peer_template(0), 5, 5, TcpFlags.ACK, 10), 0)
    r.run(10**5)
    assert r.sent_flags() == [TcpFlags.RST | TcpFlags.ACK]


def test_timeout_leaves_acked_flow_alone():
    r = Rig()
    f = established(r)
    f.ack_to(f.tx_next_seq, 0)  # the SYN-ACK is acked; nothing outstanding
    assert r.sp.handle_timeouts(10**6) == []


def sent_unacked(r, f, nbytes, at):
    f.ack_to(f.tx_next_seq, at)
    f.tx_buffer.write(nbytes)
    f.pending_tx_bytes = nbytes
    r.core.enqueue_flow(f, at)
    r.core.run_tx_batch(at)
    r.core.nic_tx.clear()


def test_timeout_rewinds_one_lost_segment():
    r = Rig()
    f = established(r)
    sent_unacked(r, f, 1460, at=10_000)
    before = f.tx_next_seq
    assert r.sp.handle_timeouts(10_000 + RTO) == [f]
    r.run(10_000 + RTO + SERVICE)
    assert f.tx_next_seq == seq_add(before, -1460) == f.tx_acked_seq
    assert f.pending_tx_bytes == 1460 and f.in_txq and f.timeouts == 1
    assert f.rate == RATE / 2


def test_two_guests_time_out_in_the_same_tick():
    r = Rig()
    fa = established(r, 0)
    fb = established(r, 1, at=10_000)
    for f in (fa, fb):
        sent_unacked(r, f, 500, at=20_000)
    r.sp.tick(20_000 + RTO)
    r.run(10**6)
    assert [g for _, kind, g in r.sp.events if kind == "timeout"] == [0, 1]
    assert fa.pending_tx_bytes == fb.pending_tx_bytes == 500


def test_aimd_trajectory_after_one_timeout():
    r = Rig()
    f = established(r)
    sent_unacked(r, f, 100, at=10_000)
    r.sp.handle_timeouts(10**5)
    r.run(10**5 + SERVICE)
    rates = [f.rate]
    for i in range(7):
        r.sp.update_flow_rates(0)
        rates.append(f.rate)
    want = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.0, 1.0]
    assert rates == pytest.approx(want) and f.key not in r.sp.recovering


def test_constant_policy_never_changes_rate():
    r = Rig(policy=ConstantRate)
    f = established(r)
    sent_unacked(r, f, 100, at=10_000)
    r.sp.handle_timeouts(10**5)
    r.run(10**5 + SERVICE)
    r.sp.update_flow_rates(0)
    assert f.rate == RATE and f.timeouts == 1


def test_tick_with_empty_queues_only_replenishes():
    r = Rig(balance=0)
    r.budgets.balance[0][0] = -50_000
    r.sp.tick(PERIOD)
    r.run(10**6)
    assert [k for _, k, _ in r.sp.events] == ["tick"]
    # 98,700 each: guest 0 repays its deficit, guest 1 fills from zero
    assert r.budgets.per_core(0) == [48_700] and r.budgets.per_core(1) == [98_700]
    assert r.env.woken == [(PERIOD, 0)]


def test_slow_path_not_charged_by_default():
    r = Rig()
    established(r)
    assert r.budgets.total_charged() == 0


def test_charge_guests_bills_owning_core():
    r = Rig(charge=True)
    established(r)
    assert r.budgets.charged[0] == SERVICE and r.sp.charged_cycles == SERVICE
    assert r.budgets.conserved()


def test_rss_core_spreads_consecutive_ports():
    keys = [FlowKey(gvip(0), 7, pvip(0), 40000 + i, 100) for i in range(400)]
    counts = [0] * 4
    for k in keys:
        counts[rss_core(k, 4)] += 1
    assert min(counts) > 60
