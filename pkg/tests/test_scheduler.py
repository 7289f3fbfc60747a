from hypothesis import given
from hypothesis import strategies as st

from sharedstack.accounting import BudgetTable
from sharedstack.guest import GuestContext
from sharedstack.scheduler import (
    CoreSchedState,
    PollItem,
    rx_admit,
    schedule_poll,
    schedule_tx,
)

from helpers import flow, key

BIG = 10**9


def setup(n_guests=2, balances=None, batch=16):
    guests = [GuestContext(g, 1) for g in range(n_guests)]
    t = BudgetTable(1, range(n_guests), BIG, initial=BIG)
    for g, b in (balances or {}).items():
        t.balance[0][g] = b
    return CoreSchedState(batch_size=batch), guests, t


def post(guest, n, nbytes=64):
    for _ in range(n):
        guest.post(0, key(), nbytes)


def cost(nbytes):
    return 200


def test_poll_underfull_batch():
    s, gs, t = setup()
    post(gs[0], 3)
    post(gs[1], 2)
    assert schedule_poll(s, gs, t, cost) == [PollItem(0, 0, 3), PollItem(1, 0, 2)]


def test_poll_skips_guest_without_budget():
    s, gs, t = setup(balances={0: 0})
    post(gs[0], 10)
    post(gs[1], 1)
    assert schedule_poll(s, gs, t, cost) == [PollItem(1, 0, 1)]


def test_poll_round_robin_over_two_iterations():
    s, gs, t = setup()
    post(gs[0], 20)
    post(gs[1], 20)
    assert schedule_poll(s, gs, t, cost) == [PollItem(0, 0, 16)]
    for _ in range(16):
        gs[0].tx_queues[0].popleft()
    assert s.guest_rr_cursor == 1
    assert schedule_poll(s, gs, t, cost) == [PollItem(1, 0, 16)]


def test_poll_stops_when_projected_budget_runs_out():
    s, gs, t = setup(balances={0: 450})
    post(gs[0], 10)
    # 450 -> 250 -> 50 -> -150: the third request overdraws, then stop
    assert schedule_poll(s, gs, t, cost) == [PollItem(0, 0, 3)]


def test_poll_ungated_ignores_budget():
    s, gs, t = setup(balances={0: -1})
    post(gs[0], 4)
    assert schedule_poll(s, gs, t, cost, gating=False) == [PollItem(0, 0, 4)]


def ready_flow(sched, guest, nst, pending=100, lport=80):
    f = flow(guest=guest, lport=lport, rate=1.0)
    f.pending_tx_bytes = pending
    f.next_send_time = nst
    sched.push_flow(f)
    return f


def test_tx_budget_gate():
    s, gs, t = setup(balances={0: 100, 1: -5})
    a = ready_flow(s, 0, 0)
    ready_flow(s, 1, 0, lport=81)
    assert schedule_tx(s, gs, t, now=0) == [(a, 100)]


def test_tx_pacing_gate():
    s, gs, t = setup(n_guests=1)
    f10, f20, f30 = (ready_flow(s, 0, nst, lport=80 + i) for i, nst in enumerate((10, 20, 30)))
    plan = schedule_tx(s, gs, t, now=25)
    assert [f for f, _ in plan] == [f10, f20]
    assert f30.in_txq


def test_tx_two_guests_share_batch_guest_first():
    s, gs, t = setup()
    a = [ready_flow(s, 0, 0, lport=100 + i) for i in range(8)]
    b = [ready_flow(s, 1, 0, lport=200 + i) for i in range(8)]
    plan = schedule_tx(s, gs, t, now=0)
    assert [f for f, _ in plan] == a + b


def test_tx_segments_at_mss_and_advances_send_time():
    s, gs, t = setup(n_guests=1)
    f = ready_flow(s, 0, 0, pending=3000)
    f.rate = 10.0
    # each segment pushes the send time by ceil(len / rate)
    assert schedule_tx(s, gs, t, now=0, mss=1460) == [(f, 1460)]
    assert f.next_send_time == 146
    f.pending_tx_bytes -= 1460
    assert schedule_tx(s, gs, t, now=10_000, mss=1460) == [(f, 1460), (f, 80)]
    assert f.next_send_time == 146 + 146 + 8 and not f.in_txq


def test_rx_admit():
    _, _, t = setup(balances={0: 500, 1: 0})
    assert rx_admit(t, 0, 0) is True
    assert rx_admit(t, 1, 0) is False
    assert rx_admit(t, 1, 0, gating=False) is True


@given(st.integers(1, 8), st.integers(1, 32), st.integers(1, 40))
def test_flows_of_one_guest_served_evenly(k, batch, rounds):
    s, gs, t = setup(n_guests=1, batch=batch)
    flows = [ready_flow(s, 0, 0, pending=10**9, lport=1000 + i) for i in range(k)]
    sent = {id(f): 0 for f in flows}
    now = 0
    for _ in range(rounds):
        plan = schedule_tx(s, gs, t, now=now, mss=100)
        assert len(plan) <= batch
        for f, seg in plan:
            sent[id(f)] += 1
            f.pending_tx_bytes -= seg
        now += 100  # one segment time at rate 1
    assert max(sent.values()) - min(sent.values()) <= 1


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=6),
       st.lists(st.integers(0, 30), min_size=6, max_size=6), st.integers(1, 16))
def test_no_work_for_guests_without_budget(balances, queued, batch):
    n = len(balances)
    s, gs, t = setup(n_guests=n, balances=dict(enumerate(balances)), batch=batch)
    for g in range(n):
        post(gs[g], queued[g])
        if queued[g]:
            ready_flow(s, g, 0, lport=500 + g)
    poll = schedule_poll(s, gs, t, cost)
    tx = schedule_tx(s, gs, t, now=0)
    assert sum(i.max_items for i in poll) <= batch and len(tx) <= batch
    assert all(balances[i.guest] > 0 for i in poll)
    assert all(balances[f.guest] > 0 for f, _ in tx)


@given(st.integers(1, 6), st.integers(1, 16))
def test_every_backlogged_guest_visited_within_n_iterations(n, batch):
    s, gs, t = setup(n_guests=n, batch=batch)
    for g in gs:
        post(g, 100)
    seen = set()
    for _ in range(n):
        for item in schedule_poll(s, gs, t, cost):
            seen.add(item.guest)
            for _ in range(item.max_items):
                gs[item.guest].tx_queues[0].popleft()
    assert seen == set(range(n))
