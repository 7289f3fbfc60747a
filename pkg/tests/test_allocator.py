import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedstack.accounting import BudgetTable
from sharedstack.allocator import (
    Allocator,
    AllocatorConfig,
    compute_update_credits,
    distribute_to_cores,
)

from helpers import DEFICIT_CASE, deficit_cases

PERIOD = 210_000  # 100 us at 2.1 GHz


def test_equal_weights_credit():
    cfg = AllocatorConfig(boost=0.94, update_period=PERIOD, weights={0: 1, 1: 1})
    assert compute_update_credits(PERIOD, 0, cfg) == {0: 98_700, 1: 98_700}


def test_weighted_credit():
    cfg = AllocatorConfig(boost=0.94, update_period=PERIOD, weights={0: 2, 1: 1})
    assert compute_update_credits(PERIOD, 0, cfg) == {0: 131_600, 1: 65_800}


def test_single_guest_takes_all():
    cfg = AllocatorConfig(boost=1.0, weights={0: 5})
    assert compute_update_credits(1000, 0, cfg) == {0: 1000}


def test_no_guests_no_credits():
    assert compute_update_credits(PERIOD, 0, AllocatorConfig()) == {}


def test_elapsed_time_must_not_be_negative():
    with pytest.raises(ValueError):
        compute_update_credits(0, 1, AllocatorConfig(weights={0: 1}))


@pytest.mark.parametrize("kw", [
    {"boost": 0}, {"boost": 1.2}, {"cap": 0}, {"update_period": 0}, {"weights": {0: 0}},
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AllocatorConfig(**kw)


@given(st.lists(st.integers(1, 50), min_size=2, max_size=6), st.integers(0, 10**7),
       st.sampled_from([0.5, 0.94, 1.0]))
def test_weight_proportionality(weights, elapsed, boost):
    cfg = AllocatorConfig(boost=boost, weights=dict(enumerate(weights)))
    e = compute_update_credits(elapsed, 0, cfg)
    for a in e:
        exact = Fraction(str(boost)) * elapsed * weights[a] / sum(weights)
        assert abs(e[a] - exact) <= Fraction(1, 2)
        for b in e:
            # e_a * w_b ~ e_b * w_a within the rounding of both
            assert abs(e[a] * weights[b] - e[b] * weights[a]) <= (weights[a] + weights[b]) / 2


def test_distribute_examples():
    bmax = 10_000
    assert distribute_to_cores(1000, [bmax, bmax - 400], bmax) == [0, 1000]
    assert distribute_to_cores(900, [bmax - 100, bmax - 200], bmax) == [300, 600]
    assert distribute_to_cores(500, [bmax, bmax], bmax) == [0, 0]


def test_distribute_rejects_balance_above_bmax():
    with pytest.raises(ValueError):
        distribute_to_cores(10, [11], 10)


# -- work conservation over 10,000 randomized deficit vectors -----------

CASES_PER_EXAMPLE = 10
EXAMPLES = 1_000
BMAX = 210_000


@settings(max_examples=EXAMPLES)
@given(st.binary(min_size=DEFICIT_CASE * CASES_PER_EXAMPLE,
                 max_size=DEFICIT_CASE * CASES_PER_EXAMPLE))
def test_work_conservation(blob):
    for credit, deficits in deficit_cases(blob):
        balances = [BMAX - d for d in deficits]
        u = distribute_to_cores(credit, balances, BMAX)
        assert sum(u) == credit
        for d, x in zip(deficits, u):
            if d == 0:
                assert x == 0
            # proportional within one cycle of the exact share
            assert abs(x - Fraction(credit * d, sum(deficits))) < 1


def _table(num_cores=1, guests=(0, 1), cap=PERIOD):
    return BudgetTable(num_cores, guests, cap, initial=cap)


def test_replenish_all_keeps_full_guests_at_cap():
    cfg = AllocatorConfig(cap=PERIOD, weights={0: 1, 1: 1})
    a, t = Allocator(cfg, 2), _table(2)
    a.replenish_all(PERIOD, t)
    assert all(b == PERIOD for col in t.balance for b in col.values())
    assert a.forfeited == {0: 2 * 98_700, 1: 2 * 98_700}


def test_deficit_repaid_in_one_period():
    cfg = AllocatorConfig(cap=PERIOD, weights={0: 1, 1: 1})
    a, t = Allocator(cfg, 1), _table(1)
    # guest 0 has spent its full cap plus 98,700 cycles more
    t.balance[0][0] = -98_700
    routed = a.replenish_all(PERIOD, t)
    assert routed[0] == [98_700]
    assert t.balance[0][0] == 0
    assert a.last_update == PERIOD


def test_credit_goes_to_the_active_core():
    cfg = AllocatorConfig(cap=PERIOD, weights={0: 1})
    a, t = Allocator(cfg, 3), BudgetTable(3, [0], PERIOD, initial=PERIOD)
    t.charge(1, 0, 50_000)
    a.replenish_all(1000, t)  # e = round(0.94 * 1000 * 3) = 2820
    assert t.per_core(0) == [PERIOD, PERIOD - 50_000 + 2820, PERIOD]


@given(st.lists(st.lists(st.integers(0, 300_000), min_size=2, max_size=2), min_size=1, max_size=20),
       st.sampled_from([50_000, PERIOD, math.inf]))
def test_balances_never_exceed_cap_after_replenish(charges, cap):
    cfg = AllocatorConfig(cap=cap, update_period=PERIOD, weights={0: 1, 1: 3})
    a = Allocator(cfg, 2)
    t = BudgetTable(2, [0, 1], cap)
    a.prime(t)
    now = 0
    for c0, c1 in charges:
        t.charge(0, 0, c0)
        t.charge(1, 1, c1)
        now += PERIOD
        a.replenish_all(now, t)
        assert all(b <= cap for col in t.balance for b in col.values())
    assert t.conserved()


def test_prime_splits_one_period_evenly():
    cfg = AllocatorConfig(cap=PERIOD, weights={0: 1, 1: 1})
    a, t = Allocator(cfg, 2), BudgetTable(2, [0, 1], PERIOD)
    a.prime(t)
    # 0.94 * 210,000 * 2 cores / 2 guests = 197,400 per guest, split over 2 cores
    assert t.per_core(0) == [98_700, 98_700]
    assert t.conserved()
