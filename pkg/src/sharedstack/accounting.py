"""Per-(core, guest) cycle budgets and the cycle cost model.

The cost model replaces a hardware timestamp counter: every batch's
"measured" cycles come from here, and are then split across the guests in the
batch by packet count.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

UNBOUNDED = math.inf


class TaskKind(enum.Enum):
    RX = "rx"
    POLL = "poll"
    TX = "tx"


def apportion(total: int, shares: Sequence[int]) -> List[int]:
    """Split ``total`` integer units proportionally to ``shares``.

    Largest-remainder method: every part gets the floor of its exact quota,
    and the leftover units go to the largest fractional remainders, ties to
    the lowest index. The result always sums to ``total``.
    """
    denom = sum(shares)
    if denom <= 0:
        raise ValueError("apportion needs a positive share total")
    parts = []
    rems = []
    for i, s in enumerate(shares):
        q, r = divmod(total * s, denom)
        parts.append(q)
        rems.append((-r, i))
    leftover = total - sum(parts)
    for _, i in sorted(rems)[:leftover]:
        parts[i] += 1
    return parts


@dataclass
class CostModel:
    base_cycles_per_task: int = 200
    # Fixed point: thousandths of a cycle per payload byte (300 = 0.3).
    millicycles_per_byte: int = 300
    poll_empty_cycles: int = 50
    drop_cost_fraction: float = 0.25
    jitter: float = 0.0  # +/- fraction, applied only when an rng is attached
    rng: Optional[random.Random] = None

    @property
    def cycles_per_payload_byte(self) -> float:
        return self.millicycles_per_byte / 1000

    def task_cost(self, kind: TaskKind, payload_len: int) -> int:
        if payload_len < 0:
            raise ValueError(f"payload_len must be >= 0, got {payload_len}")
        # Round half up on the fixed-point product.
        cost = self.base_cycles_per_task + (self.millicycles_per_byte * payload_len + 500) // 1000
        if self.jitter and self.rng is not None:
            cost = max(1, round(cost * (1 + self.rng.uniform(-self.jitter, self.jitter))))
        return cost

    def empty_cost(self, kind: TaskKind) -> int:
        return self.poll_empty_cycles

    def drop_cost(self) -> int:
        return max(1, round(self.base_cycles_per_task * self.drop_cost_fraction))


class BudgetTable:
    """Signed cycle balances, one column of guests per fast-path core.

    Charging may push a balance below zero; the deficit is carried until a
    replenish covers it. Replenishing never lifts a balance above ``cap``.
    """

    def __init__(
        self,
        num_cores: int,
        guests: Iterable[int],
        cap: float,
        initial: Optional[int] = None,
    ):
        if num_cores < 1:
            raise ValueError("num_cores must be >= 1")
        if not cap > 0:
            raise ValueError("cap must be > 0")
        self.cap = cap
        self.num_cores = num_cores
        self.guests = sorted(guests)
        start = 0 if initial is None else initial
        self.balance: List[Dict[int, int]] = [
            {g: start for g in self.guests} for _ in range(num_cores)
        ]
        self.charged: Dict[int, int] = {g: 0 for g in self.guests}
        # Everything ever put into each balance, the starting value included.
        self.credited: List[Dict[int, int]] = [
            {g: start for g in self.guests} for _ in range(num_cores)
        ]

    @property
    def num_guests(self) -> int:
        return len(self.guests)

    def has_budget(self, core: int, guest: int) -> bool:
        return self.balance[core][guest] > 0

    def charge(self, core: int, guest: int, cycles: int) -> None:
        if cycles < 0:
            raise ValueError("cannot charge negative cycles")
        self.balance[core][guest] -= cycles
        self.charged[guest] += cycles

    def charge_batch(
        self, core: int, counts: Mapping[int, int], measured_cycles: int
    ) -> Dict[int, int]:
        """Split a batch's measured cycles across guests by packet count."""
        if measured_cycles < 0:
            raise ValueError("measured_cycles must be >= 0")
        guests = sorted(g for g, n in counts.items() if n > 0)
        if not guests:
            raise ValueError("charge_batch needs at least one packet")
        parts = apportion(measured_cycles, [counts[g] for g in guests])
        charges = dict(zip(guests, parts))
        for g, c in charges.items():
            self.charge(core, g, c)
        return charges

    def replenish_entry(self, core: int, guest: int, credit: int) -> int:
        if credit < 0:
            raise ValueError("credit must be >= 0")
        col = self.balance[core]
        old = col[guest]
        new = old + credit
        if new > self.cap:
            new = int(self.cap)
        col[guest] = new
        self.credited[core][guest] += new - old
        return new

    def reset_entry(self, core: int, guest: int, value: int = 0) -> None:
        self.credited[core][guest] += value - self.balance[core][guest]
        self.balance[core][guest] = value

    def conserved(self) -> bool:
        """Charged cycles equal credited cycles minus what is still held."""
        held = sum(
            self.credited[c][g] - self.balance[c][g]
            for c in range(self.num_cores)
            for g in self.guests
        )
        return held == self.total_charged()

    def per_core(self, guest: int) -> List[int]:
        return [col[guest] for col in self.balance]

    def total_charged(self) -> int:
        return sum(self.charged.values())
