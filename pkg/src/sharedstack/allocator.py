"""Central credit allocator run by the slow path every update period."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence

from .accounting import BudgetTable, apportion

DEFAULT_BOOST = 0.94
DEFAULT_UPDATE_PERIOD = 210_000  # 100 us at 2.1 GHz


@dataclass
class AllocatorConfig:
    boost: float = DEFAULT_BOOST
    cap: float = DEFAULT_UPDATE_PERIOD
    update_period: int = DEFAULT_UPDATE_PERIOD
    weights: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 < self.boost <= 1:
            raise ValueError(f"boost must be in (0, 1], got {self.boost}")
        if not self.cap > 0:
            raise ValueError(f"cap must be > 0, got {self.cap}")
        if self.update_period <= 0:
            raise ValueError(f"update_period must be > 0, got {self.update_period}")
        for g, w in self.weights.items():
            if not w > 0:
                raise ValueError(f"weight of guest {g} must be > 0, got {w}")

    @property
    def b_max(self) -> float:
        return self.cap

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.cap)


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def compute_update_credits(
    now: int, last_update: int, config: AllocatorConfig, num_cores: int = 1
) -> Dict[int, int]:
    """Credits per guest for the cycles elapsed since the last update.

    ``boost * elapsed * w_g / sum(w)``, rounded to the nearest cycle. With
    several fast-path cores the elapsed cycles are summed over all of them.
    """
    if now < last_update:
        raise ValueError(f"now ({now}) precedes last_update ({last_update})")
    if not config.weights:
        return {}
    boost = Fraction(str(config.boost))
    total_w = sum(Fraction(w) for w in config.weights.values())
    elapsed = (now - last_update) * num_cores
    return {
        g: _round_half_up(boost * elapsed * Fraction(w) / total_w)
        for g, w in sorted(config.weights.items())
    }


def distribute_to_cores(
    credit: int, balances: Sequence[int], b_max: float
) -> List[int]:
    """Route a guest's credit to cores in proportion to their deficits.

    A core's deficit is ``b_max - balance``: what the guest spent there since
    it was last full. Cores with no deficit get nothing; if no core has a
    deficit the credit is forfeited.
    """
    if math.isinf(b_max):
        raise ValueError("distribute_to_cores needs a finite b_max")
    deficits = [int(b_max) - b for b in balances]
    if any(d < 0 for d in deficits):
        raise ValueError("balance above b_max")
    if sum(deficits) == 0:
        return [0] * len(balances)
    return apportion(credit, deficits)


class Allocator:
    def __init__(self, config: AllocatorConfig, num_cores: int, start: int = 0):
        self.config = config
        self.num_cores = num_cores
        self.last_update = start
        self.forfeited: Dict[int, int] = {g: 0 for g in config.weights}
        self.granted: Dict[int, int] = {g: 0 for g in config.weights}

    def reference_max(self, balances: Sequence[int]) -> int:
        if not self.config.unbounded:
            return int(self.config.cap)
        # No cap: measure deficits against one period above the fullest
        # core, so every core receives something and idle guests keep banking.
        return max(balances) + self.config.update_period

    def prime(self, table: BudgetTable) -> None:
        """Seed every balance with one period's even share of credit."""
        credits = compute_update_credits(
            self.config.update_period, 0, self.config, self.num_cores
        )
        for g, e in credits.items():
            for c, u in enumerate(apportion(e, [1] * self.num_cores)):
                table.reset_entry(c, g, 0)
                table.replenish_entry(c, g, u)

    def replenish_all(self, now: int, table: BudgetTable) -> Dict[int, List[int]]:
        credits = compute_update_credits(
            now, self.last_update, self.config, self.num_cores
        )
        routed = {}
        for g, e in credits.items():
            balances = table.per_core(g)
            u = distribute_to_cores(e, balances, self.reference_max(balances))
            if not any(u):
                self.forfeited[g] += e
            for c, credit in enumerate(u):
                if credit:
                    table.replenish_entry(c, g, credit)
            self.granted[g] += e
            routed[g] = u
        self.last_update = now
        return routed

