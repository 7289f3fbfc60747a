"""Per-run and per-scenario metrics."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .sim import InvariantError, Simulation

PERCENTILES = (50.0, 99.0, 99.9)


@dataclass
class GuestMetrics:
    guest: str
    weight: float
    requests: int  # responses completed inside the measurement window
    throughput_rps: float
    goodput_bps: float  # response payload bytes per second
    p50_us: Optional[float]
    p99_us: Optional[float]
    p999_us: Optional[float]
    rx_drops: int
    slowpath_events: int
    issued: int
    completed: int
    in_flight: int
    peer_timeouts: int
    cycles_charged: int


@dataclass
class CoreMetrics:
    core: int
    utilization: float
    accounted_fraction: float
    cycles_total: int
    cycles_accounted: int
    cycles_unaccounted: int
    rx_packets: int
    rx_drops: int
    nic_overflow: int


@dataclass
class RunMetrics:
    """Metrics of one simulation run (one sweep point)."""

    point: Dict[str, Any]
    duration_us: float
    window_us: float
    guests: List[GuestMetrics]
    cores: List[CoreMetrics]
    accounted_fraction: float
    ledger: Dict[str, Any]
    slowpath: Dict[str, int]
    slowpath_after_setup: int  # non-tick slow-path events after the last handshake

    def guest(self, name: str) -> GuestMetrics:
        for g in self.guests:
            if g.guest == name:
                return g
        raise KeyError(name)

    @property
    def total_throughput_rps(self) -> float:
        return sum(g.throughput_rps for g in self.guests)


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    config: Dict[str, Any]
    points: List[RunMetrics] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "MetricsReport":
        points = [
            RunMetrics(
                **{
                    **p,
                    "guests": [GuestMetrics(**g) for g in p["guests"]],
                    "cores": [CoreMetrics(**c) for c in p["cores"]],
                }
            )
            for p in d["points"]
        ]
        return cls(d["scenario"], d["seed"], d["config"], points)


def percentiles_us(latencies_cycles, cpu_ghz: float):
    if len(latencies_cycles) == 0:
        return None, None, None
    arr = np.asarray(latencies_cycles, dtype=np.float64) / (cpu_ghz * 1000)
    return tuple(float(x) for x in np.percentile(arr, PERCENTILES))


def collect(sim: Simulation, point: Optional[Dict[str, Any]] = None) -> RunMetrics:
    cfg = sim.cfg
    end = sim.end
    start = min(cfg.warmup, end)
    window_s = (end - start) / (cfg.cpu_ghz * 1e9)
    per_us = cfg.cpu_ghz * 1000
    guests = []
    for wl, g in zip(sim.workloads, sim.guests):
        lat = [lt for done, lt in wl.samples if done >= start]
        for done, lt in wl.samples:
            if lt < 0 or lt > done:
                raise InvariantError(f"response recorded before its request ({wl.name})")
        in_flight = sim.peer.in_flight(wl)
        if wl.issued != wl.completed + in_flight:
            raise InvariantError(
                f"closed-loop conservation broken for {wl.name}: issued {wl.issued} "
                f"!= completed {wl.completed} + in flight {in_flight}"
            )
        p50, p99, p999 = percentiles_us(lat, cfg.cpu_ghz)
        n = len(lat)
        guests.append(
            GuestMetrics(
                guest=wl.name,
                weight=g.weight,
                requests=n,
                throughput_rps=n / window_s if window_s > 0 else 0.0,
                goodput_bps=n * wl.message_size / window_s if window_s > 0 else 0.0,
                p50_us=p50,
                p99_us=p99,
                p999_us=p999,
                rx_drops=g.rx_drops,
                slowpath_events=g.slowpath_events,
                issued=wl.issued,
                completed=wl.completed,
                in_flight=in_flight,
                peer_timeouts=wl.timeouts,
                cycles_charged=sim.budgets.charged[g.id],
            )
        )
    cores = []
    for core in sim.cores:
        st = core.stats
        cores.append(
            CoreMetrics(
                core=core.core_id,
                utilization=st.cycles_total / end if end else 0.0,
                accounted_fraction=st.accounted_fraction,
                cycles_total=st.cycles_total,
                cycles_accounted=st.cycles_accounted,
                cycles_unaccounted=st.cycles_unaccounted,
                rx_packets=st.rx_packets,
                rx_drops=st.rx_drops,
                nic_overflow=st.nic_overflow,
            )
        )
    total = sum(c.cycles_total for c in cores)
    accounted = sum(c.cycles_accounted for c in cores)
    return RunMetrics(
        point=dict(point or {}),
        duration_us=end / per_us,
        window_us=(end - start) / per_us,
        guests=guests,
        cores=cores,
        accounted_fraction=accounted / total if total else 0.0,
        ledger=sim.ledger(),
        slowpath=dict(sorted(sim.slowpath.counters.items())),
        slowpath_after_setup=len(sim.slowpath.events_after(last_setup_time(sim))),
    )


def last_setup_time(sim: Simulation) -> int:
    """When the peer saw its last connection become established."""
    return sim.peer.last_established
