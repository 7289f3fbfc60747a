"""Built-in scenarios and the sweep machinery behind them.

A scenario turns one SimConfig into a list of sweep points, runs one
simulation per point and gathers the results into a MetricsReport. Sweep
points are addressed by dotted paths into the config, where ``guests.<id>``
selects a guest by id (``guests.victim.workload.connections``).
"""

from __future__ import annotations

import copy
import dataclasses
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .config import GuestConfig, ScenarioSection, SimConfig, WorkloadConfig, coerce_field
from .metrics import MetricsReport, RunMetrics, collect
from .sim import Simulation

Point = Tuple[Dict[str, Any], SimConfig]


def with_value(cfg: SimConfig, path: str, value: Any) -> SimConfig:
    """Copy of ``cfg`` with the field at dotted ``path`` set to ``value``."""
    out = copy.deepcopy(cfg)
    parts = path.split(".")
    obj: Any = out
    i = 0
    while i < len(parts) - 1:
        name = parts[i]
        if name == "guests" and isinstance(obj, SimConfig):
            gid = parts[i + 1]
            matches = [g for g in obj.guests if g.id == gid]
            if not matches:
                raise KeyError(f"no guest {gid!r} in config")
            obj = matches[0]
            i += 2
            continue
        obj = getattr(obj, name)
        i += 1
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if parts[-1] not in fields:
        raise KeyError(f"unknown config field {path!r}")
    setattr(obj, parts[-1], coerce_field(fields[parts[-1]], value, path))
    return out


def run_point(cfg: SimConfig, point: Optional[Dict[str, Any]] = None,
              duration: Optional[int] = None) -> RunMetrics:
    sim = Simulation(cfg)
    sim.run(duration)
    return collect(sim, point)


def run_points(cfg: SimConfig, points: Sequence[Point]) -> MetricsReport:
    report = MetricsReport(cfg.scenario.name, cfg.seed, cfg.to_dict())
    for label, pcfg in points:
        report.points.append(run_point(pcfg, label))
    return report


def _sweep(cfg: SimConfig, path: str, values: Sequence[Any], label: str) -> List[Point]:
    return [({label: v}, with_value(cfg, path, v)) for v in values]


# -- scenario point builders -------------------------------------------


def echo_points(cfg: SimConfig) -> List[Point]:
    return [({}, cfg)]


def isolation_points(cfg: SimConfig) -> List[Point]:
    p = cfg.scenario.params
    aggressor = p.get("aggressor", cfg.guests[-1].id)
    field = p.get("sweep_field", "connections")
    values = p.get("sweep", [0, 100, 400, 1000])
    return _sweep(cfg, f"guests.{aggressor}.workload.{field}", values, f"aggressor_{field}")


def _clone_guests(cfg: SimConfig, n: int) -> SimConfig:
    base = cfg.guests[0]
    out = copy.deepcopy(cfg)
    out.guests = [
        GuestConfig(id=f"g{i}", weight=base.weight, workload=copy.deepcopy(base.workload))
        for i in range(n)
    ]
    return out


def guest_count_points(cfg: SimConfig) -> List[Point]:
    counts = cfg.scenario.params.get("guest_counts", [1, 2, 3, 4])
    return [({"guests": n}, _clone_guests(cfg, n)) for n in counts]


def sensitivity_points(cfg: SimConfig) -> List[Point]:
    """One or more one-parameter sweeps.

    ``params["sweeps"]`` is a list of ``{"field", "values", "set"}`` where
    ``set`` holds extra ``path: value`` overrides for that sweep only. The
    short form ``{"sweep_field", "sweep"}`` describes a single sweep.
    """
    p = cfg.scenario.params
    sweeps = p.get("sweeps") or [{
        "field": p.get("sweep_field", "allocator.update_period_us"),
        "values": p.get("sweep", [50, 100, 400, 1600]),
    }]
    points: List[Point] = []
    for sw in sweeps:
        base = cfg
        for path, value in sw.get("set", {}).items():
            base = with_value(base, path, value)
        field = sw["field"]
        label = field.rsplit(".", 1)[-1]
        for v in sw["values"]:
            points.append(({"sweep": field, label: v}, with_value(base, field, v)))
    return points


def short_lived_points(cfg: SimConfig) -> List[Point]:
    cfg = copy.deepcopy(cfg)
    for g in cfg.guests:
        g.workload.mode = "short_lived"
    values = cfg.scenario.params.get("sweep")
    if not values:
        return [({}, cfg)]
    return _sweep(cfg, "slowpath.resolution_latency_cycles", values, "resolution_latency_cycles")


SCENARIO_POINTS: Dict[str, Callable[[SimConfig], List[Point]]] = {
    "echo": echo_points,
    "isolation": isolation_points,
    "efficiency": guest_count_points,
    "scalability": guest_count_points,
    "sensitivity": sensitivity_points,
    "short-lived": short_lived_points,
}


def run_scenario(config: SimConfig) -> MetricsReport:
    """Run every sweep point of ``config.scenario`` and report them together."""
    cfg = config.validate()
    return run_points(cfg, SCENARIO_POINTS[cfg.scenario.name](cfg))


def scenario_isolation(aggressor_params: Dict[str, Any], victim_params: Dict[str, Any],
                       base: Optional[SimConfig] = None, **scenario_params) -> MetricsReport:
    """Victim/aggressor sweep; the params are WorkloadConfig fields (plus
    ``weight``) for each of the two guests."""
    cfg = copy.deepcopy(base) if base is not None else builtin_config("isolation")
    guests = []
    for gid, params in (("victim", victim_params), ("aggressor", aggressor_params)):
        params = dict(params)
        weight = params.pop("weight", 1.0)
        guests.append(GuestConfig(gid, weight, WorkloadConfig(**params)))
    cfg.guests = guests
    cfg.scenario = ScenarioSection(
        "isolation", {**builtin_config("isolation").scenario.params, **scenario_params}
    )
    return run_scenario(cfg)


def workload_rpc_echo(guest: str, connections: int, message_size: int,
                      mode: str = "closed_loop", on_ms: float = 0.0, off_ms: float = 0.0,
                      weight: float = 1.0, app_us: float = 0.0) -> GuestConfig:
    """Guest entry with an RPC echo workload driven by the remote peer."""
    if connections < 1:
        raise ValueError("connections must be >= 1")
    if message_size < 1:
        raise ValueError("message_size must be >= 1")
    return GuestConfig(
        guest, weight,
        WorkloadConfig(connections=connections, message_size=message_size, mode=mode,
                       burst_on_ms=on_ms, burst_off_ms=off_ms, app_us=app_us),
    )


# -- built-in configurations --------------------------------------------


def builtin_config(name: str) -> SimConfig:
    """Desk-scale default configuration for each built-in scenario."""
    if name == "echo":
        cfg = SimConfig(guests=[workload_rpc_echo("g0", 1, 64)], duration_ms=5.0, warmup_ms=0.5)
    elif name == "isolation":
        # Guest-side processing of 30 us puts the solo victim near the tens of
        # microseconds a VM echo server sees on the real system.
        cfg = SimConfig(
            guests=[
                workload_rpc_echo("victim", 1, 64, app_us=30.0),
                workload_rpc_echo("aggressor", 1, 64),
            ],
            duration_ms=20.0,
            warmup_ms=2.0,
            scenario=ScenarioSection("isolation", {"aggressor": "aggressor",
                                                   "sweep": [0, 100, 400, 1000]}),
        )
    elif name == "efficiency":
        cfg = SimConfig(
            guests=[workload_rpc_echo("g0", 8, 64, app_us=10.0)],
            duration_ms=10.0,
            warmup_ms=1.0,
            scenario=ScenarioSection("efficiency", {"guest_counts": [1, 2, 3, 4, 6, 8]}),
        )
    elif name == "scalability":
        cfg = SimConfig(
            guests=[workload_rpc_echo("g0", 4, 64, app_us=10.0)],
            num_fastpath_cores=2,
            duration_ms=10.0,
            warmup_ms=1.0,
            scenario=ScenarioSection("scalability", {"guest_counts": [1, 2, 4, 8, 16]}),
        )
    elif name == "sensitivity":
        burst = {
            "guests.aggressor.workload.mode": "burst",
            "guests.aggressor.workload.burst_on_ms": 1.0,
            "guests.aggressor.workload.burst_off_ms": 1.0,
            "duration_ms": 20.0,
        }
        cfg = SimConfig(
            guests=[
                workload_rpc_echo("victim", 1, 64, app_us=30.0),
                workload_rpc_echo("aggressor", 1000, 64),
            ],
            duration_ms=40.0,
            warmup_ms=2.0,
            scenario=ScenarioSection("sensitivity", {"sweeps": [
                {"field": "allocator.update_period_us", "values": [50, 100, 400, 1600]},
                {"field": "allocator.cap_cycles", "values": [None, "inf"], "set": burst},
                {"field": "allocator.boost", "values": [0.5, 0.94, 1.0], "set": {"duration_ms": 20.0}},
            ]}),
        )
    elif name == "short-lived":
        cfg = SimConfig(
            guests=[workload_rpc_echo("g0", 16, 64, mode="short_lived")],
            duration_ms=10.0,
            warmup_ms=1.0,
            scenario=ScenarioSection("short-lived", {"sweep": [2000, 20000, 200000]}),
        )
    else:
        raise KeyError(f"unknown scenario {name!r}")
    cfg.scenario.name = name
    return cfg.validate()
