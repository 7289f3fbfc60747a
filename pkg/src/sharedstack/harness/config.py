"""Simulation configuration: schema, defaults, validation and YAML loading.

Durations are given in microseconds or milliseconds of virtual time (link
propagation directly in cycles) and converted to CPU cycles at ``cpu_ghz``
when the simulation is built (100 us -> 210,000 cycles at 2.1 GHz).
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

SCENARIOS = ("echo", "isolation", "efficiency", "scalability", "sensitivity", "short-lived")
WORKLOAD_MODES = ("closed_loop", "burst", "short_lived")
RATE_POLICIES = ("aimd", "constant")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass
class WorkloadConfig:
    connections: int = 1
    message_size: int = 64
    mode: str = "closed_loop"
    burst_on_ms: float = 0.0
    burst_off_ms: float = 0.0
    app_us: float = 0.0  # guest-side processing per request
    listen_port: int = 7


@dataclass
class GuestConfig:
    id: str
    weight: float = 1.0
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)


@dataclass
class AllocatorSection:
    boost: float = 0.94
    # None: one update period's worth of cycles. math.inf: no cap.
    cap_cycles: Optional[float] = None
    update_period_us: float = 100.0


@dataclass
class CostSection:
    base_cycles: int = 200
    cycles_per_byte: float = 0.3
    poll_empty_cycles: int = 50
    drop_cost_fraction: float = 0.25
    jitter: float = 0.0


@dataclass
class LinkSection:
    bandwidth_bps: float = 100e9
    propagation_cycles: int = 4200  # 2 us at 2.1 GHz
    loss: float = 0.0


@dataclass
class SlowPathSection:
    rto_us: float = 200.0
    resolution_latency_cycles: int = 2000
    service_cycles: int = 1000
    charge_guests: bool = False


@dataclass
class PeerSection:
    rto_us: float = 200.0
    max_backoff: int = 64
    rto_jitter: float = 0.5  # timers fire up to this fraction of the RTO late
    start_spread_us: float = 20.0


@dataclass
class ScenarioSection:
    name: str = "echo"
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SimConfig:
    guests: List[GuestConfig] = field(default_factory=list)
    num_fastpath_cores: int = 1
    cpu_ghz: float = 2.1
    duration_ms: float = 10.0
    warmup_ms: float = 1.0
    seed: int = 1
    batch_size: int = 16
    mss: int = 1460
    flow_rate_gbps: float = 10.0
    rate_policy: str = "aimd"
    budget_gating: bool = True
    nic_rx_ring: int = 4096
    trace: bool = False
    allocator: AllocatorSection = field(default_factory=AllocatorSection)
    cost_model: CostSection = field(default_factory=CostSection)
    link: LinkSection = field(default_factory=LinkSection)
    slowpath: SlowPathSection = field(default_factory=SlowPathSection)
    peer: PeerSection = field(default_factory=PeerSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)

    # -- unit conversion ------------------------------------------------

    def cycles(self, us: float) -> int:
        return int(round(us * self.cpu_ghz * 1000))

    @property
    def update_period(self) -> int:
        return self.cycles(self.allocator.update_period_us)

    @property
    def cap(self) -> float:
        c = self.allocator.cap_cycles
        return self.update_period if c is None else c

    @property
    def duration(self) -> int:
        return self.cycles(self.duration_ms * 1000)

    @property
    def warmup(self) -> int:
        return self.cycles(self.warmup_ms * 1000)

    @property
    def flow_rate(self) -> float:
        """Default per-flow pacing rate in bytes per cycle."""
        return self.flow_rate_gbps * 1e9 / 8 / (self.cpu_ghz * 1e9)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["allocator"]["cap_cycles"] is not None and math.isinf(d["allocator"]["cap_cycles"]):
            d["allocator"]["cap_cycles"] = "inf"
        return d

    def validate(self) -> "SimConfig":
        _check(self.num_fastpath_cores >= 1, "num_fastpath_cores", "must be >= 1")
        _check(self.cpu_ghz > 0, "cpu_ghz", "must be > 0")
        _check(self.duration_ms >= 0, "duration_ms", "must be >= 0")
        _check(self.warmup_ms >= 0, "warmup_ms", "must be >= 0")
        _check(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(self.mss >= 1, "mss", "must be >= 1")
        _check(self.flow_rate_gbps > 0, "flow_rate_gbps", "must be > 0")
        _check(self.rate_policy in RATE_POLICIES, "rate_policy", f"must be one of {RATE_POLICIES}")
        _check(self.nic_rx_ring >= 1, "nic_rx_ring", "must be >= 1")
        a = self.allocator
        _check(0 < a.boost <= 1, "allocator.boost", "must be in (0, 1]")
        _check(a.update_period_us > 0, "allocator.update_period_us", "must be > 0")
        _check(a.cap_cycles is None or a.cap_cycles > 0, "allocator.cap_cycles", "must be > 0")
        c = self.cost_model
        _check(c.base_cycles >= 1, "cost_model.base_cycles", "must be >= 1")
        _check(c.cycles_per_byte >= 0, "cost_model.cycles_per_byte", "must be >= 0")
        _check(c.poll_empty_cycles >= 0, "cost_model.poll_empty_cycles", "must be >= 0")
        _check(0 <= c.drop_cost_fraction <= 1, "cost_model.drop_cost_fraction", "must be in [0, 1]")
        _check(0 <= c.jitter < 1, "cost_model.jitter", "must be in [0, 1)")
        _check(self.link.bandwidth_bps > 0, "link.bandwidth_bps", "must be > 0")
        _check(self.link.propagation_cycles >= 0, "link.propagation_cycles", "must be >= 0")
        _check(0 <= self.link.loss < 1, "link.loss", "must be in [0, 1)")
        _check(self.slowpath.rto_us > 0, "slowpath.rto_us", "must be > 0")
        _check(self.slowpath.service_cycles >= 0, "slowpath.service_cycles", "must be >= 0")
        _check(self.slowpath.resolution_latency_cycles >= 0,
               "slowpath.resolution_latency_cycles", "must be >= 0")
        _check(self.peer.rto_us > 0, "peer.rto_us", "must be > 0")
        _check(self.peer.max_backoff >= 1, "peer.max_backoff", "must be >= 1")
        _check(0 <= self.peer.rto_jitter <= 1, "peer.rto_jitter", "must be in [0, 1]")
        _check(self.scenario.name in SCENARIOS, "scenario.name", f"unknown scenario, expected one of {SCENARIOS}")
        _check(len(self.guests) >= 1, "guests", "at least one guest is required")
        names = set()
        for i, g in enumerate(self.guests):
            p = f"guests[{i}]"
            _check(isinstance(g.id, str) and bool(g.id), f"{p}.id", "must be a non-empty string")
            _check(g.id not in names, f"{p}.id", f"duplicate guest id {g.id!r}")
            names.add(g.id)
            _check(g.weight > 0, f"{p}.weight", "must be > 0")
            w = g.workload
            _check(w.connections >= 0, f"{p}.workload.connections", "must be >= 0")
            _check(w.message_size >= 1, f"{p}.workload.message_size", "must be >= 1")
            _check(w.mode in WORKLOAD_MODES, f"{p}.workload.mode", f"must be one of {WORKLOAD_MODES}")
            if w.mode == "burst":
                _check(w.burst_on_ms > 0 and w.burst_off_ms >= 0, f"{p}.workload.burst_on_ms",
                       "burst mode needs burst_on_ms > 0 and burst_off_ms >= 0")
            _check(w.app_us >= 0, f"{p}.workload.app_us", "must be >= 0")
        return self


def _check(ok: bool, field: str, message: str) -> None:
    if not ok:
        raise ConfigError(field, message)


def _build(cls, data: Any, path: str):
    if data is None:
        return cls() if cls is not GuestConfig else None
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in known:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown field")
        sub = _SECTIONS.get((cls, k))
        where = f"{path}.{k}" if path else k
        if sub is not None:
            kwargs[k] = _build(sub, v, where)
        elif cls is SimConfig and k == "guests":
            if not isinstance(v, list):
                raise ConfigError(where, "expected a list")
            kwargs[k] = [_build(GuestConfig, g, f"{where}[{i}]") for i, g in enumerate(v)]
        else:
            kwargs[k] = coerce_field(known[k], v, where)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(path or "config", str(e)) from None


def coerce_field(f: dataclasses.Field, v: Any, where: str) -> Any:
    """Check ``v`` against the declared type of ``f``, converting where safe."""
    if f.name == "cap_cycles":
        if v is None:
            return None
        if isinstance(v, str) and v.lower() in ("inf", "infinity", "unbounded"):
            return math.inf
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return v
        raise ConfigError(where, "expected a number, null or 'inf'")
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if t == "bool":
        if not isinstance(v, bool):
            raise ConfigError(where, "expected true or false")
    elif t == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(where, "expected an integer")
    elif t == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(where, "expected a number")
        v = float(v)
    elif t == "str":
        if not isinstance(v, str):
            raise ConfigError(where, "expected a string")
    return v


_SECTIONS = {
    (SimConfig, "allocator"): AllocatorSection,
    (SimConfig, "cost_model"): CostSection,
    (SimConfig, "link"): LinkSection,
    (SimConfig, "slowpath"): SlowPathSection,
    (SimConfig, "peer"): PeerSection,
    (SimConfig, "scenario"): ScenarioSection,
    (GuestConfig, "workload"): WorkloadConfig,
}


def config_from_dict(data: Dict[str, Any]) -> SimConfig:
    return _build(SimConfig, data, "").validate()


def load_config(path: Union[str, Path]) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError("config", f"{path} is not valid YAML: {e}") from None
    return config_from_dict(data)
