"""Report serialization: one JSON object, or CSV with a row per (guest, point)."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Union

from .metrics import MetricsReport

CSV_COLUMNS = (
    "scenario",
    "seed",
    "point",
    "guest",
    "weight",
    "requests",
    "throughput_rps",
    "goodput_bps",
    "p50_us",
    "p99_us",
    "p999_us",
    "rx_drops",
    "slowpath_events",
    "issued",
    "completed",
    "in_flight",
    "peer_timeouts",
    "cycles_charged",
    "core_utilization",
    "accounted_fraction",
    "ledger_ok",
)


def to_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in report.points:
        util = sum(c.utilization for c in p.cores) / len(p.cores) if p.cores else 0.0
        point = json.dumps(p.point, sort_keys=True)
        for g in p.guests:
            w.writerow([
                report.scenario, report.seed, point, g.guest, g.weight, g.requests,
                g.throughput_rps, g.goodput_bps,
                "" if g.p50_us is None else g.p50_us,
                "" if g.p99_us is None else g.p99_us,
                "" if g.p999_us is None else g.p999_us,
                g.rx_drops, g.slowpath_events, g.issued, g.completed, g.in_flight,
                g.peer_timeouts, g.cycles_charged, util, p.accounted_fraction,
                p.ledger["ok"],
            ])
    return buf.getvalue()


def emit_report(report: MetricsReport, fmt: str, path: Union[str, Path]) -> None:
    if fmt == "json":
        text = to_json(report)
    elif fmt == "csv":
        text = to_csv(report)
    else:
        raise ValueError(f"unknown report format {fmt!r} (expected json or csv)")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(e.errno, f"cannot write report: {e.strerror}", str(path)) from None


def load_json_report(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
