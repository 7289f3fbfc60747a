"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import itertools
import struct
from fractions import Fraction
from typing import List, Sequence

from sharedstack.flowtable import ConsolidatedFlowState
from sharedstack.packetmodel import FlowKey, HeaderTemplate, TcpFlags, ip


def template(tunnel: int = 7, lport: int = 80, rport: int = 1234,
             lip: str = "10.0.0.2", rip: str = "10.0.0.1") -> HeaderTemplate:
    """Sender-side template of the local endpoint."""
    return HeaderTemplate(
        0x020000000001, 0x020000000002, ip("192.168.0.1"), ip("192.168.0.2"),
        49152, 4754, tunnel, ip(lip), ip(rip), lport, rport,
    )


def flow(guest: int = 0, tunnel: int = 7, lport: int = 80, rport: int = 1234,
         **kw) -> ConsolidatedFlowState:
    t = template(tunnel, lport, rport)
    return ConsolidatedFlowState(key=t.flow_key(), guest=guest, template=t, **kw)


def key(tunnel: int = 7, lport: int = 80, rport: int = 1234) -> FlowKey:
    return template(tunnel, lport, rport).flow_key()


def brute_force_apportion(total: int, shares: Sequence[int]) -> List[int]:
    """Largest remainder by exhaustive search.

    Every candidate gives each part either the floor or the ceiling of its
    exact quota and sums to ``total``. The winner maximizes the summed
    fractional remainders of the parts that were rounded up; among equal
    sums it picks the lexicographically smallest set of rounded-up indices.
    """
    denom = sum(shares)
    quotas = [Fraction(total * s, denom) for s in shares]
    floors = [q.numerator // q.denominator for q in quotas]
    rems = [q - f for q, f in zip(quotas, floors)]
    extra = total - sum(floors)
    best = None
    for combo in itertools.combinations(range(len(shares)), extra):
        score = (sum(rems[i] for i in combo), [-i for i in combo])
        if best is None or score > best[0]:
            best = (score, combo)
    out = list(floors)
    for i in best[1]:
        out[i] += 1
    return out


# -- batched random cases -------------------------------------------------
# Property tests draw one byte string per example and decode several cases
# from it: one draw per batch keeps 10,000-case runs fast and still shrinks.

PACKET_CASE = struct.Struct("!6s6sIIHHIIIHHIIBH")


def packet_cases(blob):
    """(template, seq, ack, flags, payload_len) tuples."""
    for off in range(0, len(blob) - PACKET_CASE.size + 1, PACKET_CASE.size):
        (smac, dmac, sip, dip, sport, dport, gre, isip, idip, isport, idport,
         seq, ack, f, plen) = PACKET_CASE.unpack_from(blob, off)
        t = HeaderTemplate(int.from_bytes(smac, "big"), int.from_bytes(dmac, "big"),
                           sip, dip, sport, dport, gre, isip, idip, isport, idport)
        yield t, seq, ack, TcpFlags(f & 0x1F), plen % 9001


APPORTION_CASE = 16


def apportion_cases(blob):
    """(measured cycles, per-guest packet counts) with 1 to 6 guests."""
    for off in range(0, len(blob) - APPORTION_CASE + 1, APPORTION_CASE):
        total, n = struct.unpack_from("!IB", blob, off)
        counts = list(blob[off + 5: off + 5 + 1 + n % 6])
        if sum(counts) == 0:
            counts[0] = 1
        yield total % 200_000, counts


DEFICIT_CASE = 24


def deficit_cases(blob):
    """(credit, per-core deficits) with 1 to 8 cores, about a third idle,
    and at least one positive deficit."""
    for off in range(0, len(blob) - DEFICIT_CASE + 1, DEFICIT_CASE):
        credit, m = struct.unpack_from("!IB", blob, off)
        raw = struct.unpack_from("!8H", blob, off + 8)
        deficits = [r * 4 if r % 3 else 0 for r in raw[: 1 + m % 8]]
        if not any(deficits):
            deficits[-1] = 1
        yield credit % 500_000, deficits
