"""Simulated wire packets for TCP over GRE over UDP/IPv4/Ethernet.

Packets are structured records rather than byte buffers. Header fields are
copied from a per-connection template in one pass (``assemble_packet``),
read back in one pass (``parse_packet``) and turned into an acknowledgement
by swapping every address pair (``make_ack``).
"""

from __future__ import annotations

import enum
import ipaddress
from typing import NamedTuple, Optional

ETH_HEADER = 14
IPV4_HEADER = 20
UDP_HEADER = 8
GRE_KEY_HEADER = 8  # 4-byte base header + 4-byte key extension
TCP_HEADER = 20

HEADER_OVERHEAD = (
    ETH_HEADER + IPV4_HEADER + UDP_HEADER + GRE_KEY_HEADER + IPV4_HEADER + TCP_HEADER
)

IPPROTO_ICMP = 1
IPPROTO_TCP = 6
IPPROTO_UDP = 17
GRE_PROTO_IPV4 = 0x0800

SEQ_MOD = 1 << 32


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


# Flags the fast path handles itself; anything else is a control packet.
DATA_FLAGS = TcpFlags.ACK | TcpFlags.PSH
CONTROL_FLAGS = TcpFlags.SYN | TcpFlags.FIN | TcpFlags.RST


def ip(addr: str) -> int:
    return int(ipaddress.IPv4Address(addr))


def ip_str(addr: int) -> str:
    return str(ipaddress.IPv4Address(addr))


def seq_add(a: int, b: int) -> int:
    return (a + b) % SEQ_MOD


def seq_diff(a: int, b: int) -> int:
    """Signed distance ``a - b`` in sequence space, in [-2^31, 2^31)."""
    d = (a - b) % SEQ_MOD
    return d - SEQ_MOD if d >= 1 << 31 else d


class FlowKey(NamedTuple):
    """Connection identifier as seen by the receiving endpoint."""

    guest_local_ip: int
    guest_local_port: int
    remote_ip: int
    remote_port: int
    tunnel_id: int


class HeaderTemplate(NamedTuple):
    outer_src_mac: int
    outer_dst_mac: int
    outer_src_ip: int
    outer_dst_ip: int
    outer_src_port: int
    outer_dst_port: int
    gre_key: int
    inner_src_ip: int
    inner_dst_ip: int
    inner_src_port: int
    inner_dst_port: int

    def flow_key(self) -> FlowKey:
        """Key of the connection this template sends on (sender's view)."""
        return FlowKey(
            self.inner_src_ip,
            self.inner_src_port,
            self.inner_dst_ip,
            self.inner_dst_port,
            self.gre_key,
        )


class Packet(NamedTuple):
    outer_src_mac: int
    outer_dst_mac: int
    outer_src_ip: int
    outer_dst_ip: int
    outer_src_port: int
    outer_dst_port: int
    gre_key: int
    inner_src_ip: int
    inner_dst_ip: int
    inner_src_port: int
    inner_dst_port: int
    seq: int
    ack: int
    flags: TcpFlags
    payload_len: int
    wire_len: int
    # Expected-format discriminators: GRE payload type and inner IP protocol.
    gre_proto: int = GRE_PROTO_IPV4
    ip_proto: int = IPPROTO_TCP


class ParsedPacket(NamedTuple):
    key: FlowKey
    seq: int
    ack: int
    flags: TcpFlags
    payload_len: int


def assemble_packet(
    template: HeaderTemplate, seq: int, ack: int, flags: TcpFlags, payload_len: int
) -> Packet:
    if payload_len < 0:
        raise ValueError(f"payload_len must be >= 0, got {payload_len}")
    return Packet(
        *template,
        seq % SEQ_MOD,
        ack % SEQ_MOD,
        TcpFlags(flags),
        payload_len,
        HEADER_OVERHEAD + payload_len,
    )


def parse_packet(p: Packet) -> Optional[ParsedPacket]:
    """Parse ``p`` from the receiver's point of view.

    Returns None when the packet is not TCP-over-GRE; such packets belong on
    the slow path's legacy route.
    """
    if p.gre_proto != GRE_PROTO_IPV4 or p.ip_proto != IPPROTO_TCP:
        return None
    key = FlowKey(
        p.inner_dst_ip, p.inner_dst_port, p.inner_src_ip, p.inner_src_port, p.gre_key
    )
    return ParsedPacket(key, p.seq, p.ack, p.flags, p.payload_len)


def make_ack(p: Packet, seq: int, ack: int) -> Packet:
    return Packet(
        p.outer_dst_mac,
        p.outer_src_mac,
        p.outer_dst_ip,
        p.outer_src_ip,
        p.outer_dst_port,
        p.outer_src_port,
        p.gre_key,
        p.inner_dst_ip,
        p.inner_src_ip,
        p.inner_dst_port,
        p.inner_src_port,
        seq % SEQ_MOD,
        ack % SEQ_MOD,
        TcpFlags.ACK,
        0,
        HEADER_OVERHEAD,
    )


def reverse_template(t: HeaderTemplate) -> HeaderTemplate:
    """Template for the opposite direction of the same connection."""
    return HeaderTemplate(
        t.outer_dst_mac,
        t.outer_src_mac,
        t.outer_dst_ip,
        t.outer_src_ip,
        t.outer_dst_port,
        t.outer_src_port,
        t.gre_key,
        t.inner_dst_ip,
        t.inner_src_ip,
        t.inner_dst_port,
        t.inner_src_port,
    )


def template_of(p: Packet) -> HeaderTemplate:
    return HeaderTemplate(*p[:11])
