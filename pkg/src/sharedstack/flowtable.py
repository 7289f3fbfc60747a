"""Consolidated per-connection state and the single combined flow lookup."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, Optional

from .packetmodel import SEQ_MOD, FlowKey, HeaderTemplate, seq_add, seq_diff

DEFAULT_BUFFER_BYTES = 64 * 1024


class FlowExistsError(KeyError):
    pass


class FlowNotFoundError(KeyError):
    pass


class Deposit(enum.Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"
    OUT_OF_WINDOW = "out_of_window"


class ConnState(enum.Enum):
    SYN_SENT = "syn_sent"
    ESTABLISHED = "established"
    CLOSING = "closing"


class ByteRing:
    """Circular buffer that tracks byte positions only, never contents."""

    __slots__ = ("capacity", "head", "tail")

    def __init__(self, capacity: int = DEFAULT_BUFFER_BYTES):
        self.capacity = capacity
        self.head = 0
        self.tail = 0

    @property
    def used(self) -> int:
        return self.tail - self.head

    @property
    def free(self) -> int:
        return self.capacity - (self.tail - self.head)

    def write(self, n: int) -> None:
        if n > self.free:
            raise ValueError(f"ring overflow: {n} > {self.free} free bytes")
        self.tail += n

    def read(self, n: int) -> None:
        if n > self.used:
            raise ValueError(f"ring underflow: {n} > {self.used} used bytes")
        self.head += n

    def __repr__(self) -> str:
        return f"ByteRing(capacity={self.capacity}, used={self.used})"


@dataclass(eq=False)
class ConsolidatedFlowState:
    key: FlowKey
    guest: int
    template: HeaderTemplate
    tx_next_seq: int = 0
    tx_acked_seq: int = 0
    rx_next_expected: int = 0
    tx_buffer: ByteRing = field(default_factory=ByteRing)
    rx_buffer: ByteRing = field(default_factory=ByteRing)
    next_send_time: int = 0
    rate: float = 0.0  # bytes per cycle; 0 means not yet assigned
    pending_tx_bytes: int = 0

    # Bookkeeping beyond the transport state proper.
    core: int = 0
    state: ConnState = ConnState.ESTABLISHED
    isn: int = 0
    tx_sent_max: int = 0  # highest sequence number ever sent
    last_ack_time: int = 0  # virtual time of the last forward progress on acks
    in_txq: bool = False
    rx_notify: Optional[deque] = None  # guest receive notification queue
    app: Any = None  # owned by the guest application
    timeouts: int = 0
    bytes_delivered: int = 0

    def __post_init__(self) -> None:
        if self.tx_sent_max == 0:
            self.tx_sent_max = self.tx_next_seq

    @property
    def inflight(self) -> int:
        return (self.tx_next_seq - self.tx_acked_seq) % SEQ_MOD

    def check(self) -> None:
        """Raise AssertionError if a structural invariant is broken."""
        assert 0 <= self.inflight <= self.tx_buffer.capacity, self.inflight
        assert self.template.flow_key() == self.key, (self.template, self.key)
        assert 0 <= self.tx_buffer.used <= self.tx_buffer.capacity
        assert 0 <= self.rx_buffer.used <= self.rx_buffer.capacity

    def ack_to(self, ack: int, now: int) -> int:
        """Advance ``tx_acked_seq`` to ``ack``; returns newly acked bytes.

        Acks for data sent before a go-back-N rewind may run ahead of
        ``tx_next_seq``; the send pointer then skips forward with them.
        """
        adv = seq_diff(ack, self.tx_acked_seq)
        if adv <= 0 or seq_diff(ack, self.tx_sent_max) > 0:
            return 0
        self.tx_acked_seq = ack
        self.tx_buffer.read(min(adv, self.tx_buffer.used))
        ahead = seq_diff(ack, self.tx_next_seq)
        if ahead > 0:
            self.tx_next_seq = ack
            self.pending_tx_bytes = max(0, self.pending_tx_bytes - ahead)
        self.last_ack_time = now
        return adv


class FlowTable:
    """Exact-match lookup from FlowKey (tunnel id included) to flow state."""

    def __init__(self) -> None:
        self._flows: Dict[FlowKey, ConsolidatedFlowState] = {}
        self._by_guest: Dict[int, Dict[FlowKey, None]] = {}

    def __len__(self) -> int:
        return len(self._flows)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._flows

    def __iter__(self) -> Iterator[ConsolidatedFlowState]:
        return iter(list(self._flows.values()))

    def lookup(self, key: FlowKey) -> Optional[ConsolidatedFlowState]:
        return self._flows.get(key)

    def install(self, state: ConsolidatedFlowState) -> None:
        if state.key in self._flows:
            raise FlowExistsError(state.key)
        state.check()
        self._flows[state.key] = state
        self._by_guest.setdefault(state.guest, {})[state.key] = None

    def remove(self, key: FlowKey) -> ConsolidatedFlowState:
        try:
            state = self._flows.pop(key)
        except KeyError:
            raise FlowNotFoundError(key) from None
        index = self._by_guest[state.guest]
        del index[key]
        if not index:
            del self._by_guest[state.guest]
        return state

    def guest_flows(self, guest: int) -> list:
        return [self._flows[k] for k in self._by_guest.get(guest, ())]

    def consistent(self) -> bool:
        indexed = {k for keys in self._by_guest.values() for k in keys}
        if indexed != set(self._flows):
            return False
        return all(
            self._flows[k].guest == g for g, keys in self._by_guest.items() for k in keys
        )


def validate_and_deposit(
    flow: ConsolidatedFlowState, seq: int, payload_len: int
) -> Deposit:
    """Check an incoming segment against the flow and store its payload.

    Only the exactly-next segment is accepted; there is no reassembly queue.
    Accepted data advances the receive pointer, fills the receive ring and
    posts ``(flow, nbytes)`` on the guest's receive notification queue.
    """
    if payload_len < 0:
        raise ValueError(f"payload_len must be >= 0, got {payload_len}")
    d = seq_diff(seq, flow.rx_next_expected)
    if d < 0:
        return Deposit.DUPLICATE
    if d > 0 or flow.rx_buffer.free < payload_len:
        return Deposit.OUT_OF_WINDOW
    if payload_len:
        flow.rx_next_expected = seq_add(flow.rx_next_expected, payload_len)
        flow.rx_buffer.write(payload_len)
        flow.bytes_delivered += payload_len
        if flow.rx_notify is not None:
            flow.rx_notify.append((flow, payload_len))
    return Deposit.ACCEPTED
