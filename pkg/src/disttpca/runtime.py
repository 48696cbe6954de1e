"""In-process simulation of machines exchanging subspace messages with a coordinator.

Every basis that crosses a machine boundary is encoded to bytes and decoded
again, so the communication ledger counts exactly what a real transport
would carry.

Message wire layout (little-endian, 24-byte header)::

    b"DTPM" | mode u32 | machine_id u64 | p u32 | r u32 | p*r float64, row-major
"""

from __future__ import annotations

import struct
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MESSAGE_MAGIC = b"DTPM"
HEADER_FORMAT = "<4sIQII"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)  # 24
SCALAR_SIZE = 8


@dataclass
class MachineState:
    """Data held privately by one machine."""

    machine_id: int
    tensor: np.ndarray
    init_factors: list[np.ndarray] | None = None
    noise_level_hint: float | None = None
    inbox: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.tensor.shape)


@dataclass(frozen=True)
class SubspaceMessage:
    machine_id: int
    mode: int
    payload: np.ndarray

    @property
    def byte_size(self) -> int:
        return message_size(*self.payload.shape)


def message_size(p: int, r: int) -> int:
    return 8 * p * r + HEADER_SIZE


def encode_message(msg: SubspaceMessage) -> bytes:
    p, r = msg.payload.shape
    header = struct.pack(HEADER_FORMAT, MESSAGE_MAGIC, msg.mode, msg.machine_id, p, r)
    return header + np.ascontiguousarray(msg.payload, dtype="<f8").tobytes()


def decode_message(data: bytes) -> SubspaceMessage:
    if len(data) < HEADER_SIZE:
        raise ValueError("truncated message header")
    magic, mode, machine_id, p, r = struct.unpack_from(HEADER_FORMAT, data)
    if magic != MESSAGE_MAGIC:
        raise ValueError("bad message magic")
    if len(data) != message_size(p, r):
        raise ValueError(f"message length {len(data)} does not match a {p}x{r} payload")
    payload = np.frombuffer(data, dtype="<f8", offset=HEADER_SIZE).astype(float).reshape(p, r)
    return SubspaceMessage(machine_id, mode, payload)


@dataclass(frozen=True)
class LedgerRecord:
    round_id: int
    direction: str  # "up" or "down"
    machine_id: int
    nbytes: int
    kind: str = "basis"


@dataclass
class CommLedger:
    records: list[LedgerRecord] = field(default_factory=list)
    rounds: int = 0

    def new_round(self) -> int:
        self.rounds += 1
        return self.rounds

    def add(self, round_id: int, direction: str, machine_id: int, nbytes: int, kind: str = "basis") -> None:
        self.records.append(LedgerRecord(round_id, direction, machine_id, nbytes, kind))

    def total(self, direction: str | None = None, kind: str | None = None) -> int:
        return sum(
            rec.nbytes
            for rec in self.records
            if (direction is None or rec.direction == direction) and (kind is None or rec.kind == kind)
        )

    @property
    def upload_bytes(self) -> int:
        return self.total("up")

    @property
    def download_bytes(self) -> int:
        return self.total("down")

    def round_ids(self, direction: str | None = None, kind: str | None = None) -> list[int]:
        return sorted({
            rec.round_id
            for rec in self.records
            if (direction is None or rec.direction == direction) and (kind is None or rec.kind == kind)
        })


def check_machines(machines: Sequence[MachineState]) -> list[MachineState]:
    """Machines sorted by id; all must hold tensors of identical shape."""
    ordered = sorted(machines, key=lambda m: m.machine_id)
    ids = [m.machine_id for m in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate machine ids")
    if ordered:
        dims = ordered[0].dims
        for m in ordered[1:]:
            if m.dims != dims:
                raise ValueError(f"machine {m.machine_id} has dims {m.dims}, expected {dims}")
    return ordered


class Coordinator:
    """Central machine: collects local bases, broadcasts aggregates, meters bytes.

    ``executor`` optionally runs the per-machine local computations
    concurrently; results are always folded in ascending ``machine_id``.
    """

    def __init__(self, ledger: CommLedger | None = None, executor: Executor | None = None):
        self.ledger = ledger if ledger is not None else CommLedger()
        self.executor = executor

    def _map(self, fn: Callable, machines: Sequence[MachineState]) -> list:
        if self.executor is None:
            return [fn(m) for m in machines]
        return list(self.executor.map(fn, machines))

    def gather(
        self,
        machines: Sequence[MachineState],
        j: int,
        local_op: Callable[[MachineState], np.ndarray],
    ) -> list[SubspaceMessage]:
        """One upload round: every machine sends ``local_op(machine)`` for mode ``j``."""
        ordered = check_machines(machines)
        bases = self._map(local_op, ordered)
        round_id = self.ledger.new_round()
        out = []
        for m, basis in zip(ordered, bases):
            wire = encode_message(SubspaceMessage(m.machine_id, j, np.asarray(basis, dtype=float)))
            self.ledger.add(round_id, "up", m.machine_id, len(wire))
            out.append(decode_message(wire))
        return out

    def gather_scalars(
        self,
        machines: Sequence[MachineState],
        local_op: Callable[[MachineState], float],
    ) -> list[float]:
        """Upload one float64 per machine (e.g. a noise level estimate)."""
        ordered = check_machines(machines)
        values = self._map(local_op, ordered)
        round_id = self.ledger.new_round()
        out = []
        for m, value in zip(ordered, values):
            wire = struct.pack("<d", float(value))
            self.ledger.add(round_id, "up", m.machine_id, len(wire), kind="scalar")
            out.append(struct.unpack("<d", wire)[0])
        return out

    def broadcast(self, basis: np.ndarray, machines: Sequence[MachineState], j: int = 0) -> None:
        """Send the same basis to every machine; each stores its own decoded copy in ``inbox[j]``."""
        ordered = check_machines(machines)
        if not ordered:
            return
        round_id = self.ledger.new_round()
        wire = encode_message(SubspaceMessage(0, j, np.asarray(basis, dtype=float)))
        for m in ordered:
            self.ledger.add(round_id, "down", m.machine_id, len(wire))
            m.inbox[j] = decode_message(wire).payload

    def upload_tensors(self, machines: Sequence[MachineState]) -> list[np.ndarray]:
        """Ship raw tensors to the center (the pooled benchmark); no header is charged."""
        ordered = check_machines(machines)
        round_id = self.ledger.new_round()
        out = []
        for m in ordered:
            wire = np.ascontiguousarray(m.tensor, dtype="<f8").tobytes()
            self.ledger.add(round_id, "up", m.machine_id, len(wire), kind="tensor")
            out.append(np.frombuffer(wire, dtype="<f8").astype(float).reshape(m.dims))
        return out
