"""Paged KV-buffer pool plus a state pool.

Blocks hold a fixed number of token records. A request owns an ordered list
of blocks and at most one state slot (more during recurrent-baseline
verification, see :mod:`linbuf.decode_engine`). Free lists are LIFO stacks
seeded in ascending id order so replaying the same operations reproduces the
same ids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InvalidInputError, OutOfMemoryError

KV_ONLY = "kv_only"
CHUNKWISE = "chunkwise"

STATE_ELEM_BYTES = 4  # fp32
KV_ELEM_BYTES = 2  # fp16
SCALAR_BYTES = 2  # fp16 alpha / beta


def record_bytes(d: int, variant: str = "vanilla") -> int:
    """Stored bytes per buffered token: ``k, v`` (or ``k, u``) in fp16, plus alpha for GDN."""
    base = 2 * d * KV_ELEM_BYTES
    return base + SCALAR_BYTES if variant == "gdn" else base


def state_bytes(d: int) -> int:
    return d * d * STATE_ELEM_BYTES


@dataclass(frozen=True)
class PoolConfig:
    block_size: int
    num_blocks: int
    num_state_slots: int
    bytes_per_token_record: int = 0
    bytes_per_state: int = 0

    def __post_init__(self):
        if self.block_size < 1:
            raise InvalidInputError(f"block_size must be >= 1, got {self.block_size}")
        if self.num_blocks < 0 or self.num_state_slots < 0:
            raise InvalidInputError("pool sizes must be non-negative")

    @classmethod
    def for_states(
        cls,
        num_state_slots: int,
        block_size: int,
        buffer_tokens: int,
        d: int,
        variant: str = "vanilla",
        headroom: float = 0.0,
    ) -> "PoolConfig":
        """Size the block pool from the state pool: one buffer of ``buffer_tokens`` per slot."""
        per_slot = math.ceil(buffer_tokens / block_size)
        num_blocks = math.floor(num_state_slots * per_slot * (1.0 + headroom))
        return cls(block_size, num_blocks, num_state_slots, record_bytes(d, variant), state_bytes(d))

    @classmethod
    def for_kv_only(cls, byte_budget: int, block_size: int, d: int, variant: str = "vanilla") -> "PoolConfig":
        """No state pool; every byte of the budget goes to blocks."""
        rec = record_bytes(d, variant)
        return cls(block_size, byte_budget // (block_size * rec), 0, rec, state_bytes(d))


@dataclass
class RequestSlot:
    request_id: Any
    state_slot: int | None = None
    blocks: list[int] = field(default_factory=list)
    occupancy: int = 0
    context_len: int = 0
    phase: str = CHUNKWISE

    def capacity(self, block_size: int) -> int:
        return len(self.blocks) * block_size


class Pool:
    def __init__(self, cfg: PoolConfig):
        self.cfg = cfg
        self._free_blocks = list(range(cfg.num_blocks - 1, -1, -1))
        self._free_states = list(range(cfg.num_state_slots - 1, -1, -1))
        self._block_data: dict[int, list] = {}
        self._states: dict[int, np.ndarray | None] = {}
        self.peak_live_states = 0
        self.peak_live_blocks = 0

    # -- accounting -------------------------------------------------------
    @property
    def block_size(self) -> int:
        return self.cfg.block_size

    @property
    def free_blocks(self) -> int:
        return len(self._free_blocks)

    @property
    def free_states(self) -> int:
        return len(self._free_states)

    @property
    def live_blocks(self) -> int:
        return self.cfg.num_blocks - self.free_blocks

    @property
    def live_states(self) -> int:
        return self.cfg.num_state_slots - self.free_states

    def bytes_in_use(self) -> int:
        return (
            self.live_blocks * self.cfg.block_size * self.cfg.bytes_per_token_record
            + self.live_states * self.cfg.bytes_per_state
        )

    def stats(self) -> dict:
        return {
            "free_blocks": self.free_blocks,
            "live_blocks": self.live_blocks,
            "free_states": self.free_states,
            "live_states": self.live_states,
            "bytes_in_use": self.bytes_in_use(),
        }

    def stats_json(self) -> str:
        return json.dumps(self.stats(), sort_keys=True)

    def _note_peaks(self) -> None:
        self.peak_live_states = max(self.peak_live_states, self.live_states)
        self.peak_live_blocks = max(self.peak_live_blocks, self.live_blocks)

    # -- blocks -------------------------------------------------------------
    def blocks_needed(self, slot: RequestSlot, tokens_needed: int) -> int:
        if tokens_needed < 0:
            raise InvalidInputError(f"tokens_needed must be >= 0, got {tokens_needed}")
        spare = slot.capacity(self.block_size) - slot.occupancy
        return math.ceil(max(0, tokens_needed - spare) / self.block_size)

    def alloc_blocks(self, slot: RequestSlot, tokens_needed: int) -> RequestSlot:
        n = self.blocks_needed(slot, tokens_needed)
        if n > self.free_blocks:
            raise OutOfMemoryError(
                f"request {slot.request_id!r} needs {n} blocks, {self.free_blocks} free"
            )
        for _ in range(n):
            b = self._free_blocks.pop()
            self._block_data[b] = []
            slot.blocks.append(b)
        self._note_peaks()
        return slot

    def append_token(self, slot: RequestSlot, record) -> RequestSlot:
        self.alloc_blocks(slot, 1)
        b = slot.blocks[slot.occupancy // self.block_size]
        self._block_data[b].append(record)
        slot.occupancy += 1
        return slot

    def read_records(self, slot: RequestSlot) -> list:
        out = []
        for b in slot.blocks:
            out.extend(self._block_data[b])
        return out[: slot.occupancy]

    def record_at(self, slot: RequestSlot, pos: int):
        if not 0 <= pos < slot.occupancy:
            raise InvalidInputError(f"position {pos} outside occupancy {slot.occupancy}")
        return self._block_data[slot.blocks[pos // self.block_size]][pos % self.block_size]

    def flush_and_free(self, slot: RequestSlot) -> tuple[list, RequestSlot]:
        records = self.read_records(slot)
        for b in reversed(slot.blocks):
            del self._block_data[b]
            self._free_blocks.append(b)
        slot.blocks = []
        slot.occupancy = 0
        return records, slot

    # -- states -------------------------------------------------------------
    def alloc_state(self, slot: RequestSlot) -> RequestSlot:
        if slot.state_slot is not None:
            raise InvalidInputError(f"request {slot.request_id!r} already holds a state slot")
        slot.state_slot = self.take_state()
        return slot

    def free_state(self, slot: RequestSlot) -> RequestSlot:
        if slot.state_slot is not None:
            self.release_state(slot.state_slot)
            slot.state_slot = None
        return slot

    def take_state(self) -> int:
        """Grab a bare state slot (used for verification temporaries)."""
        if not self._free_states:
            raise OutOfMemoryError("state pool exhausted")
        sid = self._free_states.pop()
        self._states[sid] = None
        self._note_peaks()
        return sid

    def take_states(self, n: int) -> list[int]:
        if n > self.free_states:
            raise OutOfMemoryError(f"need {n} state slots, {self.free_states} free")
        return [self.take_state() for _ in range(n)]

    def release_state(self, sid: int) -> None:
        if sid not in self._states:
            raise InvalidInputError(f"state slot {sid} is not live")
        del self._states[sid]
        self._free_states.append(sid)

    def read_state(self, sid: int) -> np.ndarray:
        S = self._states[sid]
        if S is None:
            raise InvalidInputError(f"state slot {sid} holds no state yet")
        return S

    def write_state(self, sid: int, S: np.ndarray) -> None:
        if sid not in self._states:
            raise InvalidInputError(f"state slot {sid} is not live")
        S = np.array(S, dtype=np.float64)
        S.setflags(write=False)
        self._states[sid] = S

    # -- invariant helpers --------------------------------------------------
    def live_block_ids(self) -> set[int]:
        return set(self._block_data)

    def live_state_ids(self) -> set[int]:
        return set(self._states)


def pool_init(cfg: PoolConfig) -> Pool:
    return Pool(cfg)
