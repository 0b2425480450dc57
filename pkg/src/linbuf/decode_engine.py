"""Serving loop for one linear-attention head over many requests.

Three decoding paths share one pool:

* chunkwise decoding: outputs come from the (stale) state plus buffered
  records; the buffer is folded into the state once it holds ``m`` tokens.
* draft verification: ``kv_buffered`` computes all draft outputs in one
  chunk pass and folds only the accepted prefix into the state;
  ``recurrent_baseline`` keeps one temporary state per draft.
* KV-only decoding: short requests (``L < d``) never own a state; outputs
  come from the parallel form until the context reaches ``d``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import io_cost_model as cost
from .buffer_manager import CHUNKWISE, KV_ONLY, Pool, RequestSlot
from .errors import InvalidInputError
from .gdn_core import GdnBufferedToken, GdnToken, gdn_build_chunk, gdn_chunk_attend, gdn_recurrent_step, gdn_state_fold, gdn_token_step
from .la_core import (
    FP64,
    AttnConfig,
    HeadState,
    TokenQKV,
    buffered_output,
    causal_mask,
    kv_state_update,
    recurrent_step,
    store_kv,
    store_state,
)

RECURRENT_BASELINE = cost.RECURRENT_BASELINE
KV_BUFFERED = cost.KV_BUFFERED


@dataclass(frozen=True)
class VanillaRecord:
    k: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class EngineConfig:
    attn: AttnConfig
    variant: str = "vanilla"
    draft_len: int = 0
    verify_mode: str = KV_BUFFERED
    kv_only_enabled: bool = False

    def __post_init__(self):
        if self.variant not in ("vanilla", "gdn"):
            raise InvalidInputError(f"unknown variant {self.variant!r}")
        if self.verify_mode not in (KV_BUFFERED, RECURRENT_BASELINE):
            raise InvalidInputError(f"unknown verify mode {self.verify_mode!r}")
        if self.draft_len < 0:
            raise InvalidInputError("draft_len must be >= 0")

    @property
    def d(self) -> int:
        return self.attn.d

    @property
    def m(self) -> int:
        return self.attn.m


@dataclass
class DraftBatch:
    tokens: list
    accepted_len: int | None = None

    @property
    def N(self) -> int:
        return len(self.tokens)


def _accepted_prefix(verdict, n: int) -> int:
    """Turn an acceptance verdict into a prefix length.

    ``verdict`` is an int, or a sequence of accepted draft indices. Anything
    that is not a prefix ``0..j-1`` is rejected.
    """
    if isinstance(verdict, (int, np.integer)):
        j = int(verdict)
        if not 0 <= j <= n:
            raise InvalidInputError(f"accepted length {j} outside [0, {n}]")
        return j
    idx = sorted(int(i) for i in verdict)
    if idx != list(range(len(idx))) or len(idx) > n:
        raise InvalidInputError(f"accepted drafts {idx} do not form a prefix")
    return len(idx)


class DecodeEngine:
    """Owns a pool and the per-request slots that live in it.

    ``trace`` may be a list (records are appended as dicts) or a text file
    (one JSON object per line).
    """

    def __init__(self, cfg: EngineConfig, pool: Pool, trace=None):
        self.cfg = cfg
        self.pool = pool
        self.slots: dict[Any, RequestSlot] = {}
        self._steps: dict[Any, int] = {}
        self._trace = trace

    # -- helpers ---------------------------------------------------------------
    @property
    def _precision(self) -> str:
        return self.cfg.attn.precision

    @property
    def _gdn(self) -> bool:
        return self.cfg.variant == "gdn"

    def _check_token(self, tok):
        want = GdnToken if self._gdn else TokenQKV
        if not isinstance(tok, want):
            raise InvalidInputError(f"{self.cfg.variant} engine expects {want.__name__}, got {type(tok).__name__}")
        if tok.d != self.cfg.d:
            raise InvalidInputError(f"token has d={tok.d}, engine has d={self.cfg.d}")

    def _store_record(self, rec):
        p = self._precision
        if self._gdn:
            alpha = rec.alpha if p == FP64 else float(np.float16(rec.alpha))
            return GdnBufferedToken(alpha, store_kv(rec.k, p), store_kv(rec.u, p))
        return VanillaRecord(store_kv(rec.k, p), store_kv(rec.v, p))

    def _state(self, slot: RequestSlot) -> np.ndarray:
        return self.pool.read_state(slot.state_slot)

    def _write_state(self, sid: int, S: np.ndarray) -> None:
        self.pool.write_state(sid, store_state(S, self._precision))

    def _fold(self, S: np.ndarray, records) -> np.ndarray:
        if not records:
            return S.copy()
        K = np.stack([r.k for r in records])
        if self._gdn:
            return gdn_state_fold(S, [r.alpha for r in records], K, np.stack([r.u for r in records]))
        return kv_state_update(S, K, np.stack([r.v for r in records]))

    def _emit(self, rid, flushed: bool, traffic: cost.Traffic) -> None:
        if self._trace is None:
            return
        slot = self.slots[rid]
        step = self._steps[rid]
        self._steps[rid] = step + 1
        rec = {
            "request_id": rid,
            "step": step,
            "phase": slot.phase,
            "occupancy": slot.occupancy,
            "flushed": flushed,
            "state_slots_in_use": self.pool.live_states,
            "bytes_read_modeled": traffic.read,
            "bytes_written_modeled": traffic.write,
        }
        if isinstance(self._trace, list):
            self._trace.append(rec)
        else:
            self._trace.write(json.dumps(rec) + "\n")

    def state(self, rid) -> HeadState | None:
        slot = self.slots[rid]
        if slot.state_slot is None:
            return None
        return HeadState(self._state(slot), self._precision)

    def buffered_records(self, rid) -> list:
        return self.pool.read_records(self.slots[rid])

    # -- request lifecycle -----------------------------------------------------
    def prefill(self, rid, prompt: Sequence) -> np.ndarray:
        """Admit a request and process its prompt. Returns the prompt outputs (``L x d``)."""
        if rid in self.slots:
            raise InvalidInputError(f"request {rid!r} already exists")
        prompt = list(prompt)
        for tok in prompt:
            self._check_token(tok)
        d, m = self.cfg.d, self.cfg.m
        slot = RequestSlot(rid)
        self.slots[rid] = slot
        self._steps[rid] = 0
        try:
            if self.cfg.kv_only_enabled and len(prompt) < d:
                slot.phase = KV_ONLY
                outs = self._kv_only_prefill(slot, prompt)
            else:
                slot.phase = CHUNKWISE
                self.pool.alloc_state(slot)
                outs = self._chunkwise_prefill(slot, prompt)
        except Exception:
            self.release(rid)
            raise
        slot.context_len = len(prompt)
        self._emit(rid, False, cost.prefill_traffic(d, len(prompt), m, self.cfg.variant))
        return outs

    def _kv_only_prefill(self, slot, prompt) -> np.ndarray:
        self.pool.alloc_blocks(slot, len(prompt))
        outs = []
        for tok in prompt:
            outs.append(self._kv_only_token(slot, tok))
        return np.array(outs).reshape(len(prompt), self.cfg.d)

    def _chunkwise_prefill(self, slot, prompt) -> np.ndarray:
        d, m = self.cfg.d, self.cfg.m
        S = np.zeros((d, d))
        outs = []
        for start in range(0, len(prompt), m):
            part = prompt[start : start + m]
            if self._gdn:
                hs = HeadState(S)
                chunk = gdn_build_chunk(part, hs, m)
                outs.append(gdn_chunk_attend(chunk, hs))
                S = gdn_state_fold(S, chunk.alpha, chunk.K, chunk.U)
            else:
                Q = np.stack([t.q for t in part])
                K = np.stack([t.k for t in part])
                V = np.stack([t.v for t in part])
                outs.append(Q @ S + ((Q @ K.T) * causal_mask(len(part))) @ V)
                S = kv_state_update(S, K, V)
        self._write_state(slot.state_slot, S)
        return np.vstack(outs) if outs else np.zeros((0, d))

    def _kv_only_token(self, slot, tok) -> np.ndarray:
        """Append ``tok`` to a state-less request and return its parallel-form output."""
        records = self.pool.read_records(slot)
        if self._gdn:
            rec, out = gdn_token_step(None, records, tok)
        else:
            rec = VanillaRecord(tok.k, tok.v)
            K = np.stack([r.k for r in records] + [tok.k])
            V = np.stack([r.v for r in records] + [tok.v])
            out = (K @ tok.q) @ V
        self.pool.append_token(slot, self._store_record(rec))
        return out

    def decode_step(self, rid, tok) -> np.ndarray:
        slot = self.slots[rid]
        self._check_token(tok)
        d, m, variant = self.cfg.d, self.cfg.m, self.cfg.variant
        if slot.phase == KV_ONLY:
            out = self._kv_only_token(slot, tok)
            slot.context_len += 1
            traffic = cost.parallel_decode_traffic(d, slot.occupancy, variant)
            flushed = False
            if slot.context_len >= d:
                traffic = traffic + self._leave_kv_only(slot)
                flushed = True
            self._emit(rid, flushed, traffic)
            return out

        S = self._state(slot)
        records = self.pool.read_records(slot)
        traffic = cost.chunk_decode_traffic(d, len(records), variant)
        if self._gdn:
            rec, out = gdn_token_step(S, records, tok)
        else:
            rec = VanillaRecord(tok.k, tok.v)
            K = np.stack([r.k for r in records] + [tok.k])
            V = np.stack([r.v for r in records] + [tok.v])
            out = buffered_output(S, tok.q, K, V)
        self.pool.append_token(slot, self._store_record(rec))
        slot.context_len += 1
        flushed = slot.occupancy >= m
        if flushed:
            traffic = traffic + cost.state_update_traffic(d, slot.occupancy, variant)
            self._flush(slot)
        self._emit(rid, flushed, traffic)
        return out

    def _flush(self, slot: RequestSlot) -> None:
        records, _ = self.pool.flush_and_free(slot)
        self._write_state(slot.state_slot, self._fold(self._state(slot), records))

    def _leave_kv_only(self, slot: RequestSlot) -> cost.Traffic:
        """Compress buffered records into a fresh state and switch to chunkwise decoding.

        Whole chunks of ``m`` are folded in ascending order; the trailing
        partial chunk stays buffered as the current chunk.
        """
        d, m = self.cfg.d, self.cfg.m
        self.pool.alloc_state(slot)
        records, _ = self.pool.flush_and_free(slot)
        keep = len(records) % m
        folded = records[: len(records) - keep]
        S = np.zeros((d, d))
        traffic = None
        for start in range(0, len(folded), m):
            S = self._fold(S, folded[start : start + m])
            t = cost.state_update_traffic(d, m, self.cfg.variant)
            traffic = t if traffic is None else traffic + t
        self._write_state(slot.state_slot, S)
        for rec in records[len(folded) :]:
            self.pool.append_token(slot, rec)
        slot.phase = CHUNKWISE
        return traffic if traffic is not None else cost.Traffic(0, 0, 0, 0)

    # -- speculative verification ---------------------------------------------
    def verify_draft(self, rid, draft: DraftBatch, acceptance_oracle: Callable) -> tuple[np.ndarray, int]:
        """Verify ``draft.tokens``; ``acceptance_oracle(outputs)`` decides the accepted prefix."""
        slot = self.slots[rid]
        if slot.phase != CHUNKWISE:
            raise InvalidInputError("verification needs a request in the chunkwise phase")
        for tok in draft.tokens:
            self._check_token(tok)
        if slot.occupancy:
            self._flush(slot)
        if draft.N == 0:
            draft.accepted_len = 0
            return np.zeros((0, self.cfg.d)), 0
        if self.cfg.verify_mode == KV_BUFFERED:
            outs, j = self._verify_buffered(slot, draft, acceptance_oracle)
            traffic = cost.buffered_verify_traffic(self.cfg.d, draft.N, self.cfg.variant)
        else:
            outs, j = self._verify_recurrent(slot, draft, acceptance_oracle)
            traffic = cost.recurrent_verify_traffic(self.cfg.d, draft.N, self.cfg.variant)
        draft.accepted_len = j
        slot.context_len += j
        self._emit(rid, True, traffic)
        return outs, j

    def _verify_buffered(self, slot, draft, oracle):
        S = self._state(slot)
        toks = draft.tokens
        if self._gdn:
            hs = HeadState(S)
            chunk = gdn_build_chunk(toks, hs)
            outs = gdn_chunk_attend(chunk, hs)
            recs = chunk.buffered()
        else:
            Q = np.stack([t.q for t in toks])
            K = np.stack([t.k for t in toks])
            V = np.stack([t.v for t in toks])
            outs = Q @ S + ((Q @ K.T) * causal_mask(len(toks))) @ V
            recs = [VanillaRecord(t.k, t.v) for t in toks]
        self.pool.alloc_blocks(slot, len(recs))
        for rec in recs:
            self.pool.append_token(slot, self._store_record(rec))
        j = _accepted_prefix(oracle(outs), draft.N)
        records, _ = self.pool.flush_and_free(slot)
        if j:
            self._write_state(slot.state_slot, self._fold(S, records[:j]))
        return outs, j

    def _verify_recurrent(self, slot, draft, oracle):
        temps = self.pool.take_states(draft.N)
        try:
            hs = HeadState(self._state(slot))
            outs = []
            for sid, tok in zip(temps, draft.tokens):
                hs, o = (gdn_recurrent_step if self._gdn else recurrent_step)(hs, tok)
                self._write_state(sid, hs.S)
                hs = HeadState(self.pool.read_state(sid))
                outs.append(o)
            outs = np.array(outs)
            j = _accepted_prefix(oracle(outs), draft.N)
            if j:
                # the request adopts the last accepted temporary state
                old = slot.state_slot
                slot.state_slot = temps[j - 1]
                temps[j - 1] = old
        finally:
            for sid in temps:
                self.pool.release_state(sid)
        return outs, j

    # -- batches and teardown ---------------------------------------------------
    def decode_batch(self, tokens: dict) -> dict:
        """One decode step for every request in ``tokens``, in sorted id order."""
        return {rid: self.decode_step(rid, tokens[rid]) for rid in sorted(tokens)}

    def release(self, rid) -> None:
        slot = self.slots.pop(rid)
        self._steps.pop(rid, None)
        self.pool.flush_and_free(slot)
        self.pool.free_state(slot)
