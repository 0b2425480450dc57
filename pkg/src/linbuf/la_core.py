"""Vanilla linear attention in parallel, recurrent and chunkwise form.

Vectors are row vectors, so a state ``S`` is ``d x d`` and a write is the
outer product ``k^T v``. The output of token ``t`` is ``q_t S_t``.

All kernels compute in float64. The ``mixed`` precision tag only affects
what gets *stored*: states are rounded through float32 and per-token
vectors through float16 whenever :func:`store_state` / :func:`store_kv`
are called at a storage boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

FP64 = "fp64-reference"
MIXED = "mixed"
PRECISIONS = (FP64, MIXED)


def _check_precision(precision: str) -> None:
    if precision not in PRECISIONS:
        raise InvalidInputError(f"unknown precision tag {precision!r}")


def store_state(S: np.ndarray, precision: str = FP64) -> np.ndarray:
    """Round a state through its storage format (fp32 under ``mixed``)."""
    _check_precision(precision)
    S = np.asarray(S, dtype=np.float64)
    if precision == MIXED:
        return S.astype(np.float32).astype(np.float64)
    return S.copy()


def store_kv(x: np.ndarray, precision: str = FP64) -> np.ndarray:
    """Round a per-token vector through its storage format (fp16 under ``mixed``)."""
    _check_precision(precision)
    x = np.asarray(x, dtype=np.float64)
    if precision == MIXED:
        return x.astype(np.float16).astype(np.float64)
    return x.copy()


@dataclass(frozen=True)
class AttnConfig:
    d: int
    m: int = 1
    precision: str = FP64

    def __post_init__(self):
        if self.d < 1:
            raise InvalidInputError(f"head dimension must be >= 1, got {self.d}")
        if self.m < 1:
            raise InvalidInputError(f"chunk size must be >= 1, got {self.m}")
        _check_precision(self.precision)


def _finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class HeadState:
    """A ``d x d`` linear-attention state. Treated as immutable."""

    S: np.ndarray
    precision: str = FP64

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise InvalidInputError(f"state must be square, got shape {S.shape}")
        _finite("state", S)
        _check_precision(self.precision)
        S = S.copy()
        S.setflags(write=False)
        object.__setattr__(self, "S", S)

    @property
    def d(self) -> int:
        return self.S.shape[0]

    @classmethod
    def zeros(cls, d: int, precision: str = FP64) -> "HeadState":
        return cls(np.zeros((d, d)), precision)


@dataclass(frozen=True)
class TokenQKV:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        vecs = [np.asarray(x, dtype=np.float64) for x in (self.q, self.k, self.v)]
        if any(x.ndim != 1 for x in vecs) or len({x.shape[0] for x in vecs}) != 1:
            raise InvalidInputError("q, k, v must be 1-D vectors of equal length")
        _finite("token", *vecs)
        for name, x in zip("qkv", vecs):
            x.setflags(write=False)
            object.__setattr__(self, name, x)

    @property
    def d(self) -> int:
        return self.q.shape[0]


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


@dataclass(frozen=True)
class ChunkWorkspace:
    """Queries, keys and values of ``n`` consecutive tokens."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        mats = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (self.Q, self.K, self.V)]
        if len({x.shape for x in mats}) != 1 or mats[0].ndim != 2:
            raise InvalidInputError(
                "Q, K, V must share one n x d shape, got "
                + ", ".join(str(x.shape) for x in mats)
            )
        _finite("chunk", *mats)
        for name, x in zip("QKV", mats):
            x.setflags(write=False)
            object.__setattr__(self, name, x)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def M(self) -> np.ndarray:
        return causal_mask(self.n)

    @classmethod
    def from_tokens(cls, tokens) -> "ChunkWorkspace":
        tokens = list(tokens)
        if not tokens:
            raise InvalidInputError("cannot build a workspace from zero tokens")
        return cls(
            np.stack([t.q for t in tokens]),
            np.stack([t.k for t in tokens]),
            np.stack([t.v for t in tokens]),
        )


def parallel_attend(chunk: ChunkWorkspace) -> np.ndarray:
    """``O = ((Q K^T) * M) V`` with no state involved."""
    return ((chunk.Q @ chunk.K.T) * chunk.M) @ chunk.V


def recurrent_step(state: HeadState, tok: TokenQKV) -> tuple[HeadState, np.ndarray]:
    """Fold one token into the state and query the updated state."""
    if state.d != tok.d:
        raise InvalidInputError(f"state has d={state.d} but token has d={tok.d}")
    S = state.S + np.outer(tok.k, tok.v)
    return HeadState(S, state.precision), tok.q @ S


def buffered_output(S: np.ndarray, q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``q S + sum_i (q . k_i) v_i`` over the buffered rows of ``K``/``V``.

    ``K`` and ``V`` may have zero rows, in which case only the state term remains.
    """
    out = q @ S
    if len(K):
        out = out + (K @ q) @ V
    return out


def chunkwise_attend(state: HeadState, chunk: ChunkWorkspace, j: int) -> np.ndarray:
    """Output of token ``j`` from the chunk-start state plus tokens ``0..j`` of the chunk."""
    if state.d != chunk.d:
        raise InvalidInputError(f"state has d={state.d} but chunk has d={chunk.d}")
    if not 0 <= j < chunk.n:
        raise InvalidInputError(f"token index {j} outside chunk of {chunk.n}")
    return buffered_output(state.S, chunk.Q[j], chunk.K[: j + 1], chunk.V[: j + 1])


def chunk_state_update(state: HeadState, chunk: ChunkWorkspace | None) -> HeadState:
    """``S + K^T V``; an empty or missing chunk leaves the state as is."""
    if chunk is None or chunk.n == 0:
        return state
    if state.d != chunk.d:
        raise InvalidInputError(f"state has d={state.d} but chunk has d={chunk.d}")
    return HeadState(state.S + chunk.K.T @ chunk.V, state.precision)


def kv_state_update(S: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Array-level twin of :func:`chunk_state_update` used by the engine."""
    if len(K) == 0:
        return S.copy()
    return S + K.T @ V


def recurrent_scan(tokens, state: HeadState | None = None) -> tuple[HeadState, np.ndarray]:
    """Run :func:`recurrent_step` over ``tokens``; returns final state and stacked outputs."""
    tokens = list(tokens)
    if state is None:
        state = HeadState.zeros(tokens[0].d)
    outs = []
    for tok in tokens:
        state, o = recurrent_step(state, tok)
        outs.append(o)
    return state, np.array(outs).reshape(len(tokens), state.d)


def chunkwise_scan(tokens, m: int, state: HeadState | None = None) -> tuple[HeadState, np.ndarray]:
    """Process ``tokens`` chunk by chunk, deferring state updates to chunk ends."""
    tokens = list(tokens)
    if state is None:
        state = HeadState.zeros(tokens[0].d)
    outs = []
    for start in range(0, len(tokens), m):
        chunk = ChunkWorkspace.from_tokens(tokens[start : start + m])
        outs.extend(chunkwise_attend(state, chunk, j) for j in range(chunk.n))
        state = chunk_state_update(state, chunk)
    return state, np.array(outs).reshape(len(tokens), state.d)
