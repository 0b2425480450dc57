"""Gated Delta Network kernels: recurrent, parallel and chunkwise forms.

Recurrent update for token ``(q, k, v, alpha, beta)``::

    S~ = alpha * S
    S' = (I - beta k^T k) S~ + beta k^T v
    o  = q S'

The chunkwise form rewrites each write as ``k_t^T u_t`` where the delta
value ``u_t = beta_t (v_t - k_t alpha_t S_{t-1})``. ``u_t`` depends only on
the true history, not on where chunk boundaries fall, which is what lets the
serving buffer hold ``(alpha, k, u)`` records and fold them into the state
at any later point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericError
from .la_core import HeadState, _finite


@dataclass(frozen=True)
class GdnToken:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        vecs = [np.asarray(x, dtype=np.float64) for x in (self.q, self.k, self.v)]
        if any(x.ndim != 1 for x in vecs) or len({x.shape[0] for x in vecs}) != 1:
            raise InvalidInputError("q, k, v must be 1-D vectors of equal length")
        _finite("token", *vecs)
        alpha, beta = float(self.alpha), float(self.beta)
        if not 0.0 < alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
        if not 0.0 <= beta <= 1.0:
            raise InvalidInputError(f"beta must lie in [0, 1], got {beta}")
        for name, x in zip("qkv", vecs):
            x.setflags(write=False)
            object.__setattr__(self, name, x)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def d(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class GdnBufferedToken:
    """What the KV buffer keeps per GDN token: decay, key and delta value."""

    alpha: float
    k: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        _finite("buffered token", k, u)
        if not 0.0 < float(self.alpha) <= 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1], got {self.alpha}")
        k.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "alpha", float(self.alpha))


def gdn_recurrent_step(state: HeadState, tok: GdnToken) -> tuple[HeadState, np.ndarray]:
    if state.d != tok.d:
        raise InvalidInputError(f"state has d={state.d} but token has d={tok.d}")
    S = tok.alpha * state.S
    S = S - tok.beta * np.outer(tok.k, tok.k @ S) + tok.beta * np.outer(tok.k, tok.v)
    return HeadState(S, state.precision), tok.q @ S


def cumulative_decay(alphas) -> np.ndarray:
    """Chunk-local ``gamma_i = prod_{j <= i} alpha_j``."""
    return np.cumprod(np.asarray(alphas, dtype=np.float64))


def decay_mask(alphas) -> np.ndarray:
    """Lower-triangular ``Gamma_ij = gamma_i / gamma_j`` built from direct products.

    Entry ``(i, j)`` is ``prod_{l=j+1..i} alpha_l``, so no division by a
    possibly tiny cumulative product ever happens.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    n = len(alphas)
    G = np.zeros((n, n))
    for i in range(n):
        if i:
            G[i, :i] = G[i - 1, :i] * alphas[i]
        G[i, i] = 1.0
    return G


def unit_lower_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of ``I + L`` for strictly lower-triangular ``L``, by forward substitution."""
    n = L.shape[0]
    A = np.eye(n)
    for i in range(1, n):
        # row i of (I + L) A = e_i  =>  A_i = e_i - sum_{j<i} L_ij A_j
        A[i, :i] = -(L[i, :i] @ A[:i, :i])
    return A


@dataclass(frozen=True)
class GdnChunk:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    Gamma: np.ndarray
    A: np.ndarray
    K_tilde: np.ndarray
    V_tilde: np.ndarray
    U: np.ndarray

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    def system_matrix(self) -> np.ndarray:
        """``I + strictLower(Diag(beta) (Gamma * K K^T))``, the matrix ``A`` inverts."""
        T = np.tril(self.beta[:, None] * (self.Gamma * (self.K @ self.K.T)), -1)
        return np.eye(self.n) + T

    def buffered(self) -> list[GdnBufferedToken]:
        return [GdnBufferedToken(a, k, u) for a, k, u in zip(self.alpha, self.K, self.U)]


def gdn_build_chunk(tokens, state: HeadState | None = None, m: int | None = None) -> GdnChunk:
    """Precompute decay, the triangular solve and the delta values for one chunk.

    ``state`` is the chunk-start state; ``None`` means zero.
    """
    tokens = list(tokens)
    n = len(tokens)
    if n == 0:
        raise InvalidInputError("a GDN chunk needs at least one token")
    if m is not None and n > m:
        raise InvalidInputError(f"chunk of {n} tokens exceeds chunk size {m}")
    d = tokens[0].d
    if any(t.d != d for t in tokens):
        raise InvalidInputError("tokens in a chunk must share one dimension")
    if state is not None and state.d != d:
        raise InvalidInputError(f"state has d={state.d} but tokens have d={d}")

    Q = np.stack([t.q for t in tokens])
    K = np.stack([t.k for t in tokens])
    V = np.stack([t.v for t in tokens])
    alpha = np.array([t.alpha for t in tokens])
    beta = np.array([t.beta for t in tokens])

    # overflow is reported below as NumericError rather than as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        gamma = cumulative_decay(alpha)
        Gamma = decay_mask(alpha)
        A = unit_lower_inverse(np.tril(beta[:, None] * (Gamma * (K @ K.T)), -1))
        # gamma must sit inside A: u_t carries gamma_t k_t S_start, and the
        # solve mixes rows with different gamma.
        K_tilde = A @ ((beta * gamma)[:, None] * K)
        V_tilde = A @ (beta[:, None] * V)
        U = V_tilde if state is None else V_tilde - K_tilde @ state.S

    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(U))):
        raise NumericError("non-finite intermediate while building GDN chunk")
    return GdnChunk(Q, K, V, alpha, beta, gamma, Gamma, A, K_tilde, V_tilde, U)


def gdn_chunk_attend(chunk: GdnChunk, state: HeadState | None = None) -> np.ndarray:
    """``O = Diag(gamma) Q S + ((Q K^T) * Gamma) U``."""
    intra = ((chunk.Q @ chunk.K.T) * chunk.Gamma) @ chunk.U
    if state is None:
        return intra
    if state.d != chunk.d:
        raise InvalidInputError(f"state has d={state.d} but chunk has d={chunk.d}")
    return chunk.gamma[:, None] * (chunk.Q @ state.S) + intra


def gdn_state_fold(S: np.ndarray, alphas, K: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Array-level ``gamma_n S + sum_i (gamma_n / gamma_i) k_i^T u_i``."""
    if len(K) == 0:
        return S.copy()
    alphas = np.asarray(alphas, dtype=np.float64)
    # tail[i] = prod_{l > i} alpha_l = gamma_n / gamma_i
    tail = np.append(np.cumprod(alphas[:0:-1])[::-1], 1.0)
    return np.prod(alphas) * S + K.T @ (tail[:, None] * U)


def gdn_chunk_state_update(state: HeadState, buffered) -> HeadState:
    buffered = list(buffered)
    if not buffered:
        return state
    K = np.stack([b.k for b in buffered])
    U = np.stack([b.u for b in buffered])
    if K.shape[1] != state.d:
        raise InvalidInputError(f"state has d={state.d} but records have d={K.shape[1]}")
    return HeadState(gdn_state_fold(state.S, [b.alpha for b in buffered], K, U), state.precision)


def gdn_token_step(
    S: np.ndarray | None, buffered, tok: GdnToken
) -> tuple[GdnBufferedToken, np.ndarray]:
    """Single-token chunkwise step against a chunk-start state and the records buffered since.

    Returns the new token's buffered record and its output. ``S=None`` means
    there is no state at all (KV-only decoding).
    """
    buffered = list(buffered)
    n = len(buffered)
    alphas = np.array([b.alpha for b in buffered] + [tok.alpha])
    # ratio[i] = gamma_t / gamma_i for buffered i, then 1 for the token itself
    ratio = np.append(np.cumprod(alphas[:0:-1])[::-1], 1.0)
    gamma_t = float(np.prod(alphas))

    retrieved = np.zeros(tok.d)
    if S is not None:
        retrieved = gamma_t * (tok.k @ S)
    if n:
        K = np.stack([b.k for b in buffered])
        U = np.stack([b.u for b in buffered])
        retrieved = retrieved + (ratio[:n] * (K @ tok.k)) @ U
    u = tok.beta * (tok.v - retrieved)

    out = np.zeros(tok.d) if S is None else gamma_t * (tok.q @ S)
    if n:
        out = out + (ratio[:n] * (K @ tok.q)) @ U
    out = out + (tok.q @ tok.k) * u
    return GdnBufferedToken(tok.alpha, tok.k, u), out


def gdn_parallel(tokens) -> np.ndarray:
    """Whole-sequence output from a zero state, treating the sequence as one chunk."""
    tokens = list(tokens)
    if not tokens:
        raise InvalidInputError("gdn_parallel needs at least one token")
    chunk = gdn_build_chunk(tokens)
    out = ((chunk.Q @ chunk.K.T) * chunk.Gamma) @ chunk.V_tilde
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite output in GDN parallel form")
    return out


def gdn_recurrent_scan(tokens, state: HeadState | None = None) -> tuple[HeadState, np.ndarray]:
    tokens = list(tokens)
    if state is None:
        state = HeadState.zeros(tokens[0].d)
    outs = []
    for tok in tokens:
        state, o = gdn_recurrent_step(state, tok)
        outs.append(o)
    return state, np.array(outs).reshape(len(tokens), state.d)


def gdn_chunkwise_scan(tokens, m: int, state: HeadState | None = None) -> tuple[HeadState, np.ndarray]:
    tokens = list(tokens)
    if state is None:
        state = HeadState.zeros(tokens[0].d)
    outs = []
    for start in range(0, len(tokens), m):
        chunk = gdn_build_chunk(tokens[start : start + m], state, m)
        outs.append(gdn_chunk_attend(chunk, state))
        state = gdn_chunk_state_update(state, chunk.buffered())
    return state, np.vstack(outs)
