"""Analytic memory-traffic model for linear-attention decoding.

Two independent routes to the same byte counts:

* :func:`profile` returns the closed-form per-token storage/read/write
  expressions for each computation form.
* The ``*_traffic`` functions count the tensors each kernel actually touches
  (state fp32 = ``4d^2`` B, one fp16 vector = ``2d`` B, one fp16 scalar =
  ``2`` B). Averaging them over a decoding cycle must give back the closed
  forms exactly; the test suite checks that.

Everything is computed with :class:`fractions.Fraction` when the inputs are
integers so golden values are bit-stable. Convert with ``float()`` when
reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

from .errors import InvalidInputError

PARALLEL, RECURRENT, CHUNKWISE = "parallel", "recurrent", "chunkwise"
FORMS = (PARALLEL, RECURRENT, CHUNKWISE)
VARIANTS = ("vanilla", "gdn")

STATE_B = 4  # per state element
VEC_B = 2  # per q/k/v/u/o element
SCALAR_B = 2  # alpha, beta


def _num(x):
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int) or (isinstance(x, float) and x.is_integer()):
        return Fraction(int(x))
    return float(x)


# ---------------------------------------------------------------------------
# first-principles kernel counters


class Traffic(NamedTuple):
    read: int
    write: int
    flops: int
    kernels: int = 1

    @property
    def total(self) -> int:
        return self.read + self.write

    def __add__(self, other: "Traffic") -> "Traffic":
        return Traffic(
            self.read + other.read,
            self.write + other.write,
            self.flops + other.flops,
            self.kernels + other.kernels,
        )


def _state(d):
    return STATE_B * d * d


def _vec(d):
    return VEC_B * d


def _record(d, variant):
    # k and v (or k and u), plus alpha for GDN
    return 2 * _vec(d) + (SCALAR_B if variant == "gdn" else 0)


def _token_scalars(variant):
    # alpha and beta arrive with every GDN token
    return 2 * SCALAR_B if variant == "gdn" else 0


def recurrent_step_traffic(d: int, variant: str = "vanilla", fused: bool = True) -> Traffic:
    """One recurrent decoding step. ``fused=False`` splits update and output into two kernels."""
    read = _state(d) + 3 * _vec(d) + _token_scalars(variant)
    write = _state(d) + _vec(d)
    flops = 4 * d * d if variant == "vanilla" else 7 * d * d + 3 * d
    if fused:
        return Traffic(read, write, flops, 1)
    # the output kernel re-reads the freshly written state
    return Traffic(read + _state(d), write, flops, 2)


def chunk_decode_traffic(d: int, occupancy: int, variant: str = "vanilla") -> Traffic:
    """Decode one token against the state and ``occupancy`` previously buffered records.

    Reads the state, the token's q/k/v (and alpha/beta) and the buffered records;
    writes the output and the token's own record into the buffer.
    """
    j = occupancy
    read = _state(d) + 3 * _vec(d) + _token_scalars(variant) + j * _record(d, variant)
    write = _vec(d) + _record(d, variant)
    if variant == "vanilla":
        flops = 2 * d * d + 4 * (j + 1) * d
    else:
        flops = 4 * d * d + 8 * j * d + 2 * j + 10 * d
    return Traffic(read, write, flops, 1)


def state_update_traffic(d: int, n: int, variant: str = "vanilla") -> Traffic:
    """Fold ``n`` buffered records into the state (the buffer flush)."""
    read = _state(d) + n * _record(d, variant)
    write = _state(d)
    flops = 2 * n * d * d + (d * d if variant == "gdn" else 0)
    return Traffic(read, write, flops, 1)


def parallel_decode_traffic(d: int, L: int, variant: str = "vanilla") -> Traffic:
    """KV-only decode at context length ``L`` (the ``L`` records include the current token)."""
    read = L * _record(d, variant) + _vec(d) + (SCALAR_B if variant == "gdn" else 0)
    write = _record(d, variant) + _vec(d)
    flops = 4 * L * d if variant == "vanilla" else 8 * L * d + 2 * L + 5 * d
    return Traffic(read, write, flops, 1)


def recurrent_verify_traffic(d: int, n: int, variant: str = "vanilla") -> Traffic:
    """Fused recurrent verification of ``n`` sequential drafts.

    The start state is read once; one temporary state per draft is written.
    """
    read = _state(d) + n * (3 * _vec(d) + _token_scalars(variant))
    write = n * (_state(d) + _vec(d))
    step = recurrent_step_traffic(d, variant)
    return Traffic(read, write, n * step.flops, 1)


def buffered_verify_traffic(d: int, n: int, variant: str = "vanilla") -> Traffic:
    """Chunkwise verification of ``n`` drafts: output kernel, then one state update.

    Assumes every draft is accepted (worst case for the update).
    """
    read = _state(d) + n * (3 * _vec(d) + _token_scalars(variant))
    write = n * (_vec(d) + _record(d, variant))
    if variant == "vanilla":
        flops = 2 * n * d * d + 2 * n * (n + 1) * d
    else:
        flops = 4 * n * d * d + 4 * n * (n + 1) * d + n * n * d
    attend = Traffic(read, write, flops, 1)
    return attend + state_update_traffic(d, n, variant)


def prefill_traffic(d: int, L: int, m: int, variant: str = "vanilla") -> Traffic:
    """Fold an ``L``-token prompt into a fresh state in chunks of ``m``."""
    chunks = math.ceil(L / m) if L else 0
    read = chunks * _state(d) + L * (3 * _vec(d) + _token_scalars(variant))
    write = chunks * _state(d) + L * _vec(d)
    per = 2 * d * d if variant == "vanilla" else 4 * d * d
    return Traffic(read, write, L * per + 2 * L * m * d, max(chunks, 1))


def cycle_average(d: int, m: int, variant: str = "vanilla") -> tuple[Fraction, Fraction, Fraction, Fraction]:
    """Per-token (read, write, flops, kernels) averaged over ``m`` decode steps plus one flush."""
    total = state_update_traffic(d, m, variant)
    for j in range(m):
        total = total + chunk_decode_traffic(d, j, variant)
    return (
        Fraction(total.read, m),
        Fraction(total.write, m),
        Fraction(total.flops, m),
        Fraction(total.kernels, m),
    )


# ---------------------------------------------------------------------------
# closed forms


@dataclass(frozen=True)
class CostQuery:
    form: str
    variant: str = "vanilla"
    d: int = 128
    L: int = 0
    m: int | None = None
    N: int = 0

    def __post_init__(self):
        if self.form not in FORMS:
            raise InvalidInputError(f"unknown form {self.form!r}")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}")
        if self.d < 1 or self.L < 0 or self.N < 0:
            raise InvalidInputError("d must be >= 1 and L, N non-negative")
        if self.form == CHUNKWISE and (self.m is None or self.m < 1):
            raise InvalidInputError("chunkwise queries need a chunk size m >= 1")


@dataclass(frozen=True)
class CostProfile:
    storage_bytes: Fraction
    read_bytes_per_token: Fraction
    write_bytes_per_token: Fraction
    flop_count: Fraction
    arithmetic_intensity: Fraction

    @property
    def access_bytes_per_token(self) -> Fraction:
        return self.read_bytes_per_token + self.write_bytes_per_token


def _closed_form(q: CostQuery, fused: bool) -> tuple[Fraction, Fraction, Fraction]:
    d, L = Fraction(q.d), Fraction(q.L)
    gdn = q.variant == "gdn"
    if q.form == PARALLEL:
        storage = 4 * L * d + (2 * L if gdn else 0)
        read = 4 * L * d + 2 * d + (2 * L + 2 if gdn else 0)
        write = 6 * d + (2 if gdn else 0)
    elif q.form == RECURRENT:
        storage = 4 * d * d
        read = 4 * d * d + 6 * d + (4 if gdn else 0)
        write = 4 * d * d + 2 * d
        if not fused:
            read += 4 * d * d
    else:
        m = Fraction(q.m)
        storage = 4 * d * d + 4 * m * d + (2 * m if gdn else 0)
        read = 4 * (1 + 1 / m) * d * d + 2 * (m + 4) * d + (m + 5 if gdn else 0)
        write = 4 * d * d / m + 6 * d + (2 if gdn else 0)
    return storage, read, write


def profile(q: CostQuery, fused: bool = True) -> CostProfile:
    """Storage and average per-token traffic for one decoding configuration.

    Byte figures are the closed forms; ``flop_count`` comes from the kernel
    counters (there is no separate closed form for it).
    """
    storage, read, write = _closed_form(q, fused)
    if q.form == PARALLEL:
        flops = Fraction(parallel_decode_traffic(q.d, q.L, q.variant).flops)
    elif q.form == RECURRENT:
        flops = Fraction(recurrent_step_traffic(q.d, q.variant, fused).flops)
    else:
        flops = cycle_average(q.d, q.m, q.variant)[2]
    return CostProfile(storage, read, write, flops, flops / (read + write))


def counted_profile(q: CostQuery, fused: bool = True) -> tuple[Fraction, Fraction, Fraction]:
    """(storage, read, write) per token from the kernel counters alone."""
    d, v = q.d, q.variant
    if q.form == PARALLEL:
        t = parallel_decode_traffic(d, q.L, v)
        return Fraction(q.L * _record(d, v)), Fraction(t.read), Fraction(t.write)
    if q.form == RECURRENT:
        t = recurrent_step_traffic(d, v, fused)
        return Fraction(_state(d)), Fraction(t.read), Fraction(t.write)
    read, write, _, _ = cycle_average(d, q.m, v)
    return Fraction(_state(d) + q.m * _record(d, v)), read, write


# ---------------------------------------------------------------------------
# speedups


def chunkwise_speedup(d, m):
    """Recurrent over chunkwise per-token traffic: ``4(d+1) / (2d + 4d/m + m + 7)``."""
    d, m = _num(d), _num(m)
    return 4 * (d + 1) / (2 * d + 4 * d / m + m + 7)


def optimal_buffer_size(d: int) -> int:
    """Integer ``m >= 1`` maximising :func:`chunkwise_speedup`; ties go to the smaller ``m``.

    The denominator ``4d/m + m`` is convex in ``m`` with its real minimum at
    ``2*sqrt(d)``, so only the two neighbouring integers need checking.
    """
    if d < 1:
        raise InvalidInputError(f"d must be >= 1, got {d}")
    lo = max(1, math.isqrt(4 * d))
    return max((lo, lo + 1), key=lambda m: (chunkwise_speedup(d, m), -m))


def verify_speedup(d, m):
    """Recurrent over buffered verification traffic for ``m`` drafts."""
    d, m = _num(d), _num(m)
    return ((m + 1) * d + 2 * m) / (3 * d + 4 * m)


def kv_only_speedup(d, m, L):
    """Chunkwise over parallel per-token traffic at context length ``L``."""
    d, m, L = _num(d), _num(m), _num(L)
    return (d + 2 * d / m + m / 2 + Fraction(7, 2)) / (L + 2)


def kv_only_crossover(d, m):
    """Context length where :func:`kv_only_speedup` equals one."""
    d, m = _num(d), _num(m)
    return d + 2 * d / m + m / 2 + Fraction(3, 2)


@dataclass(frozen=True)
class GdnSpeedups:
    chunkwise: Fraction
    parallel_verify: Fraction
    kv_only: Fraction


def gdn_speedups(d, m, L) -> GdnSpeedups:
    """Exact GDN ratios, before dropping the scalar terms."""
    d, m, L = _num(d), _num(m), _num(L)
    chunk_total = 4 * d * d + 8 * d * d / m + 2 * m * d + 14 * d + m + 7
    return GdnSpeedups(
        chunkwise=(8 * d * d + 8 * d + 4) / chunk_total,
        parallel_verify=(4 * (m + 1) * d * d + 8 * m * d + 4 * m) / (12 * d * d + 16 * m * d + 8 * m),
        kv_only=chunk_total / (4 * L * d + 8 * d + 2 * L + 4),
    )


# ---------------------------------------------------------------------------
# capacity

RECURRENT_BASELINE = "recurrent_baseline"
KV_BUFFERED = "kv_buffered"


def capacity(state_bytes: int, record_bytes: int, pool_bytes: int, N: int, mode: str) -> int:
    """Max concurrent requests a memory budget holds during ``N``-draft verification."""
    if mode == RECURRENT_BASELINE:
        return pool_bytes // ((N + 1) * state_bytes)
    if mode == KV_BUFFERED:
        return pool_bytes // (state_bytes + N * record_bytes)
    raise InvalidInputError(f"unknown verify mode {mode!r}")


# ---------------------------------------------------------------------------
# latency


@dataclass(frozen=True)
class LatencyModel:
    """``latency = batch * bytes / bandwidth + kernels * launch_overhead``.

    Defaults: 864 GB/s (an L40S-class part) and zero launch overhead, which
    makes latency purely traffic-proportional. Neither constant comes from a
    measurement here; override both for sensitivity studies.
    """

    bandwidth_Bps: float = 864e9
    launch_overhead_s: float = 0.0

    def __post_init__(self):
        if self.bandwidth_Bps <= 0 or self.launch_overhead_s < 0:
            raise InvalidInputError("bandwidth must be positive and overhead non-negative")

    def latency(self, bytes_per_request, kernels=1, batch: int = 1) -> float:
        return batch * float(bytes_per_request) / self.bandwidth_Bps + float(kernels) * self.launch_overhead_s

    def of(self, t: Traffic, batch: int = 1) -> float:
        return self.latency(t.total, t.kernels, batch)
