"""Workload simulator and modeled-latency reports.

Time here is modeled, never measured: every latency is
``batch_bytes / bandwidth + kernels * launch_overhead`` from
:class:`linbuf.io_cost_model.LatencyModel`, using the per-kernel byte counts
of :mod:`linbuf.io_cost_model`. Column names carry a ``_modeled`` suffix to
make that explicit.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import io_cost_model as cost
from .buffer_manager import Pool, PoolConfig, RequestSlot
from .errors import InvalidInputError, OutOfMemoryError
from .gdn_core import GdnToken, gdn_build_chunk, gdn_chunkwise_scan, gdn_parallel, gdn_recurrent_scan
from .la_core import ChunkWorkspace, TokenQKV, chunkwise_scan, parallel_attend, recurrent_scan

SCHEMA = "linbuf-report/1"


# ---------------------------------------------------------------------------
# workload


@dataclass(frozen=True)
class LengthDist:
    """``fixed`` uses ``a`` only; ``uniform`` draws integers in ``[a, b]``."""

    kind: str = "fixed"
    a: int = 1
    b: int = 1

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise InvalidInputError(f"unknown length distribution {self.kind!r}")
        if self.a < 1 or (self.kind == "uniform" and self.b < self.a):
            raise InvalidInputError("length distributions need positive support")

    @classmethod
    def parse(cls, obj) -> "LengthDist":
        if isinstance(obj, LengthDist):
            return obj
        if isinstance(obj, int):
            return cls("fixed", obj, obj)
        if not isinstance(obj, dict) or len(obj) != 1:
            raise InvalidInputError(f"bad length distribution {obj!r}")
        (kind, val), = obj.items()
        if kind == "fixed":
            return cls("fixed", int(val), int(val))
        if kind == "uniform":
            a, b = val
            return cls("uniform", int(a), int(b))
        raise InvalidInputError(f"unknown length distribution {kind!r}")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.a
        return int(rng.integers(self.a, self.b + 1))

    @property
    def mean(self) -> float:
        return self.a if self.kind == "fixed" else (self.a + self.b) / 2


@dataclass(frozen=True)
class WorkloadSpec:
    rate: float | None = None
    duration_s: float = 1.0
    closed_loop_batch: int | None = None
    num_requests: int = 0
    prompt_len: LengthDist = LengthDist()
    decode_len: LengthDist = LengthDist()
    draft_len: int = 0
    acceptance_rate: float = 1.0
    seed: int = 0
    lengths: tuple | None = None  # replayed (prompt_len, decode_len) pairs

    def __post_init__(self):
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise InvalidInputError(f"acceptance rate must be in [0, 1], got {self.acceptance_rate}")
        if self.draft_len < 0:
            raise InvalidInputError("draft_len must be >= 0")
        if self.closed_loop_batch is None:
            if self.rate is None or self.rate <= 0 or self.duration_s <= 0:
                raise InvalidInputError("open-loop workloads need a positive rate and duration")
        elif self.closed_loop_batch < 1 or self.num_requests < 1:
            raise InvalidInputError("closed-loop workloads need batch >= 1 and num_requests >= 1")


def load_lengths_jsonl(path) -> tuple:
    """Read ``{"prompt_len": .., "decode_len": ..}`` lines, e.g. from a converted chat trace."""
    pairs = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            p, dl = int(obj["prompt_len"]), int(obj["decode_len"])
            if p < 0 or dl < 1:
                raise InvalidInputError(f"{path}:{n}: lengths must be prompt >= 0, decode >= 1")
            pairs.append((p, dl))
    if not pairs:
        raise InvalidInputError(f"{path}: no requests")
    return tuple(pairs)


@dataclass
class _Request:
    rid: int
    arrival: float
    prompt_len: int
    decode_len: int
    emitted: int = 0
    slot: RequestSlot | None = None
    temp_states: list = field(default_factory=list)
    needs_prefill: bool = True


@dataclass
class SimReport:
    verify_mode: str
    draft_len: int
    rate: float | None
    step_latencies_s_modeled: list
    throughput_tok_s_modeled: float
    wall_time_s_modeled: float
    tokens_emitted: int
    max_concurrency: int
    arrived: int
    admitted: int
    rejected: int
    completed: int
    admission_deferrals: int
    pool_snapshots: list
    iterations: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        lat = self.step_latencies_s_modeled
        return {
            "verify_mode": self.verify_mode,
            "draft_len": self.draft_len,
            "rate_rps": self.rate,
            "throughput_tok_s_modeled": self.throughput_tok_s_modeled,
            "wall_time_s_modeled": self.wall_time_s_modeled,
            "tokens_emitted": self.tokens_emitted,
            "max_concurrency": self.max_concurrency,
            "arrived": self.arrived,
            "admitted": self.admitted,
            "rejected": self.rejected,
            "completed": self.completed,
            "admission_deferrals": self.admission_deferrals,
            "steps": len(lat),
            "mean_step_latency_s_modeled": float(np.mean(lat)) if lat else 0.0,
        }

    def to_json(self) -> str:
        doc = {"schema": SCHEMA, "report": "simulate", **self.summary(), "pool_snapshots": self.pool_snapshots}
        return json.dumps(doc, sort_keys=True)


def _arrivals(spec: WorkloadSpec, rng: np.random.Generator) -> list[float]:
    times, t = [], 0.0
    while True:
        t += rng.exponential(1.0 / spec.rate)
        if t > spec.duration_s:
            return times
        times.append(t)


def _sample_acceptance(rng, n: int, p: float) -> int:
    """I.i.d. per-draft acceptance truncated at the first rejection."""
    if n == 0:
        return 0
    ok = rng.random(n) < p
    return n if ok.all() else int(np.argmin(ok))


def simulate(
    spec: WorkloadSpec,
    engine_cfg,
    pool_cfg: PoolConfig,
    latency: cost.LatencyModel | None = None,
    snapshot_every: int = 100,
    keep_iterations: bool = False,
) -> SimReport:
    """Continuous-batching simulation with FIFO admission and modeled time.

    Each iteration serves every running request once: a verification step
    of ``N`` drafts (or a plain recurrent decode step when ``N = 0``).
    A step emits the accepted prefix plus the target model's own token.
    Admission reserves peak memory up front: ``N + 1`` state slots under
    the recurrent baseline, one slot plus ``N`` buffered records otherwise.
    """
    latency = latency or cost.LatencyModel()
    rng = np.random.default_rng(spec.seed)
    d, m, variant = engine_cfg.attn.d, engine_cfg.attn.m, engine_cfg.variant
    N = spec.draft_len
    mode = engine_cfg.verify_mode
    pool = Pool(pool_cfg)

    if N == 0:
        step = cost.recurrent_step_traffic(d, variant)
    elif mode == cost.KV_BUFFERED:
        step = cost.buffered_verify_traffic(d, N, variant)
    else:
        step = cost.recurrent_verify_traffic(d, N, variant)

    next_id = 0

    def make(arrival: float) -> _Request:
        nonlocal next_id
        if spec.lengths:
            p, dl = spec.lengths[next_id % len(spec.lengths)]
        else:
            p, dl = spec.prompt_len.sample(rng), spec.decode_len.sample(rng)
        r = _Request(next_id, arrival, p, dl)
        next_id += 1
        return r

    if spec.closed_loop_batch is None:
        pending = deque(make(t) for t in _arrivals(spec, rng))
        to_spawn = 0
    else:
        pending = deque(make(0.0) for _ in range(min(spec.closed_loop_batch, spec.num_requests)))
        to_spawn = spec.num_requests - len(pending)

    def reserve(req: _Request) -> bool:
        slot = RequestSlot(req.rid)
        try:
            if N and mode == cost.RECURRENT_BASELINE:
                ids = pool.take_states(N + 1)
                slot.state_slot, req.temp_states = ids[0], ids[1:]
            else:
                pool.alloc_state(slot)
                try:
                    pool.alloc_blocks(slot, N)
                except OutOfMemoryError:
                    pool.free_state(slot)
                    raise
        except OutOfMemoryError:
            return False
        req.slot = slot
        return True

    def release(req: _Request) -> None:
        pool.flush_and_free(req.slot)
        pool.free_state(req.slot)
        for sid in req.temp_states:
            pool.release_state(sid)
        req.temp_states = []

    fits_ever = True
    if N and mode == cost.RECURRENT_BASELINE:
        fits_ever = pool_cfg.num_state_slots >= N + 1
    else:
        fits_ever = pool_cfg.num_state_slots >= 1 and pool_cfg.num_blocks >= math.ceil(N / pool_cfg.block_size)

    now = 0.0
    waiting: deque[_Request] = deque()
    running: list[_Request] = []
    arrived = admitted = rejected = completed = deferrals = tokens = 0
    max_conc = 0
    lats, snaps, iters = [], [], []
    last_completion = 0.0
    n_iter = 0

    while pending or waiting or running:
        while pending and pending[0].arrival <= now:
            req = pending.popleft()
            arrived += 1
            if fits_ever:
                waiting.append(req)
            else:
                rejected += 1
        while waiting:
            if not reserve(waiting[0]):
                if running:
                    deferrals += 1
                    break
                # nothing running yet the head cannot fit: it never will
                waiting.popleft()
                rejected += 1
                continue
            running.append(waiting.popleft())
            admitted += 1
        if not running:
            if pending:
                now = max(now, pending[0].arrival)
                continue
            break
        max_conc = max(max_conc, len(running))

        batch_bytes = 0
        kernels = step.kernels
        for req in running:
            if req.needs_prefill:
                pf = cost.prefill_traffic(d, req.prompt_len, m, variant)
                batch_bytes += pf.total
                kernels += pf.kernels
                req.needs_prefill = False
            batch_bytes += step.total
        dt = latency.latency(batch_bytes, kernels, 1)
        now += dt
        lats.append(dt)
        if keep_iterations:
            iters.append({"t_end": now, "batch": len(running), "bytes": batch_bytes, "kernels": kernels, "latency_s_modeled": dt})

        still = []
        for req in running:
            gained = 1 + _sample_acceptance(rng, N, spec.acceptance_rate)
            gained = min(gained, req.decode_len - req.emitted)
            req.emitted += gained
            tokens += gained
            if req.emitted >= req.decode_len:
                release(req)
                completed += 1
                last_completion = now
                if to_spawn:
                    pending.append(make(now))
                    to_spawn -= 1
            else:
                still.append(req)
        running = still
        if n_iter % snapshot_every == 0:
            snaps.append({"t": now, **pool.stats()})
        n_iter += 1

    wall = last_completion
    if spec.closed_loop_batch is None:
        wall = max(wall, spec.duration_s)
    return SimReport(
        verify_mode=mode,
        draft_len=N,
        rate=spec.rate,
        step_latencies_s_modeled=lats,
        throughput_tok_s_modeled=tokens / wall if wall > 0 else 0.0,
        wall_time_s_modeled=wall,
        tokens_emitted=tokens,
        max_concurrency=max_conc,
        arrived=arrived,
        admitted=admitted,
        rejected=rejected,
        completed=completed,
        admission_deferrals=deferrals,
        pool_snapshots=snaps,
        iterations=iters,
    )


# ---------------------------------------------------------------------------
# experiment-shaped reports


def sweep_buffer(d: int, m_list, batch_sizes, latency: cost.LatencyModel | None = None, variant: str = "vanilla") -> list[dict]:
    """Chunkwise latency averaged over one buffer cycle, normalised by recurrent latency."""
    m_list = list(m_list)
    if not m_list:
        raise InvalidInputError("m_list must not be empty")
    latency = latency or cost.LatencyModel()
    rows = []
    rec = cost.recurrent_step_traffic(d, variant)
    for batch in batch_sizes:
        rec_lat = latency.of(rec, batch)
        for m in m_list:
            cyc = latency.of(cost.state_update_traffic(d, m, variant), batch)
            cyc += sum(latency.of(cost.chunk_decode_traffic(d, j, variant), batch) for j in range(m))
            chunk_lat = cyc / m
            rows.append(
                {
                    "d": d,
                    "m": m,
                    "batch": batch,
                    "chunkwise_latency_s_modeled": chunk_lat,
                    "recurrent_latency_s_modeled": rec_lat,
                    "normalized_latency_modeled": chunk_lat / rec_lat,
                }
            )
    return rows


def verify_bench(d: int, n_list, batch_sizes=(1,), latency: cost.LatencyModel | None = None, variant: str = "vanilla") -> list[dict]:
    """Verification latency of both modes as the number of drafts grows."""
    latency = latency or cost.LatencyModel()
    rows = []
    for batch in batch_sizes:
        for n in n_list:
            r = latency.of(cost.recurrent_verify_traffic(d, n, variant), batch)
            b = latency.of(cost.buffered_verify_traffic(d, n, variant), batch)
            rows.append(
                {
                    "d": d,
                    "n_draft": n,
                    "batch": batch,
                    "recurrent_latency_s_modeled": r,
                    "kv_buffered_latency_s_modeled": b,
                    "speedup_modeled": r / b,
                }
            )
    return rows


@dataclass
class CrossoverReport:
    d: int
    m: int
    rows: list
    crossover_L: int | None

    @property
    def consistent(self) -> bool:
        """Parallel decoding must stay the cheaper form for every ``L < d``."""
        return self.crossover_L is None or self.crossover_L >= self.d


def crossover_report(
    d: int, m: int, latency: cost.LatencyModel | None = None, batch: int = 1, variant: str = "vanilla", max_L: int | None = None
) -> CrossoverReport:
    latency = latency or cost.LatencyModel()
    max_L = max_L or 2 * d
    read, write, _, kernels = cost.cycle_average(d, m, variant)
    chunk_lat = latency.latency(read + write, kernels, batch)
    rec_lat = latency.of(cost.recurrent_step_traffic(d, variant), batch)
    rows, mark = [], None
    for L in range(1, max_L + 1):
        par = latency.of(cost.parallel_decode_traffic(d, L, variant), batch)
        if mark is None and par > chunk_lat:
            mark = L
        rows.append(
            {
                "L": L,
                "parallel_latency_s_modeled": par,
                "chunkwise_latency_s_modeled": chunk_lat,
                "recurrent_latency_s_modeled": rec_lat,
                "parallel_cheaper": par <= chunk_lat,
            }
        )
    return CrossoverReport(d, m, rows, mark)


# ---------------------------------------------------------------------------
# form-equivalence harness


@dataclass(frozen=True)
class EquivConfig:
    dims: tuple = (4, 8, 16, 32)
    chunk_sizes: tuple = (1, 2, 5, 8, 16)
    gdn_chunk_sizes: tuple = (1, 2, 5, 8, 16)
    gdn_dims: tuple = (4, 8, 16, 32)
    max_len: int = 96
    gdn_max_len: int = 96
    seeds: int = 100
    seed: int = 0
    vanilla_tol: float = 1e-11
    gdn_tol: float = 1e-8
    a_residual_tol: float = 1e-10
    gdn_alpha: float | None = None
    gdn_beta: float | None = None
    fault: bool = False
    run_vanilla: bool = True
    run_gdn: bool = True


def random_tokens(rng, d: int, L: int) -> list[TokenQKV]:
    return [TokenQKV(*rng.standard_normal((3, d))) for _ in range(L)]


def random_gdn_tokens(rng, d: int, L: int, alpha=None, beta=None) -> list[GdnToken]:
    """Unit-norm keys, ``alpha ~ U(0.5, 1)``, ``beta ~ U(0, 1)`` unless pinned."""
    toks = []
    for _ in range(L):
        q, k, v = rng.standard_normal((3, d))
        k = k / np.linalg.norm(k)
        a = rng.uniform(0.5, 1.0) if alpha is None else alpha
        b = rng.uniform(0.0, 1.0) if beta is None else beta
        toks.append(GdnToken(q, k, v, a, b))
    return toks


def _maxdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def run_equiv_suite(cfg: EquivConfig = EquivConfig()) -> dict:
    """Check parallel, recurrent and chunkwise forms against each other on random instances."""
    rng = np.random.default_rng(cfg.seed)
    out = {"schema": SCHEMA, "report": "equiv", "instances": 0}
    worst = {}

    def bump(key, val):
        worst[key] = max(worst.get(key, 0.0), val)

    fault_pending = cfg.fault
    if cfg.run_vanilla:
        for d in cfg.dims:
            for m in cfg.chunk_sizes:
                for _ in range(cfg.seeds):
                    L = int(rng.integers(1, cfg.max_len + 1))
                    toks = random_tokens(rng, d, L)
                    par = parallel_attend(ChunkWorkspace.from_tokens(toks))
                    s_rec, rec = recurrent_scan(toks)
                    s_chk, chk = chunkwise_scan(toks, m)
                    if fault_pending:
                        chk = chk.copy()
                        chk[0, 0] += 1e-3
                        fault_pending = False
                    bump("vanilla_output", max(_maxdiff(par, rec), _maxdiff(rec, chk), _maxdiff(par, chk)))
                    bump("vanilla_state", _maxdiff(s_rec.S, s_chk.S))
                    out["instances"] += 1
    if cfg.run_gdn:
        for d in cfg.gdn_dims:
            for m in cfg.gdn_chunk_sizes:
                for _ in range(cfg.seeds):
                    L = int(rng.integers(1, cfg.gdn_max_len + 1))
                    toks = random_gdn_tokens(rng, d, L, cfg.gdn_alpha, cfg.gdn_beta)
                    par = gdn_parallel(toks)
                    s_rec, rec = gdn_recurrent_scan(toks)
                    s_chk, chk = gdn_chunkwise_scan(toks, m)
                    if fault_pending:
                        chk = chk.copy()
                        chk[0, 0] += 1e-3
                        fault_pending = False
                    bump("gdn_output", max(_maxdiff(par, rec), _maxdiff(rec, chk), _maxdiff(par, chk)))
                    bump("gdn_state", _maxdiff(s_rec.S, s_chk.S))
                    chunk = gdn_build_chunk(toks)
                    bump("gdn_a_residual", _maxdiff(chunk.system_matrix() @ chunk.A, np.eye(chunk.n)))
                    out["instances"] += 1

    tol = {
        "vanilla_output": cfg.vanilla_tol,
        "vanilla_state": cfg.vanilla_tol,
        "gdn_output": cfg.gdn_tol,
        "gdn_state": cfg.gdn_tol,
        "gdn_a_residual": cfg.a_residual_tol,
    }
    out["max_diffs"] = worst
    out["tolerances"] = {k: tol[k] for k in worst}
    out["breaches"] = sorted(k for k, v in worst.items() if not v <= tol[k])
    out["passed"] = not out["breaches"]
    return out


# ---------------------------------------------------------------------------
# output helpers


def rows_to_csv(rows: list[dict], header: list[str] | None = None) -> str:
    buf = io.StringIO()
    header = header or (list(rows[0]) if rows else [])
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in header})
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, Fraction):
        return repr(float(x)) if x.denominator != 1 else str(x.numerator)
    if isinstance(x, float):
        return repr(x)
    return x
