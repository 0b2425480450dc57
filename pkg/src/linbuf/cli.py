"""``linbuf`` command line: equiv, cost, sweep, verify-bench, crossover, simulate.

Exit codes: 0 success, 1 invariant or tolerance failure, 2 invalid config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from contextlib import contextmanager

from . import io_cost_model as cost
from .buffer_manager import PoolConfig, record_bytes, state_bytes
from .decode_engine import EngineConfig
from .errors import InvalidInputError
from .la_core import AttnConfig
from .serve_sim import (
    SCHEMA,
    EquivConfig,
    LengthDist,
    WorkloadSpec,
    crossover_report,
    load_lengths_jsonl,
    rows_to_csv,
    run_equiv_suite,
    simulate,
    sweep_buffer,
    verify_bench,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

COST_HEADER = ["form", "variant", "d", "L", "m", "storage_B", "read_B", "write_B", "intensity"]

SECTIONS = {
    "engine": {"d", "m", "precision", "variant", "draft_len", "verify_mode", "kv_only_enabled"},
    "pool": {"block_size", "num_blocks", "num_state_slots", "memory_bytes", "state_memory_fraction", "headroom"},
    "workload": {
        "rate",
        "rates",
        "duration_s",
        "closed_loop_batch",
        "num_requests",
        "prompt_len",
        "decode_len",
        "draft_len",
        "acceptance_rate",
        "seed",
        "trace_file",
    },
    "latency": {"bandwidth_Bps", "launch_overhead_s"},
    "sweep": {"d", "m_list", "batch_sizes", "variant"},
    "verify_bench": {"d", "n_list", "batch_sizes", "variant"},
    "crossover": {"d", "m", "batch", "variant"},
    "equiv": {f.name for f in dataclasses.fields(EquivConfig)},
    "cost": {"queries", "fused"},
}


class ConfigError(Exception):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    validate_config(doc)
    return doc


def validate_config(doc) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key, body in doc.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {key!r} must be an object")
        extra = set(body) - SECTIONS[key]
        if extra:
            raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")


def engine_from(doc: dict) -> EngineConfig:
    e = dict(doc.get("engine", {}))
    attn = AttnConfig(e.pop("d", 128), e.pop("m", 23), e.pop("precision", "fp64-reference"))
    return EngineConfig(attn, **e)


def pool_from(doc: dict, engine: EngineConfig, draft_len: int) -> PoolConfig:
    p = dict(doc.get("pool", {}))
    if "memory_bytes" in p:
        if "state_memory_fraction" not in p:
            raise ConfigError("pool.state_memory_fraction is required when sizing from memory_bytes")
        frac = float(p["state_memory_fraction"])
        if not 0.0 < frac <= 1.0:
            raise ConfigError("pool.state_memory_fraction must be in (0, 1]")
        slots = int(p["memory_bytes"] * frac) // state_bytes(engine.d)
        buffer_tokens = draft_len or engine.m
        return PoolConfig.for_states(
            slots,
            p.get("block_size", max(buffer_tokens, 1)),
            buffer_tokens,
            engine.d,
            engine.variant,
            p.get("headroom", 0.0),
        )
    missing = {"block_size", "num_blocks", "num_state_slots"} - set(p)
    if missing:
        raise ConfigError(f"pool needs {sorted(missing)} or memory_bytes + state_memory_fraction")
    return PoolConfig(
        p["block_size"],
        p["num_blocks"],
        p["num_state_slots"],
        record_bytes(engine.d, engine.variant),
        state_bytes(engine.d),
    )


def latency_from(doc: dict) -> cost.LatencyModel:
    return cost.LatencyModel(**doc.get("latency", {}))


@contextmanager
def _sink(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _emit(args, rows: list[dict], header: list[str] | None, doc: dict) -> None:
    with _sink(args.out) as fh:
        if args.format == "json":
            fh.write(json.dumps({"schema": SCHEMA, **doc}, sort_keys=True, default=_jsonable) + "\n")
        else:
            fh.write(rows_to_csv(rows, header))


def _jsonable(x):
    return float(x)


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


# ---------------------------------------------------------------------------
# subcommands


def cmd_equiv(args, doc) -> int:
    kw = dict(doc.get("equiv", {}))
    for key in ("dims", "chunk_sizes", "gdn_dims", "gdn_chunk_sizes"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.seeds is not None:
        kw["seeds"] = args.seeds
    if args.fault:
        kw["fault"] = True
    summary = run_equiv_suite(EquivConfig(**kw))
    rows = [
        {"check": k, "max_abs_diff": v, "tolerance": summary["tolerances"][k], "passed": v <= summary["tolerances"][k]}
        for k, v in sorted(summary["max_diffs"].items())
    ]
    with _sink(args.out) as fh:
        if args.format == "csv":
            fh.write(rows_to_csv(rows, ["check", "max_abs_diff", "tolerance", "passed"]))
        else:
            fh.write(json.dumps(summary, sort_keys=True) + "\n")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cost_row(q: cost.CostQuery, fused: bool = True) -> dict:
    p = cost.profile(q, fused)
    return {
        "form": q.form,
        "variant": q.variant,
        "d": q.d,
        "L": q.L,
        "m": q.m if q.m is not None else "",
        "storage_B": p.storage_bytes,
        "read_B": p.read_bytes_per_token,
        "write_B": p.write_bytes_per_token,
        "intensity": p.arithmetic_intensity,
    }


def cmd_cost(args, doc) -> int:
    section = doc.get("cost", {})
    fused = section.get("fused", True)
    if "queries" in section:
        raw = section["queries"]
    else:
        raw = [{"form": f, "variant": args.variant, "d": args.d, "L": args.L, "m": args.m} for f in args.form]
    queries = []
    for q in raw:
        q = dict(q)
        if q.get("form") != cost.CHUNKWISE:
            q["m"] = None
        queries.append(cost.CostQuery(**q))
    rows = [cost_row(q, fused) for q in queries]
    _emit(args, rows, COST_HEADER, {"report": "cost", "rows": rows})
    return EXIT_OK


def cmd_sweep(args, doc) -> int:
    s = doc.get("sweep", {})
    d = s.get("d", args.d)
    m_list = s.get("m_list", args.m_list)
    batches = s.get("batch_sizes", args.batch_sizes)
    rows = sweep_buffer(d, m_list, batches, latency_from(doc), s.get("variant", "vanilla"))
    best = {}
    for r in rows:
        if r["batch"] not in best or r["normalized_latency_modeled"] < best[r["batch"]]["normalized_latency_modeled"]:
            best[r["batch"]] = r
    doc_out = {
        "report": "sweep",
        "optimal_buffer_size": cost.optimal_buffer_size(d),
        "best_m_by_batch": {str(b): r["m"] for b, r in sorted(best.items())},
        "rows": rows,
    }
    _emit(args, rows, None, doc_out)
    return EXIT_OK


def cmd_verify_bench(args, doc) -> int:
    s = doc.get("verify_bench", {})
    rows = verify_bench(
        s.get("d", args.d),
        s.get("n_list", args.n_list),
        s.get("batch_sizes", args.batch_sizes),
        latency_from(doc),
        s.get("variant", "vanilla"),
    )
    _emit(args, rows, None, {"report": "verify-bench", "rows": rows})
    return EXIT_OK


def cmd_crossover(args, doc) -> int:
    s = doc.get("crossover", {})
    d, m = s.get("d", args.d), s.get("m", args.m)
    if m is None:
        m = cost.optimal_buffer_size(d)
    rep = crossover_report(d, m, latency_from(doc), s.get("batch", args.batch), s.get("variant", "vanilla"))
    doc_out = {
        "report": "crossover",
        "d": d,
        "m": m,
        "crossover_L": rep.crossover_L,
        "analytic_crossover_L": float(cost.kv_only_crossover(d, m)),
        "consistent": rep.consistent,
        "rows": rep.rows,
    }
    _emit(args, rep.rows, None, doc_out)
    if not rep.consistent:
        print(f"crossover at L={rep.crossover_L} is below d={d}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_simulate(args, doc) -> int:
    w = dict(doc.get("workload", {}))
    engine = engine_from(doc)
    rates = w.pop("rates", None)
    if args.rates:
        rates = args.rates
    trace_file = w.pop("trace_file", None)
    for key in ("prompt_len", "decode_len"):
        if key in w:
            w[key] = LengthDist.parse(w[key])
    w.setdefault("draft_len", engine.draft_len)
    if args.seed is not None:
        w["seed"] = args.seed
    if trace_file:
        w["lengths"] = load_lengths_jsonl(trace_file)
    pool = pool_from(doc, engine, w["draft_len"])
    lat = latency_from(doc)
    rates = rates or [w.get("rate")]
    modes = [args.verify_mode] if args.verify_mode else [cost.RECURRENT_BASELINE, cost.KV_BUFFERED]
    reports = []
    for rate in rates:
        for mode in modes:
            spec = WorkloadSpec(**{**w, "rate": rate})
            reports.append(simulate(spec, dataclasses.replace(engine, verify_mode=mode), pool, lat))
    rows = [r.summary() for r in reports]
    for r in reports:
        if r.admitted + r.rejected != r.arrived or r.completed > r.admitted:
            print("simulation conservation violated", file=sys.stderr)
            return EXIT_FAIL
    _emit(args, rows, None, {"report": "simulate", "pool": dataclasses.asdict(pool), "runs": rows})
    return EXIT_OK


COMMANDS = {
    "equiv": cmd_equiv,
    "cost": cmd_cost,
    "sweep": cmd_sweep,
    "verify-bench": cmd_verify_bench,
    "crossover": cmd_crossover,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, help="overrides any seed in the config")
    common.add_argument("--out", help="output path (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = argparse.ArgumentParser(prog="linbuf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv", parents=[common], help="form-equivalence suites")
    p.add_argument("--seeds", type=int, help="random instances per grid point")
    p.add_argument("--fault", action="store_true", help="perturb one output to self-test the harness")

    p = sub.add_parser("cost", parents=[common], help="per-token storage and traffic table")
    p.add_argument("--form", type=lambda s: s.split(","), default=list(cost.FORMS))
    p.add_argument("--variant", choices=cost.VARIANTS, default="vanilla")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--L", type=int, default=0)
    p.add_argument("--m", type=int, default=32)

    p = sub.add_parser("sweep", parents=[common], help="normalised chunkwise latency vs buffer size")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--m-list", type=_ints, default=list(range(1, 65)))
    p.add_argument("--batch-sizes", type=_ints, default=[1, 8, 64, 256])

    p = sub.add_parser("verify-bench", parents=[common], help="verification latency vs draft count")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--n-list", type=_ints, default=[1, 2, 4, 8, 16])
    p.add_argument("--batch-sizes", type=_ints, default=[1])

    p = sub.add_parser("crossover", parents=[common], help="parallel vs chunkwise vs recurrent by context length")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--m", type=int, default=None, help="defaults to the optimal buffer size")
    p.add_argument("--batch", type=int, default=1)

    p = sub.add_parser("simulate", parents=[common], help="workload simulation under both verify modes")
    p.add_argument("--rates", type=_floats, default=None)
    p.add_argument("--verify-mode", choices=(cost.RECURRENT_BASELINE, cost.KV_BUFFERED), default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        doc = load_config(args.config)
        return COMMANDS[args.command](args, doc)
    except (ConfigError, InvalidInputError, TypeError, KeyError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
