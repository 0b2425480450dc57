"""
Serving a few requests from a shared pool
=========================================

The engine keeps one state slot per request plus a paged buffer of recent
records. Here three requests decode side by side, one of them verifies a
batch of draft tokens, and the pool statistics are printed along the way.
"""

import numpy as np

from linbuf import AttnConfig, DecodeEngine, DraftBatch, EngineConfig, Pool, PoolConfig
from linbuf.buffer_manager import record_bytes, state_bytes
from linbuf.la_core import recurrent_scan
from linbuf.serve_sim import random_tokens

rng = np.random.default_rng(1)
d, m = 16, 4
cfg = EngineConfig(AttnConfig(d, m), kv_only_enabled=True)
pool_cfg = PoolConfig(block_size=m, num_blocks=32, num_state_slots=4,
                      bytes_per_token_record=record_bytes(d), bytes_per_state=state_bytes(d))
engine = DecodeEngine(cfg, Pool(pool_cfg))

###############################################################################
# Prompts of different lengths. The short one stays in KV-only mode and does
# not take a state slot yet.

prompts = {"a": random_tokens(rng, d, 3), "b": random_tokens(rng, d, 20), "c": random_tokens(rng, d, 9)}
for rid, p in prompts.items():
    engine.prefill(rid, p)
    print(rid, engine.slots[rid].phase, "state slot", engine.slots[rid].state_slot)
print(engine.pool.stats())

###############################################################################
# Twenty decode steps for everyone. Request ``a`` crosses ``L = d`` and moves
# into the buffered chunkwise phase.

history = {rid: list(p) for rid, p in prompts.items()}
for _ in range(20):
    step = {rid: random_tokens(rng, d, 1)[0] for rid in prompts}
    engine.decode_batch(step)
    for rid, tok in step.items():
        history[rid].append(tok)
print({rid: engine.slots[rid].phase for rid in prompts})

###############################################################################
# Request ``b`` verifies four drafts; the verifier accepts the first two.

draft = random_tokens(rng, d, 4)
outs, accepted = engine.verify_draft("b", DraftBatch(draft), lambda o: 2)
history["b"] += draft[:accepted]
print("accepted", accepted, "peak live states", engine.pool.peak_live_states)

###############################################################################
# The engine's state matches a plain recurrent pass over the accepted tokens.

S_ref, _ = recurrent_scan(history["b"])
print("state error for b:", np.abs(engine.state("b").S - S_ref.S).max())
for rid in prompts:
    engine.release(rid)
print(engine.pool.stats())
