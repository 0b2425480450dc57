"""
One attention head, three ways to compute it
============================================

Linear attention can be evaluated from the full key/value history
(parallel), from a running ``d x d`` state (recurrent), or from a state
that is only refreshed once every ``m`` tokens (chunkwise). All three give
the same numbers. This script shows that on random data.
"""

import numpy as np

from linbuf import ChunkWorkspace, chunkwise_scan, parallel_attend, recurrent_scan
from linbuf.gdn_core import gdn_chunkwise_scan, gdn_parallel, gdn_recurrent_scan
from linbuf.serve_sim import random_gdn_tokens, random_tokens

rng = np.random.default_rng(0)
tokens = random_tokens(rng, d=16, L=50)

###############################################################################
# Parallel and recurrent outputs.

par = parallel_attend(ChunkWorkspace.from_tokens(tokens))
S_rec, rec = recurrent_scan(tokens)
print("parallel vs recurrent:", np.abs(par - rec).max())

###############################################################################
# The chunkwise scan for a few buffer sizes. Final states agree too.

for m in (1, 4, 7, 16):
    S_chk, chk = chunkwise_scan(tokens, m)
    print(f"m={m:2d}  outputs {np.abs(chk - rec).max():.1e}  state {np.abs(S_chk.S - S_rec.S).max():.1e}")

###############################################################################
# The gated delta rule adds a decay ``alpha`` and a write strength ``beta``.
# Its chunkwise form buffers (alpha, k, u) records instead of (k, v).

gtoks = random_gdn_tokens(rng, d=16, L=50)
S_g, g_rec = gdn_recurrent_scan(gtoks)
print("GDN parallel vs recurrent:", np.abs(gdn_parallel(gtoks) - g_rec).max())
for m in (1, 5, 16):
    S_c, g_chk = gdn_chunkwise_scan(gtoks, m)
    print(f"GDN m={m:2d}  outputs {np.abs(g_chk - g_rec).max():.1e}  state {np.abs(S_c.S - S_g.S).max():.1e}")
