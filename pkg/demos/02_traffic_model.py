"""
Where the bytes go
==================

Decoding one token is memory-bound, so its cost is roughly the bytes it
moves. This script prints the per-token storage and traffic of each form
and the speedups that follow from them.
"""

from linbuf import io_cost_model as cm

d = 128

###############################################################################
# Per-token traffic at ``d = 128`` with a 32-token buffer and 100 tokens of
# context.

for variant in cm.VARIANTS:
    for form in cm.FORMS:
        q = cm.CostQuery(form, variant, d=d, L=100, m=32 if form == "chunkwise" else None)
        p = cm.profile(q)
        print(f"{variant:7s} {form:9s} storage {int(p.storage_bytes):7d} B  "
              f"read {float(p.read_bytes_per_token):9.1f} B  write {float(p.write_bytes_per_token):9.1f} B")

###############################################################################
# The buffer size trades a cheaper amortised state write against reading
# more buffered records per step. The best size sits near ``2 sqrt(d)``.

m_star = cm.optimal_buffer_size(d)
print("best buffer size:", m_star, "speedup", round(float(cm.chunkwise_speedup(d, m_star)), 3))
for m in (1, 8, 16, m_star, 64, 128):
    print(f"  m={m:3d}  speedup {float(cm.chunkwise_speedup(d, m)):.3f}")

###############################################################################
# Verifying N speculative drafts: the recurrent kernel writes one state per
# draft, the buffered one writes small records and a single state.

for n in (1, 2, 4, 8, 16):
    print(f"  drafts={n:2d}  verify speedup {float(cm.verify_speedup(d, n)):.3f}")

###############################################################################
# Short contexts are cheaper to serve from buffered keys and values alone.

print("kv-only break-even context:", float(cm.kv_only_crossover(d, m_star)))
