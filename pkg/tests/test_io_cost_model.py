import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linbuf import io_cost_model as cm
from linbuf.errors import InvalidInputError
from linbuf.io_cost_model import CostQuery, LatencyModel, Traffic, profile


def table_row(form, variant, d, L=0, m=None):
    """Independent transcription of the reference per-token byte formulas."""
    d, L = Fraction(d), Fraction(L)
    g = variant == "gdn"
    if form == "parallel":
        return (4 * L * d + (2 * L if g else 0), 4 * L * d + 2 * d + (2 * L + 2 if g else 0), 6 * d + (2 if g else 0))
    if form == "recurrent":
        return (4 * d * d, 4 * d * d + 6 * d + (4 if g else 0), 4 * d * d + 2 * d)
    m = Fraction(m)
    return (
        4 * d * d + 4 * m * d + (2 * m if g else 0),
        4 * (1 + 1 / m) * d * d + 2 * (m + 4) * d + (m + 5 if g else 0),
        4 * d * d / m + 6 * d + (2 if g else 0),
    )


def brute_optimum(d):
    best = None
    for m in range(1, 4 * d + 1):
        s = cm.chunkwise_speedup(d, m)
        if best is None or s > best[0]:
            best = (s, m)
    return best[1]


class TestGolden:
    def test_vanilla_recurrent_d128(self):
        p = profile(CostQuery("recurrent", d=128))
        assert (p.storage_bytes, p.read_bytes_per_token, p.write_bytes_per_token) == (65536, 66304, 65792)

    def test_gdn_chunkwise_d128_m32(self):
        p = profile(CostQuery("chunkwise", "gdn", d=128, m=32))
        assert (p.storage_bytes, p.read_bytes_per_token, p.write_bytes_per_token) == (81984, 76837, 2818)

    def test_vanilla_parallel_intensity(self):
        p = profile(CostQuery("parallel", d=128, L=100))
        assert p.arithmetic_intensity == Fraction(4 * 100 * 128, 4 * 100 * 128 + 8 * 128)

    @pytest.mark.parametrize("variant", cm.VARIANTS)
    @pytest.mark.parametrize("form", cm.FORMS)
    @pytest.mark.parametrize("d,L,m", [(1, 1, 1), (64, 10, 7), (128, 100, 23), (256, 4096, 64)])
    def test_tables_exact(self, form, variant, d, L, m):
        q = CostQuery(form, variant, d=d, L=L, m=m if form == "chunkwise" else None)
        p = profile(q)
        want = table_row(form, variant, d, L, m)
        assert (p.storage_bytes, p.read_bytes_per_token, p.write_bytes_per_token) == want
        assert all(isinstance(x, Fraction) for x in want)


@settings(max_examples=200, deadline=None)
@given(
    form=st.sampled_from(cm.FORMS),
    variant=st.sampled_from(cm.VARIANTS),
    d=st.integers(1, 512),
    L=st.integers(1, 5000),
    m=st.integers(1, 128),
)
def test_counter_matches_closed_form(form, variant, d, L, m):
    q = CostQuery(form, variant, d=d, L=L, m=m if form == "chunkwise" else None)
    p = profile(q)
    assert cm.counted_profile(q) == (p.storage_bytes, p.read_bytes_per_token, p.write_bytes_per_token)


def test_unfused_recurrent_rereads_state():
    q = CostQuery("recurrent", d=64)
    assert profile(q, fused=False).read_bytes_per_token - profile(q).read_bytes_per_token == 4 * 64 * 64
    assert cm.counted_profile(q, fused=False)[1] == profile(q, fused=False).read_bytes_per_token
    assert cm.recurrent_step_traffic(64, fused=False).kernels == 2


class TestSpeedups:
    def test_chunkwise_is_profile_ratio(self):
        for d, m in [(64, 8), (128, 23), (128, 32), (256, 1)]:
            rec = profile(CostQuery("recurrent", d=d)).access_bytes_per_token
            chk = profile(CostQuery("chunkwise", d=d, m=m)).access_bytes_per_token
            assert cm.chunkwise_speedup(d, m) == rec / chk

    def test_chunkwise_value(self):
        assert float(cm.chunkwise_speedup(128, 32)) == pytest.approx(1.65916, abs=1e-5)

    def test_m1_is_slower(self):
        assert cm.chunkwise_speedup(128, 1) < 1

    def test_optimum_examples(self):
        assert cm.optimal_buffer_size(128) == 23
        assert cm.optimal_buffer_size(1) == 2
        with pytest.raises(InvalidInputError):
            cm.optimal_buffer_size(0)

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 16, 100, 128, 255, 300])
    def test_optimum_matches_exhaustive_search(self, d):
        assert cm.optimal_buffer_size(d) == brute_optimum(d)

    def test_speedup_unimodal_around_optimum(self):
        d = 128
        m_star = cm.optimal_buffer_size(d)
        vals = [cm.chunkwise_speedup(d, m) for m in range(1, 200)]
        assert all(a < b for a, b in zip(vals[: m_star - 1], vals[1:m_star]))
        assert all(a >= b for a, b in zip(vals[m_star - 1 :], vals[m_star:]))

    def test_verify(self):
        assert cm.verify_speedup(128, 8) == Fraction(1168, 416)
        assert abs(float(cm.verify_speedup(128, 8)) - 2.78) / 2.78 < 0.02
        for d in (64, 128, 1024):
            assert 0.95 <= cm.verify_speedup(d, 2) <= 1.05

    def test_verify_is_traffic_ratio(self):
        for d, n in [(128, 8), (64, 3), (32, 1)]:
            r = cm.recurrent_verify_traffic(d, n).total
            b = cm.buffered_verify_traffic(d, n).total
            assert Fraction(r, b) == cm.verify_speedup(d, n)

    def test_verify_grows_with_drafts(self):
        vals = [cm.verify_speedup(128, n) for n in range(1, 17)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_kv_only(self):
        assert cm.kv_only_crossover(128, 23) == Fraction(3499, 23)
        assert float(cm.kv_only_speedup(128, 23, 126)) == pytest.approx(1.204, abs=1e-3)
        assert cm.kv_only_speedup(128, 23, cm.kv_only_crossover(128, 23)) == 1

    def test_kv_only_is_traffic_ratio(self):
        d, m, L = 128, 23, 80
        chk = profile(CostQuery("chunkwise", d=d, m=m)).access_bytes_per_token
        par = profile(CostQuery("parallel", d=d, L=L)).access_bytes_per_token
        assert cm.kv_only_speedup(d, m, L) == chk / par

    def test_gdn_exact_values(self):
        g = cm.gdn_speedups(128, 32, 100)
        assert g == cm.GdnSpeedups(Fraction(26420, 15931), Fraction(17153, 2050), Fraction(79655, 52428))

    def test_gdn_is_gdn_profile_ratio(self):
        d, m, L = 128, 32, 100
        rec = profile(CostQuery("recurrent", "gdn", d=d)).access_bytes_per_token
        chk = profile(CostQuery("chunkwise", "gdn", d=d, m=m)).access_bytes_per_token
        par = profile(CostQuery("parallel", "gdn", d=d, L=L)).access_bytes_per_token
        g = cm.gdn_speedups(d, m, L)
        assert g.chunkwise == rec / chk and g.kv_only == chk / par

    @pytest.mark.parametrize("d,m,L", [(64, 16, 50), (128, 23, 100), (256, 32, 200)])
    def test_gdn_close_to_vanilla(self, d, m, L):
        g = cm.gdn_speedups(d, m, L)
        pairs = [
            (g.chunkwise, cm.chunkwise_speedup(d, m)),
            (g.parallel_verify, cm.verify_speedup(d, m)),
            (g.kv_only, cm.kv_only_speedup(d, m, L)),
        ]
        for exact, approx in pairs:
            assert abs(exact / approx - 1) < 0.02


class TestCapacity:
    def test_five_fold_without_records(self):
        s = 1 << 21
        base = cm.capacity(s, 0, 40 << 30, 4, cm.RECURRENT_BASELINE)
        buf = cm.capacity(s, 0, 40 << 30, 4, cm.KV_BUFFERED)
        assert Fraction(buf, base) == 5

    def test_fp16_records_d128(self):
        s, r = 4 * 128 * 128 * 32, 32 * (4 * 128 + 2)
        ratio = cm.capacity(s, r, 40 << 30, 4, cm.KV_BUFFERED) / cm.capacity(s, r, 40 << 30, 4, cm.RECURRENT_BASELINE)
        assert ratio == pytest.approx(4.848, abs=1e-3)

    def test_unknown_mode(self):
        with pytest.raises(InvalidInputError):
            cm.capacity(1, 1, 1, 1, "eager")

    def test_no_drafts_means_equal(self):
        assert cm.capacity(100, 7, 10_000, 0, cm.KV_BUFFERED) == cm.capacity(100, 7, 10_000, 0, cm.RECURRENT_BASELINE)


class TestQueries:
    def test_chunkwise_requires_m(self):
        with pytest.raises(InvalidInputError):
            CostQuery("chunkwise", d=8)

    @pytest.mark.parametrize("kw", [{"form": "sliding"}, {"form": "parallel", "variant": "mamba"}, {"form": "parallel", "d": 0}, {"form": "parallel", "L": -1}])
    def test_rejects(self, kw):
        with pytest.raises(InvalidInputError):
            CostQuery(**kw)

    def test_parallel_grows_with_context(self):
        reads = [profile(CostQuery("parallel", d=64, L=L)).read_bytes_per_token for L in (1, 10, 100)]
        assert reads[0] < reads[1] < reads[2]

    def test_recurrent_independent_of_context(self):
        assert profile(CostQuery("recurrent", d=64, L=1)) == profile(CostQuery("recurrent", d=64, L=10_000))


class TestKernels:
    def test_traffic_addition(self):
        assert Traffic(1, 2, 3, 1) + Traffic(4, 5, 6, 2) == Traffic(5, 7, 9, 3)
        assert Traffic(1, 2, 0).total == 3

    def test_prefill_kernel_count(self):
        assert cm.prefill_traffic(8, 17, 8).kernels == 3
        assert cm.prefill_traffic(8, 0, 8).kernels == 1

    def test_cycle_average_exact(self):
        r, w, _, k = cm.cycle_average(128, 23)
        assert k == Fraction(24, 23)
        assert isinstance(r, Fraction) and isinstance(w, Fraction)


class TestLatency:
    def test_pure_bandwidth(self):
        lm = LatencyModel()
        assert lm.latency(864e9) == pytest.approx(1.0)
        assert lm.latency(100, batch=4) == pytest.approx(4 * lm.latency(100))

    def test_overhead_per_kernel(self):
        lm = LatencyModel(1e9, 1e-6)
        assert lm.of(Traffic(500, 500, 0, 3)) == pytest.approx(1e-6 + 3e-6)

    def test_rejects_bad_constants(self):
        with pytest.raises(InvalidInputError):
            LatencyModel(0)
        with pytest.raises(InvalidInputError):
            LatencyModel(1.0, -1)


def test_optimum_near_two_root_d():
    assert all(abs(cm.optimal_buffer_size(d) - round(2 * math.sqrt(d))) <= 1 for d in range(4, 4097))
