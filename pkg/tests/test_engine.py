import numpy as np
import pytest

from qaq.allocator import QuantConfig, allocate_bits
from qaq.engine import KVCacheEngine
from qaq.outliers import inlier_range, outlier_mask
from qaq.quantizer import dequantize, quantize_rows
from qaq.workload import WorkloadSpec, generate_workload


def drive(engine, wl, steps=None):
    out = []
    for i, (q, k, v) in enumerate(wl):
        if steps is not None and i >= steps:
            break
        out.append(engine.step(q, k, v))
    return out


@pytest.fixture
def workload():
    return generate_workload(WorkloadSpec(seed=3, T_max=96, D=8))


def test_first_step_is_exact(rng):
    eng = KVCacheEngine(4)
    v = rng.standard_normal(4)
    res = eng.step(rng.standard_normal(4), rng.standard_normal(4), v)
    assert res.s_hat.tolist() == [1.0]
    np.testing.assert_array_equal(res.x_hat, v)
    # one full-precision token per cache: 16*4 codes + 32 range + 8 tag
    assert res.stats.total_quantized_bits == 2 * (64 + 32 + 8)
    assert res.stats.compression_ratio == pytest.approx(128 / 208)


def test_zero_budget_is_lossless(workload):
    eng = KVCacheEngine(8, QuantConfig(sigma_s_max=0.0, sigma_x_max=0.0))
    for res in drive(eng, workload):
        np.testing.assert_array_equal(res.x_hat, res.x)
        assert res.stats.x_error_l2 == 0.0
        assert res.stats.compression_ratio <= 1.0
    assert set(eng.bits("k").tolist()) == {16}


def test_score_deviation_within_budget_on_default_runs():
    # pooled over ten 64-step runs; single short runs scatter around the target
    cfg = QuantConfig()
    within = []
    for seed in range(10):
        wl = generate_workload(WorkloadSpec(seed=seed, T_max=64, D=16))
        eng = KVCacheEngine(16, cfg)
        within += [r.stats.s_error_std <= cfg.sigma_s_max for r in drive(eng, wl)]
    assert np.mean(within) >= 0.9


def test_stored_bits_equal_allocation(workload):
    cfg = QuantConfig()
    eng = KVCacheEngine(8, cfg)
    drive(eng, workload, 40)
    q, k, v = workload.q[40], workload.k[40], workload.v[40]
    res = eng.step(q, k, v)
    T = eng.T
    ranges = {}
    for which, data in (("k", workload.k[:T]), ("v", workload.v[:T])):
        m = outlier_mask(data, cfg.alpha)
        ranges[which] = np.stack(inlier_range(data, m), axis=1)
    bk, bv = allocate_bits(ranges["k"], ranges["v"], eng.predicted_scores(), eng.calib, cfg, T, dim=8, horizon=max(T, 2))
    np.testing.assert_array_equal(eng.bits("k"), bk)
    np.testing.assert_array_equal(eng.bits("v"), bv)
    assert np.all(eng.predicted_scores() >= res.s_hat - 1e-15)


def test_backing_store_fidelity(workload):
    eng = KVCacheEngine(8)
    drive(eng, workload)
    np.testing.assert_array_equal(eng.backing("k"), workload.k)
    np.testing.assert_array_equal(eng.backing("v"), workload.v)


def test_entries_reconstruct_cache(workload):
    eng = KVCacheEngine(8)
    drive(eng, workload, 30)
    recon = eng.reconstruct("v")
    for t in range(eng.T):
        np.testing.assert_array_equal(dequantize(eng.entry(t, "v")), recon[t])


class TestRequantize:
    def make(self, rng, source="in_place"):
        eng = KVCacheEngine(6, QuantConfig(alpha=0.0, requantize_source=source))
        eng.step(rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(6))
        eng.requantize_token(0, 6, 6)
        return eng

    def test_down_in_place_uses_midpoints(self, rng):
        eng = self.make(rng)
        before = eng.entry(0, "k")
        fetches = eng.backing_fetches
        eng.requantize_token(0, 4, 6)
        after = eng.entry(0, "k")
        assert after.bits == 4
        assert eng.backing_fetches == fetches
        expected = quantize_rows(dequantize(before)[None, :], [4], ranges=([before.vmin], [before.vmax]))
        np.testing.assert_array_equal(after.codes, expected.codes[0])
        np.testing.assert_array_equal(after.codes, before.codes >> 2)

    def test_up_fetches_backing_store(self, rng):
        eng = self.make(rng)
        eng.requantize_token(0, 4, 6)
        fetches = eng.backing_fetches
        eng.requantize_token(0, 8, 6)
        assert eng.backing_fetches == fetches + 1
        fresh = quantize_rows(eng.backing("k"), [8])
        np.testing.assert_array_equal(eng.reconstruct("k"), fresh.recon)

    def test_equal_bits_is_noop(self, rng):
        eng = self.make(rng)
        state = eng.dumps()
        eng.requantize_token(0, 6, 6)
        assert eng.dumps() == state

    def test_bad_index(self, rng):
        eng = self.make(rng)
        with pytest.raises(IndexError):
            eng.requantize_token(1, 2, 2)

    def test_in_place_matches_backing_store(self):
        wl = generate_workload(WorkloadSpec(seed=5, T_max=120, D=8, distribution="student_t"))
        a = KVCacheEngine(8, QuantConfig(alpha=0.1))
        b = KVCacheEngine(8, QuantConfig(alpha=0.1, requantize_source="backing_store"))
        for q, k, v in wl:
            ra, rb = a.step(q, k, v), b.step(q, k, v)
            np.testing.assert_array_equal(ra.x_hat, rb.x_hat)
        np.testing.assert_array_equal(a.reconstruct("k"), b.reconstruct("k"))


class TestAccounting:
    def two_bit_engine(self, dim, tokens=1):
        rng = np.random.default_rng(0)
        eng = KVCacheEngine(dim, QuantConfig(alpha=0.0))
        for _ in range(tokens):
            eng.step(rng.standard_normal(dim), rng.standard_normal(dim), rng.standard_normal(dim))
        for t in range(tokens):
            eng.requantize_token(t, 2, 2)
        return eng

    def test_small_example(self):
        st = self.two_bit_engine(4).snapshot_stats()
        assert st.total_quantized_bits == 96
        assert st.baseline_bits_total == 128
        assert st.compression_ratio == 128 / 96

    def test_wide_example(self):
        st = self.two_bit_engine(128).snapshot_stats()
        assert st.total_quantized_bits == 2 * 296
        assert st.baseline_bits_total == 4096
        assert st.compression_ratio == 4096 / 592
        assert round(st.compression_ratio, 2) == 6.92

    def test_full_precision_overhead(self):
        eng = KVCacheEngine(4, QuantConfig(sigma_s_max=0.0, sigma_x_max=0.0))
        rng = np.random.default_rng(1)
        for _ in range(3):
            eng.step(rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4))
        assert eng.snapshot_stats().compression_ratio < 1

    def test_outlier_sidecar_charged(self):
        eng = KVCacheEngine(128, QuantConfig(alpha=0.01))
        rng = np.random.default_rng(2)
        eng.step(rng.standard_normal(128), rng.standard_normal(128), rng.standard_normal(128))
        eng.requantize_token(0, 2, 2)
        # 4 outliers, each 7 index bits + 16 value bits
        per_cache = 2 * 124 + 32 + 8 + 4 * 23
        assert eng.snapshot_stats().total_quantized_bits == 2 * per_cache

    def test_empty_snapshot(self):
        with pytest.raises(ValueError):
            KVCacheEngine(4).snapshot_stats()


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="D=3"):
        KVCacheEngine(4).step(np.ones(3), np.ones(4), np.ones(4))


def test_deterministic(workload):
    a, b = KVCacheEngine(8), KVCacheEngine(8)
    for ra, rb in zip(drive(a, workload), drive(b, workload)):
        assert ra.stats == rb.stats
        np.testing.assert_array_equal(ra.x_hat, rb.x_hat)
    assert a.dumps() == b.dumps()


@pytest.mark.parametrize("cfg", [QuantConfig(), QuantConfig(key_mode="appendix_mae", alpha=0.1),
                                 QuantConfig(calib_mode="streaming", calib_reservoir=8)])
def test_dump_round_trip(workload, cfg):
    eng = KVCacheEngine(8, cfg)
    drive(eng, workload, 50)
    text = eng.dumps()
    back = KVCacheEngine.loads(text)
    assert back.dumps() == text
    np.testing.assert_array_equal(back.reconstruct("k"), eng.reconstruct("k"))
    for q, k, v in list(workload)[50:]:
        ra, rb = eng.step(q, k, v), back.step(q, k, v)
        np.testing.assert_array_equal(ra.x_hat, rb.x_hat)
        assert ra.stats == rb.stats


def test_loads_rejects_other_formats():
    with pytest.raises(ValueError):
        KVCacheEngine.from_state({"format": "something-else"})
