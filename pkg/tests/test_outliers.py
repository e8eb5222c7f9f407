import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qaq.outliers import (OutlierSet, deserialize_outliers, extract_outliers, merge_outliers,
                          outlier_mask, per_end_count, serialize_outliers, sidecar_bits)


def test_one_per_end():
    inl, kept, out, rng_ = extract_outliers([-10, 1, 2, 3, 100], 0.2)
    assert out.entries == [(0, -10.0), (4, 100.0)]
    assert rng_ == (1.0, 3.0)
    assert kept.tolist() == [1, 2, 3]
    assert inl.tolist() == [1.0, 2.0, 3.0]


def test_no_outliers_when_alpha_zero():
    _, _, out, rng_ = extract_outliers([3.0, -1.0, 2.0], 0.0)
    assert out.count == 0
    assert rng_ == (-1.0, 3.0)


def test_counting_rule_d128():
    assert per_end_count(0.01, 128) == 2
    x = np.random.default_rng(1).standard_normal(128)
    assert extract_outliers(x, 0.01)[2].count == 4
    assert per_end_count(0.01, 128, "total") == 1


def test_ties_go_to_lower_index():
    _, _, out, _ = extract_outliers([5.0, 0.0, 5.0, 1.0, 0.0, 2.0], 0.1)
    assert out.indices.tolist() == [0, 1]


def test_constant_row_has_no_outliers():
    assert not outlier_mask(np.full((1, 6), 2.0), 0.2).any()


def test_all_outlier_token_is_lossless():
    x = np.array([0.3, -2.0, 7.0, 1.0])
    inl, kept, out, rng_ = extract_outliers(x, 0.49)
    assert out.count == 4 and inl.size == 0 and rng_ == (0.0, 0.0)
    np.testing.assert_array_equal(merge_outliers(inl, kept, out), x)


def test_merge_identity_without_outliers():
    np.testing.assert_array_equal(merge_outliers([1.0, 2.0], [0, 1], OutlierSet()), [1.0, 2.0])


def test_merge_rejects_collisions():
    with pytest.raises(ValueError, match="corrupt outlier set"):
        merge_outliers([1.0, 2.0], [0, 1], OutlierSet([1], [9.0]))
    with pytest.raises(ValueError, match="corrupt outlier set"):
        merge_outliers([1.0], [0], OutlierSet([5], [9.0]))


def test_outlier_set_validation():
    with pytest.raises(ValueError):
        OutlierSet([2, 1], [0.0, 0.0])
    with pytest.raises(ValueError):
        OutlierSet([1], [0.0, 1.0])


def test_invalid_alpha():
    with pytest.raises(ValueError):
        per_end_count(0.5, 10)
    with pytest.raises(ValueError):
        per_end_count(0.1, 10, "both")


def test_sidecar_bits():
    assert sidecar_bits(4, 128, 16) == 4 * (7 + 16)
    assert sidecar_bits(0, 16) == 0


def test_serialization_layout():
    blob = serialize_outliers(OutlierSet([3], [1.5]), 16)
    assert blob == b"\x01\x00\x00\x00" + b"\x03\x00\x00\x00" + np.float16(1.5).tobytes()


@pytest.mark.parametrize("baseline", [16, 32, 64])
def test_serialization_round_trip(baseline):
    out = OutlierSet([0, 5, 9], [-2.0, 0.5, 1024.0])
    assert deserialize_outliers(serialize_outliers(out, baseline), baseline) == out


def test_truncated_sidecar():
    blob = serialize_outliers(OutlierSet([3], [1.5]), 32)
    with pytest.raises(ValueError):
        deserialize_outliers(blob[:-1], 32)


@given(hnp.arrays(np.float64, st.integers(1, 64), elements=st.floats(-1e6, 1e6)),
       st.sampled_from([0.0, 0.01, 0.05, 0.2, 0.45]))
def test_round_trip_positions_bit_exact(x, alpha):
    inl, kept, out, (lo, hi) = extract_outliers(x, alpha)
    np.testing.assert_array_equal(merge_outliers(inl, kept, out), x)
    if inl.size:
        assert lo == inl.min() and hi == inl.max()
    if out.count and inl.size:
        # every outlier lies on or beyond the inlier range
        assert np.all((out.values <= lo) | (out.values >= hi))
