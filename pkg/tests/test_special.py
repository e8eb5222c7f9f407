import numpy as np
import pytest
from scipy import special

from qaq.special import erfcinv, norm_ppf


def test_matches_reference_on_wide_grid():
    p = np.concatenate([np.logspace(-8, -1, 200), np.linspace(0.1, 0.9, 200),
                        1 - np.logspace(-8, -1, 200)])
    assert np.abs(norm_ppf(p) - special.ndtri(p)).max() <= 1e-10


def test_known_quantiles():
    assert norm_ppf(0.5) == 0.0
    assert norm_ppf(0.75) == pytest.approx(0.6744897501960817, abs=1e-12)
    assert norm_ppf(0.975) == pytest.approx(1.959963984540054, abs=1e-12)


def test_symmetry():
    p = np.linspace(0.01, 0.49, 50)
    np.testing.assert_allclose(norm_ppf(p), -norm_ppf(1 - p), atol=1e-12)


def test_endpoints_and_domain():
    assert norm_ppf(0.0) == -np.inf
    assert norm_ppf(1.0) == np.inf
    with pytest.raises(ValueError):
        norm_ppf(1.5)
    with pytest.raises(ValueError):
        norm_ppf(-0.1)


def test_erfcinv_round_trip():
    y = np.linspace(1e-6, 2 - 1e-6, 101)
    np.testing.assert_allclose(special.erfc(erfcinv(y)), y, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(erfcinv(y), special.erfcinv(y), atol=1e-10)
