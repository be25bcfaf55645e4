#!/usr/bin/env python3
"""
Tests for the scalar kernels: Boltzmann function, logarithmic mean, G-function,
cosh-type dual kernel, Bernoulli weight, convex generators and the Stirling bracket.
"""

import math
import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest
from scipy.special import gammaln

from src.kernels import (
    BOLTZMANN,
    QUADRATIC,
    G,
    Phi,
    affine_lower_bound_check,
    bernoulli,
    cosh_star,
    cosh_star_prime,
    cosh_star_second,
    g_affine,
    lambda_B,
    log_mean,
    log_mean_partials,
    power_generator,
    stirling_kn_bounds,
)


def test_lambda_b_values():
    """λ_B vanishes at 1, equals 1 at 0 and is positive elsewhere"""
    assert lambda_B(1.0) == pytest.approx(0.0, abs=1e-15)
    assert lambda_B(0.0) == 1.0
    z = np.array([0.1, 0.5, 2.0, 10.0])
    assert np.all(lambda_B(z) > 0)
    assert lambda_B(np.e) == pytest.approx(1.0)


def test_lambda_b_rejects_negative():
    """Negative arguments are outside the domain"""
    with pytest.raises(ValueError):
        lambda_B(-0.5)


def test_log_mean_limits():
    """Λ(a, a) = a, Λ(a, 0) = 0 and symmetry"""
    assert log_mean(3.0, 3.0) == pytest.approx(3.0)
    assert log_mean(2.0, 0.0) == 0.0
    assert log_mean(0.0, 0.0) == 0.0
    assert log_mean(2.0, 5.0) == pytest.approx(log_mean(5.0, 2.0))
    assert log_mean(np.e, 1.0) == pytest.approx(np.e - 1.0)


def test_log_mean_series_is_continuous_across_threshold():
    """The near-diagonal series agrees with the closed form"""
    a = 1.0
    for rel in (1e-3, 2e-4, 5e-5, 1e-6):
        b = 1.0 + rel
        exact = (b - a) / (math.log(b) - math.log(a))
        assert log_mean(a, b) == pytest.approx(exact, rel=1e-10)


def test_log_mean_between_geometric_and_arithmetic():
    """√(ab) ≤ Λ(a, b) ≤ (a + b)/2"""
    rng = np.random.default_rng(1)
    a = rng.uniform(0.01, 10.0, 50)
    b = rng.uniform(0.01, 10.0, 50)
    lam = log_mean(a, b)
    assert np.all(lam >= np.sqrt(a * b) * (1 - 1e-12))
    assert np.all(lam <= 0.5 * (a + b) * (1 + 1e-12))


def test_log_mean_partials_match_finite_differences():
    """Analytic partial derivatives against central differences"""
    a, b, h = 1.7, 0.4, 1e-6
    da, db = log_mean_partials(a, b)
    assert da == pytest.approx((log_mean(a + h, b) - log_mean(a - h, b)) / (2 * h), rel=1e-6)
    assert db == pytest.approx((log_mean(a, b + h) - log_mean(a, b - h)) / (2 * h), rel=1e-6)
    diag = log_mean_partials(2.0, 2.0)
    assert diag[0] == pytest.approx(0.5)
    assert diag[1] == pytest.approx(0.5)


def test_g_function_and_affine_bound():
    """G ≥ g(ω)a + g(−ω)b with equality at ω = log(a/b)"""
    a, b = 3.0, 0.5
    omega = math.log(a / b)
    rhs = g_affine(omega) * a + g_affine(-omega) * b
    assert G(a, b) == pytest.approx(rhs, rel=1e-12)
    for w in (-2.0, 0.0, 0.7, 3.0):
        assert affine_lower_bound_check(a, b, w)
    assert G(1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        G(1.0, 0.0)


def test_cosh_star_derivatives():
    """C*(0) = 0, C*' is odd, C*'' = cosh(ζ/2) and matches finite differences"""
    assert cosh_star(0.0) == 0.0
    zeta = 1.3
    assert cosh_star(zeta) == pytest.approx(4 * math.cosh(zeta / 2) - 4)
    h = 1e-5
    assert cosh_star_prime(zeta) == pytest.approx((cosh_star(zeta + h) - cosh_star(zeta - h)) / (2 * h), rel=1e-8)
    assert cosh_star_prime(-zeta) == pytest.approx(-cosh_star_prime(zeta))
    assert cosh_star_second(zeta) == pytest.approx(math.cosh(zeta / 2))


def test_bernoulli_identity():
    """B(0) = 1 and B(−x) − B(x) = x"""
    assert bernoulli(0.0) == pytest.approx(1.0)
    x = np.array([-30.0, -1.0, 1e-9, 0.5, 4.0, 40.0])
    assert np.allclose(bernoulli(-x) - bernoulli(x), x, rtol=1e-12, atol=1e-12)


def test_phi_means():
    """Boltzmann Φ is the logarithmic mean; quadratic Φ is 1; power p=2 matches quadratic"""
    assert Phi(BOLTZMANN, 2.0, 0.5) == pytest.approx(log_mean(2.0, 0.5))
    assert Phi(QUADRATIC, 2.0, 0.5) == pytest.approx(1.0)
    assert Phi(QUADRATIC, 1.5, 1.5) == pytest.approx(1.0)
    p2 = power_generator(2.0)
    assert Phi(p2, 3.0, 0.2) == pytest.approx(1.0)
    p15 = power_generator(1.5)
    # diagonal limit 1/φ''(a) = a^{1/2}
    assert Phi(p15, 4.0, 4.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        power_generator(2.5)


def test_stirling_bracket_contains_exact_value():
    """k_n from log-gamma lies within the bracket"""
    lo, hi = stirling_kn_bounds(0)
    assert lo == hi == pytest.approx(1.0 / (2.0 * math.pi))
    for n in (1, 2, 5, 10, 50, 400):
        k_n = math.exp(2.0 * gammaln(n + 1) + 2.0 * n - 2.0 * n * math.log(n)) / (2.0 * math.pi)
        lo, hi = stirling_kn_bounds(n)
        assert lo - 1e-12 <= k_n <= hi + 1e-12
    with pytest.raises(ValueError):
        stirling_kn_bounds(-1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
