"""
Scalar kernels shared by every gradient structure.

Boltzmann function, logarithmic mean, the G-function, the cosh-type dual kernel,
convex generators for Markov-chain entropies and the Stirling bracket for k_n.
All functions accept scalars or numpy arrays and broadcast.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import exprel, xlogy

# Relative half-difference below which the logarithmic mean switches to its series
LOG_MEAN_SERIES_THRESHOLD = 1e-4

# Relative distance treated as the diagonal in Phi(a, b)
DIAGONAL_RTOL = 1e-8


def _as_float_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _reject_negative(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if np.any(arr < 0):
            raise ValueError(f"{name} requires nonnegative arguments")


def _unwrap(result: np.ndarray):
    return float(result) if result.ndim == 0 else result


# ============================================================
# Boltzmann function and logarithmic mean
# ============================================================


def lambda_B(z):
    """
    Boltzmann function λ_B(z) = z log z − z + 1, with λ_B(0) = 1.

    Args:
        z: Nonnegative scalar or array

    Returns:
        λ_B(z), same shape as the input
    """
    z = _as_float_array(z)
    _reject_negative("lambda_B", z)
    # xlogy handles the z = 0 branch
    return _unwrap(xlogy(z, z) - z + 1.0)


def log_mean(a, b):
    """
    Logarithmic mean Λ(a, b) = (a − b)/(log a − log b).

    Λ(a, a) = a and Λ(a, 0) = 0. Near the diagonal the symmetric expansion in
    u = (a − b)/(a + b) is used: Λ = m(1 − u²/3 − 4u⁴/45) with m = (a + b)/2.
    """
    a = _as_float_array(a)
    b = _as_float_array(b)
    _reject_negative("log_mean", a, b)
    a, b = np.broadcast_arrays(a, b)

    out = np.zeros(a.shape)
    positive = (a > 0) & (b > 0)
    s = np.where(positive, a + b, 1.0)
    u = np.where(positive, (a - b) / s, 0.0)
    near = positive & (np.abs(u) < LOG_MEAN_SERIES_THRESHOLD)
    far = positive & ~near

    u2 = u * u
    out[near] = (0.5 * s * (1.0 - u2 / 3.0 - 4.0 * u2 * u2 / 45.0))[near]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (a - b) / (np.log(np.where(far, a, 1.0)) - np.log(np.where(far, b, 2.0)))
    out[far] = ratio[far]
    return _unwrap(out)


def log_mean_partials(a, b) -> Tuple:
    """
    Partial derivatives (∂_aΛ, ∂_bΛ) of the logarithmic mean for a, b > 0.

    ∂_aΛ(a, b) = Λ(a − Λ)/(a(a − b)); on the diagonal both equal 1/2.
    """
    a = _as_float_array(a)
    b = _as_float_array(b)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("log_mean_partials requires positive arguments")
    a, b = np.broadcast_arrays(a, b)

    def _partial_first(x, y):
        u = (x - y) / (x + y)
        near = np.abs(u) < LOG_MEAN_SERIES_THRESHOLD
        lam = _as_float_array(log_mean(x, y))
        with np.errstate(divide="ignore", invalid="ignore"):
            exact = lam * (x - lam) / (x * (x - y))
        series = 0.5 - u / 3.0 + u * u / 6.0
        return np.where(near, series, exact)

    da = _partial_first(a, b)
    db = _partial_first(b, a)
    return _unwrap(da), _unwrap(db)


# ============================================================
# G-function and the affine lower bound
# ============================================================


def G(a, b):
    """G(a, b) = (a − b)(log a − log b) for a, b > 0."""
    a = _as_float_array(a)
    b = _as_float_array(b)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("G requires positive arguments (G(a, 0) = +inf)")
    return _unwrap((a - b) * (np.log(a) - np.log(b)))


def g_affine(omega):
    """g(ω) = 1 − e^{−ω} + ω."""
    omega = _as_float_array(omega)
    return _unwrap(1.0 - np.exp(-omega) + omega)


def affine_lower_bound_check(a: float, b: float, omega: float, rtol: float = 1e-12) -> bool:
    """Check G(a, b) ≥ g(ω)a + g(−ω)b up to a relative tolerance."""
    lhs = G(a, b)
    rhs = g_affine(omega) * a + g_affine(-omega) * b
    return bool(lhs >= rhs - rtol * max(1.0, abs(lhs), abs(a), abs(b)))


# ============================================================
# cosh-type dual kernel
# ============================================================


def cosh_star(zeta):
    """C*(ζ) = 4 cosh(ζ/2) − 4, evaluated as 8 sinh²(ζ/4)."""
    zeta = _as_float_array(zeta)
    return _unwrap(8.0 * np.sinh(0.25 * zeta) ** 2)


def cosh_star_prime(zeta):
    zeta = _as_float_array(zeta)
    return _unwrap(2.0 * np.sinh(0.5 * zeta))


def cosh_star_second(zeta):
    zeta = _as_float_array(zeta)
    return _unwrap(np.cosh(0.5 * zeta))


def bernoulli(x):
    """Scharfetter–Gummel weight B(x) = x/(eˣ − 1), B(0) = 1."""
    x = _as_float_array(x)
    return _unwrap(1.0 / exprel(x))


# ============================================================
# Convex generators for Markov entropies
# ============================================================


@dataclass(frozen=True)
class ConvexGenerator:
    """Strictly convex φ with analytic first and second derivatives."""

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    phi_prime: Callable[[np.ndarray], np.ndarray]
    phi_double_prime: Callable[[np.ndarray], np.ndarray]
    mean: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


def _boltzmann_prime(z):
    return np.log(z)


BOLTZMANN = ConvexGenerator(
    name="boltzmann",
    phi=lambda z: _as_float_array(lambda_B(z)),
    phi_prime=_boltzmann_prime,
    phi_double_prime=lambda z: 1.0 / z,
    mean=lambda a, b: _as_float_array(log_mean(a, b)),
)

QUADRATIC = ConvexGenerator(
    name="quadratic",
    phi=lambda z: 0.5 * (z - 1.0) ** 2,
    phi_prime=lambda z: z - 1.0,
    phi_double_prime=lambda z: np.ones_like(z),
)


def power_generator(p: float) -> ConvexGenerator:
    """
    Power family φ_p(z) = (z^p − 1 − p(z − 1))/(p(p − 1)) for p ∈ (1, 2].

    p = 2 reproduces the quadratic preset.
    """
    if not 1.0 < p <= 2.0:
        raise ValueError(f"power generator needs p in (1, 2], got {p}")
    return ConvexGenerator(
        name=f"power_{p:g}",
        phi=lambda z: (z**p - 1.0 - p * (z - 1.0)) / (p * (p - 1.0)),
        phi_prime=lambda z: (z ** (p - 1.0) - 1.0) / (p - 1.0),
        phi_double_prime=lambda z: z ** (p - 2.0),
    )


def Phi(gen: ConvexGenerator, a, b):
    """
    Mean function Φ(a, b) = (a − b)/(φ'(a) − φ'(b)), Φ(a, a) = 1/φ''(a).

    Args:
        gen: Convex generator
        a, b: Positive scalars or arrays

    Returns:
        Φ(a, b)
    """
    a = _as_float_array(a)
    b = _as_float_array(b)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("Phi requires positive arguments")
    if gen.mean is not None:
        return _unwrap(_as_float_array(gen.mean(a, b)))
    a, b = np.broadcast_arrays(a, b)

    diagonal = np.abs(a - b) <= DIAGONAL_RTOL * np.maximum(a, b)
    mid = 0.5 * (a + b)
    with np.errstate(divide="ignore", invalid="ignore"):
        quotient = (a - b) / (gen.phi_prime(a) - gen.phi_prime(b))
    return _unwrap(np.where(diagonal, 1.0 / gen.phi_double_prime(mid), quotient))


# ============================================================
# Stirling bracket
# ============================================================


def stirling_kn_bounds(n: int) -> Tuple[float, float]:
    """
    Bracket for k_n defined by n! = √(2πk_n)(n/e)^n.

    k_n = n + 1/6 + γ_n/(124/5 + 72n) with γ_n ∈ [0.9, 1]; k_0 = 1/(2π).

    Returns:
        (lower, upper) evaluated at γ_n = 0.9 and γ_n = 1
    """
    if n < 0:
        raise ValueError("stirling_kn_bounds requires n >= 0")
    if n == 0:
        k0 = 1.0 / (2.0 * math.pi)
        return k0, k0
    base = n + 1.0 / 6.0
    denom = 124.0 / 5.0 + 72.0 * n
    return base + 0.9 / denom, base + 1.0 / denom
