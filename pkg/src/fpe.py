"""
Fokker–Planck approximations of the CME at volume V.

Five model variants share one flux form,

    ρ̇ = div( Σ_r γ^r [ d_r γ^r·∇ρ + f_r ρ ] ),

with per-reaction diffusion d_r and drift f_r (see `flux_fields`):

    simple            d = κΛ(a,b)/V       f = κ(a−b)
    simple_corrected  d = κΛ(a,b)/V       f = κ(a−b) + κΛ(a,b)·½Σγ_i/(Vc_i + 1/6)
    cle               d = κ(a+b)/(2V)     f = κ(a−b) + (κ/2V)(aΣγ_iα_i/c_i + bΣγ_iβ_i/c_i)
    corrected         d = κ(a+b)/(2V)     f = κ(a−b) + b̂_0/V
    cosh_corrected    d = κ√(ab)C*''(log b/a)/V   f = κ√(ab)C*'(log a/b)

Also here: simple and refined equilibrium densities, the higher-order
coefficients with their coercivity and monotonicity checks, Gaussian moment
closures and the birth–death comparison driver.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.integrate import quad, solve_ivp

from src.cme import assemble_generator, choose_box, moments, poisson_state, solve_cme
from src.kernels import cosh_star, cosh_star_prime, cosh_star_second, lambda_B, log_mean, log_mean_partials
from src.network import ReactionNetwork
from src.rre import RreSystem, integrate_rre, rate_jacobian, rate_vector
from src.scalebridge import GridDensity, ParticleEnsemble, Measure, _cell_quadrature
from src.utils.grids import (
    BackwardEuler,
    FittedOperator,
    UniformGrid,
    assemble_fitted_generator,
    stationary_log_density,
    time_grid,
)

logger = logging.getLogger(__name__)

VARIANTS = ("simple", "simple_corrected", "cle", "corrected", "cosh_corrected")
GRADIENT_VARIANTS = ("simple", "simple_corrected")

DEFAULT_THETA1 = 0.25
DEFAULT_THETA2 = 0.75
WINDOW_TAIL_TOLERANCE = 1e-10
STIRLING_SHIFT = 1.0 / 6.0

# |u| = |a−b|/(a+b) below which Υ_1 uses its series
UPSILON1_SERIES_THRESHOLD = 1e-4


class CovarianceError(RuntimeError):
    """Gaussian closure lost positive semidefiniteness."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


class MonotonicityError(RuntimeError):
    """The cubic flux map of the higher-order model cannot be made monotone."""

    def __init__(self, message: str, point: np.ndarray):
        super().__init__(f"{message} at c={np.array2string(np.asarray(point), precision=6)}")
        self.point = np.asarray(point)


# ============================================================
# Equilibrium densities
# ============================================================


def _as_points(c, I: int) -> np.ndarray:
    points = np.atleast_2d(np.asarray(c, dtype=float))
    if points.shape[1] != I:
        raise ValueError(f"expected points with {I} coordinates, got shape {points.shape}")
    return points


def log_refined_weight(c, V: float, c_star: float):
    """log Ŵ(V, c, c_*) = log V − V c_* λ_B(c/c_*) − ½ log(2π(Vc + 1/6))."""
    c = np.asarray(c, dtype=float)
    return np.log(V) - V * c_star * lambda_B(c / c_star) - 0.5 * np.log(2.0 * np.pi * (V * c + STIRLING_SHIFT))


def _log_normalizer(log_density, c_star: float, upper: float) -> Tuple[float, float]:
    """log ∫_0^upper e^{log_density} and the relative mass beyond `upper`."""
    peak = float(log_density(c_star))

    def integrand(c):
        return float(np.exp(log_density(c) - peak))

    split = min(c_star, upper)
    inside = quad(integrand, 0.0, split, limit=200)[0] + quad(integrand, split, upper, limit=200)[0]
    outside = quad(integrand, upper, np.inf, limit=200)[0] if np.isfinite(upper) else 0.0
    return peak + np.log(inside), outside / (inside + outside)


@dataclass(frozen=True)
class FpeEquilibrium:
    """
    Product equilibrium density on ∏[0, window_i].

    kind="simple":  W̃_V ∝ e^{−V E(c)}
    kind="refined": ∏ Ŵ(V, c_i, c_i^*)/Z(V, c_i^*)
    """

    kind: str
    V: float
    c_star: np.ndarray
    window: Tuple[float, ...]
    log_Z: np.ndarray

    def log_density(self, c) -> np.ndarray:
        points = _as_points(c, len(self.c_star))
        total = np.zeros(len(points))
        for i, cs in enumerate(self.c_star):
            if self.kind == "simple":
                total += -self.V * cs * np.asarray(lambda_B(points[:, i] / cs))
            else:
                total += log_refined_weight(points[:, i], self.V, cs)
        return total - self.log_Z.sum()

    def density(self, c) -> np.ndarray:
        return np.exp(self.log_density(c))

    def energy_correction(self, c) -> np.ndarray:
        """E_1^V(c) = ẑ + ½Σ log(Vc_i + 1/6), refined kind only."""
        if self.kind != "refined":
            raise ValueError("E_1^V is defined for the refined equilibrium")
        return refined_energy_correction(c, self.V, self.c_star, np.exp(self.log_Z))

    def expansion_residual(self, c) -> np.ndarray:
        """−(1/V) log W_V − E − (1/V)E_1^V, zero up to rounding."""
        points = _as_points(c, len(self.c_star))
        E = np.sum(self.c_star * lambda_B(points / self.c_star), axis=1)
        return -self.log_density(points) / self.V - E - self.energy_correction(points) / self.V


def refined_energy_correction(c, V: float, c_star, Z=None) -> np.ndarray:
    """
    E_1^V(c) = ẑ + ½Σ log(Vc_i + 1/6) with ẑ = Σ log(√(2π) Z_i / V).

    Z defaults to the normalization of Ŵ over [0, ∞).
    """
    c_star = np.atleast_1d(np.asarray(c_star, dtype=float))
    points = _as_points(c, len(c_star))
    if Z is None:
        Z = np.array(
            [np.exp(_log_normalizer(lambda x, cs=cs: log_refined_weight(x, V, cs), cs, np.inf)[0]) for cs in c_star]
        )
    z_hat = float(np.sum(np.log(np.sqrt(2.0 * np.pi) * np.asarray(Z) / V)))
    return z_hat + 0.5 * np.sum(np.log(V * points + STIRLING_SHIFT), axis=1)


def _equilibrium(sys: RreSystem, V: float, window, kind: str) -> FpeEquilibrium:
    sys.require_detailed_balance()
    c_star = sys.c_star
    upper = _window_tuple(window, len(c_star))
    log_Z = np.zeros(len(c_star))
    for i, (cs, hi) in enumerate(zip(c_star, upper)):
        if kind == "simple":
            log_density = lambda x, cs=cs: -V * cs * lambda_B(np.asarray(x) / cs)  # noqa: E731
        else:
            log_density = lambda x, cs=cs: log_refined_weight(x, V, cs)  # noqa: E731
        log_Z[i], tail = _log_normalizer(log_density, cs, hi)
        if tail > WINDOW_TAIL_TOLERANCE:
            raise ValueError(
                f"window [0, {hi:g}] too small for species {sys.net.species_names[i]}: "
                f"tail mass {tail:.3e}"
            )
    return FpeEquilibrium(kind=kind, V=float(V), c_star=c_star, window=upper, log_Z=log_Z)


def simple_equilibrium(sys: RreSystem, V: float, window) -> FpeEquilibrium:
    """W̃_V = e^{−VE}/Z̃_V on the window."""
    return _equilibrium(sys, V, window, "simple")


def refined_equilibrium(sys: RreSystem, V: float, window) -> FpeEquilibrium:
    """
    Product of the Stirling-refined factors W(V, c, c_*) = Ŵ/Z.

    Raises:
        ValueError: equilibrium mass beyond the window above 1e-10
    """
    return _equilibrium(sys, V, window, "refined")


# ============================================================
# Flux fields
# ============================================================


def _window_tuple(window, I: int) -> Tuple[float, ...]:
    values = np.atleast_1d(np.asarray(window, dtype=float))
    if values.size == 1:
        values = np.full(I, float(values[0]))
    if values.shape != (I,) or np.any(values <= 0):
        raise ValueError(f"window needs {I} positive upper bounds")
    return tuple(float(x) for x in values)


def _normalized_monomials(sys: RreSystem, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = points / sys.c_star
    a = np.prod(np.power(x[:, None, :], sys.net.alpha[None, :, :]), axis=2)
    b = np.prod(np.power(x[:, None, :], sys.net.beta[None, :, :]), axis=2)
    return a, b


def _weighted_inverse(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Σ_i weights[r, i]/c_i for every point and reaction, shape (M, R)."""
    return (1.0 / points) @ weights.T.astype(float)


def onsager_weights(sys: RreSystem, c) -> np.ndarray:
    """κ_*^r Λ(a_r, b_r), shape (M, R)."""
    a, b = _normalized_monomials(sys, _as_points(c, sys.net.I))
    return sys.kappa_star * np.asarray(log_mean(a, b))


def cle_weights(sys: RreSystem, c) -> np.ndarray:
    """κ_*^r (a_r + b_r)/2, the arithmetic-mean weights of 𝕂̂_CLE."""
    a, b = _normalized_monomials(sys, _as_points(c, sys.net.I))
    return sys.kappa_star * 0.5 * (a + b)


def net_drift(sys: RreSystem, c) -> np.ndarray:
    """κ_*^r (a_r − b_r) = k_fw c^α − k_bw c^β."""
    a, b = _normalized_monomials(sys, _as_points(c, sys.net.I))
    return sys.kappa_star * (a - b)


def refined_drift_correction(sys: RreSystem, c, V: float) -> np.ndarray:
    """Per-reaction 𝐀_V coefficient κΛ(a,b)·½Σγ_i/(Vc_i + 1/6)."""
    points = _as_points(c, sys.net.I)
    shifted = 0.5 * (1.0 / (V * points + STIRLING_SHIFT)) @ sys.net.W.T.astype(float)
    return onsager_weights(sys, points) * shifted


def drift_correction_b0(sys: RreSystem, c) -> np.ndarray:
    """b̂_0 = Λ_0·½Σγ_i/c_i − ½(k_fw c^α − k_bw c^β)Σα_iβ_i/c_i."""
    points = _as_points(c, sys.net.I)
    if np.any(points <= 0):
        raise ValueError("b̂_0 requires c > 0")
    half_gamma = 0.5 * _weighted_inverse(points, sys.net.W)
    cross = _weighted_inverse(points, sys.net.alpha * sys.net.beta)
    return onsager_weights(sys, points) * half_gamma - 0.5 * net_drift(sys, points) * cross


def corrected_fields(
    sys: RreSystem,
    c,
    V: float,
    weights: Optional[np.ndarray] = None,
    correction: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fields of div((1/V)𝕄∇ρ + ρ𝐑 + (1/V)ρ𝐁) with 𝕄 = Σ weights γ⊗γ, 𝐁 = Σ correction γ.

    Defaults are 𝕂̂_CLE and b̂_0; passing the Onsager weights and V times the 𝐀_V
    coefficient reproduces the simple_corrected fields.
    """
    points = _as_points(c, sys.net.I)
    weights = cle_weights(sys, points) if weights is None else np.asarray(weights, dtype=float)
    correction = drift_correction_b0(sys, points) if correction is None else np.asarray(correction, dtype=float)
    return weights / V, net_drift(sys, points) + correction / V


def flux_fields(sys: RreSystem, c, V: float, variant: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-reaction diffusion d_r and drift f_r of an FPE variant.

    Args:
        sys: RRE system with detailed balance
        c: Points, shape (M, I) or (I,), strictly positive
        V: Volume
        variant: One of VARIANTS

    Returns:
        (d, f), each of shape (M, R)
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown FPE variant {variant!r}; expected one of {VARIANTS}")
    points = _as_points(c, sys.net.I)
    if variant == "simple":
        return onsager_weights(sys, points) / V, net_drift(sys, points)
    if variant == "simple_corrected":
        return (
            onsager_weights(sys, points) / V,
            net_drift(sys, points) + refined_drift_correction(sys, points, V),
        )
    if variant == "cle":
        a, b = _normalized_monomials(sys, points)
        kappa = sys.kappa_star
        ito = 0.5 * kappa * (
            a * _weighted_inverse(points, sys.net.W * sys.net.alpha)
            + b * _weighted_inverse(points, sys.net.W * sys.net.beta)
        )
        return cle_weights(sys, points) / V, net_drift(sys, points) + ito / V
    if variant == "corrected":
        return corrected_fields(sys, points, V)

    a, b = _normalized_monomials(sys, points)
    root = sys.kappa_star * np.sqrt(a * b)
    zeta = np.log(a) - np.log(b)
    return root * np.asarray(cosh_star_second(-zeta)) / V, root * np.asarray(cosh_star_prime(zeta))


@dataclass(frozen=True)
class DriftDiffusionFields:
    """Fields of one variant at volume V, in per-reaction and matrix form."""

    sys: RreSystem
    V: float
    variant: str

    def coefficients(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return flux_fields(self.sys, points, self.V, self.variant)

    def diffusion_matrix(self, c) -> np.ndarray:
        """Σ_r d_r γ^r⊗γ^r at one point."""
        d, _ = self.coefficients(np.asarray(c, dtype=float))
        W = self.sys.net.W.astype(float)
        return W.T @ (d[0][:, None] * W)

    def drift(self, c) -> np.ndarray:
        """Σ_r f_r γ^r at one point."""
        _, f = self.coefficients(np.asarray(c, dtype=float))
        return self.sys.net.W.T.astype(float) @ f[0]


def cle_diffusion_matrix(sys: RreSystem, c) -> np.ndarray:
    """𝕂̂_CLE(c) = Σ κ_*^r ½(a_r + b_r) γ^r⊗γ^r."""
    W = sys.net.W.astype(float)
    return W.T @ (cle_weights(sys, c)[0][:, None] * W)


def cosh_corrected_operator(sys: RreSystem, V: float) -> DriftDiffusionFields:
    """
    Leading-order fields of the cosh-Liouville expansion.

    Drift κ√(ab)C*'(log a/b) = κ(a − b) and diffusion κ√(ab)C*''(log b/a)/V =
    κ(a + b)/(2V), so the matrix forms are 𝐑 and 𝕂̂_CLE/V.
    """
    sys.require_detailed_balance()
    return DriftDiffusionFields(sys, float(V), "cosh_corrected")


# ============================================================
# Discrete models
# ============================================================


def gradient_potential(sys: RreSystem, V: float, variant: str):
    """ψ = VE (+ ½Σ log(Vc_i + 1/6) for simple_corrected) on an array of points."""
    c_star = sys.c_star

    def psi(points: np.ndarray) -> np.ndarray:
        values = V * np.sum(c_star * lambda_B(points / c_star), axis=1)
        if variant == "simple_corrected":
            values = values + 0.5 * np.sum(np.log(V * points + STIRLING_SHIFT), axis=1)
        return values

    return psi


@dataclass(frozen=True, eq=False)
class FpeModel:
    """Finite-volume discretization of one FPE variant on a cell-centred grid."""

    sys: RreSystem
    V: float
    variant: str
    grid: UniformGrid
    operator: FittedOperator
    fields: DriftDiffusionFields
    potential_values: Optional[np.ndarray] = None

    @property
    def generator(self):
        return self.operator.generator

    @cached_property
    def stationary_log_density(self) -> np.ndarray:
        return stationary_log_density(self.operator, self.potential_values)

    def stationary_density(self) -> np.ndarray:
        return np.exp(self.stationary_log_density)

    def stationarity_residual(self, rho=None) -> float:
        """‖Gρ‖_∞ / ‖|G|ρ‖_∞ (stationary density by default)."""
        rho = self.stationary_density() if rho is None else np.asarray(rho, dtype=float)
        scale = float(np.max(abs(self.generator) @ rho))
        return float(np.max(np.abs(self.generator @ rho))) / scale if scale > 0 else 0.0

    def mass(self, rho) -> float:
        return float(np.sum(rho) * self.grid.cell_volume)

    def mean(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        return (rho @ self.grid.nodes) * self.grid.cell_volume / self.mass(rho)

    def variance(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        centred = self.grid.nodes - self.mean(rho)
        return (rho @ centred**2) * self.grid.cell_volume / self.mass(rho)

    def as_grid_density(self, rho) -> GridDensity:
        return GridDensity(self.grid.edges(), np.asarray(rho, dtype=float).reshape(self.grid.shape))


def build_fpe(sys: RreSystem, V: float, variant: str, window, cells) -> FpeModel:
    """
    Discretize an FPE variant with no-flux boundaries on ∏[0, window_i].

    Gradient-form variants use the exact potential difference in the fitted flux, so
    their equilibrium is stationary to rounding; the others integrate f_r/d_r along
    each edge.

    Args:
        sys: RRE system with detailed balance
        V: Volume (≥ 1)
        variant: One of VARIANTS
        window: Upper bound(s) of the concentration window
        cells: Cells per axis

    Returns:
        FpeModel
    """
    sys.require_detailed_balance()
    if variant not in VARIANTS:
        raise ValueError(f"unknown FPE variant {variant!r}; expected one of {VARIANTS}")
    I = sys.net.I
    if I > 2:
        raise ValueError(f"PDE path supports at most two species, network has {I}")
    if V < 1:
        raise ValueError("volume V must be at least 1")
    upper = _window_tuple(window, I)
    cell_counts = np.atleast_1d(np.asarray(cells, dtype=int))
    if cell_counts.size == 1:
        cell_counts = np.full(I, int(cell_counts[0]))
    grid = UniformGrid((0.0,) * I, upper, tuple(cell_counts))

    fields = DriftDiffusionFields(sys, float(V), variant)
    potential = gradient_potential(sys, V, variant) if variant in GRADIENT_VARIANTS else None
    operator = assemble_fitted_generator(grid, sys.net.W, fields.coefficients, potential=potential)
    potential_values = None if potential is None else potential(grid.nodes)
    logger.info("Built %s FPE: V=%g, %d nodes, %d edges", variant, V, grid.size, len(operator.edge_p))
    return FpeModel(sys, float(V), variant, grid, operator, fields, potential_values)


@dataclass
class FpeSolution:
    """Node densities at the step times with mass and mean diagnostics."""

    times: np.ndarray
    densities: np.ndarray
    mass: np.ndarray
    means: np.ndarray


def solve_fpe(model: FpeModel, rho0, t_end: float, dt: float) -> FpeSolution:
    """Backward Euler with one cached sparse LU factorization."""
    rho = np.asarray(rho0, dtype=float).ravel().copy()
    if rho.shape != (model.grid.size,):
        raise ValueError(f"rho0 must have {model.grid.size} node values")
    if np.any(rho < 0):
        raise ValueError("rho0 must be nonnegative")
    times = time_grid(t_end, dt)
    stepper = BackwardEuler(model.generator, float(times[1] - times[0]) if len(times) > 1 else dt)
    out = np.empty((len(times), rho.size))
    out[0] = rho
    for k in range(1, len(times)):
        rho = stepper.step(rho)
        out[k] = rho
    mass = out.sum(axis=1) * model.grid.cell_volume
    means = (out @ model.grid.nodes) * model.grid.cell_volume / mass[:, None]
    logger.debug("solve_fpe: %d steps, mass drift %.3e", len(times) - 1, np.max(np.abs(mass - mass[0])))
    return FpeSolution(times, out, mass, means)


def tail_log_slopes(model: FpeModel, at: Sequence[float], log_rho=None) -> np.ndarray:
    """Central-difference slopes of log ρ at the nodes nearest to `at` (one-species grids)."""
    if model.grid.I != 1:
        raise ValueError("tail slopes are defined for one-species grids")
    log_rho = model.stationary_log_density if log_rho is None else np.asarray(log_rho, dtype=float)
    nodes = model.grid.nodes[:, 0]
    h = model.grid.spacing[0]
    slopes = []
    for c in at:
        k = int(np.clip(np.argmin(np.abs(nodes - c)), 1, len(nodes) - 2))
        slopes.append((log_rho[k + 1] - log_rho[k - 1]) / (2.0 * h))
    return np.asarray(slopes)


# ============================================================
# Higher-order coefficients
# ============================================================


@dataclass
class HigherOrderCoefficients:
    """Per-reaction coefficients of the higher-order gradient model at one point."""

    c: np.ndarray
    V: float
    theta1: float
    theta2: float
    a_hat: np.ndarray
    b_hat0: np.ndarray
    b_hat1: np.ndarray
    Lambda0: np.ndarray
    Upsilon0: np.ndarray
    Upsilon1: np.ndarray
    Upsilon2: np.ndarray
    Upsilon3: np.ndarray
    grad_gamma: np.ndarray
    Lambda_Upsilon: np.ndarray
    a_hat0: np.ndarray
    a_hat1: np.ndarray
    a_hat2: np.ndarray
    a_hat3: np.ndarray
    arithmetic_mean: np.ndarray
    upsilon2_enlargement: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def coercive(self, rtol: float = 1e-12) -> bool:
        """Λ_0 + Υ_0/V + Υ_2/V² ≥ θ_2Λ_0 and 4θ_1Λ_0Υ_3 ≥ Υ_1²."""
        first = self.Lambda_Upsilon >= self.theta2 * self.Lambda0 * (1.0 - rtol)
        second = 4.0 * self.theta1 * self.Lambda0 * self.Upsilon3 >= self.Upsilon1**2 * (1.0 - rtol)
        return bool(np.all(first) and np.all(second))

    def monotone(self, rtol: float = 1e-12) -> bool:
        """â_1 + 2â_2 q + 3â_3 q² ≥ 0 for all q."""
        ok = self.a_hat3 > 0
        ok &= self.a_hat2**2 <= 3.0 * self.a_hat1 * self.a_hat3 * (1.0 + rtol)
        flat = (self.a_hat3 == 0) & (self.a_hat2 == 0) & (self.a_hat1 >= 0)
        return bool(np.all(ok | flat))

    def flux(self, p: np.ndarray) -> np.ndarray:
        """â_0 + â_1 p/V + â_2 p²/V² + â_3 p³/V³ per reaction."""
        p = np.asarray(p, dtype=float)
        V = self.V
        return self.a_hat0 + self.a_hat1 * p / V + self.a_hat2 * p**2 / V**2 + self.a_hat3 * p**3 / V**3


def _upsilon1(Lambda0: np.ndarray, af: np.ndarray, ab: np.ndarray) -> np.ndarray:
    """Λ_0(a_f + a_b − 2Λ_0)/(2(a_f − a_b)), series Λ_0(u/6 + 2u³/45) near the diagonal."""
    u = (af - ab) / (af + ab)
    near = np.abs(u) < UPSILON1_SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = Lambda0 * (af + ab - 2.0 * Lambda0) / (2.0 * (af - ab))
    series = Lambda0 * (u / 6.0 + 2.0 * u**3 / 45.0)
    return np.where(near, series, exact)


def higher_order_coefficients(
    sys: RreSystem,
    c,
    V: float,
    theta1: float = DEFAULT_THETA1,
    theta2: float = DEFAULT_THETA2,
) -> HigherOrderCoefficients:
    """
    Evaluate Υ_0..Υ_3, Λ_Υ and â_0..â_3 at c and certify coercivity and monotonicity.

    When â_2² > 3â_1â_3 the coefficient Υ_2 is enlarged just enough to restore
    monotonicity of the cubic flux map; enlargements are returned per reaction.

    Raises:
        ValueError: c not strictly positive or θ outside 0 < θ1 < θ2 < 1
        MonotonicityError: â_3 = 0 with â_2 ≠ 0
    """
    sys.require_detailed_balance()
    if not 0.0 < theta1 < theta2 < 1.0:
        raise ValueError(f"need 0 < theta1 < theta2 < 1, got {theta1}, {theta2}")
    c = np.asarray(c, dtype=float)
    if c.shape != (sys.net.I,) or np.any(c <= 0):
        raise ValueError("higher-order coefficients need a strictly positive state")
    net = sys.net
    point = c[None, :]

    af = net.k_fw * np.prod(c ** net.alpha, axis=1)
    ab = net.k_bw * np.prod(c ** net.beta, axis=1)
    Lambda0 = np.asarray(log_mean(af, ab), dtype=float).reshape(-1)
    cross = _weighted_inverse(point, net.alpha * net.beta)[0]
    log_ratio = np.log(af) - np.log(ab)

    a_hat = af - ab
    Upsilon0 = -0.5 * Lambda0 * cross
    Upsilon1 = _upsilon1(Lambda0, af, ab)
    Upsilon2 = Lambda0 * cross**2 / (16.0 * (1.0 - theta2))
    Upsilon3 = Upsilon1**2 / (4.0 * theta1 * Lambda0)
    b_hat0 = drift_correction_b0(sys, point)[0]
    b_hat1 = Lambda0 + Upsilon1 * log_ratio

    grad_gamma = log_ratio + 0.5 * (net.W.astype(float) @ (1.0 / (V * c + STIRLING_SHIFT)))
    enlargement = np.zeros(net.R)

    def assemble(upsilon2):
        lam = Lambda0 + Upsilon0 / V + upsilon2 / V**2
        return lam, lam * grad_gamma, lam + Upsilon1 * grad_gamma, Upsilon1 + Upsilon3 * grad_gamma

    Lambda_Upsilon, a0, a1, a2 = assemble(Upsilon2)
    a3 = Upsilon3
    for r in range(net.R):
        if a3[r] > 0:
            deficit = a2[r] ** 2 / (3.0 * a3[r]) - a1[r]
        elif a2[r] != 0:
            raise MonotonicityError(f"reaction {r}: cubic coefficient vanishes with â_2 ≠ 0", c)
        else:
            deficit = -a1[r]
        if deficit > 0:
            enlargement[r] = V**2 * deficit * (1.0 + 1e-12) + np.finfo(float).tiny
    if np.any(enlargement > 0):
        logger.info("Enlarged Upsilon_2 for monotonicity at c=%s: %s", c, enlargement)
        Upsilon2 = Upsilon2 + enlargement
        Lambda_Upsilon, a0, a1, a2 = assemble(Upsilon2)

    return HigherOrderCoefficients(
        c=c,
        V=float(V),
        theta1=theta1,
        theta2=theta2,
        a_hat=a_hat,
        b_hat0=b_hat0,
        b_hat1=b_hat1,
        Lambda0=Lambda0,
        Upsilon0=Upsilon0,
        Upsilon1=Upsilon1,
        Upsilon2=Upsilon2,
        Upsilon3=Upsilon3,
        grad_gamma=grad_gamma,
        Lambda_Upsilon=Lambda_Upsilon,
        a_hat0=a0,
        a_hat1=a1,
        a_hat2=a2,
        a_hat3=a3,
        arithmetic_mean=0.5 * (af + ab),
        upsilon2_enlargement=enlargement,
    )


# ============================================================
# Cosh-Liouville dissipation
# ============================================================


def cosh_liouville_dissipation(rho: Measure, sys: RreSystem, xi_gradient=None) -> float:
    """
    Ψ*(ϱ, ξ) = ∫ Σ κ_*^r √(a_r b_r) C*(γ^r·∇ξ) dϱ, with ξ = −E by default.

    Its derivative in ξ at −E is the Liouville drift: ∂_ε Ψ*(ϱ, −E + εφ)|_0 = −∫𝐑·∇φ dϱ.
    """
    sys.require_detailed_balance()
    W = sys.net.W.astype(float)

    def density(points: np.ndarray) -> np.ndarray:
        a, b = _normalized_monomials(sys, points)
        if xi_gradient is None:
            grads = -np.log(points / sys.c_star)
        else:
            grads = np.atleast_2d(np.asarray(xi_gradient(points), dtype=float))
        return np.sum(sys.kappa_star * np.sqrt(a * b) * np.asarray(cosh_star(grads @ W.T)), axis=1)

    if isinstance(rho, ParticleEnsemble):
        return float(rho.weights @ density(rho.points))
    nodes, weights = _cell_quadrature(rho)
    return float(weights @ density(nodes))


# ============================================================
# Gaussian moment closures
# ============================================================


@dataclass
class MomentTrajectory:
    """Mean a(t) and scaled covariance A(t) ≈ V·Cov of a Gaussian closure."""

    kind: str
    times: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def variances(self, V: float) -> np.ndarray:
        return np.diagonal(self.covariances, axis1=1, axis2=2) / V


def _div_onsager(sys: RreSystem, a: np.ndarray) -> np.ndarray:
    """div 𝕂(a) = Σ_r γ^r κ_*^r [∂_1Λ γ·∇a_r + ∂_2Λ γ·∇b_r]."""
    point = a[None, :]
    an, bn = _normalized_monomials(sys, point)
    da, db = log_mean_partials(an[0], bn[0])
    grad_a = an[0] * _weighted_inverse(point, sys.net.W * sys.net.alpha)[0]
    grad_b = bn[0] * _weighted_inverse(point, sys.net.W * sys.net.beta)[0]
    slope = sys.kappa_star * (np.asarray(da) * grad_a + np.asarray(db) * grad_b)
    return sys.net.W.T.astype(float) @ slope


def gaussian_moment_flow(
    sys: RreSystem,
    kind: str,
    a0,
    A0,
    t_end: float,
    V: Optional[float] = None,
    t_eval: Optional[Sequence[float]] = None,
    tol: float = 1e-11,
) -> MomentTrajectory:
    """
    Integrate ȧ = −𝐑(a) [+ (1/V)div 𝕂(a)], Ȧ = −DR A − A DRᵀ + 2𝕄(a).

    kind="cle" uses 𝕄 = 𝕂̂_CLE; kind="fp" uses 𝕄 = 𝕂 and the Fickian drift
    correction, which needs V.

    Raises:
        CovarianceError: A leaves the positive semidefinite cone
    """
    sys.require_detailed_balance()
    if kind not in ("cle", "fp"):
        raise ValueError(f"unknown closure kind {kind!r}")
    if kind == "fp" and V is None:
        raise ValueError("the FP closure needs the volume V")
    I = sys.net.I
    a0 = np.asarray(a0, dtype=float).reshape(I)
    A0 = np.asarray(A0, dtype=float).reshape(I, I)
    W = sys.net.W.astype(float)

    def mobility(a):
        weights = cle_weights(sys, a) if kind == "cle" else onsager_weights(sys, a)
        return W.T @ (weights[0][:, None] * W)

    def rhs(_t, y):
        a = y[:I]
        A = y[I:].reshape(I, I)
        A = 0.5 * (A + A.T)
        DR = rate_jacobian(sys, a)
        da = -rate_vector(sys, a)
        if kind == "fp":
            da = da + _div_onsager(sys, a) / V
        dA = -DR @ A - A @ DR.T + 2.0 * mobility(a)
        return np.concatenate([da, dA.ravel()])

    times = np.linspace(0.0, t_end, 301) if t_eval is None else np.asarray(t_eval, dtype=float)
    solution = solve_ivp(
        rhs,
        (0.0, t_end),
        np.concatenate([a0, A0.ravel()]),
        method="DOP853",
        t_eval=times,
        rtol=tol,
        atol=tol * 1e-2,
    )
    if not solution.success:
        raise CovarianceError(f"moment integration failed: {solution.message}", float(solution.t[-1]))
    means = solution.y[:I].T
    covariances = solution.y[I:].T.reshape(-1, I, I)
    covariances = 0.5 * (covariances + np.transpose(covariances, (0, 2, 1)))
    for t, A in zip(solution.t, covariances):
        lowest = np.linalg.eigvalsh(A)[0]
        if lowest < -1e-10 * max(1.0, np.abs(A).max()):
            raise CovarianceError(f"covariance eigenvalue {lowest:.3e} < 0", float(t))
    return MomentTrajectory(kind, solution.t, means, covariances)


# ============================================================
# Birth–death comparison
# ============================================================


def birth_death_network(a_rate: float, b_rate: float) -> ReactionNetwork:
    """∅ ⇌ X with birth rate a and death rate b, written X <-> 0."""
    if not (a_rate > 0 and b_rate > 0):
        raise ValueError("birth and death rates must be positive")
    return ReactionNetwork.from_arrays(["X"], [[1]], [[0]], [b_rate], [a_rate])


def cle_equilibrium_potential(a_rate: float, b_rate: float, V: float, c) -> np.ndarray:
    """
    VẼ(c) for the CLE of ∅ ⇌ X, normalized to vanish at c_* = a/b.

    VẼ = V[2(c − c_*) − ((4a − b/V)/b) log((a + bc)/(2a))]; for a = b = 1 this is
    V[2c − 2 − (4 − 1/V) log((1 + c)/2)].
    """
    c = np.asarray(c, dtype=float)
    c_star = a_rate / b_rate
    slope = (4.0 * a_rate - b_rate / V) / b_rate
    return V * (2.0 * (c - c_star) - slope * np.log((a_rate + b_rate * c) / (2.0 * a_rate)))


class ComparisonSummary(BaseModel):
    """JSON summary of the birth–death model comparison."""

    a_rate: float
    b_rate: float
    V: float
    c0: float
    tail_points: List[float]
    tail_slopes: Dict[str, List[float]]
    max_relative_mean_error: Dict[str, float]
    max_variance_error: Dict[str, float]
    cle_equilibrium_sup_error: float
    simple_stationarity_residual: float
    log_mean_relative_gap: float


@dataclass
class ComparisonReport:
    summary: ComparisonSummary
    rows: List[Tuple[float, str, float, float]]

    def header(self) -> List[str]:
        return ["t", "model", "mean", "variance"]


def log_mean_relative_gap(lower: float = 1.0 / 3.0, upper: float = 3.0, num: int = 2001) -> float:
    """max |Λ(1, c) − (1 + c)/2| / ((1 + c)/2) over [lower, upper]."""
    c = np.linspace(lower, upper, num)
    arithmetic = 0.5 * (1.0 + c)
    return float(np.max(np.abs(np.asarray(log_mean(1.0, c)) - arithmetic) / arithmetic))


def compare_birth_death_models(
    a_rate: float,
    b_rate: float,
    V: float,
    t_grid: Sequence[float],
    c0: float = 2.0,
    window: Optional[float] = None,
    cells: int = 1000,
) -> ComparisonReport:
    """
    Run CME, Liouville, FP and CLE models of ∅ ⇌ X side by side.

    Moments come from the exact CME solve, the RRE characteristic (Liouville, zero
    variance) and the two Gaussian closures; equilibria from the simple and CLE
    finite-volume schemes.
    """
    if c0 <= 0:
        raise ValueError("initial concentration must be positive")
    times = np.asarray(t_grid, dtype=float)
    net = birth_death_network(a_rate, b_rate)
    sys = RreSystem.from_network(net)
    c_star = a_rate / b_rate
    window = float(window) if window is not None else 10.0 * max(c_star, c0)

    box = choose_box([max(c0, c_star)], V)
    cme = assemble_generator(net, box, sys.db)
    cme_solution = solve_cme(cme, poisson_state(box, [c0]), times)
    cme_moments = [moments(cme, u) for u in cme_solution.distributions]
    models: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
        "cme": (
            np.array([m[0][0] for m in cme_moments]),
            np.array([m[1][0, 0] for m in cme_moments]),
        )
    }

    lio = integrate_rre(sys, [c0], float(times[-1]), tol=1e-12, t_eval=times)
    models["liouville"] = (lio.states[:, 0], np.zeros(len(times)))
    for kind, name in (("fp", "fp"), ("cle", "fp_cle")):
        closure = gaussian_moment_flow(sys, kind, [c0], [[c0]], float(times[-1]), V=V, t_eval=times)
        models[name] = (closure.means[:, 0], closure.variances(V)[:, 0])

    rows: List[Tuple[float, str, float, float]] = []
    for name, (mean, variance) in models.items():
        rows.extend((float(t), name, float(m), float(v)) for t, m, v in zip(times, mean, variance))

    cme_mean, cme_var = models["cme"]
    mean_errors = {
        name: float(np.max(np.abs(mean - cme_mean) / np.abs(cme_mean)))
        for name, (mean, _) in models.items()
        if name != "cme"
    }
    variance_errors = {
        name: float(np.max(np.abs(var - cme_var))) for name, (_, var) in models.items() if name != "cme"
    }

    simple = build_fpe(sys, V, "simple", window, cells)
    cle = build_fpe(sys, V, "cle", window, cells)
    nodes = cle.grid.nodes[:, 0]
    exact_log = -cle_equilibrium_potential(a_rate, b_rate, V, nodes)
    exact = np.exp(exact_log - exact_log.max())
    exact = cle.grid.normalize(exact)
    sup_error = float(np.max(np.abs(cle.stationary_density() - exact)))

    tail_points = [0.8 * window, 0.9 * window]
    summary = ComparisonSummary(
        a_rate=a_rate,
        b_rate=b_rate,
        V=V,
        c0=c0,
        tail_points=tail_points,
        tail_slopes={
            "fp": tail_log_slopes(simple, tail_points).tolist(),
            "fp_cle": tail_log_slopes(cle, tail_points).tolist(),
        },
        max_relative_mean_error=mean_errors,
        max_variance_error=variance_errors,
        cle_equilibrium_sup_error=sup_error,
        simple_stationarity_residual=simple.stationarity_residual(),
        log_mean_relative_gap=log_mean_relative_gap(),
    )
    logger.info(
        "Model comparison V=%g: CLE equilibrium sup error %.3e, simple residual %.3e",
        V,
        sup_error,
        summary.simple_stationarity_residual,
    )
    return ComparisonReport(summary, rows)
