"""
Model reduction through gradient structures and three hybrid models.

- `reduce_dual_potential`: finite-dimensional check that the reduced dual
  potential inf{Ψ*(ξ) | Aᵀξ = η} equals the Legendre dual of Ψ(A·).
- `cme_to_rre_reduction`: the Poisson embedding Φ_V pulls the CME structure back
  to the RRE one.
- FP–RR: Fokker–Planck in the first J species, mean-field RRE in the rest.
- CM–RR: one stochastic species X1 ⇌ βX2 with X2 deterministic.
- Merged: Poisson birth–death below N particles, refined FPE above N/V.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import quad, solve_ivp
from scipy.linalg import cho_factor, cho_solve, pinvh
from scipy.special import xlogy
from scipy.stats import poisson

from src.cme import (
    TruncationError,
    assemble_generator,
    choose_box,
    cme_entropy_and_quadratic_form,
    lattice_entropy,
    poisson_state,
    poisson_tail_mass,
)
from src.fpe import log_refined_weight, birth_death_network, flux_fields, gradient_potential
from src.kernels import lambda_B, log_mean
from src.rre import IntegrationError, RreSystem, entropy, onsager_matrix
from src.utils.grids import (
    BackwardEuler,
    UniformGrid,
    assemble_fitted_generator,
    discretized_gaussian,
    time_grid,
)

logger = logging.getLogger(__name__)

FEASIBILITY_RTOL = 1e-9
MASS_TOLERANCE = 1e-10
# Relative size of negative node values accepted as LU round-off
ROUNDOFF_NEGATIVE = 1e-12


# ============================================================
# Finite-dimensional reduction
# ============================================================


@dataclass(frozen=True)
class ReductionProblem:
    """Quadratic primal Ψ(v) = ½v·Mv on the full space, reduced by v = Ay."""

    M: np.ndarray
    A: np.ndarray
    eta: np.ndarray
    factor: Tuple[np.ndarray, bool] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=1e-12, atol=1e-14):
            raise ValueError("M must be symmetric")
        if A.shape[0] != M.shape[0] or eta.shape != (A.shape[1],):
            raise ValueError("M, A and eta have inconsistent shapes")
        # raises LinAlgError unless M is positive definite
        object.__setattr__(self, "factor", cho_factor(M))
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "eta", eta)


def _feasible(residual: np.ndarray, eta: np.ndarray) -> bool:
    return float(np.linalg.norm(residual)) <= FEASIBILITY_RTOL * (1.0 + float(np.linalg.norm(eta)))


def reduce_dual_potential(prob: ReductionProblem) -> Tuple[float, float]:
    """
    Evaluate the reduced dual potential two ways.

    constrained_min = inf{½ξ·M⁻¹ξ | Aᵀξ = η} from the KKT saddle system;
    pullback_dual = sup_y {η·y − ½(Ay)·M(Ay)} = ½η·(AᵀMA)⁺η.
    Both are +∞ when η ∉ Ran Aᵀ.

    Returns:
        (constrained_min, pullback_dual)
    """
    M, A, eta = prob.M, prob.A, prob.eta
    n, m = A.shape
    M_inv = cho_solve(prob.factor, np.eye(n))

    kkt = np.block([[M_inv, A], [A.T, np.zeros((m, m))]])
    rhs = np.concatenate([np.zeros(n), eta])
    solution, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    xi = solution[:n]
    if _feasible(A.T @ xi - eta, eta):
        constrained = 0.5 * float(xi @ M_inv @ xi)
    else:
        constrained = float("inf")

    reduced = A.T @ M @ A
    y = pinvh(reduced) @ eta
    if _feasible(reduced @ y - eta, eta):
        pullback = 0.5 * float(eta @ y)
    else:
        pullback = float("inf")
    return constrained, pullback


@dataclass
class CmeReduction:
    """CME dual potential at Φ_V(c) against ½ζ·𝕂(c)ζ, with adjoint and energy checks."""

    reduced_value: float
    target: float
    gap: float
    tail_mass: float
    adjoint_image: np.ndarray
    energy_pullback: float
    energy_target: float


def cme_to_rre_reduction(sys: RreSystem, c, zeta, V: float, tail: float = 1e-12) -> CmeReduction:
    """
    Pull the CME gradient structure back through the Poisson embedding Φ_V.

    Evaluates Ψ*_V(Φ_V(c), M_V(c)ζ) with (M_V(c)ζ)_n = ζ·n/V, the adjoint image
    DΦ_V(c)*M_V(c)ζ (= ζ) and 𝓔_V(Φ_V(c)) (= E(c)).

    Raises:
        TruncationError: Poisson tail beyond the box above 1e-10
    """
    sys.require_detailed_balance()
    c = np.asarray(c, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if np.any(c <= 0):
        raise ValueError("reduction needs c > 0")
    box = choose_box(np.maximum(c, sys.c_star), V, tail)
    tail_mass = poisson_tail_mass(c, box)
    if tail_mass > 1e-10:
        raise TruncationError(f"Poisson tail {tail_mass:.3e} beyond box {box.n_max}")
    cme = assemble_generator(sys.net, box, sys.db)
    u = poisson_state(box, c)
    structure = cme_entropy_and_quadratic_form(cme, u)

    states = box.states.astype(float)
    mu = states @ zeta / V
    reduced = structure.psi_star_quadratic(mu)
    target = 0.5 * float(zeta @ onsager_matrix(sys, c) @ zeta)

    # ∂u_n/∂c_i = u_n (n_i/c_i − V)
    adjoint = ((u * mu) @ (states / c - V)).astype(float)
    return CmeReduction(
        reduced_value=reduced,
        target=target,
        gap=abs(reduced - target),
        tail_mass=tail_mass,
        adjoint_image=adjoint,
        energy_pullback=lattice_entropy(cme, u),
        energy_target=entropy(sys, c),
    )


# ============================================================
# FP–RR hybrid
# ============================================================


def auxiliary_fp_rr_functions(a_hat: float, a_star: float, V: float) -> Tuple[float, float]:
    """
    A(Vâ) and ê_V(â, a^*) of the exact FP–RR energy.

    Z(v) = ∫e^{−vλ_B(z)}dz, A(v) = ∫z e^{−vλ_B(z)}dz / Z(v) and
    ê_V = A(Vâ)â log(â/a^*) − â + a^* − log(âZ(Vâ))/V.

    Returns:
        (A(Vâ), ê_V(â, a^*))
    """
    if not (a_hat > 0 and a_star > 0 and V > 0):
        raise ValueError("auxiliary functions need â, a^*, V > 0")
    v = V * a_hat
    knee = 1.0 + 30.0 / np.sqrt(v)
    pieces = ((0.0, 1.0), (1.0, knee), (knee, np.inf))

    def integrate(weight):
        total = 0.0
        for lo, hi in pieces:
            value, _ = quad(lambda z: weight(z) * np.exp(-v * lambda_B(z)), lo, hi, limit=200)
            total += value
        return total

    Z = integrate(lambda z: 1.0)
    A = integrate(lambda z: z) / Z
    e_hat = A * a_hat * np.log(a_hat / a_star) - a_hat + a_star - np.log(a_hat * Z) / V
    return float(A), float(e_hat)


@dataclass
class FpRrState:
    """Density over the first J species on `grid`, mean-field concentrations c_m for the rest."""

    grid: UniformGrid
    rho: np.ndarray
    c_m: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).ravel()
        self.c_m = np.atleast_1d(np.asarray(self.c_m, dtype=float))
        if self.rho.shape != (self.grid.size,):
            raise ValueError(f"rho must have {self.grid.size} node values")
        if np.any(self.rho < 0) or np.any(self.c_m < 0):
            raise ValueError("hybrid state must be nonnegative")
        if abs(self.mass - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"rho must be normalized, mass is {self.mass:.12g}")

    @property
    def J(self) -> int:
        return self.grid.I

    @property
    def mass(self) -> float:
        return float(self.rho.sum() * self.grid.cell_volume)

    def mean_s(self) -> np.ndarray:
        return (self.rho @ self.grid.nodes) * self.grid.cell_volume


def fp_rr_initial_state(sys: RreSystem, J: int, c0, V: float, window, cells) -> FpRrState:
    """Gaussian of variance c_s/V around c0[:J] and ĉ_m = c0[J:]."""
    c0 = np.asarray(c0, dtype=float)
    if not 1 <= J <= min(2, sys.net.I - 1):
        raise ValueError(f"partition J={J} must satisfy 1 ≤ J ≤ min(2, I − 1)")
    upper = np.broadcast_to(np.asarray(window, dtype=float), (J,))
    counts = np.broadcast_to(np.asarray(cells, dtype=int), (J,))
    grid = UniformGrid((0.0,) * J, tuple(upper), tuple(counts))
    rho = discretized_gaussian(grid, c0[:J], c0[:J] / V)
    return FpRrState(grid, rho, c0[J:])


def fp_rr_energy(sys: RreSystem, state: FpRrState, V: float) -> float:
    """𝔈 = ∫((1/V)ρ log ρ + ρE_s) dc_s + E_m(ĉ_m)."""
    J = state.J
    c_star = sys.c_star
    nodes = state.grid.nodes
    E_s = np.sum(c_star[:J] * lambda_B(nodes / c_star[:J]), axis=1)
    vol = state.grid.cell_volume
    E_m = float(np.sum(c_star[J:] * lambda_B(state.c_m / c_star[J:])))
    return float(vol * np.sum(xlogy(state.rho, state.rho) / V + state.rho * E_s)) + E_m


def _fp_rr_operator(sys: RreSystem, grid: UniformGrid, c_m: np.ndarray, V: float):
    J = grid.I

    def coefficients(points: np.ndarray):
        full = np.hstack([points, np.broadcast_to(c_m, (len(points), len(c_m)))])
        return flux_fields(sys, full, V, "simple")

    return assemble_fitted_generator(grid, sys.net.W[:, :J], coefficients), coefficients


def fp_rr_step(sys: RreSystem, state: FpRrState, V: float, dt: float) -> FpRrState:
    """
    One step: implicit Euler for ρ with ĉ_m frozen, then ĉ_m from the discrete fluxes.

    The ĉ_m update uses the same edge fluxes as the density step, so ℚ applied to
    (mean of ρ, ĉ_m) is conserved exactly.
    The density is not renormalized: the generator's zero column sums keep its
    mass, and FpRrState refuses a drift beyond MASS_TOLERANCE.
    """
    J = state.J
    W = sys.net.W.astype(float)
    operator, coefficients = _fp_rr_operator(sys, state.grid, state.c_m, V)
    vol = state.grid.cell_volume

    rho = BackwardEuler(operator.generator, dt).step(state.rho)
    floor = ROUNDOFF_NEGATIVE * float(np.max(np.abs(rho)))
    if np.any(rho < -floor):
        raise ValueError(f"density turned negative ({rho.min():.3e}); reduce the time step")
    rho = np.where(rho < 0.0, 0.0, rho)
    fluxes = operator.edge_fluxes(rho)
    rate = np.zeros(sys.net.R)
    np.add.at(rate, operator.edge_r, vol * fluxes)

    internal = ~np.any(sys.net.W[:, :J] != 0, axis=1)
    if np.any(internal):
        full = np.hstack([state.grid.nodes, np.broadcast_to(state.c_m, (state.grid.size, len(state.c_m)))])
        _, f = flux_fields(sys, full, V, "simple")
        rate[internal] = vol * (rho @ f[:, internal])

    c_m = state.c_m - dt * (W[:, J:].T @ rate)
    if np.any(c_m < 0):
        raise ValueError("mean-field concentration turned negative; reduce the time step")
    return FpRrState(state.grid, rho, c_m)


@dataclass
class FpRrSolution:
    times: np.ndarray
    rho: np.ndarray
    c_m: np.ndarray
    mean_s: np.ndarray
    energy: np.ndarray
    mass: np.ndarray

    def header(self, species_names: Sequence[str]) -> List[str]:
        J = self.mean_s.shape[1]
        cols = ["t"] + [f"mean_{name}" for name in species_names[:J]]
        return cols + [f"c_{name}" for name in species_names[J:]] + ["energy", "mass"]

    def table(self) -> np.ndarray:
        return np.column_stack([self.times, self.mean_s, self.c_m, self.energy, self.mass])


def solve_fp_rr(
    sys: RreSystem, J: int, state0: FpRrState, V: float, t_end: float, dt: float = 1e-3
) -> FpRrSolution:
    """Integrate the FP–RR hybrid with `fp_rr_step`."""
    sys.require_detailed_balance()
    if state0.J != J or len(state0.c_m) != sys.net.I - J:
        raise ValueError("state does not match the partition")
    times = time_grid(t_end, dt)
    state = state0
    rho, c_m, mean_s, energy, mass = [], [], [], [], []
    for k, t in enumerate(times):
        if k > 0:
            state = fp_rr_step(sys, state, V, float(t - times[k - 1]))
        rho.append(state.rho)
        c_m.append(state.c_m)
        mean_s.append(state.mean_s())
        energy.append(fp_rr_energy(sys, state, V))
        mass.append(state.mass)
    logger.info("solve_fp_rr: %d steps on %d nodes, V=%g", len(times) - 1, state0.grid.size, V)
    return FpRrSolution(
        times, np.asarray(rho), np.asarray(c_m), np.asarray(mean_s), np.asarray(energy), np.asarray(mass)
    )


# ============================================================
# CM–RR hybrid
# ============================================================


@dataclass
class CmRrState:
    """Distribution v of X1 particles on {0, …, m_max} and the concentration c2 of X2."""

    v: np.ndarray
    c2: float
    beta: int

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.c2 = float(self.c2)
        self.beta = int(self.beta)
        if self.beta < 1:
            raise ValueError("beta must be a positive integer")
        if self.c2 < 0 or np.any(self.v < 0):
            raise ValueError("CM–RR state must be nonnegative")
        if abs(self.v.sum() - 1.0) > MASS_TOLERANCE:
            raise ValueError("v must sum to 1")

    @property
    def m_max(self) -> int:
        return len(self.v) - 1

    def c1(self, V: float) -> float:
        return float(np.arange(len(self.v)) @ self.v) / V


def cm_rr_initial_state(V: float, c1: float, c2: float, beta: int, tail: float = 1e-14) -> CmRrState:
    """Poisson(Vc1) on a support that covers all of βc1 + c2 converted to X1."""
    c1_max = c1 + c2 / beta
    m_max = int(poisson.isf(tail, max(V * c1_max, 1e-12))) + 5
    v = poisson.pmf(np.arange(m_max + 1), V * c1)
    return CmRrState(v / v.sum(), c2, beta)


def _cm_rr_rates(
    v: np.ndarray, c2: float, beta: int, V: float, k_fw: float, k_bw: float
) -> Tuple[np.ndarray, float]:
    m = np.arange(len(v), dtype=float)
    birth = V * k_bw * c2**beta
    out = -(k_fw * m) * v
    out[:-1] -= birth * v[:-1]
    out[1:] += birth * v[:-1]
    out[:-1] += k_fw * m[1:] * v[1:]
    dc2 = beta * (k_fw * float(m @ v) / V - k_bw * c2**beta)
    return out, dc2


def cm_rr_rhs(state: CmRrState, V: float, k_fw: float = 1.0, k_bw: float = 1.0) -> Tuple[np.ndarray, float]:
    """
    Right-hand side of v̇_m = λv_{m−1} − (k_fw m + λ)v_m + k_fw(m+1)v_{m+1}, λ = V k_bw c2^β,
    and ċ2 = β(k_fw Σ m v_m/V − k_bw c2^β). Births out of the top state are suppressed.
    """
    return _cm_rr_rates(state.v, state.c2, state.beta, V, k_fw, k_bw)


def _cm_rr_energy(v: np.ndarray, c2: float, V: float, k_fw: float, k_bw: float) -> float:
    w = poisson.pmf(np.arange(len(v)), V * k_bw / k_fw)
    relative = np.sum(xlogy(v, v) - np.where(v > 0, v * np.log(w), 0.0))
    return float(relative) / V + float(lambda_B(c2))


def cm_rr_energy(state: CmRrState, V: float, k_fw: float = 1.0, k_bw: float = 1.0) -> float:
    """(1/V)Σ v log(v/w) + λ_B(c2), w = Poisson(V k_bw/k_fw) (equilibrium with c2^* = 1)."""
    return _cm_rr_energy(state.v, state.c2, V, k_fw, k_bw)


@dataclass
class CmRrSolution:
    times: np.ndarray
    v: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    conserved: np.ndarray
    energy: np.ndarray

    def header(self) -> List[str]:
        return ["t", "c1", "c2", "beta_c1_plus_c2", "energy"]

    def table(self) -> np.ndarray:
        return np.column_stack([self.times, self.c1, self.c2, self.conserved, self.energy])


def solve_cm_rr(
    beta: int,
    state0: CmRrState,
    V: float,
    t_end: float,
    tol: float = 1e-10,
    k_fw: float = 1.0,
    k_bw: float = 1.0,
    t_eval: Optional[Sequence[float]] = None,
    overflow_tolerance: float = 1e-10,
) -> CmRrSolution:
    """
    Integrate the CM–RR hybrid for X1 ⇌ βX2 with an explicit Runge–Kutta pair.

    Raises:
        TruncationError: the top support state carries more than `overflow_tolerance`
        IntegrationError: the Runge–Kutta integration failed
    """
    if state0.beta != beta:
        raise ValueError("state0.beta does not match beta")
    size = len(state0.v)

    def rhs(_t, y):
        dv, dc2 = _cm_rr_rates(y[:size], max(y[size], 0.0), beta, V, k_fw, k_bw)
        return np.concatenate([dv, [dc2]])

    times = np.linspace(0.0, t_end, 201) if t_eval is None else np.asarray(t_eval, dtype=float)
    solution = solve_ivp(
        rhs,
        (0.0, t_end),
        np.concatenate([state0.v, [state0.c2]]),
        method="DOP853",
        t_eval=times,
        rtol=tol,
        atol=tol * 1e-3,
    )
    if not solution.success:
        t_fail = float(solution.t[-1]) if len(solution.t) else 0.0
        last = solution.y[:, -1] if solution.y.size else np.concatenate([state0.v, [state0.c2]])
        raise IntegrationError(f"CM–RR integration failed: {solution.message}", t_fail, last)
    v = solution.y[:size].T
    c2 = solution.y[size]
    overflow = float(np.max(v[:, -1]))
    if overflow > overflow_tolerance:
        raise TruncationError(f"v-support overflow: top state mass {overflow:.3e}")

    m = np.arange(size, dtype=float)
    c1 = v @ m / V
    energy = np.array(
        [_cm_rr_energy(np.maximum(vk, 0.0), max(ck, 0.0), V, k_fw, k_bw) for vk, ck in zip(v, c2)]
    )
    return CmRrSolution(solution.t, v, c1, c2, beta * c1 + c2, energy)


# ============================================================
# Merged CME–FPE model
# ============================================================


@dataclass
class MergedState:
    """Discrete weights u on {0, …, N−1} and the density U on cells above N/V."""

    u_disc: np.ndarray
    U: np.ndarray
    h: float
    V: float
    N: int
    a_hat: float

    def __post_init__(self):
        self.u_disc = np.asarray(self.u_disc, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        if len(self.u_disc) != self.N:
            raise ValueError(f"u_disc must have {self.N} entries")
        if abs(self.total_mass - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"merged state mass {self.total_mass:.12g} is not 1")

    @property
    def total_mass(self) -> float:
        return float(self.u_disc.sum() + self.U.sum() * self.h)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.u_disc, self.U * self.h])


@dataclass(frozen=True, eq=False)
class MergedModel:
    """Generator on [u_0, …, u_{N−1}, m_0, …, m_{M−1}] (discrete weights, then cell masses)."""

    a_rate: float
    b_rate: float
    V: float
    N: int
    a_hat: float
    grid: UniformGrid
    generator: sparse.csr_matrix
    equilibrium: np.ndarray
    k_back: float

    @property
    def h(self) -> float:
        return float(self.grid.spacing[0])

    @property
    def positions(self) -> np.ndarray:
        """Concentration of every merged coordinate: n/V, then cell centres."""
        return np.concatenate([np.arange(self.N) / self.V, self.grid.nodes[:, 0]])

    def state(self, vector) -> MergedState:
        vector = np.asarray(vector, dtype=float)
        return MergedState(vector[: self.N], vector[self.N :] / self.h, self.h, self.V, self.N, self.a_hat)

    def stationarity_residual(self, vector=None) -> float:
        vector = self.equilibrium if vector is None else np.asarray(vector, dtype=float)
        scale = float(np.max(abs(self.generator) @ vector))
        return float(np.max(np.abs(self.generator @ vector))) / scale


def merged_equilibrium(a_rate: float, b_rate: float, V: float, N: int, grid: UniformGrid) -> np.ndarray:
    """
    w^{V,N}: Poisson(Va/b) weights below N, h·W_V at the cell centres above, one Z_{V,N}.
    """
    c_star = a_rate / b_rate
    log_disc = poisson.logpmf(np.arange(N), V * c_star)
    log_cont = log_refined_weight(grid.nodes[:, 0], V, c_star) + np.log(grid.spacing[0])
    logs = np.concatenate([log_disc, log_cont])
    weights = np.exp(logs - logs.max())
    return weights / weights.sum()


def build_merged(
    a_rate: float,
    b_rate: float,
    V: float,
    N: int,
    a_hat: Optional[float] = None,
    c_max: Optional[float] = None,
    cells: Optional[int] = None,
) -> MergedModel:
    """
    Couple the Poisson birth–death chain on {0, …, N−1} to the refined FPE on [N/V, c_max].

    Junction rates: u_{N−1} → m_0 at Vâ and m_0 → u_{N−1} at Vâ·w_{N−1}/(W(c_0)h),
    which keep w^{V,N} stationary.

    Raises:
        ValueError: N < 2, N/V outside the window or cell width above 1/V
    """
    if N < 2:
        raise ValueError("the discrete part needs N >= 2")
    a_hat = float(a_rate if a_hat is None else a_hat)
    c_star = a_rate / b_rate
    lower = N / V
    c_max = float(c_max if c_max is not None else max(4.0 * c_star, lower + 10.0 / np.sqrt(V)))
    if not lower < c_max:
        raise ValueError(f"N/V = {lower:g} must lie below the window end {c_max:g}")
    cells = int(cells if cells is not None else np.ceil(2.0 * V * (c_max - lower)))
    grid = UniformGrid((lower,), (c_max,), (cells,))
    h = float(grid.spacing[0])
    if h > 1.0 / V:
        raise ValueError(
            f"cell width {h:.3g} exceeds the lattice spacing 1/V = {1.0 / V:.3g}; "
            "discrete and continuous weights are not comparable at the junction"
        )

    sys = RreSystem.from_network(birth_death_network(a_rate, b_rate))
    operator = assemble_fitted_generator(
        grid,
        sys.net.W,
        lambda points: flux_fields(sys, points, V, "simple_corrected"),
        potential=gradient_potential(sys, V, "simple_corrected"),
    )
    equilibrium = merged_equilibrium(a_rate, b_rate, V, N, grid)
    k_back = V * a_hat * equilibrium[N - 1] / equilibrium[N]

    n = np.arange(N)
    rows = [n[1:], n[:-1], n[:-1], n[1:]]
    cols = [n[:-1], n[:-1], n[1:], n[1:]]
    vals = [np.full(N - 1, V * a_rate), np.full(N - 1, -V * a_rate), b_rate * n[1:], -b_rate * n[1:]]
    junction_rows = [N, N - 1, N - 1, N]
    junction_cols = [N - 1, N - 1, N, N]
    junction_vals = [V * a_hat, -V * a_hat, k_back, -k_back]
    continuous = operator.generator.tocoo()
    generator = sparse.coo_matrix(
        (
            np.concatenate(vals + [junction_vals, continuous.data]),
            (
                np.concatenate(rows + [junction_rows, continuous.row + N]),
                np.concatenate(cols + [junction_cols, continuous.col + N]),
            ),
        ),
        shape=(N + grid.size, N + grid.size),
    ).tocsr()
    logger.info("Built merged model: N=%d, %d cells, h=%.3g, V=%g", N, grid.size, h, V)
    return MergedModel(a_rate, b_rate, float(V), N, a_hat, grid, generator, equilibrium, k_back)


def merged_entropy(model: MergedModel, vector) -> float:
    """𝔈_{V,N} = (1/V)Σ x log(x/w^{V,N}) over discrete weights and cell masses."""
    x = np.asarray(vector, dtype=float)
    w = model.equilibrium
    return float(np.sum(xlogy(x, x) - np.where(x > 0, x * np.log(w), 0.0))) / model.V


def merged_junction_residual(model: MergedModel, vector) -> float:
    """(1/V)Λ(a, bN/V)U'(N/V) + b(N/V)U(N/V) − aVu_{N−1} with one-sided node differences."""
    state = model.state(vector)
    c0 = model.N / model.V
    slope = (state.U[1] - state.U[0]) / model.h
    mobility = float(log_mean(model.a_rate, model.b_rate * c0))
    return (
        mobility * slope / model.V
        + model.b_rate * c0 * state.U[0]
        - model.a_rate * model.V * state.u_disc[-1]
    )


def merged_point_mass(model: MergedModel, n0: int) -> np.ndarray:
    """All mass on the discrete state n0 < N."""
    if not 0 <= n0 < model.N:
        raise ValueError(f"n0 must lie in [0, {model.N - 1}]")
    vector = np.zeros(model.N + model.grid.size)
    vector[n0] = 1.0
    return vector


@dataclass
class MergedSolution:
    times: np.ndarray
    states: np.ndarray
    mass: np.ndarray
    entropy: np.ndarray
    mean: np.ndarray

    def header(self) -> List[str]:
        return ["t", "mean", "mass", "entropy"]

    def table(self) -> np.ndarray:
        return np.column_stack([self.times, self.mean, self.mass, self.entropy])


def solve_merged(model: MergedModel, vector0, t_end: float, dt: float) -> MergedSolution:
    """Backward Euler on the merged generator."""
    x = np.asarray(vector0, dtype=float).copy()
    if x.shape != (model.N + model.grid.size,):
        raise ValueError("initial vector has the wrong size")
    times = time_grid(t_end, dt)
    stepper = BackwardEuler(model.generator, float(times[1] - times[0]) if len(times) > 1 else dt)
    states = np.empty((len(times), x.size))
    states[0] = x
    for k in range(1, len(times)):
        x = stepper.step(x)
        states[k] = x
    mass = states.sum(axis=1)
    entropy_values = np.array([merged_entropy(model, np.maximum(s, 0.0)) for s in states])
    mean = states @ model.positions
    return MergedSolution(times, states, mass, entropy_values, mean)


def merged_snapshot_rows(model: MergedModel, vector) -> List[Tuple[str, float, float]]:
    """Two-section rows: ("discrete", n/V, u_n) then ("continuous", c_i, U_i)."""
    state = model.state(vector)
    rows = [("discrete", n / model.V, float(u)) for n, u in enumerate(state.u_disc)]
    rows += [("continuous", float(c), float(U)) for c, U in zip(model.grid.nodes[:, 0], state.U)]
    return rows
