"""
Bridge between the lattice (CME) and concentration (Liouville) scales.

ι_V spreads lattice mass uniformly over the cubes A_n^V = n/V + [0, 1/V)^I,
ϰ_V collects grid mass back per cube. On top of these sit the Stirling entropy
density E_V, the limit energy 𝐄(ϱ) = ∫E dϱ, the Liouville transport solver on
atomic measures and the energy–dissipation audits.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import cumulative_trapezoid
from scipy.special import gammaln, xlogy

from src.cme import (
    LatticeBox,
    TruncatedCme,
    assemble_generator,
    choose_box,
    cme_entropy_and_quadratic_form,
    lattice_entropy,
    moments,
    poisson_state,
    solve_cme,
)
from src.rre import RreSystem, dissipation_rate, entropy, integrate_rre, onsager_matrix

logger = logging.getLogger(__name__)

QUADRATURE_ORDER = 4


# ============================================================
# Densities and ensembles
# ============================================================


@dataclass
class GridDensity:
    """Piecewise-constant density on a rectangular grid; `values` has one entry per cell."""

    edges: Tuple[np.ndarray, ...]
    values: np.ndarray

    def __post_init__(self):
        self.edges = tuple(np.asarray(e, dtype=float) for e in self.edges)
        self.values = np.asarray(self.values, dtype=float)
        expected = tuple(len(e) - 1 for e in self.edges)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} does not match grid {expected}")

    @property
    def I(self) -> int:
        return len(self.edges)

    def cell_volumes(self) -> np.ndarray:
        vol = np.ones(())
        for e in self.edges:
            vol = np.multiply.outer(vol, np.diff(e))
        return vol

    def centers(self) -> np.ndarray:
        mids = [0.5 * (e[1:] + e[:-1]) for e in self.edges]
        mesh = np.meshgrid(*mids, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def masses(self) -> np.ndarray:
        return self.values * self.cell_volumes()

    def total_mass(self) -> float:
        return float(self.masses().sum())

    def mean(self) -> np.ndarray:
        return self.masses().ravel() @ self.centers()


@dataclass
class ParticleEnsemble:
    """Atomic measure Σ a_k δ_{c_k}."""

    weights: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if np.any(self.weights <= 0):
            raise ValueError("ensemble weights must be positive")
        if len(self.weights) != len(self.points):
            raise ValueError("one weight per point required")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("ensemble weights must sum to 1")

    @classmethod
    def dirac(cls, c) -> "ParticleEnsemble":
        return cls(np.ones(1), np.atleast_2d(c))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


Measure = Union[GridDensity, ParticleEnsemble]


def _cell_quadrature(rho: GridDensity, order: int = QUADRATURE_ORDER) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss–Legendre nodes in every cell and weights carrying ρ dc."""
    x, w = leggauss(order)
    axes_nodes, axes_weights = [], []
    for e in rho.edges:
        lo, hi = e[:-1, None], e[1:, None]
        axes_nodes.append(0.5 * (hi + lo) + 0.5 * (hi - lo) * x[None, :])
        axes_weights.append(0.5 * (hi - lo) * w[None, :])

    nodes = np.zeros((rho.values.size, order**rho.I, rho.I))
    weights = np.ones((rho.values.size, order**rho.I))
    cell_ids = np.indices(rho.values.shape).reshape(rho.I, -1).T
    point_ids = np.indices((order,) * rho.I).reshape(rho.I, -1).T
    for axis in range(rho.I):
        nodes[:, :, axis] = axes_nodes[axis][cell_ids[:, axis][:, None], point_ids[:, axis][None, :]]
        weights *= axes_weights[axis][cell_ids[:, axis][:, None], point_ids[:, axis][None, :]]
    weights *= rho.values.ravel()[:, None]
    return nodes.reshape(-1, rho.I), weights.ravel()


def grid_expectation(rho: GridDensity, xi: Callable[[np.ndarray], np.ndarray], order: int = QUADRATURE_ORDER) -> float:
    """∫ ξ dϱ with Gauss–Legendre quadrature in each cell."""
    nodes, weights = _cell_quadrature(rho, order)
    return float(weights @ np.asarray(xi(nodes), dtype=float))


def grid_mean(rho: GridDensity) -> np.ndarray:
    return rho.mean() / rho.total_mass()


# ============================================================
# Embeddings
# ============================================================


def embed(box: LatticeBox, u) -> GridDensity:
    """ι_V(u): density V^I u_n on each cube A_n^V."""
    u = np.asarray(u, dtype=float)
    if u.shape != (box.size,):
        raise ValueError(f"u must have {box.size} entries")
    edges = tuple(np.arange(n + 2) / box.V for n in box.n_max)
    return GridDensity(edges, box.V**box.I * u.reshape(box.shape))


def _cube_indices(edges: np.ndarray, V: float) -> np.ndarray:
    scaled = edges * V
    lower = np.floor(scaled[:-1] + 1e-9).astype(int)
    upper = np.ceil(scaled[1:] - 1e-9).astype(int) - 1
    if np.any(lower != upper):
        raise ValueError("grid cells are not aligned to the lattice cubes of this volume")
    if np.any(lower < 0):
        raise ValueError("grid window extends below zero")
    return lower


def project(rho: GridDensity, V: float, box: Optional[LatticeBox] = None) -> Tuple[LatticeBox, np.ndarray]:
    """
    ϰ_V(ϱ): the mass of ϱ in every cube A_n^V.

    Returns:
        (box, u) where box covers the grid window unless given

    Raises:
        ValueError: misaligned grid or window larger than the given box
    """
    cubes = [_cube_indices(e, V) for e in rho.edges]
    n_max = tuple(int(c.max()) for c in cubes)
    if box is None:
        box = LatticeBox(n_max, V)
    elif any(a > b for a, b in zip(n_max, box.n_max)):
        raise ValueError(f"grid window reaches cube {n_max}, beyond box {box.n_max}")

    u = np.zeros(box.shape)
    masses = rho.masses()
    index = np.ix_(*cubes)
    np.add.at(u, index, masses)
    return box, u.ravel()


def dual_embed(xi: Callable[[np.ndarray], np.ndarray], box: LatticeBox, order: int = QUADRATURE_ORDER) -> np.ndarray:
    """ι_V^*ξ: cube averages V^I ∫_{A_n} ξ dc."""
    edges = tuple(np.arange(n + 2) / box.V for n in box.n_max)
    unit = GridDensity(edges, np.full(box.shape, box.V**box.I))
    nodes, weights = _cell_quadrature(unit, order)
    values = np.asarray(xi(nodes), dtype=float) * weights
    return values.reshape(box.size, -1).sum(axis=1)


# ============================================================
# Scale-dependent entropy
# ============================================================


def stirling_entropy_density(c, V: float, c_star) -> np.ndarray:
    """
    E_V(c) = −I log V/V − (1/V) log w_n^V for c ∈ A_n^V.

    w^V is the unnormalized Poisson product with means V c_*.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    c_star = np.asarray(c_star, dtype=float)
    if np.any(c < 0):
        raise ValueError("stirling_entropy_density requires c >= 0")
    n = np.floor(c * V + 1e-12)
    mean = V * c_star
    log_w = np.sum(-mean + n * np.log(mean) - gammaln(n + 1), axis=1)
    I = c.shape[1]
    values = -I * np.log(V) / V - log_w / V
    return values


def stirling_gap_identity(c, V: float, c_star) -> Tuple[np.ndarray, np.ndarray]:
    """
    Both sides of E_V(c) − E(n/V) = −I log V/V + (1/2V) Σ log(2πk_{n_i}).

    Returns:
        (lhs, rhs) arrays over the rows of c
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    c_star = np.asarray(c_star, dtype=float)
    n = np.floor(c * V + 1e-12)
    x = n / V
    E_lattice = np.sum(xlogy(x, x / c_star) - x + c_star, axis=1)
    lhs = stirling_entropy_density(c, V, c_star) - E_lattice
    log_two_pi_k = 2.0 * (gammaln(n + 1) - xlogy(n, n) + n)
    rhs = -c.shape[1] * np.log(V) / V + np.sum(log_two_pi_k, axis=1) / (2.0 * V)
    return lhs, rhs


def _boltzmann_entropy(c: np.ndarray, c_star: np.ndarray) -> np.ndarray:
    return np.sum(xlogy(c, c / c_star) - c + c_star, axis=1)


def fit_entropy_bound(
    c_star,
    V_list: Sequence[float],
    c_min: float = 0.05,
    c_max: float = 5.0,
    samples_per_cube: int = 4,
) -> Dict[str, object]:
    """
    Fit K(V) = max V|E_V(c) − E(c)|/(log V + E(c)) over c ∈ (c_min, c_max].

    Points c = (n + s/k)/V include the left edges of the cubes. All species share
    the sampled value.

    Returns:
        {"K": {V: K(V)}, "K_star": max K, "spread": (max − min)/max}
    """
    c_star = np.atleast_1d(np.asarray(c_star, dtype=float))
    fitted: Dict[float, float] = {}
    for V in V_list:
        n = np.arange(int(np.floor(c_min * V)), int(np.ceil(c_max * V)) + 1)
        s = np.arange(samples_per_cube) / samples_per_cube
        grid = (n[:, None] + s[None, :]).ravel() / V
        grid = grid[(grid > c_min) & (grid <= c_max)]
        c = np.repeat(grid[:, None], len(c_star), axis=1)
        E = _boltzmann_entropy(c, c_star)
        gap = np.abs(stirling_entropy_density(c, V, c_star) - E)
        fitted[float(V)] = float(np.max(V * gap / (np.log(V) + E)))
    values = np.array(list(fitted.values()))
    return {
        "K": fitted,
        "K_star": float(values.max()),
        "spread": float((values.max() - values.min()) / values.max()),
    }


def grid_relative_entropy(rho: GridDensity, V: float, c_star) -> float:
    """Ê_V(ϱ) = (1/V)∫ρ log ρ dc + ∫ρ E_V dc for grids aligned to the cubes."""
    masses = rho.masses().ravel()
    values = rho.values.ravel()
    E_V = stirling_entropy_density(rho.centers(), V, c_star)
    return float(np.sum(xlogy(masses, values)) / V + masses @ E_V)


def limit_energy(rho: Measure, sys: RreSystem) -> float:
    """𝐄(ϱ) = ∫ E dϱ."""
    if isinstance(rho, ParticleEnsemble):
        return float(sum(w * entropy(sys, c) for w, c in zip(rho.weights, rho.points)))
    c_star = sys.c_star
    return grid_expectation(rho, lambda c: _boltzmann_entropy(c, c_star))


def fit_coercivity(
    sys: RreSystem,
    V_list: Sequence[float],
    c0_family: Sequence,
    slope: float = 0.5,
    tail: float = 1e-12,
) -> Dict[str, object]:
    """
    Fit C in Ê_V(ι_V(u)) + C ≥ slope·𝐄(ι_V(u)) over Poisson states u = Poisson(V c0).

    Returns:
        {"C": {V: C(V)}, "C_star": max C, "slope": slope}
    """
    c_star = sys.c_star
    fitted: Dict[float, float] = {}
    for V in V_list:
        worst = 0.0
        for c0 in c0_family:
            c0 = np.atleast_1d(np.asarray(c0, dtype=float))
            box = choose_box(np.maximum(c0, c_star), V, tail)
            u = poisson_state(box, c0)
            rho = embed(box, u)
            entropy_value = grid_relative_entropy(rho, V, c_star)
            energy_value = limit_energy(rho, sys)
            worst = max(worst, slope * energy_value - entropy_value)
        fitted[float(V)] = worst
    return {"C": fitted, "C_star": max(fitted.values()), "slope": slope}


# ============================================================
# Liouville transport
# ============================================================


def liouville_dissipation(
    rho: Measure,
    sys: RreSystem,
    xi_gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> float:
    """
    Ψ*_Lio(ϱ, Dξ) = ½∫ ∇ξ·𝕂∇ξ dϱ.

    With ξ = E this is ½∫ Σ κ_*^r G(a_r, b_r) dϱ.
    """
    sys.require_detailed_balance()

    def density(c):
        if xi_gradient is None:
            return dissipation_rate(sys, c)
        grad = np.asarray(xi_gradient(c), dtype=float)
        return float(grad @ onsager_matrix(sys, c) @ grad)

    if isinstance(rho, ParticleEnsemble):
        return 0.5 * float(sum(w * density(c) for w, c in zip(rho.weights, rho.points)))
    nodes, weights = _cell_quadrature(rho)
    values = np.array([density(c) for c in nodes])
    return 0.5 * float(weights @ values)


@dataclass
class LiouvilleSolution:
    """Atoms transported along the RRE flow with the energy identity audit."""

    times: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    energy: np.ndarray
    dissipation: np.ndarray
    residual: np.ndarray

    def at(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.weights, self.points[k])


def solve_liouville(
    sys: RreSystem,
    rho0: ParticleEnsemble,
    t_end: float,
    tol: float = 1e-10,
    num: int = 2001,
) -> LiouvilleSolution:
    """
    Transport ϱ_0 along characteristics: ϱ(t) = Σ a_k δ_{Φ_t(c_k)}.

    residual(t) = 𝐄(ϱ(t)) + ∫_0^t 2Ψ*_Lio dt − 𝐄(ϱ(0)).
    """
    sys.require_detailed_balance()
    times = np.linspace(0.0, t_end, num)
    paths = []
    for c0 in rho0.points:
        trajectory = integrate_rre(sys, c0, t_end, tol=tol, t_eval=times)
        paths.append(trajectory.states)
    points = np.stack(paths, axis=1)

    energy = np.array([sum(w * entropy(sys, c) for w, c in zip(rho0.weights, pts)) for pts in points])
    dissipation = np.array(
        [sum(w * dissipation_rate(sys, c) for w, c in zip(rho0.weights, pts)) for pts in points]
    )
    residual = energy - energy[0] + cumulative_trapezoid(dissipation, times, initial=0.0)
    logger.debug("solve_liouville: max energy residual %.3e", np.max(np.abs(residual)))
    return LiouvilleSolution(times, rho0.weights, points, energy, dissipation, residual)


# ============================================================
# Energy audit and V-sweep
# ============================================================


@dataclass
class EnergyAudit:
    """𝓔_V(u(t)), 2Ψ*_V(u, −D𝓔_V(u)) and the integrated residual."""

    times: np.ndarray
    entropy: np.ndarray
    dissipation: np.ndarray
    residual: np.ndarray
    leak_allowance: np.ndarray

    def table(self) -> Tuple[List[str], np.ndarray]:
        header = ["t", "E_V", "dissipation", "residual"]
        return header, np.column_stack([self.times, self.entropy, self.dissipation, self.residual])


def cme_energy_audit(cme: TruncatedCme, times, distributions) -> EnergyAudit:
    """
    Dual-form energy identity 𝓔_V(u(t)) + ∫ 2Ψ*_V dt = 𝓔_V(u(0)) along a CME solve.

    States are floored at the smallest positive double before taking logs.

    Raises:
        ValueError: a state with zero mass
    """
    times = np.asarray(times, dtype=float)
    w = cme.require_equilibrium()
    tiny = np.finfo(float).tiny
    entropy_values, dissipation, leak_terms = [], [], []
    for u in distributions:
        if not np.sum(u) > 0:
            raise ValueError("zero-mass state encountered in energy audit")
        u = np.maximum(np.asarray(u, dtype=float), tiny)
        structure = cme_entropy_and_quadratic_form(cme, u)
        entropy_values.append(structure.entropy)
        dissipation.append(2.0 * structure.dissipation_at_gradient())
        log_ratio = np.log(u / w)
        leak_terms.append(float(np.sum(cme.leak * u * np.abs(log_ratio + 1.0))) / cme.V)

    entropy_values = np.asarray(entropy_values)
    dissipation = np.asarray(dissipation)
    residual = entropy_values - entropy_values[0] + cumulative_trapezoid(dissipation, times, initial=0.0)
    allowance = cumulative_trapezoid(np.asarray(leak_terms), times, initial=0.0)
    return EnergyAudit(times, entropy_values, dissipation, residual, allowance)


@dataclass
class ConvergenceRow:
    V: float
    mean_err: float
    energy_err: float


@dataclass
class ConvergenceTable:
    rows: List[ConvergenceRow]
    slope_estimate: float
    t_eval: float

    def table(self) -> Tuple[List[str], np.ndarray]:
        header = ["V", "mean_err", "energy_err", "slope_estimate"]
        data = np.array([[r.V, r.mean_err, r.energy_err, self.slope_estimate] for r in self.rows])
        return header, data.reshape(len(self.rows), 4)


def convergence_experiment(
    sys: RreSystem,
    c0,
    t_eval: float,
    V_list: Sequence[float],
    tail: float = 1e-12,
) -> ConvergenceTable:
    """
    V-sweep of CME solutions against the RRE limit.

    For each V the CME starts from Poisson(V c0); reports
    |mean(ι_V(u(t))) − c(t)|_∞ and |𝓔_V(u(t)) − E(c(t))|, plus the fitted
    log-log slope of the mean error.
    """
    sys.require_detailed_balance()
    V_list = [float(V) for V in V_list]
    if not V_list:
        raise ValueError("V_list must not be empty")
    if any(b <= a for a, b in zip(V_list, V_list[1:])):
        raise ValueError("V_list must be strictly increasing")

    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    c_t = integrate_rre(sys, c0, t_eval, tol=1e-11, t_eval=[0.0, t_eval]).states[-1]
    E_t = entropy(sys, c_t)

    rows = []
    for V in V_list:
        box = choose_box(np.maximum.reduce([c0, sys.c_star, c_t]), V, tail)
        cme = assemble_generator(sys.net, box, sys.db)
        u0 = poisson_state(box, c0)
        solution = solve_cme(cme, u0, [0.0, t_eval])
        u_t = solution.distributions[-1]
        e_hat, _ = moments(cme, u_t)
        mean_err = float(np.max(np.abs(e_hat + 0.5 / V - c_t)))
        energy_err = abs(lattice_entropy(cme, u_t) - E_t)
        rows.append(ConvergenceRow(V, mean_err, energy_err))
        logger.info("V=%g: mean_err=%.3e energy_err=%.3e", V, mean_err, energy_err)

    if len(rows) >= 2:
        slope = float(np.polyfit(np.log(V_list), np.log([r.mean_err for r in rows]), 1)[0])
    else:
        slope = float("nan")
    return ConvergenceTable(rows=rows, slope_estimate=slope, t_eval=float(t_eval))
