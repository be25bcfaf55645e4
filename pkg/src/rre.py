"""
Reaction-rate equation ċ = −R(c) as the gradient system (𝐂, E, 𝕂).

Besides the quadratic Onsager structure this module provides the Markov-chain
structures for general convex φ, the generalized dissipation potentials of the
form Ψ*(c, ζ) = Σ L_r(c) ψ_r(γ^r·ζ) (quadratic, cosh and user ψ), and a
positivity-guarded adaptive integrator.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import RK45
from scipy.linalg import orth
from scipy.optimize import root

from src.kernels import (
    BOLTZMANN,
    ConvexGenerator,
    G,
    Phi,
    cosh_star,
    cosh_star_prime,
    lambda_B,
    log_mean,
)
from src.network import (
    DetailedBalanceError,
    DetailedBalanceReport,
    ReactionNetwork,
    StoichiometryReport,
    check_detailed_balance,
    stoichiometric_analysis,
)

logger = logging.getLogger(__name__)

# |log b − log a| below which L_r uses its diagonal limit
L_DIAGONAL_THRESHOLD = 1e-8


class IntegrationError(RuntimeError):
    """Step-size underflow in the RRE integrator."""

    def __init__(self, message: str, t: float, last_state: np.ndarray):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t
        self.last_state = last_state


# ============================================================
# System
# ============================================================


@dataclass(frozen=True)
class RreSystem:
    """Network plus its stoichiometry and detailed-balance certificate."""

    net: ReactionNetwork
    db: DetailedBalanceReport
    stoich: StoichiometryReport

    @classmethod
    def from_network(cls, net: ReactionNetwork) -> "RreSystem":
        stoich = stoichiometric_analysis(net)
        return cls(net=net, db=check_detailed_balance(net, stoich), stoich=stoich)

    @property
    def c_star(self) -> np.ndarray:
        return self.db.c_star_vector()

    @property
    def kappa_star(self) -> np.ndarray:
        return self.db.kappa_vector()

    def require_detailed_balance(self) -> None:
        if not self.db.holds:
            raise DetailedBalanceError(f"detailed balance does not hold: {self.db.reason}")


def _check_vector(sys: RreSystem, c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape != (sys.net.I,):
        raise ValueError(f"expected a vector of length {sys.net.I}, got shape {c.shape}")
    return c


def _check_interior(sys: RreSystem, c) -> np.ndarray:
    c = _check_vector(sys, c)
    if np.any(c <= 0):
        raise ValueError("operation requires c > 0 (the gradient form lives on the interior)")
    return c


def monomial(c: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """c^α for every row α of `exponents` (0⁰ = 1)."""
    return np.prod(np.power(c[None, :], exponents), axis=1)


def normalized_monomials(sys: RreSystem, c) -> Tuple[np.ndarray, np.ndarray]:
    """a_r = c^α/c_*^α and b_r = c^β/c_*^β."""
    x = np.asarray(c, dtype=float) / sys.c_star
    return monomial(x, sys.net.alpha), monomial(x, sys.net.beta)


def reaction_fluxes(sys: RreSystem, c) -> np.ndarray:
    """Net mass-action fluxes k_fw c^α − k_bw c^β per reaction."""
    c = _check_vector(sys, c)
    net = sys.net
    return net.k_fw * monomial(c, net.alpha) - net.k_bw * monomial(c, net.beta)


# ============================================================
# Rates, entropy and Onsager operators
# ============================================================


def rate_vector(sys: RreSystem, c) -> np.ndarray:
    """R(c) = Σ_r (k_fw c^α − k_bw c^β) γ^r; the RRE reads ċ = −R(c)."""
    return sys.net.W.T @ reaction_fluxes(sys, c)


def rate_jacobian(sys: RreSystem, c) -> np.ndarray:
    """Jacobian DR(c)."""
    c = _check_vector(sys, c)
    net = sys.net
    d_flux = np.zeros((net.R, net.I))
    for j in range(net.I):
        shift = np.zeros(net.I, dtype=int)
        shift[j] = 1
        alpha_j = net.alpha[:, j]
        beta_j = net.beta[:, j]
        fw = np.where(alpha_j > 0, alpha_j * monomial(c, np.maximum(net.alpha - shift, 0)), 0.0)
        bw = np.where(beta_j > 0, beta_j * monomial(c, np.maximum(net.beta - shift, 0)), 0.0)
        d_flux[:, j] = net.k_fw * fw - net.k_bw * bw
    return net.W.T @ d_flux


def entropy(sys: RreSystem, c) -> float:
    """E(c) = Σ c_i^* λ_B(c_i/c_i^*)."""
    c = _check_vector(sys, c)
    if np.any(c < 0):
        raise ValueError("entropy requires c >= 0")
    c_star = sys.c_star
    return float(np.sum(c_star * lambda_B(c / c_star)))


def entropy_gradient(sys: RreSystem, c) -> np.ndarray:
    """DE(c) = log(c/c_*); singular on the boundary."""
    c = _check_interior(sys, c)
    return np.log(c / sys.c_star)


def onsager_matrix(sys: RreSystem, c) -> np.ndarray:
    """𝕂(c) = Σ κ_*^r Λ(a_r, b_r) γ^r ⊗ γ^r."""
    c = _check_interior(sys, c)
    a, b = normalized_monomials(sys, c)
    weights = sys.kappa_star * np.asarray(log_mean(a, b))
    W = sys.net.W.astype(float)
    return W.T @ (weights[:, None] * W)


def _ctmc_pairs(sys: RreSystem) -> List[Tuple[int, int]]:
    pairs = []
    for r, reaction in enumerate(sys.net.reactions):
        alpha = np.asarray(reaction.alpha)
        beta = np.asarray(reaction.beta)
        if alpha.sum() != 1 or beta.sum() != 1 or alpha.max() != 1 or beta.max() != 1:
            raise ValueError(f"reaction {r} is not of the form X_i <-> X_j; network is not a CTMC")
        pairs.append((int(alpha.argmax()), int(beta.argmax())))
    return pairs


def markov_entropy(sys: RreSystem, c, gen: ConvexGenerator = BOLTZMANN) -> float:
    """E^φ(c) = Σ c_i^* φ(c_i/c_i^*)."""
    c = _check_vector(sys, c)
    c_star = sys.c_star
    return float(np.sum(c_star * gen.phi(c / c_star)))


def markov_entropy_gradient(sys: RreSystem, c, gen: ConvexGenerator = BOLTZMANN) -> np.ndarray:
    c = _check_interior(sys, c)
    return np.asarray(gen.phi_prime(c / sys.c_star), dtype=float)


def markov_onsager(sys: RreSystem, c, gen: ConvexGenerator = BOLTZMANN) -> np.ndarray:
    """
    𝕂_M^φ(c) = Σ κ^{ij} Φ(c_i/c_i^*, c_j/c_j^*) (e_i − e_j) ⊗ (e_i − e_j).

    Only defined for linear networks X_i ⇌ X_j, where 𝕂_M^φ DE^φ = R holds for any φ.
    """
    pairs = _ctmc_pairs(sys)
    c = _check_interior(sys, c)
    x = c / sys.c_star
    kappa = sys.kappa_star
    K = np.zeros((sys.net.I, sys.net.I))
    for r, (i, j) in enumerate(pairs):
        gamma = np.zeros(sys.net.I)
        gamma[i] += 1.0
        gamma[j] -= 1.0
        K += kappa[r] * float(Phi(gen, x[i], x[j])) * np.outer(gamma, gamma)
    return K


def dissipation_rate(sys: RreSystem, c) -> float:
    """DE(c)·R(c) = Σ κ_*^r G(a_r, b_r); +∞ on the boundary away from balance."""
    c = _check_vector(sys, c)
    a, b = normalized_monomials(sys, c)
    kappa = sys.kappa_star
    total = 0.0
    for r in range(sys.net.R):
        if a[r] > 0 and b[r] > 0:
            total += kappa[r] * float(G(a[r], b[r]))
        elif a[r] != b[r]:
            return float("inf")
    return total


# ============================================================
# Generalized dissipation potentials
# ============================================================


@dataclass(frozen=True)
class DissipationFunction:
    """Even convex ψ with ψ(0) = 0 and ψ''(0) > 0."""

    name: str
    psi: Callable[[np.ndarray], np.ndarray]
    psi_prime: Callable[[np.ndarray], np.ndarray]
    psi_second_at_zero: float


QUADRATIC_PSI = DissipationFunction("quadratic", lambda x: 0.5 * x * x, lambda x: x, 1.0)

COSH_PSI = DissipationFunction(
    "cosh",
    lambda x: np.asarray(cosh_star(x)),
    lambda x: np.asarray(cosh_star_prime(x)),
    1.0,
)


def quartic_psi(eps: float = 1.0) -> DissipationFunction:
    """ψ(ξ) = ξ²/2 + εξ⁴/12."""
    if eps < 0:
        raise ValueError("quartic dissipation needs eps >= 0")
    return DissipationFunction(
        f"quartic_{eps:g}",
        lambda x: 0.5 * x * x + eps * x**4 / 12.0,
        lambda x: x + eps * x**3 / 3.0,
        1.0,
    )


@dataclass(frozen=True)
class DissipationSpec:
    """Choice of dual dissipation potential; `psi` is per reaction for kind='general'."""

    kind: str = "quadratic"
    psi: Tuple[DissipationFunction, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("quadratic", "cosh", "general"):
            raise ValueError(f"unknown dissipation kind {self.kind!r}")
        if self.kind == "general" and not self.psi:
            raise ValueError("general dissipation needs at least one psi")

    @classmethod
    def general(cls, psi: DissipationFunction, R: int) -> "DissipationSpec":
        return cls(kind="general", psi=tuple([psi] * R))

    def functions(self, R: int) -> Tuple[DissipationFunction, ...]:
        if self.kind == "quadratic":
            return (QUADRATIC_PSI,) * R
        if self.kind == "cosh":
            return (COSH_PSI,) * R
        if len(self.psi) == 1:
            return self.psi * R
        if len(self.psi) != R:
            raise ValueError(f"need {R} dissipation functions, got {len(self.psi)}")
        return self.psi


def tilt_weights(sys: RreSystem, spec: DissipationSpec, c) -> np.ndarray:
    """L_r(c) = κ_*^r (b − a)/ψ_r'(log b − log a), with diagonal limit κ_*^r √(ab)/ψ_r''(0)."""
    c = _check_interior(sys, c)
    a, b = normalized_monomials(sys, c)
    kappa = sys.kappa_star
    if spec.kind == "quadratic":
        return kappa * np.asarray(log_mean(a, b))
    if spec.kind == "cosh":
        return kappa * np.sqrt(a * b)

    weights = np.empty(sys.net.R)
    for r, psi in enumerate(spec.functions(sys.net.R)):
        x = np.log(b[r]) - np.log(a[r])
        if abs(x) < L_DIAGONAL_THRESHOLD:
            weights[r] = kappa[r] * np.sqrt(a[r] * b[r]) / psi.psi_second_at_zero
        else:
            weights[r] = kappa[r] * a[r] * np.expm1(x) / float(psi.psi_prime(x))
    return weights


def dual_dissipation(sys: RreSystem, spec: DissipationSpec, c, zeta) -> float:
    """Ψ*(c, ζ) = Σ L_r(c) ψ_r(γ^r·ζ)."""
    zeta = np.asarray(zeta, dtype=float)
    weights = tilt_weights(sys, spec, c)
    projected = sys.net.W @ zeta
    total = 0.0
    for r, psi in enumerate(spec.functions(sys.net.R)):
        total += weights[r] * float(psi.psi(projected[r]))
    return total


def dual_dissipation_gradient(sys: RreSystem, spec: DissipationSpec, c, zeta) -> np.ndarray:
    """∂_ζΨ*(c, ζ) = Σ L_r(c) ψ_r'(γ^r·ζ) γ^r."""
    zeta = np.asarray(zeta, dtype=float)
    weights = tilt_weights(sys, spec, c)
    projected = sys.net.W @ zeta
    slopes = np.array(
        [float(psi.psi_prime(projected[r])) for r, psi in enumerate(spec.functions(sys.net.R))]
    )
    return sys.net.W.T @ (weights * slopes)


def force_to_rate(sys: RreSystem, spec: DissipationSpec, c) -> np.ndarray:
    """∂_ζΨ*(c, −DE(c)), which equals −R(c) for every kind."""
    return dual_dissipation_gradient(sys, spec, c, -entropy_gradient(sys, c))


# ============================================================
# Integration
# ============================================================


@dataclass
class Trajectory:
    """Time series of RRE states with energy and conservation diagnostics."""

    times: np.ndarray
    states: np.ndarray
    energy: np.ndarray
    conserved: np.ndarray
    dissipation: np.ndarray
    residual: np.ndarray
    species_names: Tuple[str, ...] = ()

    def header(self) -> List[str]:
        cols = ["t"] + [f"c_{name}" for name in self.species_names] + ["E"]
        cols += [f"Qc_{k + 1}" for k in range(self.conserved.shape[1])]
        return cols + ["dissipation"]

    def table(self) -> np.ndarray:
        return np.column_stack(
            [self.times, self.states, self.energy, self.conserved, self.dissipation]
        )


def _diagnostics(sys: RreSystem, times: np.ndarray, states: np.ndarray) -> Trajectory:
    Q = sys.stoich.Q.astype(float)
    conserved = states @ Q.T
    if sys.db.holds:
        energy = np.array([entropy(sys, c) for c in states])
        dissipation = np.array([dissipation_rate(sys, c) for c in states])
        residual = np.zeros(len(times))
        if len(times) > 1:
            finite = np.where(np.isfinite(dissipation), dissipation, 0.0)
            step_integral = 0.5 * (finite[1:] + finite[:-1]) * np.diff(times)
            residual[1:] = np.diff(energy) + step_integral
    else:
        nan = np.full(len(times), np.nan)
        energy, dissipation, residual = nan, nan.copy(), nan.copy()
    return Trajectory(
        times=times,
        states=states,
        energy=energy,
        conserved=conserved,
        dissipation=dissipation,
        residual=residual,
        species_names=sys.net.species_names,
    )


def integrate_rre(
    sys: RreSystem,
    c0,
    t_end: float,
    tol: float = 1e-8,
    t_eval: Optional[Sequence[float]] = None,
    min_step: float = 1e-14,
) -> Trajectory:
    """
    Integrate ċ = −R(c) with an embedded Runge–Kutta 5(4) pair and a positivity guard.

    A step that drives any component below −tol is rejected and retried with half
    the step size; small negative components of accepted steps are clamped to 0.

    Args:
        sys: RRE system
        c0: Nonnegative initial concentrations
        t_end: Final time
        tol: Relative integration tolerance (absolute tolerance tol·1e-2)
        t_eval: Optional output times (dense output); defaults to every accepted step

    Returns:
        Trajectory with diagnostics

    Raises:
        IntegrationError: step size underflow
    """
    y = _check_vector(sys, c0).copy()
    if np.any(y < 0):
        raise ValueError("initial state must be nonnegative")
    t_eval_arr = None if t_eval is None else np.asarray(t_eval, dtype=float)

    def fun(_t, c):
        return -rate_vector(sys, c)

    def make_solver(t0, y0, first_step=None):
        return RK45(fun, t0, y0, t_end, rtol=tol, atol=tol * 1e-2, first_step=first_step)

    times: List[float] = [0.0]
    states: List[np.ndarray] = [y.copy()]
    if t_eval_arr is not None:
        times, states = [], []
        for t_out in t_eval_arr[t_eval_arr <= 0.0]:
            times.append(float(t_out))
            states.append(y.copy())

    t = 0.0
    solver = make_solver(t, y) if t_end > 0 else None
    steps = rejections = 0
    while solver is not None and solver.status == "running":
        t_old, y_old = solver.t, solver.y.copy()
        message = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"RK45 failed: {message}", t_old, y_old)
        h = solver.t - t_old
        if np.any(solver.y < -tol):
            rejections += 1
            h_new = 0.5 * h
            if h_new < min_step * max(1.0, abs(t_old)):
                raise IntegrationError("step size underflow", t_old, y_old)
            solver = make_solver(t_old, y_old, first_step=h_new)
            continue

        steps += 1
        if t_eval_arr is not None:
            dense = solver.dense_output()
            mask = (t_eval_arr > t_old) & (t_eval_arr <= solver.t)
            for t_out in t_eval_arr[mask]:
                times.append(float(t_out))
                states.append(np.maximum(dense(t_out), 0.0))

        y_new = solver.y
        if np.any(y_new < 0):
            y_new = np.maximum(y_new, 0.0)
            if solver.status == "running":
                solver = make_solver(solver.t, y_new, first_step=h)
        if t_eval_arr is None:
            times.append(float(solver.t))
            states.append(y_new.copy())

    logger.debug("integrate_rre: %d accepted steps, %d positivity rejections", steps, rejections)
    return _diagnostics(sys, np.asarray(times), np.asarray(states).reshape(len(times), sys.net.I))


def joint_steady_state(
    sys: RreSystem, c_guess, t_relax: float = 50.0, tol: float = 1e-12
) -> np.ndarray:
    """
    Steady state of ċ = −R(c) on the invariant set of `c_guess`.

    Relaxes with the integrator, then polishes [U·R(c); ℚc − q] = 0 with a Newton
    solve, U an orthonormal basis of the stoichiometric subspace.
    """
    c_guess = _check_vector(sys, c_guess)
    Q = sys.stoich.Q.astype(float)
    q = Q @ c_guess
    relaxed = integrate_rre(sys, c_guess, t_relax, tol=1e-9).states[-1]
    if sys.net.R == 0:
        return relaxed

    U = orth(sys.net.W.T.astype(float))

    def equations(c):
        values = np.concatenate([U.T @ rate_vector(sys, c), Q @ c - q])
        jac = np.vstack([U.T @ rate_jacobian(sys, c), Q])
        return values, jac

    solution = root(equations, relaxed, jac=True, method="hybr", tol=tol)
    if not solution.success:
        logger.warning("steady-state polish did not converge: %s", solution.message)
        return relaxed
    return solution.x
