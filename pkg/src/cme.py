"""
Chemical master equation on a truncated lattice box.

States n ∈ ∏[0, n_max_i] are flattened in C order. The generator 𝓑_V acts on
probability vectors (u̇ = 𝓑_V u). Jumps that would leave the box are dropped:
their rate stays on the diagonal and is recorded per state in `leak`, so column
sums equal −leak.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.linalg import expm_multiply
from scipy.special import gammaln, logsumexp, xlogy
from scipy.stats import poisson

from src.kernels import G, cosh_star, cosh_star_prime, log_mean
from src.network import (
    DetailedBalanceReport,
    ReactionNetwork,
    StoichiometryReport,
    check_detailed_balance,
    stoichiometric_analysis,
)

logger = logging.getLogger(__name__)

DEFAULT_TAIL = 1e-12
DEFAULT_TAIL_THRESHOLD = 1e-8
DEFAULT_LEAK_TOLERANCE = 1e-6


class TruncationError(RuntimeError):
    """Lattice box too small for the requested accuracy."""


# ============================================================
# Lattice box
# ============================================================


@dataclass(frozen=True)
class LatticeBox:
    """Box ∏[0, n_max_i] at volume V with a C-order flat index."""

    n_max: Tuple[int, ...]
    V: float

    def __post_init__(self):
        object.__setattr__(self, "n_max", tuple(int(x) for x in self.n_max))
        if any(x < 0 for x in self.n_max):
            raise ValueError("n_max entries must be nonnegative")
        if not self.V > 0:
            raise ValueError("volume V must be positive")

    @property
    def I(self) -> int:
        return len(self.n_max)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(x + 1 for x in self.n_max)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def states(self) -> np.ndarray:
        """All multi-indices, row k is the state with flat index k."""
        return np.indices(self.shape).reshape(self.I, -1).T

    def contains(self, n) -> np.ndarray:
        n = np.atleast_2d(n)
        return np.all((n >= 0) & (n <= np.asarray(self.n_max)), axis=1)

    def index(self, n) -> np.ndarray:
        """Flat indices of multi-indices; −1 outside the box."""
        n = np.atleast_2d(np.asarray(n, dtype=int))
        inside = self.contains(n)
        out = np.full(len(n), -1, dtype=int)
        if np.any(inside):
            out[inside] = np.ravel_multi_index(tuple(n[inside].T), self.shape)
        return out


def choose_box(c_ref, V: float, tail: float = DEFAULT_TAIL) -> LatticeBox:
    """Smallest box whose Poisson(V c_ref) tail beyond it is below `tail`."""
    c_ref = np.atleast_1d(np.asarray(c_ref, dtype=float))
    per_species = tail / len(c_ref)
    n_max = []
    for c in c_ref:
        mean = max(V * c, 1e-12)
        n_max.append(int(poisson.isf(per_species, mean)) + 2)
    return LatticeBox(tuple(n_max), V)


# ============================================================
# Intensities and Poisson states
# ============================================================


def log_intensity(V: float, alpha, n) -> np.ndarray:
    """log 𝔹_V^α(n) with −inf outside the lattice."""
    alpha = np.asarray(alpha, dtype=int)
    n = np.atleast_2d(np.asarray(n, dtype=float))
    valid = np.all(n >= 0, axis=1)
    safe = np.where(n >= 0, n, 0.0)
    logs = np.log(V) + np.sum(gammaln(safe + alpha + 1) - gammaln(safe + 1), axis=1)
    logs -= alpha.sum() * np.log(V)
    return np.where(valid, logs, -np.inf)


def intensity(box, alpha, n):
    """
    𝔹_V^α(n) = V (n+α)!/(V^{|α|} n!), zero for n outside ℕ_0^I.

    Args:
        box: LatticeBox or volume V
        alpha: Integer exponent vector
        n: One multi-index or an array of them

    Returns:
        Scalar for one multi-index, array otherwise
    """
    V = box.V if isinstance(box, LatticeBox) else float(box)
    n_arr = np.asarray(n)
    values = np.exp(log_intensity(V, alpha, n_arr))
    return float(values[0]) if n_arr.ndim <= 1 else values


def log_poisson_weights(box: LatticeBox, c) -> np.ndarray:
    """Unnormalized log of ∏ e^{−Vc_i}(Vc_i)^{n_i}/n_i! on the box."""
    c = np.asarray(c, dtype=float)
    states = box.states
    out = np.zeros(box.size)
    for i, ci in enumerate(c):
        mean = box.V * ci
        if mean == 0:
            out += np.where(states[:, i] == 0, 0.0, -np.inf)
        else:
            out += poisson.logpmf(states[:, i], mean)
    return out


def poisson_state(box: LatticeBox, c) -> np.ndarray:
    """Product Poisson distribution with means V c, renormalized on the box."""
    logs = log_poisson_weights(box, c)
    return np.exp(logs - logsumexp(logs))


def poisson_equilibrium(net: ReactionNetwork, db: DetailedBalanceReport, box: LatticeBox) -> np.ndarray:
    """w^V on the box, renormalized to sum 1."""
    return poisson_state(box, db.c_star_vector())


def poisson_tail_mass(c, box: LatticeBox) -> float:
    """Mass of the Poisson(V c) product outside the box."""
    c = np.asarray(c, dtype=float)
    log_inside = sum(poisson.logcdf(n, box.V * ci) for n, ci in zip(box.n_max, c))
    return float(-np.expm1(log_inside))


# ============================================================
# Generator
# ============================================================


@dataclass(frozen=True, eq=False)
class TruncatedCme:
    """Sparse generator 𝓑_V on a box, with leak vector and optional equilibrium."""

    net: ReactionNetwork
    box: LatticeBox
    generator: sparse.csr_matrix
    leak: np.ndarray
    stoich: StoichiometryReport
    db: Optional[DetailedBalanceReport] = None
    w: Optional[np.ndarray] = None

    @property
    def V(self) -> float:
        return self.box.V

    @property
    def max_exit_rate(self) -> float:
        return float(-self.generator.diagonal().min()) if self.box.size else 0.0

    def leak_rate(self, u) -> float:
        """Rate of probability mass leaving the box in state u."""
        return float(self.leak @ np.asarray(u, dtype=float))

    def require_equilibrium(self) -> np.ndarray:
        if self.w is None:
            raise ValueError("operation needs a detailed-balance network with equilibrium w^V")
        return self.w

    @cached_property
    def nu_hat(self) -> np.ndarray:
        """ν̂_V^{n,r} = κ_*^r V w_n, shape (states, R)."""
        w = self.require_equilibrium()
        return w[:, None] * (self.db.kappa_vector() * self.V)[None, :]


def _jump_triplets(net: ReactionNetwork, box: LatticeBox):
    states = box.states
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    leak = np.zeros(box.size)
    origin = np.arange(box.size)

    for r in range(net.R):
        alpha, beta = net.alpha[r], net.beta[r]
        gamma = alpha - beta
        directions = [(net.k_fw[r], alpha, -gamma)]
        if net.k_bw[r] > 0:
            directions.append((net.k_bw[r], beta, gamma))
        for rate, consumed, step in directions:
            propensity = rate * np.exp(log_intensity(box.V, consumed, states - consumed))
            active = propensity > 0
            target = box.index(states + step)
            inside = active & (target >= 0)
            outside = active & (target < 0)
            rows.append(target[inside])
            cols.append(origin[inside])
            vals.append(propensity[inside])
            rows.append(origin[active])
            cols.append(origin[active])
            vals.append(-propensity[active])
            leak[outside] += propensity[outside]
    return rows, cols, vals, leak


def assemble_generator(
    net: ReactionNetwork,
    box: LatticeBox,
    db: Optional[DetailedBalanceReport] = None,
    tail_threshold: float = DEFAULT_TAIL_THRESHOLD,
) -> TruncatedCme:
    """
    Assemble 𝓑_V on the box.

    Detailed balance is not required; when it holds, the Poisson equilibrium is
    attached and its tail mass beyond the box is checked.

    Raises:
        TruncationError: equilibrium tail mass above `tail_threshold`
    """
    if box.I != net.I:
        raise ValueError(f"box has {box.I} species, network has {net.I}")
    stoich = stoichiometric_analysis(net)
    if db is None:
        db = check_detailed_balance(net, stoich)

    rows, cols, vals, leak = _jump_triplets(net, box)
    if rows:
        generator = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(box.size, box.size),
        ).tocsr()
    else:
        generator = sparse.csr_matrix((box.size, box.size))

    w = None
    if db.holds:
        tail = poisson_tail_mass(db.c_star_vector(), box)
        if tail > tail_threshold:
            raise TruncationError(
                f"equilibrium tail mass {tail:.3e} beyond box {box.n_max} exceeds {tail_threshold:.1e}"
            )
        w = poisson_equilibrium(net, db, box)

    logger.info(
        "Assembled CME generator: %d states, %d nonzeros, V=%g", box.size, generator.nnz, box.V
    )
    return TruncatedCme(net=net, box=box, generator=generator, leak=leak, stoich=stoich, db=db, w=w)


def stationarity_residual(cme: TruncatedCme, w) -> np.ndarray:
    """(𝓑_V w)_n."""
    return cme.generator @ np.asarray(w, dtype=float)


def residual_scale(cme: TruncatedCme, w) -> np.ndarray:
    """|𝓑_V| w, the natural magnitude against which residuals are compared."""
    return abs(cme.generator) @ np.abs(np.asarray(w, dtype=float))


def _balanced_pairs(cme: TruncatedCme):
    """Flat indices (n, n+α, n+β, r) of every reaction pair fully inside the box."""
    states = cme.box.states
    n_idx, p_idx, q_idx, r_idx = [], [], [], []
    for r in range(cme.net.R):
        p = cme.box.index(states + cme.net.alpha[r])
        q = cme.box.index(states + cme.net.beta[r])
        ok = (p >= 0) & (q >= 0)
        n_idx.append(np.nonzero(ok)[0])
        p_idx.append(p[ok])
        q_idx.append(q[ok])
        r_idx.append(np.full(int(ok.sum()), r))
    return (
        np.concatenate(n_idx),
        np.concatenate(p_idx),
        np.concatenate(q_idx),
        np.concatenate(r_idx),
    )


def detailed_balance_residual(cme: TruncatedCme) -> float:
    """
    Max relative defect of k_fw𝔹^α(n)w_{n+α} = k_bw𝔹^β(n)w_{n+β} = κ_*V w_n.

    Evaluated in log space on states whose pair partners lie inside the box.
    """
    db = cme.db
    log_w = log_poisson_weights(cme.box, db.c_star_vector())
    kappa = db.kappa_vector()
    n, p, q, r = _balanced_pairs(cme)
    states = cme.box.states[n]
    worst = 0.0
    for rr in range(cme.net.R):
        sel = r == rr
        if not np.any(sel):
            continue
        reference = np.log(kappa[rr] * cme.V) + log_w[n[sel]]
        fw = np.log(cme.net.k_fw[rr]) + log_intensity(cme.V, cme.net.alpha[rr], states[sel]) + log_w[p[sel]]
        bw = np.log(cme.net.k_bw[rr]) + log_intensity(cme.V, cme.net.beta[rr], states[sel]) + log_w[q[sel]]
        worst = max(worst, float(np.max(np.abs(np.expm1(fw - reference)))))
        worst = max(worst, float(np.max(np.abs(np.expm1(bw - reference)))))
    return worst


# ============================================================
# Time evolution and moments
# ============================================================


@dataclass
class CmeSolution:
    """Distributions u(t_k) with mass and leak bookkeeping."""

    times: np.ndarray
    distributions: np.ndarray
    mass_loss: np.ndarray
    leak_estimate: np.ndarray


def solve_cme(
    cme: TruncatedCme,
    u0,
    times: Sequence[float],
    leak_tolerance: float = DEFAULT_LEAK_TOLERANCE,
) -> CmeSolution:
    """
    Propagate u̇ = 𝓑_V u with Krylov/Taylor exponential actions between output times.

    Args:
        cme: Truncated CME
        u0: Initial distribution on the box
        times: Increasing output times starting at 0
        leak_tolerance: Maximum admissible mass loss through the box boundary

    Returns:
        CmeSolution

    Raises:
        TruncationError: mass loss above `leak_tolerance`
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or times[0] != 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing and start at 0")
    u = np.asarray(u0, dtype=float).copy()
    if u.shape != (cme.box.size,):
        raise ValueError(f"u0 must have {cme.box.size} entries")
    if np.any(u < 0):
        raise ValueError("u0 must be nonnegative")

    out = np.empty((len(times), cme.box.size))
    out[0] = u
    for k in range(1, len(times)):
        u = expm_multiply(cme.generator * (times[k] - times[k - 1]), u)
        np.maximum(u, 0.0, out=u)
        out[k] = u

    mass = out.sum(axis=1)
    mass_loss = mass[0] - mass
    leak_flux = out @ cme.leak
    leak_estimate = cumulative_trapezoid(leak_flux, times, initial=0.0)
    if mass_loss[-1] > leak_tolerance:
        raise TruncationError(
            f"mass loss {mass_loss[-1]:.3e} exceeds {leak_tolerance:.1e}; enlarge the box"
        )
    logger.debug("solve_cme: final mass loss %.3e, leak estimate %.3e", mass_loss[-1], leak_estimate[-1])
    return CmeSolution(times=times, distributions=out, mass_loss=mass_loss, leak_estimate=leak_estimate)


def moments(cme: TruncatedCme, u) -> Tuple[np.ndarray, np.ndarray]:
    """Rescaled mean ê = (1/V)E[n] and covariance v̂ = (1/V²)Cov[n] of u."""
    u = np.asarray(u, dtype=float)
    mass = u.sum()
    states = cme.box.states.astype(float)
    mean = (u @ states) / mass
    centred = states - mean
    cov = (centred * u[:, None]).T @ centred / mass
    return mean / cme.V, cov / cme.V**2


def invariant_set_mask(cme: TruncatedCme, n_bar) -> np.ndarray:
    """Boolean mask of the discrete invariant set {n : ℚn = ℚn̄} inside the box."""
    Q = cme.stoich.Q
    target = Q @ np.asarray(n_bar, dtype=int)
    return np.all(cme.box.states @ Q.T == target, axis=1)


# ============================================================
# Gradient structures
# ============================================================


@dataclass(frozen=True, eq=False)
class CmeGradientStructure:
    """Entropy 𝓔_V, Onsager operator 𝒦_V(u) and dual potentials at a fixed u > 0."""

    cme: TruncatedCme
    u: np.ndarray
    entropy: float
    d_entropy: np.ndarray
    pair_nu: np.ndarray
    pair_p: np.ndarray
    pair_q: np.ndarray

    @cached_property
    def _ratios(self) -> Tuple[np.ndarray, np.ndarray]:
        x = self.u / self.cme.w
        return x[self.pair_p], x[self.pair_q]

    def _difference(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        return mu[self.pair_p] - mu[self.pair_q]

    def _scatter(self, pair_values) -> np.ndarray:
        out = np.zeros(self.cme.box.size)
        np.add.at(out, self.pair_p, pair_values)
        np.subtract.at(out, self.pair_q, pair_values)
        return out

    def apply_K(self, mu) -> np.ndarray:
        """𝒦_V(u)μ = V Dᵀ diag(ν̂ Λ(x_p, x_q)) D μ."""
        xp, xq = self._ratios
        weights = self.pair_nu * np.asarray(log_mean(xp, xq))
        return self.cme.V * self._scatter(weights * self._difference(mu))

    def operator(self) -> sparse.csr_matrix:
        xp, xq = self._ratios
        weights = self.cme.V * self.pair_nu * np.asarray(log_mean(xp, xq))
        m = len(weights)
        D = sparse.coo_matrix(
            (np.concatenate([np.ones(m), -np.ones(m)]),
             (np.tile(np.arange(m), 2), np.concatenate([self.pair_p, self.pair_q]))),
            shape=(m, self.cme.box.size),
        ).tocsr()
        return (D.T @ sparse.diags(weights) @ D).tocsr()

    def psi_star_quadratic(self, mu) -> float:
        """(V/2) Σ ν̂ Λ(x_p, x_q)(μ_p − μ_q)²."""
        xp, xq = self._ratios
        diff = self._difference(mu)
        return 0.5 * self.cme.V * float(np.sum(self.pair_nu * np.asarray(log_mean(xp, xq)) * diff**2))

    def psi_star_cosh(self, mu) -> float:
        """(1/V) Σ ν̂ √(x_p x_q) C*(V(μ_p − μ_q))."""
        xp, xq = self._ratios
        zeta = self.cme.V * self._difference(mu)
        return float(np.sum(self.pair_nu * np.sqrt(xp * xq) * np.asarray(cosh_star(zeta)))) / self.cme.V

    def cosh_rate(self) -> np.ndarray:
        """D_μΨ*_cosh(u, −D𝓔_V(u)); reproduces 𝓑_V u up to leak."""
        xp, xq = self._ratios
        zeta = self.cme.V * self._difference(-self.d_entropy)
        return self._scatter(self.pair_nu * np.sqrt(xp * xq) * np.asarray(cosh_star_prime(zeta)))

    def dissipation_at_gradient(self) -> float:
        """Ψ*_V(u, −D𝓔_V(u)) = (1/2V) Σ ν̂ G(x_p, x_q)."""
        xp, xq = self._ratios
        return float(np.sum(self.pair_nu * np.asarray(G(xp, xq)))) / (2.0 * self.cme.V)


def lattice_entropy(cme: TruncatedCme, u) -> float:
    """𝓔_V(u) = (1/V) Σ u log(u/w) with 0 log 0 = 0."""
    w = cme.require_equilibrium()
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("lattice entropy needs u >= 0")
    terms = xlogy(u, u) - np.where(u > 0, u * np.log(w), 0.0)
    return float(np.sum(terms)) / cme.V


def cme_entropy_and_quadratic_form(cme: TruncatedCme, u) -> CmeGradientStructure:
    """
    Gradient structure of the CME at a strictly positive state u.

    Raises:
        ValueError: u not strictly positive or no equilibrium available
    """
    w = cme.require_equilibrium()
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("gradient structure needs a strictly positive state")
    n, p, q, r = _balanced_pairs(cme)
    nu = cme.nu_hat[n, r]
    return CmeGradientStructure(
        cme=cme,
        u=u,
        entropy=lattice_entropy(cme, u),
        d_entropy=np.log(u / w) / cme.V,
        pair_nu=nu,
        pair_p=p,
        pair_q=q,
    )


def gradient_flow_defect(cme: TruncatedCme, u) -> np.ndarray:
    """𝓑_V u + 𝒦_V(u) D𝓔_V(u) + leak∘u, zero up to rounding."""
    structure = cme_entropy_and_quadratic_form(cme, u)
    u = structure.u
    return cme.generator @ u + structure.apply_K(structure.d_entropy) + cme.leak * u


def cosh_rate(cme: TruncatedCme, u) -> np.ndarray:
    return cme_entropy_and_quadratic_form(cme, u).cosh_rate()


# ============================================================
# Non-explosion diagnostic
# ============================================================


@dataclass
class ReuterDiagnostic:
    """Summands r_{0,k} of Reuter's series along one irreducible component."""

    start: np.ndarray
    step: np.ndarray
    summands: np.ndarray
    partial_sums: np.ndarray
    tail_increasing: bool


def reuter_diagnostic(
    net: ReactionNetwork, box, k_terms: int, n0: Optional[Sequence[int]] = None
) -> ReuterDiagnostic:
    """
    Partial sums of Σ_k r_{0,k} for a single-reaction network.

    The chain n^(k) = n^(0) + k s with s = α − β ≥ 0 has birth rates
    b_k = k_bw 𝔹^β(n^(k) − β) and death rates d_k = k_fw 𝔹^α(n^(k) − α);
    r_{0,k} = (d_k⋯d_1)/(b_k⋯b_0), evaluated in log space.

    Raises:
        ValueError: not a single reversible reaction, or a two-signed α − β
            (irreducible components are then finite components)
    """
    if net.R != 1:
        raise ValueError("reuter_diagnostic needs a single-reaction network")
    reaction = net.reactions[0]
    if not reaction.reversible:
        raise ValueError("reuter_diagnostic needs a reversible reaction")
    V = box.V if isinstance(box, LatticeBox) else float(box)
    alpha = np.asarray(reaction.alpha)
    beta = np.asarray(reaction.beta)
    k_fw, k_bw = reaction.k_fw, reaction.k_bw
    s = alpha - beta
    if np.all(s <= 0):
        alpha, beta, k_fw, k_bw = beta, alpha, k_bw, k_fw
        s = -s
    elif not np.all(s >= 0):
        raise ValueError("alpha - beta has mixed signs: irreducible components are finite components")

    start = beta.copy() if n0 is None else np.asarray(n0, dtype=int)
    if k_terms <= 0:
        empty = np.zeros(0)
        return ReuterDiagnostic(start, s, empty, empty, False)

    ladder = start[None, :] + np.arange(k_terms + 1)[:, None] * s[None, :]
    log_b = np.log(k_bw) + log_intensity(V, beta, ladder - beta)
    log_d = np.log(k_fw) + log_intensity(V, alpha, ladder - alpha)
    if np.any(~np.isfinite(log_b)):
        raise ValueError("birth rate vanishes along the component")

    # r_{0,k} for k = 1..k_terms
    log_r = np.cumsum(log_d[1:]) - np.cumsum(log_b)[1:]
    summands = np.exp(log_r)
    partial = np.cumsum(summands)
    tail = summands[-3:]
    increasing = bool(len(tail) >= 2 and np.all(np.diff(tail) > 0))
    return ReuterDiagnostic(start, s, summands, partial, increasing)


# ============================================================
# Export helpers
# ============================================================


def distribution_rows(cme: TruncatedCme, u) -> Tuple[List[str], np.ndarray]:
    """Header and rows (flat index, multi-index, u_n, w_n)."""
    u = np.asarray(u, dtype=float)
    w = cme.w if cme.w is not None else np.full(cme.box.size, np.nan)
    header = ["index"] + [f"n_{name}" for name in cme.net.species_names] + ["u", "w"]
    rows = np.column_stack([np.arange(cme.box.size), cme.box.states, u, w])
    return header, rows


def generator_triplets(cme: TruncatedCme) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    coo = cme.generator.tocoo()
    return coo.row, coo.col, coo.data
