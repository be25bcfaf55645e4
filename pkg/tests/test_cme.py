#!/usr/bin/env python3
"""
Tests for the truncated chemical master equation: generator assembly, Poisson
equilibria, time evolution, moments, the CME gradient structure and the
non-explosion diagnostic.
"""

import math
import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest
from scipy.stats import poisson

from src.cme import (
    LatticeBox,
    TruncationError,
    assemble_generator,
    choose_box,
    cme_entropy_and_quadratic_form,
    cosh_rate,
    detailed_balance_residual,
    distribution_rows,
    gradient_flow_defect,
    intensity,
    invariant_set_mask,
    lattice_entropy,
    moments,
    poisson_state,
    residual_scale,
    reuter_diagnostic,
    solve_cme,
    stationarity_residual,
)
from src.network import parse_network

NETWORKS = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "networks"))


def _network(name: str):
    with open(os.path.join(NETWORKS, name), encoding="utf-8") as f:
        return parse_network(f.read())


def _unnormalized_poisson(box: LatticeBox, mean: float) -> np.ndarray:
    return poisson.pmf(box.states[:, 0], mean)


# ============================================================
# Boxes and intensities
# ============================================================


def test_lattice_box_indexing():
    """Flat indices follow C order; outside points map to −1"""
    box = LatticeBox((2, 3), 10.0)
    assert box.shape == (3, 4)
    assert box.size == 12
    assert box.index([[1, 2]]).tolist() == [6]
    assert box.index([[3, 0], [-1, 0]]).tolist() == [-1, -1]
    assert np.array_equal(box.states[7], [1, 3])


def test_choose_box_covers_poisson_tail():
    """The chosen box leaves less than the requested tail mass outside"""
    box = choose_box([2.0], 20.0, tail=1e-12)
    assert poisson.sf(box.n_max[0], 40.0) < 1e-12


def test_intensity_values():
    """𝔹_V^α(n) = V(n+α)!/(V^{|α|} n!)"""
    V = 10.0
    assert intensity(V, [0], [3]) == pytest.approx(V)
    assert intensity(V, [1], [3]) == pytest.approx(4.0)
    assert intensity(V, [2], [3]) == pytest.approx(20.0 / V)
    assert intensity(V, [1, 1], [0, 2]) == pytest.approx(3.0 / V)
    assert intensity(V, [1], [-1]) == 0.0


# ============================================================
# Generator and equilibria
# ============================================================


def test_generator_columns_sum_to_minus_leak():
    """Probability leaves only through the box boundary"""
    cme = assemble_generator(_network("two_pair.net"), choose_box([1.0], 10.0))
    col_sums = np.asarray(cme.generator.sum(axis=0)).ravel()
    assert np.allclose(col_sums, -cme.leak, atol=1e-10)
    assert cme.max_exit_rate > 0


def test_poisson_equilibrium_is_stationary_1d():
    """𝓑_V w + leak∘w = 0 for the balanced two-pair network"""
    cme = assemble_generator(_network("two_pair.net"), choose_box([1.0], 20.0))
    w = cme.require_equilibrium()
    assert w.sum() == pytest.approx(1.0)
    residual = stationarity_residual(cme, w) + cme.leak * w
    assert np.all(np.abs(residual) <= 1e-12 * (residual_scale(cme, w) + 1e-300))
    assert detailed_balance_residual(cme) < 1e-10


def test_poisson_equilibrium_is_stationary_2d():
    """X1 ⇌ 2X2 with c_* = (1, 1) has a product Poisson equilibrium"""
    cme = assemble_generator(_network("isomerization.net"), choose_box([1.0, 1.0], 8.0))
    w = cme.require_equilibrium()
    residual = stationarity_residual(cme, w) + cme.leak * w
    assert np.max(np.abs(residual)) <= 1e-12 * max(1.0, np.max(residual_scale(cme, w)))


def test_poisson_is_not_stationary_without_detailed_balance():
    """With a = 7, (𝓑_V w)_n = w_n(3n − 3V − 3n(n−1)/(4V)) for w = Poisson(2V)"""
    V = 20.0
    cme = assemble_generator(_network("two_pair_unbalanced.net"), choose_box([2.0], V))
    assert cme.w is None
    w = _unnormalized_poisson(cme.box, 2.0 * V)
    n = cme.box.states[:, 0].astype(float)
    expected = w * (3.0 * n - 3.0 * V - 3.0 * n * (n - 1.0) / (4.0 * V))
    residual = stationarity_residual(cme, w)
    scale = residual_scale(cme, w)
    inside = (n >= 1) & (n <= 60)
    assert np.all(np.abs(residual - expected)[inside] <= 1e-10 * scale[inside])
    # the defect is of the same order as the terms themselves
    assert np.max(np.abs(residual[inside]) / scale[inside]) > 1e-2


def test_poisson_is_not_stationary_for_one_way_network():
    """For 0 → X, 2X → 0: (𝓑_V w)_n = w_n(2n − V − n(n−1)/V) with w = Poisson(V)"""
    V = 20.0
    cme = assemble_generator(_network("one_way.net"), choose_box([1.0], V))
    w = _unnormalized_poisson(cme.box, V)
    n = cme.box.states[:, 0].astype(float)
    expected = w * (2.0 * n - V - n * (n - 1.0) / V)
    residual = stationarity_residual(cme, w)
    scale = residual_scale(cme, w)
    inside = n <= cme.box.n_max[0] - 2
    assert np.all(np.abs(residual - expected)[inside] <= 1e-10 * scale[inside])


def test_tail_check_rejects_small_box():
    """A box far below the equilibrium mean is refused"""
    with pytest.raises(TruncationError):
        assemble_generator(_network("two_pair.net"), LatticeBox((5,), 20.0))


# ============================================================
# Time evolution
# ============================================================


def test_birth_death_stays_poisson():
    """From Poisson(Vc0) the solution is Poisson(Vc(t)), c(t) = 1 + (c0 − 1)e^{−t}"""
    V = 20.0
    net = _network("birth_death.net")
    cme = assemble_generator(net, choose_box([2.0], V))
    u0 = poisson_state(cme.box, [2.0])
    times = np.linspace(0.0, 2.0, 5)
    solution = solve_cme(cme, u0, times)
    for k, t in enumerate(times):
        c_t = 1.0 + math.exp(-t)
        exact = poisson_state(cme.box, [c_t])
        assert np.max(np.abs(solution.distributions[k] - exact)) < 1e-9
        mean, cov = moments(cme, solution.distributions[k])
        assert mean[0] == pytest.approx(c_t, rel=1e-8)
        assert cov[0, 0] == pytest.approx(c_t / V, rel=1e-6)
    assert np.all(solution.mass_loss < 1e-9)
    assert solution.leak_estimate[0] == 0.0


def test_solve_cme_validates_times():
    """Output times must start at 0 and increase"""
    cme = assemble_generator(_network("birth_death.net"), choose_box([1.0], 5.0))
    u0 = poisson_state(cme.box, [1.0])
    with pytest.raises(ValueError):
        solve_cme(cme, u0, [0.5, 1.0])
    with pytest.raises(ValueError):
        solve_cme(cme, u0, [0.0, 1.0, 1.0])


def test_solve_cme_reports_leak():
    """A box too small for the dynamics raises on mass loss"""
    net = _network("birth_death.net")
    cme = assemble_generator(net, LatticeBox((40,), 5.0))
    u0 = np.zeros(cme.box.size)
    u0[40] = 1.0
    with pytest.raises(TruncationError):
        solve_cme(cme, u0, [0.0, 0.5])


def test_invariant_set_mask():
    """States with 2n1 + n2 fixed form the invariant set"""
    cme = assemble_generator(_network("isomerization.net"), choose_box([1.0, 1.0], 8.0))
    mask = invariant_set_mask(cme, [1, 2])
    states = cme.box.states[mask]
    assert np.all(2 * states[:, 0] + states[:, 1] == 4)
    assert mask.sum() == 3


# ============================================================
# Gradient structure
# ============================================================


def _positive_state(cme, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = cme.w * np.exp(rng.normal(0.0, 0.3, cme.box.size))
    return u / u.sum()


def test_gradient_flow_defect_vanishes():
    """𝓑_V u = −𝒦_V(u)D𝓔_V(u) − leak∘u for any positive u"""
    for name, c_ref in (("two_pair.net", [1.0]), ("isomerization.net", [1.0, 1.0])):
        cme = assemble_generator(_network(name), choose_box(c_ref, 8.0))
        u = _positive_state(cme)
        defect = gradient_flow_defect(cme, u)
        assert np.max(np.abs(defect)) <= 1e-10 * max(1.0, np.max(residual_scale(cme, u)))


def test_cosh_rate_reproduces_generator():
    """The cosh structure gives 𝓑_V u + leak∘u"""
    cme = assemble_generator(_network("two_pair.net"), choose_box([1.0], 8.0))
    u = _positive_state(cme, seed=3)
    expected = cme.generator @ u + cme.leak * u
    assert np.allclose(cosh_rate(cme, u), expected, atol=1e-10 * np.max(residual_scale(cme, u)))


def test_quadratic_form_and_entropy():
    """𝓔_V(w) = 0, 𝓔_V > 0 elsewhere, Ψ*(μ) = ½⟨μ, 𝒦μ⟩ and the operator is symmetric"""
    cme = assemble_generator(_network("two_pair.net"), choose_box([1.0], 8.0))
    assert lattice_entropy(cme, cme.w) == pytest.approx(0.0, abs=1e-14)
    u = _positive_state(cme, seed=1)
    structure = cme_entropy_and_quadratic_form(cme, u)
    assert structure.entropy > 0
    mu = np.random.default_rng(2).normal(size=cme.box.size)
    assert structure.psi_star_quadratic(mu) == pytest.approx(0.5 * mu @ structure.apply_K(mu), rel=1e-10)
    K = structure.operator()
    assert np.allclose(K @ mu, structure.apply_K(mu))
    assert abs(K - K.T).max() < 1e-12 * abs(K).max()
    assert structure.dissipation_at_gradient() > 0
    assert structure.psi_star_cosh(np.zeros(cme.box.size)) == 0.0


def test_gradient_structure_requires_positive_state():
    """Zero entries are outside the gradient form"""
    cme = assemble_generator(_network("two_pair.net"), choose_box([1.0], 8.0))
    u = cme.w.copy()
    u[0] = 0.0
    with pytest.raises(ValueError):
        cme_entropy_and_quadratic_form(cme, u)


# ============================================================
# Diagnostics and export
# ============================================================


def test_reuter_diagnostic_birth_death():
    """Birth–death summands r_{0,k} = k!/V^{k+1} grow: the series diverges"""
    V = 5.0
    diag = reuter_diagnostic(_network("birth_death.net"), V, k_terms=30)
    assert diag.summands[0] == pytest.approx(1.0 / V**2)
    assert diag.summands[5] == pytest.approx(math.factorial(6) / V**7)
    assert diag.tail_increasing
    assert np.all(np.diff(diag.partial_sums) > 0)


def test_reuter_diagnostic_rejects_mixed_steps():
    """X1 ⇌ 2X2 has finite components"""
    with pytest.raises(ValueError):
        reuter_diagnostic(_network("isomerization.net"), 5.0, k_terms=10)
    with pytest.raises(ValueError):
        reuter_diagnostic(_network("two_pair.net"), 5.0, k_terms=10)


def test_distribution_rows_layout():
    """Rows carry index, multi-index, u and w"""
    cme = assemble_generator(_network("isomerization.net"), choose_box([1.0, 1.0], 4.0))
    header, rows = distribution_rows(cme, cme.w)
    assert header == ["index", "n_X1", "n_X2", "u", "w"]
    assert rows.shape == (cme.box.size, 5)
    assert np.allclose(rows[:, 3], rows[:, 4])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
