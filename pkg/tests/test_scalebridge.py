#!/usr/bin/env python3
"""
Tests for the lattice/concentration bridge: embeddings, the Stirling entropy
density, Liouville transport and the energy audits.
"""

import math
import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from src.cme import LatticeBox, assemble_generator, choose_box, lattice_entropy, poisson_state, solve_cme
from src.network import parse_network
from src.rre import RreSystem
from src.scalebridge import (
    GridDensity,
    ParticleEnsemble,
    cme_energy_audit,
    convergence_experiment,
    dual_embed,
    embed,
    fit_coercivity,
    fit_entropy_bound,
    grid_expectation,
    grid_mean,
    grid_relative_entropy,
    limit_energy,
    liouville_dissipation,
    project,
    solve_liouville,
    stirling_entropy_density,
    stirling_gap_identity,
)

NETWORKS = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "networks"))


def _system(name: str) -> RreSystem:
    with open(os.path.join(NETWORKS, name), encoding="utf-8") as f:
        return RreSystem.from_network(parse_network(f.read()))


# ============================================================
# Densities and embeddings
# ============================================================


def test_particle_ensemble_validation():
    """Weights must be positive and sum to one"""
    with pytest.raises(ValueError):
        ParticleEnsemble([0.5, 0.4], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        ParticleEnsemble([1.5, -0.5], [[1.0], [2.0]])
    rho = ParticleEnsemble.dirac([1.5, 0.5])
    assert rho.mean().tolist() == [1.5, 0.5]


def test_embedding_mass_and_mean():
    """ι_V keeps mass and shifts the mean by half a cube"""
    V = 10.0
    box = choose_box([1.5], V)
    u = poisson_state(box, [1.5])
    rho = embed(box, u)
    assert rho.total_mass() == pytest.approx(1.0)
    mean_n = u @ box.states[:, 0] / V
    assert grid_mean(rho)[0] == pytest.approx(mean_n + 0.5 / V, rel=1e-12)


def test_project_recovers_lattice_state():
    """ϰ_V ∘ ι_V is the identity on the box"""
    box = LatticeBox((4, 3), 5.0)
    u = np.random.default_rng(0).random(box.size)
    u /= u.sum()
    box2, u2 = project(embed(box, u), 5.0)
    assert box2.n_max == box.n_max
    assert np.allclose(u2, u)


def test_project_rejects_misaligned_grid():
    """Grid cells must coincide with lattice cubes"""
    rho = GridDensity((np.linspace(0.0, 1.0, 8),), np.ones(7))
    with pytest.raises(ValueError):
        project(rho, 5.0)


def test_dual_embed_cube_averages():
    """ι_V^*ξ averages ξ over each cube"""
    box = LatticeBox((5,), 4.0)
    ones = dual_embed(lambda c: np.ones(len(c)), box)
    assert np.allclose(ones, 1.0)
    linear = dual_embed(lambda c: c[:, 0], box)
    assert np.allclose(linear, (np.arange(6) + 0.5) / 4.0)


def test_grid_expectation_quadrature():
    """Cellwise Gauss–Legendre integrates polynomials exactly"""
    edges = (np.linspace(0.0, 2.0, 5), np.linspace(0.0, 1.0, 3))
    rho = GridDensity(edges, np.full((4, 2), 0.5))
    assert rho.total_mass() == pytest.approx(1.0)
    assert grid_expectation(rho, lambda c: c[:, 0] ** 2 * c[:, 1]) == pytest.approx(0.5 * (8.0 / 3.0) * 0.5)


# ============================================================
# Stirling entropy density
# ============================================================


def test_stirling_gap_identity_holds():
    """E_V(c) − E(n/V) = −I log V/V + (1/2V) Σ log(2πk_n) pointwise"""
    rng = np.random.default_rng(4)
    for V in (3.0, 20.0, 150.0):
        c = rng.uniform(0.0, 4.0, (25, 2))
        lhs, rhs = stirling_gap_identity(c, V, [1.0, 0.7])
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_stirling_entropy_density_is_piecewise_constant():
    """E_V is constant on each cube A_n^V"""
    V = 10.0
    values = stirling_entropy_density([[0.30], [0.35], [0.399]], V, [1.0])
    assert np.allclose(values, values[0])
    with pytest.raises(ValueError):
        stirling_entropy_density([[-0.1]], V, [1.0])


def test_entropy_bound_constant_is_uniform_in_V():
    """K(V) settles: relative spread below 20%"""
    fit = fit_entropy_bound([1.0], [50.0, 100.0, 200.0, 400.0])
    assert set(fit["K"]) == {50.0, 100.0, 200.0, 400.0}
    assert 0.0 < fit["K_star"] < 1.0
    assert fit["spread"] < 0.2


def test_grid_relative_entropy_matches_lattice_entropy():
    """Ê_V(ι_V u) = 𝓔_V(u) up to the box normalization"""
    V = 12.0
    net = parse_network("species X\n0 <-> X : kf=1.5, kb=1\n")
    cme = assemble_generator(net, choose_box([2.0], V))
    u = poisson_state(cme.box, [2.0])
    value = grid_relative_entropy(embed(cme.box, u), V, [1.5])
    assert value == pytest.approx(lattice_entropy(cme, u), abs=1e-9)


def test_fit_coercivity_is_finite():
    """The coercivity constant stays bounded over a Poisson family"""
    sys_ = _system("birth_death.net")
    fit = fit_coercivity(sys_, [10.0, 20.0], [[0.5], [1.0], [3.0]])
    assert np.isfinite(fit["C_star"])
    assert fit["slope"] == 0.5
    assert set(fit["C"]) == {10.0, 20.0}


# ============================================================
# Liouville transport
# ============================================================


def test_liouville_transport_follows_characteristics():
    """Atoms move along c(t) = 1 + (c0 − 1)e^{−t} and the energy identity closes"""
    sys_ = _system("birth_death.net")
    rho0 = ParticleEnsemble([0.25, 0.75], [[0.5], [2.0]])
    sol = solve_liouville(sys_, rho0, 3.0)
    t = sol.times[-1]
    assert sol.points[-1, 0, 0] == pytest.approx(1.0 - 0.5 * math.exp(-t), rel=1e-8)
    assert sol.points[-1, 1, 0] == pytest.approx(1.0 + math.exp(-t), rel=1e-8)
    assert np.max(np.abs(sol.residual)) < 1e-6
    assert np.all(np.diff(sol.energy) <= 1e-12)
    assert limit_energy(sol.at(100), sys_) == pytest.approx(sol.energy[100])


def test_liouville_dissipation_with_entropy_gradient():
    """Ψ*_Lio(ϱ, DE) equals half the mean dissipation rate"""
    sys_ = _system("birth_death.net")
    rho = ParticleEnsemble([0.5, 0.5], [[0.5], [2.0]])
    default = liouville_dissipation(rho, sys_)
    explicit = liouville_dissipation(rho, sys_, lambda c: np.log(np.asarray(c) / sys_.c_star))
    assert default == pytest.approx(explicit, rel=1e-10)
    # G(1, c) = (1 − c)(−log c)
    expected = 0.25 * (0.5 * math.log(2.0) + math.log(2.0))
    assert default == pytest.approx(expected, rel=1e-10)


def test_liouville_requires_detailed_balance():
    """Without c_* the Liouville dissipation is undefined"""
    sys_ = _system("two_pair_unbalanced.net")
    with pytest.raises(ValueError):
        solve_liouville(sys_, ParticleEnsemble.dirac([1.0]), 1.0)


# ============================================================
# Energy audits
# ============================================================


def test_cme_energy_audit_closes():
    """𝓔_V decreases and 𝓔_V(t) + ∫2Ψ*_V = 𝓔_V(0) along a birth–death solve"""
    V = 10.0
    sys_ = _system("birth_death.net")
    cme = assemble_generator(sys_.net, choose_box([2.0], V))
    times = np.linspace(0.0, 3.0, 301)
    solution = solve_cme(cme, poisson_state(cme.box, [2.0]), times)
    audit = cme_energy_audit(cme, times, solution.distributions)
    assert np.all(np.diff(audit.entropy) <= 1e-12)
    assert np.all(audit.dissipation >= 0)
    assert np.max(np.abs(audit.residual)) < 1e-4
    header, rows = audit.table()
    assert header == ["t", "E_V", "dissipation", "residual"]
    assert rows.shape == (301, 4)


def test_convergence_to_rre():
    """Mean errors decrease with V at a rate close to 1/V"""
    sys_ = _system("dimerization.net")
    table = convergence_experiment(sys_, [2.0], 1.0, [25.0, 50.0, 100.0])
    errors = [row.mean_err for row in table.rows]
    assert errors[0] > errors[1] > errors[2]
    assert table.slope_estimate < -0.7
    header, data = table.table()
    assert header == ["V", "mean_err", "energy_err", "slope_estimate"]
    assert data.shape == (3, 4)


def test_convergence_rejects_bad_volume_lists():
    """Empty or non-increasing V lists are refused"""
    sys_ = _system("dimerization.net")
    with pytest.raises(ValueError):
        convergence_experiment(sys_, [2.0], 1.0, [])
    with pytest.raises(ValueError):
        convergence_experiment(sys_, [2.0], 1.0, [50.0, 25.0])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
