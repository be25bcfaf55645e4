#!/usr/bin/env python3
"""
Tests for the reaction-rate equation: rates, entropy, Onsager operators,
generalized dissipation potentials, integration and steady states.
"""

import math
import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

from src.kernels import QUADRATIC, power_generator
from src.network import DetailedBalanceError, ReactionNetwork, parse_network
from src.rre import (
    COSH_PSI,
    DissipationSpec,
    RreSystem,
    dissipation_rate,
    dual_dissipation,
    entropy,
    entropy_gradient,
    force_to_rate,
    integrate_rre,
    joint_steady_state,
    markov_entropy_gradient,
    markov_onsager,
    onsager_matrix,
    quartic_psi,
    rate_jacobian,
    rate_vector,
    tilt_weights,
)

NETWORKS = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "networks"))


def _system(name: str) -> RreSystem:
    with open(os.path.join(NETWORKS, name), encoding="utf-8") as f:
        return RreSystem.from_network(parse_network(f.read()))


def _balanced_network(seed: int = 0) -> ReactionNetwork:
    """Three species, four pairs, rates built from a chosen (c_*, κ_*)."""
    rng = np.random.default_rng(seed)
    alpha = np.array([[1, 0, 0], [0, 2, 0], [1, 1, 0], [0, 0, 0]])
    beta = np.array([[0, 2, 0], [0, 0, 1], [0, 0, 1], [1, 0, 0]])
    c_star = rng.uniform(0.5, 2.0, 3)
    kappa = rng.uniform(0.5, 3.0, 4)
    k_fw = kappa / np.prod(c_star ** alpha, axis=1)
    k_bw = kappa / np.prod(c_star ** beta, axis=1)
    return ReactionNetwork.from_arrays(["A", "B", "C"], alpha, beta, k_fw, k_bw)


# ============================================================
# Rates and gradient structure
# ============================================================


def test_rate_vector_example():
    """ċ = −R(c) = 2(1 − c²) for the one-way network"""
    sys_ = _system("one_way.net")
    for c in (0.0, 0.5, 1.0, 3.0):
        assert -rate_vector(sys_, [c])[0] == pytest.approx(2.0 * (1.0 - c * c))


def test_rate_jacobian_matches_finite_differences():
    """DR against central differences"""
    sys_ = RreSystem.from_network(_balanced_network())
    c = np.array([0.7, 1.3, 0.9])
    h = 1e-6
    numeric = np.column_stack(
        [(rate_vector(sys_, c + h * e) - rate_vector(sys_, c - h * e)) / (2 * h) for e in np.eye(3)]
    )
    assert np.allclose(rate_jacobian(sys_, c), numeric, rtol=1e-6, atol=1e-8)


def test_onsager_identity_on_random_balanced_networks():
    """𝕂(c)DE(c) = R(c) away from equilibrium"""
    for seed in range(4):
        sys_ = RreSystem.from_network(_balanced_network(seed))
        assert sys_.db.holds
        rng = np.random.default_rng(100 + seed)
        for _ in range(5):
            c = rng.uniform(0.1, 3.0, 3)
            lhs = onsager_matrix(sys_, c) @ entropy_gradient(sys_, c)
            assert np.allclose(lhs, rate_vector(sys_, c), rtol=1e-9, atol=1e-12)


def test_onsager_matrix_is_symmetric_positive_semidefinite():
    """𝕂 is symmetric with nonnegative spectrum"""
    sys_ = RreSystem.from_network(_balanced_network(3))
    K = onsager_matrix(sys_, np.array([0.4, 2.0, 1.1]))
    assert np.allclose(K, K.T)
    assert np.min(np.linalg.eigvalsh(K)) > -1e-12


def test_entropy_and_dissipation():
    """E(c_*) = 0, E > 0 elsewhere, DE·R equals the dissipation rate"""
    sys_ = RreSystem.from_network(_balanced_network(1))
    assert entropy(sys_, sys_.c_star) == pytest.approx(0.0, abs=1e-12)
    c = np.array([0.3, 1.7, 2.2])
    assert entropy(sys_, c) > 0
    rate = dissipation_rate(sys_, c)
    assert rate > 0
    assert rate == pytest.approx(entropy_gradient(sys_, c) @ rate_vector(sys_, c), rel=1e-10)


def test_entropy_requires_detailed_balance():
    """Without c_* there is no entropy"""
    sys_ = _system("two_pair_unbalanced.net")
    with pytest.raises(DetailedBalanceError):
        entropy(sys_, [1.0])


def test_gradient_form_rejects_boundary():
    """DE is singular on the boundary"""
    sys_ = _system("birth_death.net")
    with pytest.raises(ValueError):
        entropy_gradient(sys_, [0.0])


@pytest.mark.parametrize(
    "dissipation",
    [
        DissipationSpec("quadratic"),
        DissipationSpec("cosh"),
        DissipationSpec.general(quartic_psi(0.5), 4),
        DissipationSpec.general(COSH_PSI, 4),
    ],
)
def test_force_to_rate_for_every_dissipation(dissipation):
    """∂_ζΨ*(c, −DE) = −R for quadratic, cosh and general ψ"""
    sys_ = RreSystem.from_network(_balanced_network(2))
    c = np.array([1.4, 0.6, 0.8])
    assert np.allclose(force_to_rate(sys_, dissipation, c), -rate_vector(sys_, c), rtol=1e-9, atol=1e-12)


def test_tilt_weights_and_dual_dissipation():
    """Cosh weights are κ√(ab); Ψ* vanishes at ζ = 0 and is positive otherwise"""
    sys_ = _system("birth_death.net")
    c = np.array([2.0])
    # a = 1, b = c/c_* = 2
    assert tilt_weights(sys_, DissipationSpec("cosh"), c) == pytest.approx([math.sqrt(2.0)])
    quartic = DissipationSpec.general(quartic_psi(1.0), 1)
    assert tilt_weights(sys_, quartic, np.array([1.0 + 1e-12])) == pytest.approx([1.0])
    assert dual_dissipation(sys_, quartic, c, [0.0]) == 0.0
    assert dual_dissipation(sys_, quartic, c, [0.3]) > 0.0


def test_markov_onsager_for_any_generator():
    """For X1 ⇌ X2 ⇌ X3 the identity 𝕂_M^φ DE^φ = R holds for every φ"""
    net = parse_network("species X1 X2 X3\nX1 <-> X2 : kf=2, kb=1\nX2 <-> X3 : kf=0.5, kb=3\n")
    sys_ = RreSystem.from_network(net)
    c = np.array([0.9, 2.5, 0.3])
    for gen in (QUADRATIC, power_generator(1.5)):
        lhs = markov_onsager(sys_, c, gen) @ markov_entropy_gradient(sys_, c, gen)
        assert np.allclose(lhs, rate_vector(sys_, c), rtol=1e-9)
    with pytest.raises(ValueError):
        markov_onsager(_system("dimerization.net"), [1.0])


# ============================================================
# Integration
# ============================================================


def test_integrate_birth_death_exact():
    """c(t) = 1 + e^{−t} from c(0) = 2"""
    sys_ = _system("birth_death.net")
    t_eval = np.linspace(0.0, 3.0, 7)
    traj = integrate_rre(sys_, [2.0], 3.0, tol=1e-10, t_eval=t_eval)
    assert np.allclose(traj.times, t_eval)
    assert np.allclose(traj.states[:, 0], 1.0 + np.exp(-t_eval), rtol=1e-7)
    assert traj.header() == ["t", "c_X", "E", "dissipation"]
    assert traj.table().shape == (7, 4)


def test_integrate_dimerization_exact():
    """ċ = 2(1 − c²) from c(0) = 2 is c = coth(2t + atanh(1/2))"""
    sys_ = _system("dimerization.net")
    traj = integrate_rre(sys_, [2.0], 1.0, tol=1e-10, t_eval=[0.0, 0.5, 1.0])
    expected = 1.0 / np.tanh(2.0 * np.array([0.0, 0.5, 1.0]) + math.atanh(0.5))
    assert np.allclose(traj.states[:, 0], expected, rtol=1e-7)


def test_energy_decreases_and_conservation_holds():
    """E is nonincreasing, ℚc is constant and the energy balance closes"""
    sys_ = _system("isomerization.net")
    traj = integrate_rre(sys_, [1.0, 0.5], 4.0, tol=1e-10, t_eval=np.linspace(0, 4, 801))
    assert np.all(np.diff(traj.energy) <= 1e-10)
    assert np.allclose(traj.conserved[:, 0], 2.5, atol=1e-8)
    assert np.max(np.abs(traj.residual)) < 1e-4


def test_integration_stays_nonnegative():
    """Starting on the boundary the solution stays in the closed orthant"""
    sys_ = _system("one_way.net")
    traj = integrate_rre(sys_, [0.0], 2.0, tol=1e-8)
    assert np.all(traj.states >= 0)
    assert traj.states[-1, 0] == pytest.approx(math.tanh(4.0), rel=1e-6)
    assert np.all(np.isnan(traj.energy))


def test_joint_steady_state_without_detailed_balance():
    """a = 7 relaxes to the joint steady state c = 2"""
    sys_ = _system("two_pair_unbalanced.net")
    assert not sys_.db.holds
    c = joint_steady_state(sys_, np.array([1.0]))
    assert c == pytest.approx([2.0], rel=1e-10)


def test_joint_steady_state_keeps_invariant_set():
    """Steady state of X1 ⇌ 2X2 stays on 2c1 + c2 = 2.5"""
    sys_ = _system("isomerization.net")
    c = joint_steady_state(sys_, np.array([1.0, 0.5]))
    assert 2 * c[0] + c[1] == pytest.approx(2.5, rel=1e-10)
    assert c[0] == pytest.approx(c[1] ** 2, rel=1e-8)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
