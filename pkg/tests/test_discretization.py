import dataclasses
import math

import numpy as np
import pytest

from timolab.coefficients import make_power_profile
from timolab.constants import BeamModel, BoundaryType, Feedback, poincare_dirichlet
from timolab.discretization import (
    Mesh,
    assemble,
    build_mesh,
    recover_fluxes,
    recover_origin_fluxes,
    solve_static,
)


def power_model(theta_k=0.5, theta_ei=0.5, scale_k=1.0, scale_ei=1.0, rho=1.0,
                i_rho=1.0, ell=1.0, bc=BoundaryType.DIRICHLET, gamma=0.0,
                delta=0.0, feedback=None):
    return BeamModel(
        rho=rho,
        i_rho=i_rho,
        ell=ell,
        K=make_power_profile(theta_k, scale=scale_k, ell=ell),
        EI=make_power_profile(theta_ei, scale=scale_ei, ell=ell),
        bc=bc,
        gamma=gamma,
        delta=delta,
        feedback=feedback,
    )


def build(model, n):
    return assemble(model, build_mesh(model.ell, n, model.mu))


# ---------------------------------------------------------------------------
# oracle: hand assembly of the two-element unit-coefficient system.
# Element matrices written out term by term: one-point shear with strain
# (w_1-w_0)/h + (psi_0+psi_1)/2, constant bending strain, consistent mass.

def hand_assembled_two_element_system():
    h = 0.5
    g = np.array([-1.0 / h, 0.5, 1.0 / h, 0.5])
    b = np.array([0.0, -1.0 / h, 0.0, 1.0 / h])
    element = 1.0 * h * np.outer(g, g) + 1.0 * h * np.outer(b, b)
    stiffness = np.zeros((6, 6))
    stiffness[0:4, 0:4] += element
    stiffness[2:6, 2:6] += element
    cell = (h / 6.0) * np.array([[2.0, 1.0], [1.0, 2.0]])
    mass = np.zeros((6, 6))
    for lo in (0, 2):
        mass[np.ix_([lo, lo + 2], [lo, lo + 2])] += cell
        mass[np.ix_([lo + 1, lo + 3], [lo + 1, lo + 3])] += cell
    return mass, stiffness


# ---------------------------------------------------------------------------
# meshes

class TestBuildMesh:
    def test_equidistant_when_not_degenerate(self):
        mesh = build_mesh(1.0, 4, 0.0)
        assert mesh.p == 1.0
        np.testing.assert_allclose(mesh.nodes, [0.0, 0.25, 0.5, 0.75, 1.0], atol=0)

    def test_quadratic_grading(self):
        mesh = build_mesh(1.0, 4, 1.0)
        assert mesh.p == 2.0
        np.testing.assert_allclose(
            mesh.nodes, [0.0, 1.0 / 16.0, 0.25, 9.0 / 16.0, 1.0], atol=1e-15
        )

    def test_extreme_grading_stays_increasing(self):
        mesh = build_mesh(1.0, 64, 1.9)
        assert mesh.p == pytest.approx(20.0)
        assert np.all(np.diff(mesh.nodes) > 0.0)

    def test_length_scaling(self):
        mesh = build_mesh(3.0, 8, 0.5)
        assert mesh.ell == 3.0
        assert mesh.nodes[0] == 0.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            build_mesh(0.0, 8, 0.5)
        with pytest.raises(ValueError):
            build_mesh(1.0, 1, 0.5)
        with pytest.raises(ValueError):
            build_mesh(1.0, 8, 2.0)

    def test_mesh_invariants_enforced(self):
        with pytest.raises(ValueError, match="increasing"):
            Mesh(nodes=np.array([0.0, 0.5, 0.5, 1.0]), p=1.0)
        with pytest.raises(ValueError, match="x = 0"):
            Mesh(nodes=np.array([0.1, 0.5, 1.0]), p=1.0)


# ---------------------------------------------------------------------------
# assembly

class TestAssemble:
    def test_two_element_hand_assembly(self):
        model = power_model(theta_k=0.0, theta_ei=0.0)
        disc = build(model, 2)
        mass_expected, stiffness_expected = hand_assembled_two_element_system()
        np.testing.assert_allclose(disc.mass, mass_expected, atol=1e-14)
        np.testing.assert_allclose(disc.stiffness, stiffness_expected, atol=1e-14)
        # clamped at both ends: only the middle node is free
        assert disc.constrained_dofs == (0, 1, 4, 5)
        np.testing.assert_array_equal(disc.free_dofs, [2, 3])

    @pytest.mark.parametrize("bc,gamma,delta", [
        (BoundaryType.DIRICHLET, 0.0, 0.0),
        (BoundaryType.ROBIN, 2.0, 3.0),
        (BoundaryType.NEUMANN, 0.0, 0.0),
    ])
    def test_stiffness_exactly_symmetric(self, bc, gamma, delta):
        model = power_model(theta_k=0.7, theta_ei=1.3 if bc is not BoundaryType.NEUMANN else 0.9,
                            bc=bc, gamma=gamma, delta=delta)
        disc = build(model, 16)
        assert np.array_equal(disc.stiffness, disc.stiffness.T)
        assert np.array_equal(disc.mass, disc.mass.T)

    def test_interleaved_bandwidth(self):
        disc = build(power_model(theta_k=0.5, theta_ei=1.2), 32)
        i, j = np.indices(disc.stiffness.shape)
        assert np.all(disc.stiffness[np.abs(i - j) > 3] == 0.0)
        assert np.all(disc.mass[np.abs(i - j) > 3] == 0.0)

    def test_robin_adds_exactly_one_on_boundary_diagonal(self):
        robin = build(power_model(bc=BoundaryType.ROBIN, gamma=1.0, delta=1.0), 8)
        plain = build(power_model(bc=BoundaryType.NEUMANN), 8)
        difference = robin.stiffness - plain.stiffness
        expected = np.zeros_like(difference)
        expected[-2, -2] = 1.0
        expected[-1, -1] = 1.0
        np.testing.assert_array_equal(difference, expected)
        np.testing.assert_array_equal(robin.stiffness_interior, plain.stiffness)

    def test_constraints_follow_degeneracy_kind(self):
        weak_weak = build(power_model(theta_k=0.5, theta_ei=0.5), 8)
        assert weak_weak.constrained_dofs == (0, 1, 16, 17)
        strong_k = build(power_model(theta_k=1.5, theta_ei=0.5), 8)
        assert strong_k.constrained_dofs == (1, 16, 17)
        strong_both = build(power_model(theta_k=1.5, theta_ei=1.2,
                                        bc=BoundaryType.ROBIN, gamma=1.0, delta=1.0), 8)
        assert strong_both.constrained_dofs == ()

    def test_mass_positive_definite_on_free_dofs(self):
        disc = build(power_model(theta_k=1.5, theta_ei=0.5), 16)
        free = disc.free_dofs
        eigenvalues = np.linalg.eigvalsh(disc.mass[np.ix_(free, free)])
        assert eigenvalues.min() > 0.0

    @pytest.mark.parametrize("bc,gamma,delta", [
        (BoundaryType.DIRICHLET, 0.0, 0.0),
        (BoundaryType.ROBIN, 0.5, 0.8),
    ])
    def test_stiffness_positive_definite_on_free_dofs(self, bc, gamma, delta):
        model = power_model(theta_k=0.5, theta_ei=1.2, bc=bc, gamma=gamma, delta=delta)
        disc = build(model, 16)
        free = disc.free_dofs
        eigenvalues = np.linalg.eigvalsh(disc.stiffness[np.ix_(free, free)])
        assert eigenvalues.min() > 0.0

    def test_stiffness_positive_semidefinite_full(self):
        disc = build(power_model(theta_k=0.5, theta_ei=0.5, bc=BoundaryType.NEUMANN), 16)
        eigenvalues = np.linalg.eigvalsh(disc.stiffness)
        assert eigenvalues.min() >= -1e-12 * eigenvalues.max()

    def test_damping_rank_and_support(self):
        model = power_model(bc=BoundaryType.ROBIN, gamma=1.0, delta=1.0,
                            feedback=Feedback(alpha=0.7, beta=0.0))
        disc = build(model, 8)
        assert np.linalg.matrix_rank(disc.damping) == 1
        nonzero = np.argwhere(disc.damping != 0.0)
        assert {tuple(rc) for rc in nonzero} == {(16, 16)}

    def test_no_feedback_means_zero_damping(self):
        disc = build(power_model(), 8)
        assert not disc.damping.any()

    def test_mesh_model_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            assemble(power_model(ell=2.0), build_mesh(1.0, 8, 0.5))


# ---------------------------------------------------------------------------
# flux recovery

class TestFluxRecovery:
    def test_elliptic_solve_recovers_prescribed_fluxes(self):
        model = power_model(theta_k=0.5, theta_ei=0.5, scale_k=1.5, scale_ei=0.8,
                            bc=BoundaryType.ROBIN, gamma=2.0, delta=3.0)
        disc = build(model, 64)
        lam, sig = 1.3, -0.7
        rhs = np.zeros(disc.ndofs)
        rhs[disc.trace_maps.w_ell] = lam
        rhs[disc.trace_maps.psi_ell] = sig
        state = solve_static(disc, rhs)
        flux_w, flux_psi = recover_fluxes(disc, state)
        z_ell = state[disc.trace_maps.w_ell]
        xi_ell = state[disc.trace_maps.psi_ell]
        assert flux_w == pytest.approx(lam - 2.0 * z_ell, rel=1e-10)
        assert flux_psi == pytest.approx(sig - 3.0 * xi_ell, rel=1e-10)

    def test_neumann_static_fluxes_match_loads(self):
        model = power_model(theta_k=0.5, theta_ei=0.5, bc=BoundaryType.NEUMANN)
        disc = build(model, 32)
        rhs = np.zeros(disc.ndofs)
        rhs[disc.trace_maps.w_ell] = 0.9
        rhs[disc.trace_maps.psi_ell] = -0.4
        state = solve_static(disc, rhs)
        flux_w, flux_psi = recover_fluxes(disc, state)
        assert flux_w == pytest.approx(0.9, rel=1e-10)
        assert flux_psi == pytest.approx(-0.4, rel=1e-10)

    def test_zero_state(self):
        disc = build(power_model(), 8)
        assert recover_fluxes(disc, np.zeros(disc.ndofs)) == (0.0, 0.0)

    def test_rigid_deflection_has_zero_flux(self):
        disc = build(power_model(theta_k=0.5, theta_ei=0.5, bc=BoundaryType.NEUMANN), 16)
        state = np.zeros(disc.ndofs)
        state[0::2] = 2.7  # constant deflection, zero rotation
        flux_w, flux_psi = recover_fluxes(disc, state)
        assert abs(flux_w) < 1e-12
        assert abs(flux_psi) < 1e-12

    def test_strong_degeneracy_flux_vanishes_at_origin_under_refinement(self):
        model = power_model(theta_k=1.5, theta_ei=1.5, bc=BoundaryType.ROBIN,
                            gamma=1.0, delta=1.0)
        magnitudes = []
        for n in (16, 64, 256):
            disc = build(model, n)
            rhs = np.zeros(disc.ndofs)
            rhs[disc.trace_maps.w_ell] = 1.0
            rhs[disc.trace_maps.psi_ell] = 0.5
            state = solve_static(disc, rhs)
            flux_w, flux_psi = recover_origin_fluxes(disc, state)
            magnitudes.append(abs(flux_w) + abs(flux_psi))
        assert magnitudes[0] > magnitudes[1] > magnitudes[2]
        assert magnitudes[2] < 0.1 * magnitudes[0]

    def test_static_residual_vanishes_on_free_dofs(self):
        # sanity: the solved state satisfies the weak form away from the boundary
        model = power_model(theta_k=0.5, theta_ei=0.5, bc=BoundaryType.ROBIN,
                            gamma=2.0, delta=3.0)
        disc = build(model, 32)
        rhs = np.zeros(disc.ndofs)
        rhs[disc.trace_maps.w_ell] = 1.0
        state = solve_static(disc, rhs)
        residual = disc.stiffness @ state - rhs
        assert np.abs(residual[disc.free_dofs]).max() < 1e-10


# ---------------------------------------------------------------------------
# discrete Poincare property

class TestDiscretePoincare:
    @pytest.mark.parametrize("n", [32, 64, 128])
    def test_random_states_satisfy_poincare(self, n):
        model = power_model(theta_k=0.5, theta_ei=0.5, scale_k=0.01, rho=0.01,
                            i_rho=1.0)
        disc = build(model, n)
        unit_density = dataclasses.replace(model, rho=1.0, i_rho=1.0)
        mass_unit = assemble(unit_density, disc.mesh).mass
        constant = poincare_dirichlet(model)
        free = disc.free_dofs
        mass_free = mass_unit[np.ix_(free, free)]
        stiffness_free = disc.stiffness[np.ix_(free, free)]
        rng = np.random.default_rng(2026_08_19 + n)
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal(free.size)
            ratio = (x @ mass_free @ x) / (x @ stiffness_free @ x)
            worst = max(worst, ratio)
        assert worst <= constant


# ---------------------------------------------------------------------------
# Galerkin convergence for a manufactured smooth pair

_GAUSS10_NODES, _GAUSS10_WEIGHTS = np.polynomial.legendre.leggauss(10)


def element_quadrature(mesh):
    mids = mesh.midpoints[:, None]
    half = 0.5 * mesh.widths[:, None]
    return mids + half * _GAUSS10_NODES[None, :], half * _GAUSS10_WEIGHTS[None, :]


def manufactured_load(model, mesh, w_exact_dx, psi_exact, psi_exact_dx):
    # weak-form load: the bilinear form applied to the exact pair against
    # every nodal basis function, integrated with 10-point Gauss per element
    x, wq = element_quadrature(mesh)
    k_vals = np.asarray(model.K.evaluate(x), dtype=float)
    ei_vals = np.asarray(model.EI.evaluate(x), dtype=float)
    shear = k_vals * (w_exact_dx(x) + psi_exact(x))
    bend = ei_vals * psi_exact_dx(x)
    h = mesh.widths[:, None]
    left = (mesh.nodes[1:][:, None] - x) / h
    right = (x - mesh.nodes[:-1][:, None]) / h
    rhs = np.zeros(2 * (mesh.n + 1))
    for i in range(mesh.n):
        rhs[2 * i] += np.sum(wq[i] * shear[i] * (-1.0 / h[i, 0]))
        rhs[2 * i + 2] += np.sum(wq[i] * shear[i] * (1.0 / h[i, 0]))
        rhs[2 * i + 1] += np.sum(wq[i] * (shear[i] * left[i] + bend[i] * (-1.0 / h[i, 0])))
        rhs[2 * i + 3] += np.sum(wq[i] * (shear[i] * right[i] + bend[i] * (1.0 / h[i, 0])))
    return rhs


def energy_norm_error(model, mesh, state, w_exact_dx, psi_exact, psi_exact_dx):
    x, wq = element_quadrature(mesh)
    k_vals = np.asarray(model.K.evaluate(x), dtype=float)
    ei_vals = np.asarray(model.EI.evaluate(x), dtype=float)
    w_nodes, psi_nodes = state[0::2], state[1::2]
    h = mesh.widths[:, None]
    left = (mesh.nodes[1:][:, None] - x) / h
    right = (x - mesh.nodes[:-1][:, None]) / h
    w_dx = ((w_nodes[1:] - w_nodes[:-1]) / mesh.widths)[:, None]
    psi_dx = ((psi_nodes[1:] - psi_nodes[:-1]) / mesh.widths)[:, None]
    psi_vals = psi_nodes[:-1][:, None] * left + psi_nodes[1:][:, None] * right
    shear_err = (w_dx + psi_vals) - (w_exact_dx(x) + psi_exact(x))
    bend_err = psi_dx - psi_exact_dx(x)
    return math.sqrt(float(np.sum(wq * (k_vals * shear_err**2 + ei_vals * bend_err**2))))


class TestGalerkinConvergence:
    def test_energy_error_halves_per_doubling(self):
        model = power_model(theta_k=0.5, theta_ei=0.5)

        def w_dx(x):
            return 1.0 - 2.0 * x

        def psi(x):
            return np.sin(np.pi * x)

        def psi_dx(x):
            return np.pi * np.cos(np.pi * x)

        errors = []
        for n in (16, 32, 64):
            mesh = build_mesh(1.0, n, model.mu)
            disc = assemble(model, mesh)
            rhs = manufactured_load(model, mesh, w_dx, psi, psi_dx)
            state = solve_static(disc, rhs)
            errors.append(energy_norm_error(model, mesh, state, w_dx, psi, psi_dx))
        assert errors[0] / errors[1] >= 1.8
        assert errors[1] / errors[2] >= 1.8
