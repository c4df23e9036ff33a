"""Control synthesis checks.

The Gram operator is validated against a closed-form evaluation on
eigenmode data (the backward run of a mass-normalized mode is a known
cosine in the shifted discrete frequency, so its boundary trace and the
weighted trace quadrature are computable without touching the module
under test).  Null-control runs are certified by re-simulating with the
returned controls and measuring the final energy.
"""

import math

import numpy as np
import pytest
import scipy.linalg

from timolab.coefficients import make_power_profile
from timolab.constants import BeamModel, BoundaryType, Feedback, constants_report
from timolab.discretization import assemble, build_mesh
from timolab.dynamics import ControlSignal, State, default_timestep, energies, simulate
from timolab.hum import HumProblem, control_cost, gram_apply, solve_null_control


def thin_beam(h=0.01, theta=0.5, **kwargs):
    return BeamModel(
        rho=h,
        i_rho=1.0,
        ell=1.0,
        K=make_power_profile(theta, scale=h),
        EI=make_power_profile(theta),
        **kwargs,
    )


def make_disc(model, n):
    return assemble(model, build_mesh(model.ell, n, model.mu))


def normal_modes(disc, count):
    free = disc.free_dofs
    mass = disc.mass[np.ix_(free, free)]
    stiff = disc.stiffness[np.ix_(free, free)]
    vals, vecs = scipy.linalg.eigh(stiff, mass)
    modes = []
    for j in range(count):
        phi = vecs[:, j] / math.sqrt(vecs[:, j] @ mass @ vecs[:, j])
        modes.append((phi, math.sqrt(vals[j])))
    return modes


def gram_diagonal_oracle(model, disc, phi, omega, T, dt):
    """Weighted trace quadrature of the backward eigenmode run, from the
    discrete dispersion relation alone."""
    steps = max(1, round(T / dt))
    dt = T / steps
    shifted = (2.0 / dt) * math.atan(omega * dt / 2.0)
    t = dt * np.arange(steps + 1)
    phase = shifted * (T - t)
    cos_mid = 0.5 * (np.cos(phase[:-1]) + np.cos(phase[1:]))
    accel_mid = omega * (np.sin(phase[1:]) - np.sin(phase[:-1])) / dt
    boundary = [disc.trace_maps.w_ell, disc.trace_maps.psi_ell]
    free = disc.free_dofs
    if model.bc is BoundaryType.DIRICHLET:
        flux_rows = disc.stiffness[np.ix_(boundary, free)] @ phi
        mass_rows = disc.mass[np.ix_(boundary, free)] @ phi
        traces = cos_mid[:, None] * flux_rows + accel_mid[:, None] * mass_rows
        weight = np.array([
            1.0 / model.K.evaluate(model.ell),
            1.0 / model.EI.evaluate(model.ell),
        ])
    else:
        positions = [int(np.flatnonzero(free == dof)[0]) for dof in boundary]
        traces = cos_mid[:, None] * phi[positions]
        weight = np.array([1.0, 1.0])
    return float(dt * np.sum(traces * weight * traces))


def random_state(disc, seed):
    rng = np.random.default_rng(seed)
    nfree = disc.free_dofs.size
    return State(u=rng.standard_normal(nfree), v=rng.standard_normal(nfree))


class TestGramOperator:
    def test_zero_data_maps_to_zero(self):
        model = thin_beam()
        disc = make_disc(model, 12)
        problem = HumProblem(
            model=model, disc=disc, initial=random_state(disc, 1), T=2.0
        )
        image = gram_apply(problem, np.zeros(2 * disc.free_dofs.size))
        assert np.all(image == 0.0)

    @pytest.mark.parametrize("bc_kwargs", [
        {},
        {"bc": BoundaryType.ROBIN, "gamma": 1.0, "delta": 1.0},
    ])
    def test_matches_modal_closed_form(self, bc_kwargs):
        model = thin_beam(**bc_kwargs)
        disc = make_disc(model, 24)
        [(phi, omega)] = normal_modes(disc, 1)
        T = 2.0
        problem = HumProblem(
            model=model, disc=disc, initial=State(u=phi, v=np.zeros_like(phi)), T=T
        )
        data = np.concatenate([phi, np.zeros_like(phi)])
        got = float(gram_apply(problem, data) @ data)
        dt = default_timestep(model, disc.mesh)
        want = gram_diagonal_oracle(model, disc, phi, omega, T, dt)
        assert got == pytest.approx(want, rel=1e-9)

    def test_symmetry_on_random_pairs(self):
        model = thin_beam()
        disc = make_disc(model, 16)
        problem = HumProblem(
            model=model, disc=disc, initial=random_state(disc, 2), T=2.0
        )
        rng = np.random.default_rng(101)
        size = 2 * disc.free_dofs.size
        for _ in range(10):
            a = rng.standard_normal(size)
            b = rng.standard_normal(size)
            lhs = float(gram_apply(problem, a) @ b)
            rhs = float(gram_apply(problem, b) @ a)
            assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs))

    def test_positive_semidefinite(self):
        model = thin_beam()
        disc = make_disc(model, 16)
        problem = HumProblem(
            model=model, disc=disc, initial=random_state(disc, 3), T=2.0
        )
        rng = np.random.default_rng(103)
        size = 2 * disc.free_dofs.size
        for _ in range(10):
            data = rng.standard_normal(size)
            quadratic = float(gram_apply(problem, data) @ data)
            assert quadratic >= -1e-12 * float(data @ data)


class TestProblemValidation:
    def test_damped_plant_rejected(self):
        model = thin_beam(
            bc=BoundaryType.ROBIN, gamma=1.0, delta=1.0, feedback=Feedback(0.5, 0.5)
        )
        disc = make_disc(model, 8)
        with pytest.raises(ValueError, match="undamped"):
            HumProblem(model=model, disc=disc, initial=random_state(disc, 4), T=1.0)

    def test_free_end_rejected(self):
        model = thin_beam(bc=BoundaryType.NEUMANN)
        disc = make_disc(model, 8)
        with pytest.raises(ValueError, match="Dirichlet or Robin"):
            HumProblem(model=model, disc=disc, initial=random_state(disc, 5), T=1.0)

    def test_flavor_mismatch_rejected(self):
        model = thin_beam()
        disc = make_disc(model, 8)
        with pytest.raises(ValueError, match="robin boundary"):
            HumProblem(
                model=model, disc=disc, initial=random_state(disc, 6), T=1.0,
                flavor="robin",
            )
        with pytest.raises(ValueError, match="unknown control flavor"):
            HumProblem(
                model=model, disc=disc, initial=random_state(disc, 6), T=1.0,
                flavor="neumann",
            )

    def test_scalar_parameters_validated(self):
        model = thin_beam()
        disc = make_disc(model, 8)
        good = random_state(disc, 7)
        with pytest.raises(ValueError, match="positive"):
            HumProblem(model=model, disc=disc, initial=good, T=-1.0)
        with pytest.raises(ValueError, match="positive"):
            HumProblem(model=model, disc=disc, initial=good, T=1.0, dt=0.0)
        with pytest.raises(ValueError, match="positive"):
            HumProblem(model=model, disc=disc, initial=good, T=1.0, tolerance=0.0)
        with pytest.raises(ValueError, match="at least 1"):
            HumProblem(model=model, disc=disc, initial=good, T=1.0, max_iterations=0)
        with pytest.raises(ValueError, match="expected"):
            HumProblem(
                model=model, disc=disc,
                initial=State(u=np.zeros(3), v=np.zeros(3)), T=1.0,
            )


class TestNullControl:
    def test_zero_initial_data(self):
        model = thin_beam()
        disc = make_disc(model, 12)
        nfree = disc.free_dofs.size
        problem = HumProblem(
            model=model, disc=disc,
            initial=State(u=np.zeros(nfree), v=np.zeros(nfree)), T=12.0,
        )
        result = solve_null_control(problem)
        assert result.iterations == 0
        assert result.converged
        assert not result.stagnated
        assert result.residual == 0.0
        assert result.final_energy_ratio == 0.0
        assert np.all(result.controls.f1 == 0.0)
        assert np.all(result.controls.f2 == 0.0)

    def test_dirichlet_draw_reaches_rest(self):
        model = thin_beam()
        rep = constants_report(model)
        disc = make_disc(model, 32)
        initial = random_state(disc, 17)
        problem = HumProblem(
            model=model, disc=disc, initial=initial, T=1.5 * rep.T_dirichlet,
            max_iterations=800, use_mass_preconditioner=True,
        )
        result = solve_null_control(problem)
        assert result.converged
        assert not result.stagnated
        assert result.iterations <= 800
        assert result.residual <= 5e-8
        assert result.final_energy_ratio <= 1e-6
        assert np.all(np.isfinite(result.controls.f1))
        assert np.all(np.isfinite(result.controls.f2))
        assert result.adjoint_data.t == problem.T
        assert result.rayleigh_min > 0.0
        assert result.rayleigh_max >= result.rayleigh_min

        rerun = simulate(model, disc, initial, problem.T, result.dt,
                         controls=result.controls)
        final = State(u=rerun.displacements[-1], v=rerun.velocities[-1])
        ratio = energies(disc, final)[1] / energies(disc, initial)[1]
        assert ratio == pytest.approx(result.final_energy_ratio, rel=1e-9, abs=1e-18)

    def test_robin_draw_reaches_rest(self):
        model = thin_beam(bc=BoundaryType.ROBIN, gamma=1.0, delta=1.0)
        rep = constants_report(model)
        disc = make_disc(model, 24)
        problem = HumProblem(
            model=model, disc=disc, initial=random_state(disc, 13),
            T=1.5 * rep.T_neumann, max_iterations=1200, use_mass_preconditioner=True,
        )
        result = solve_null_control(problem)
        assert result.converged
        assert result.final_energy_ratio <= 1e-6

    def test_control_map_is_linear(self):
        model = thin_beam()
        rep = constants_report(model)
        disc = make_disc(model, 32)
        first = random_state(disc, 17)
        second = random_state(disc, 23)
        combo = State(u=2.0 * first.u - 0.5 * second.u, v=2.0 * first.v - 0.5 * second.v)
        T = 1.5 * rep.T_dirichlet

        def solve(initial):
            return solve_null_control(HumProblem(
                model=model, disc=disc, initial=initial, T=T,
                max_iterations=800, use_mass_preconditioner=True,
            ))

        res_first, res_second, res_combo = solve(first), solve(second), solve(combo)
        assert res_first.converged and res_second.converged and res_combo.converged
        for channel in ("f1", "f2"):
            got = getattr(res_combo.controls, channel)
            want = (2.0 * getattr(res_first.controls, channel)
                    - 0.5 * getattr(res_second.controls, channel))
            assert np.linalg.norm(got - want) <= 1e-5 * np.linalg.norm(want)

    def test_short_horizon_warns_and_degrades(self):
        model = thin_beam()
        rep = constants_report(model)
        disc = make_disc(model, 32)
        initial = random_state(disc, 17)
        long_problem = HumProblem(
            model=model, disc=disc, initial=initial, T=1.5 * rep.T_dirichlet,
            max_iterations=800, use_mass_preconditioner=True,
        )
        long_result = solve_null_control(long_problem)
        assert long_result.converged

        with pytest.warns(UserWarning, match="below the observability threshold"):
            short_result = solve_null_control(HumProblem(
                model=model, disc=disc, initial=initial, T=0.1 * rep.T_dirichlet,
                max_iterations=600, use_mass_preconditioner=True,
            ))
        assert not short_result.converged
        assert short_result.stagnated
        assert short_result.iterations > long_result.iterations

    def test_preconditioner_agrees_with_plain_solve(self):
        model = thin_beam()
        rep = constants_report(model)
        disc = make_disc(model, 8)
        initial = random_state(disc, 19)
        T = 1.5 * rep.T_dirichlet

        plain = solve_null_control(HumProblem(
            model=model, disc=disc, initial=initial, T=T, max_iterations=600,
        ))
        fast = solve_null_control(HumProblem(
            model=model, disc=disc, initial=initial, T=T, max_iterations=600,
            use_mass_preconditioner=True,
        ))
        assert plain.converged and fast.converged
        scale = np.linalg.norm(fast.controls.f1)
        assert np.linalg.norm(plain.controls.f1 - fast.controls.f1) <= 1e-5 * scale

    def test_no_cheaper_control_reaches_rest(self):
        model = thin_beam()
        rep = constants_report(model)
        disc = make_disc(model, 24)
        initial = random_state(disc, 29)
        T = 1.5 * rep.T_dirichlet
        problem = HumProblem(
            model=model, disc=disc, initial=initial, T=T,
            max_iterations=2000, use_mass_preconditioner=True,
        )
        result = solve_null_control(problem)
        assert result.converged

        energy_scale = energies(disc, initial)[1]
        budget = 1e-6 * energy_scale
        base = np.column_stack([result.controls.f1, result.controls.f2])
        dt = result.dt
        k_ell = model.K.evaluate(model.ell)
        ei_ell = model.EI.evaluate(model.ell)

        def cost(samples):
            return float(dt * np.sum(samples[:, 0] ** 2 * k_ell
                                     + samples[:, 1] ** 2 * ei_ell))

        def final_energy(samples):
            run = simulate(model, disc, initial, T, dt,
                           controls=ControlSignal(f1=samples[:, 0], f2=samples[:, 1]))
            state = State(u=run.displacements[-1], v=run.velocities[-1])
            return energies(disc, state)[1]

        base_cost = cost(base)
        assert base_cost == pytest.approx(control_cost(problem, result.controls), rel=1e-12)
        base_energy = final_energy(base)
        assert base_energy <= budget

        rng = np.random.default_rng(31)
        tested = 0
        for _ in range(20):
            direction = rng.standard_normal(base.shape)
            energy_plus = final_energy(base + direction)
            energy_minus = final_energy(base - direction)
            quad = 0.5 * (energy_plus + energy_minus) - base_energy
            lin = 0.5 * (energy_plus - energy_minus)
            det = lin * lin - 4.0 * quad * (base_energy - budget)
            if quad <= 0.0 or det <= 0.0:
                continue
            lo = (-lin - math.sqrt(det)) / (2.0 * quad)
            hi = (-lin + math.sqrt(det)) / (2.0 * quad)
            cross = float(dt * np.sum(base[:, 0] * direction[:, 0] * k_ell
                                      + base[:, 1] * direction[:, 1] * ei_ell))
            dir_cost = cost(direction)
            stationary = min(max(-cross / dir_cost, lo), hi)
            cheapest = min(
                base_cost + 2.0 * eps * cross + eps * eps * dir_cost
                for eps in (lo, hi, stationary)
            )
            tested += 1
            assert cheapest >= base_cost * (1.0 - 1e-2)
        assert tested == 20
