"""Exact boundary control by duality: conjugate gradient on the control
Gram operator.

The adjoint run is the homogeneous system solved backward from candidate
final data.  Its boundary trace feeds back as the control of a forward
run started from rest, and the map from final data to the forward run's
final state is, through the discrete duality identity of the midpoint
scheme, symmetric positive semidefinite.  Solving one linear system in
the final data then yields a control that cancels the free evolution of
the initial state exactly, up to the linear-solver tolerance.

Flavors:

* ``dirichlet``: controls are prescribed boundary displacements, the
  adjoint trace is the variational flux pair, and the Gram weight is the
  inverse boundary stiffness pair.
* ``robin``: controls are endpoint force and moment loads, the adjoint
  trace is the boundary value pair, and the weight is the identity.

Both traces are sampled on the integrator's half-step grid, where the
duality identity is exact, so Gram symmetry holds to roundoff rather
than to quadrature error.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .constants import BeamModel, BoundaryType, constants_report
from .discretization import Discretization
from .dynamics import (
    ControlSignal,
    State,
    _banded_upper,
    _resolve_steps,
    default_timestep,
    energies,
    simulate,
    simulate_backward,
)

STAGNATION_WINDOW = 50


@dataclass(frozen=True)
class HumProblem:
    """One control synthesis task: steer ``initial`` to rest by time T.

    ``flavor`` defaults to the actuation matching the model's boundary
    condition; ``dt`` defaults to the mesh's stable step.  ``tolerance``
    is the relative residual target of the conjugate gradient solve.
    """

    model: BeamModel
    disc: Discretization
    initial: State
    T: float
    dt: Optional[float] = None
    flavor: Optional[str] = None
    tolerance: float = 1e-8
    max_iterations: int = 500
    use_mass_preconditioner: bool = False

    def __post_init__(self):
        if self.model.feedback is not None:
            raise ValueError(
                "control synthesis assumes an undamped plant; remove the boundary feedback"
            )
        if self.flavor is None:
            if self.model.bc is BoundaryType.DIRICHLET:
                object.__setattr__(self, "flavor", "dirichlet")
            elif self.model.bc is BoundaryType.ROBIN:
                object.__setattr__(self, "flavor", "robin")
            else:
                raise ValueError(
                    "free-end models have no control flavor here; use Dirichlet or Robin actuation"
                )
        if self.flavor not in ("dirichlet", "robin"):
            raise ValueError(f"unknown control flavor {self.flavor!r}")
        wanted = BoundaryType.DIRICHLET if self.flavor == "dirichlet" else BoundaryType.ROBIN
        if self.model.bc is not wanted:
            raise ValueError(
                f"flavor {self.flavor!r} needs a {wanted.value} boundary, "
                f"got {self.model.bc.value}"
            )
        if self.T <= 0.0:
            raise ValueError("control horizon T must be positive")
        if self.dt is not None and self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        nfree = self.disc.free_dofs.size
        if self.initial.u.size != nfree:
            raise ValueError(
                f"initial state has {self.initial.u.size} dofs, expected {nfree}"
            )


@dataclass(frozen=True)
class HumResult:
    """Synthesized control and its certificates.

    ``adjoint_data`` is the final-data solution of the Gram system, the
    state whose backward run generates the control.  ``residual`` is the
    relative Gram residual of that solution, recomputed from a fresh
    operator application rather than the solver's recurrence and
    measured in the dual energy norm (stiffness inverse on the position
    block, mass inverse on the velocity block),
    ``final_energy_ratio`` the independently re-simulated ratio
    E_gd(T) / E_gd(0), and ``rayleigh_min`` / ``rayleigh_max`` the
    observed extremes of the Gram quotient over the solver's search
    directions.  ``converged`` says whether the tolerance was met within
    the iteration budget; ``stagnated`` marks unconverged runs whose
    best residual stopped improving over the final 50 iterations, the
    signature of an effectively singular Gram system.
    """

    adjoint_data: State
    controls: ControlSignal
    iterations: int
    residual: float
    final_energy_ratio: float
    converged: bool
    stagnated: bool
    dt: float
    rayleigh_min: float
    rayleigh_max: float


class _Workspace:
    """Shared pieces of one synthesis: resolved grid, boundary rows, weight."""

    def __init__(self, problem: HumProblem):
        disc = problem.disc
        step = problem.dt if problem.dt is not None else default_timestep(
            problem.model, disc.mesh
        )
        self.steps, self.dt = _resolve_steps(problem.T, step)
        free = disc.free_dofs
        self.nfree = free.size
        self.mass_free = disc.mass[np.ix_(free, free)]
        boundary = [disc.trace_maps.w_ell, disc.trace_maps.psi_ell]
        if problem.flavor == "dirichlet":
            self.trace_stiffness = disc.stiffness[np.ix_(boundary, free)]
            self.trace_mass = disc.mass[np.ix_(boundary, free)]
            ell = problem.model.ell
            self.weight = np.array([
                1.0 / problem.model.K.evaluate(ell),
                1.0 / problem.model.EI.evaluate(ell),
            ])
            self.sign = -1.0
        else:
            positions = [int(np.flatnonzero(free == dof)[0]) for dof in boundary]
            self.trace_positions = positions
            self.weight = np.array([1.0, 1.0])
            self.sign = 1.0
        self.stiffness_free = disc.stiffness[np.ix_(free, free)]
        self.mass_factor = None
        self.stiffness_factor = None

    def weighted_pairing(self, r_a: np.ndarray, r_b: np.ndarray) -> float:
        return float(self.dt * np.sum(r_a * self.weight * r_b))

    def mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.mass_factor is None:
            self.mass_factor = scipy.linalg.cholesky_banded(
                _banded_upper(self.mass_free), lower=False
            )
        return scipy.linalg.cho_solve_banded((self.mass_factor, False), rhs)

    def stiffness_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.stiffness_factor is None:
            self.stiffness_factor = scipy.linalg.cholesky_banded(
                _banded_upper(self.stiffness_free), lower=False
            )
        return scipy.linalg.cho_solve_banded((self.stiffness_factor, False), rhs)

    def dual_norm(self, vector: np.ndarray) -> float:
        """Norm of a functional on final data: stiffness inverse on the
        position block, mass inverse on the velocity block."""
        p_part, q_part = _split(vector, self.nfree)
        return float(
            np.sqrt(
                p_part @ self.stiffness_solve(p_part) + q_part @ self.mass_solve(q_part)
            )
        )


def _split(data: np.ndarray, nfree: int) -> tuple[np.ndarray, np.ndarray]:
    data = np.asarray(data, dtype=float)
    if data.shape != (2 * nfree,):
        raise ValueError(f"final data must have {2 * nfree} entries, got {data.shape}")
    return data[:nfree], data[nfree:]


def _adjoint_traces(ws: _Workspace, problem: HumProblem, data: np.ndarray) -> np.ndarray:
    """Boundary trace of the backward homogeneous run, on half steps."""
    p_final, q_final = _split(data, ws.nfree)
    adjoint = simulate_backward(
        problem.model,
        problem.disc,
        State(u=p_final, v=q_final, t=problem.T),
        problem.T,
        ws.dt,
    )
    p_mid = 0.5 * (adjoint.displacements[:-1] + adjoint.displacements[1:])
    if problem.flavor == "robin":
        return p_mid[:, ws.trace_positions]
    accel_mid = (adjoint.velocities[1:] - adjoint.velocities[:-1]) / ws.dt
    return p_mid @ ws.trace_stiffness.T + accel_mid @ ws.trace_mass.T


def _controls_from_traces(ws: _Workspace, traces: np.ndarray) -> ControlSignal:
    samples = ws.sign * traces * ws.weight
    return ControlSignal(f1=samples[:, 0], f2=samples[:, 1], sampling="midpoint")


def _final_pairing_image(ws: _Workspace, problem: HumProblem, run) -> np.ndarray:
    """Mass-weighted coefficients of X -> v(T).M p - u(T).M q for a run."""
    u_final = run.displacements[-1]
    v_final = run.velocities[-1]
    return np.concatenate([ws.mass_free @ v_final, -(ws.mass_free @ u_final)])


def _gram_apply(ws: _Workspace, problem: HumProblem, data: np.ndarray) -> np.ndarray:
    traces = _adjoint_traces(ws, problem, data)
    controls = _controls_from_traces(ws, traces)
    rest = State(u=np.zeros(ws.nfree), v=np.zeros(ws.nfree))
    run = simulate(problem.model, problem.disc, rest, problem.T, ws.dt, controls=controls)
    return _final_pairing_image(ws, problem, run)


def gram_apply(problem: HumProblem, data: np.ndarray) -> np.ndarray:
    """Image of candidate final data under the control Gram operator.

    The returned vector represents the linear functional
    X -> sum_k dt * trace(data).W.trace(X) against plain stacked final
    data, so ``gram_apply(problem, a) @ b`` is the Gram form; it is
    symmetric in (a, b) to roundoff and positive semidefinite.
    """
    ws = _Workspace(problem)
    return _gram_apply(ws, problem, data)


def control_cost(problem: HumProblem, controls: ControlSignal) -> float:
    """Squared control norm the synthesis minimizes over null controls.

    Dirichlet actuation weighs the channels by the boundary stiffness
    pair, Robin actuation by the identity, matching the Gram weight.
    """
    ws = _Workspace(problem)
    samples = controls.at_midpoints(ws.steps)
    return float(ws.dt * np.sum(samples**2 / ws.weight))


def _conjugate_gradient(apply_image, rhs, norm, tolerance, max_iterations, precondition=None):
    """Conjugate gradient with a terminal stagnation diagnostic.

    ``norm`` measures residuals (the callers pass the dual energy norm,
    the natural size of a defect in final-data functionals).  Runs to
    the tolerance or the iteration budget; transient residual plateaus
    are tolerated.  A run that ends unconverged with no new best
    residual over its final STAGNATION_WINDOW iterations is marked
    stagnated.  Returns (solution, iterations, relative residual,
    converged, stagnated, rayleigh_min, rayleigh_max); the Rayleigh
    extremes are taken over the search directions actually applied.
    """
    solution = np.zeros_like(rhs)
    rhs_norm = norm(rhs)
    if rhs_norm == 0.0:
        return solution, 0, 0.0, True, False, float("nan"), float("nan")

    residual = rhs.copy()
    z = precondition(residual) if precondition is not None else residual
    direction = z.copy()
    rz = float(residual @ z)
    residual_norm = rhs_norm
    best = residual_norm
    stall = 0
    iterations = 0
    converged = False

    ray_min = np.inf
    ray_max = -np.inf

    for iterations in range(1, max_iterations + 1):
        image = apply_image(direction)
        curvature = float(direction @ image)
        scale = float(direction @ direction)
        if scale > 0.0:
            quotient = curvature / scale
            ray_min = min(ray_min, quotient)
            ray_max = max(ray_max, quotient)
        if curvature <= 0.0:
            iterations -= 1
            break
        alpha = rz / curvature
        solution = solution + alpha * direction
        residual = residual - alpha * image
        residual_norm = norm(residual)
        if residual_norm <= tolerance * rhs_norm:
            converged = True
            break
        if residual_norm < best:
            best = residual_norm
            stall = 0
        else:
            stall += 1
        z = precondition(residual) if precondition is not None else residual
        rz_next = float(residual @ z)
        direction = z + (rz_next / rz) * direction
        rz = rz_next

    stagnated = (not converged) and stall >= STAGNATION_WINDOW
    if not np.isfinite(ray_min):
        ray_min = float("nan")
        ray_max = float("nan")
    return solution, iterations, residual_norm / rhs_norm, converged, stagnated, ray_min, ray_max


def _observability_threshold(problem: HumProblem) -> Optional[float]:
    report = constants_report(problem.model)
    if problem.flavor == "dirichlet":
        return report.T_dirichlet
    return report.T_neumann


def solve_null_control(problem: HumProblem) -> HumResult:
    """Synthesize the boundary control steering the initial state to rest.

    Solves the Gram system by conjugate gradient, then re-simulates the
    controlled run through the public integrator and reports the final
    to initial energy ratio as an independent certificate.
    """
    ws = _Workspace(problem)
    threshold = _observability_threshold(problem)
    if threshold is not None and problem.T < threshold:
        warnings.warn(
            f"control horizon {problem.T:.6g} is below the observability "
            f"threshold {threshold:.6g}; the Gram system may be near singular",
            stacklevel=2,
        )

    free_run = simulate(problem.model, problem.disc, problem.initial, problem.T, ws.dt)
    rhs = -_final_pairing_image(ws, problem, free_run)
    if np.linalg.norm(rhs) == 0.0:
        zeros = np.zeros(ws.steps)
        return HumResult(
            adjoint_data=State(u=np.zeros(ws.nfree), v=np.zeros(ws.nfree), t=problem.T),
            controls=ControlSignal(f1=zeros, f2=zeros.copy(), sampling="midpoint"),
            iterations=0,
            residual=0.0,
            final_energy_ratio=0.0,
            converged=True,
            stagnated=False,
            dt=ws.dt,
            rayleigh_min=float("nan"),
            rayleigh_max=float("nan"),
        )

    precondition = None
    if problem.use_mass_preconditioner:

        def precondition(vector):
            halves = _split(vector, ws.nfree)
            return np.concatenate([ws.mass_solve(halves[0]), ws.mass_solve(halves[1])])

    solution, iterations, _, converged, stagnated, ray_min, ray_max = (
        _conjugate_gradient(
            lambda vector: _gram_apply(ws, problem, vector),
            rhs,
            ws.dual_norm,
            problem.tolerance,
            problem.max_iterations,
            precondition,
        )
    )

    traces = _adjoint_traces(ws, problem, solution)
    controls = _controls_from_traces(ws, traces)

    rest = State(u=np.zeros(ws.nfree), v=np.zeros(ws.nfree))
    rest_run = simulate(
        problem.model, problem.disc, rest, problem.T, ws.dt, controls=controls
    )
    image = _final_pairing_image(ws, problem, rest_run)
    residual = ws.dual_norm(rhs - image) / ws.dual_norm(rhs)

    verification = simulate(
        problem.model, problem.disc, problem.initial, problem.T, ws.dt, controls=controls
    )
    final_state = State(
        u=verification.displacements[-1], v=verification.velocities[-1]
    )
    energy_final = energies(problem.disc, final_state)[1]
    energy_initial = energies(problem.disc, problem.initial)[1]

    p_final, q_final = _split(solution, ws.nfree)
    return HumResult(
        adjoint_data=State(u=p_final, v=q_final, t=problem.T),
        controls=controls,
        iterations=iterations,
        residual=residual,
        final_energy_ratio=energy_final / energy_initial,
        converged=converged,
        stagnated=stagnated,
        dt=ws.dt,
        rayleigh_min=ray_min,
        rayleigh_max=ray_max,
    )
