"""Closed-form constants and time thresholds for degenerate beam models.

Every quantity here is an explicit formula in the model data: Poincare
constants for the clamped-tip and elastically-supported function spaces,
the multiplier bookkeeping constants, lower-order-term constants, boundary
observability time thresholds, wave travel times, and the guaranteed decay
rate of the boundary-feedback loop.  The only numerics involved are
one-dimensional integrals of 1/a and sqrt(1/a) type quantities, handled by
a graded quadrature that subdivides dyadically toward the degenerate
endpoint and sums the remaining tail by geometric extrapolation.

Conventions that matter when reading the formulas:

* mu always means max(K.mu, EI.mu) unless a per-profile exponent is named.
* The observability thresholds are the zeros of the brackets
  (2 - mu - 2*C_h) * T - 4*C_F - mu * C_{DL or NL} (minus the Robin
  boundary correction where applicable); they require the smallness
  condition mu + 2*C_h < 2.
* The feedback decay chain uses the slightly different bracket
  2 - mu - C_h; both brackets are exposed so callers can see the gap.
* The elastically-supported Poincare constant needs gamma, delta > 0; every
  quantity built on it is reported as absent (None) for other boundary
  setups rather than extrapolated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from timolab.coefficients import DegeneracyKind, DegeneracyProfile

__all__ = [
    "BoundaryType",
    "Feedback",
    "BeamModel",
    "ConstantsReport",
    "integrate_graded",
    "poincare_dirichlet",
    "poincare_robin",
    "c_F",
    "c_h",
    "c_DL_c_NL",
    "travel_times",
    "observability_times",
    "robin_observability_constant",
    "decay_constants",
    "decay_rate",
    "constants_report",
]


class BoundaryType(enum.Enum):
    """Actuation style at x = ell: prescribed value, flux+value, or pure flux."""

    DIRICHLET = "dirichlet"
    ROBIN = "robin"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class Feedback:
    """Velocity feedback gains applied to the boundary fluxes at x = ell."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError(f"feedback gains must be nonnegative, got {self.alpha}, {self.beta}")


@dataclass(frozen=True)
class BeamModel:
    """Physical data of one beam: densities, length, stiffness profiles,
    boundary setup at x = ell and optional velocity feedback."""

    rho: float
    i_rho: float
    ell: float
    K: DegeneracyProfile
    EI: DegeneracyProfile
    bc: BoundaryType = BoundaryType.DIRICHLET
    gamma: float = 0.0
    delta: float = 0.0
    feedback: Optional[Feedback] = None

    def __post_init__(self):
        if self.rho <= 0.0:
            raise ValueError(f"model.rho must be positive, got {self.rho}")
        if self.i_rho <= 0.0:
            raise ValueError(f"model.i_rho must be positive, got {self.i_rho}")
        if self.ell <= 0.0:
            raise ValueError(f"model.ell must be positive, got {self.ell}")
        if not (0.0 <= self.K.mu < 2.0 and 0.0 <= self.EI.mu < 2.0):
            raise ValueError("stiffness exponents must lie in [0, 2)")
        if self.bc is BoundaryType.ROBIN:
            if self.gamma <= 0.0 or self.delta <= 0.0:
                raise ValueError("Robin setup requires gamma > 0 and delta > 0")
        else:
            if self.gamma != 0.0 or self.delta != 0.0:
                raise ValueError(f"{self.bc.value} setup requires gamma = delta = 0")
        if self.bc is BoundaryType.NEUMANN and (
            self.K.kind is DegeneracyKind.STRONG or self.EI.kind is DegeneracyKind.STRONG
        ):
            raise ValueError(
                "pure flux control with strong degeneracy is out of scope "
                "(the natural state space is a quotient by constants)"
            )

    @property
    def mu(self) -> float:
        return max(self.K.mu, self.EI.mu)

    @property
    def K_ell(self) -> float:
        return float(self.K.evaluate(self.ell))

    @property
    def EI_ell(self) -> float:
        return float(self.EI.evaluate(self.ell))

    @property
    def weak_weak(self) -> bool:
        return self.K.kind is DegeneracyKind.WEAK and self.EI.kind is DegeneracyKind.WEAK

    @property
    def alpha(self) -> float:
        return self.feedback.alpha if self.feedback is not None else 0.0

    @property
    def beta(self) -> float:
        return self.feedback.beta if self.feedback is not None else 0.0


# ---------------------------------------------------------------------------
# graded quadrature toward the degenerate endpoint

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(15)


def _gauss_panel(f: Callable, a: float, b: float) -> float:
    points = 0.5 * (b - a) * _GAUSS_NODES + 0.5 * (a + b)
    return 0.5 * (b - a) * float(np.dot(_GAUSS_WEIGHTS, np.asarray(f(points), dtype=float)))


def _adaptive_panel(f: Callable, a: float, b: float, rtol: float, depth: int = 0) -> float:
    whole = _gauss_panel(f, a, b)
    mid = 0.5 * (a + b)
    halves = _gauss_panel(f, a, mid) + _gauss_panel(f, mid, b)
    if not math.isfinite(halves):
        return halves  # overflow near the endpoint, refining cannot help
    if abs(halves - whole) <= rtol * abs(halves) or depth >= 12:
        return halves
    return _adaptive_panel(f, a, mid, rtol, depth + 1) + _adaptive_panel(f, mid, b, rtol, depth + 1)


def integrate_graded(f: Callable, ell: float, rtol: float = 1e-10, max_panels: int = 2000) -> float:
    """Integral of f over (0, ell] for integrands with an algebraic endpoint
    behavior x**(-s), s < 1, at the degenerate end.

    The domain is split into dyadic panels [ell/2**(k+1), ell/2**k]; each is
    integrated by adaptive Gauss quadrature (never evaluating f at 0).  The
    panel integrals of an algebraic integrand form a geometric sequence, so
    once their ratio stabilizes the remaining tail is summed in closed form.
    This matters near s -> 1, where the mass hiding below any reachable
    float is not negligible and plain refinement cannot converge.
    """
    if ell <= 0.0:
        raise ValueError(f"ell must be positive, got {ell}")
    panel_rtol = min(rtol * 0.25, 1e-12)
    total = 0.0
    previous = None  # last panel integral
    previous_ratio = None
    upper = ell
    for k in range(max_panels):
        lower = 0.5 * upper
        if lower <= 0.0 or lower >= upper:
            break  # panel width fell below float resolution
        current = _adaptive_panel(f, lower, upper, panel_rtol)
        if not math.isfinite(current):
            raise RuntimeError(
                "graded quadrature did not stabilize: non-finite panel "
                "integral near the degenerate endpoint"
            )
        total += current
        if previous is not None and previous != 0.0 and current != 0.0:
            ratio = current / previous
            # a ratio within float noise of 1 means the panel sums are not
            # visibly geometric; extrapolating there would fabricate a huge
            # tail for what is probably a divergent integral
            if previous_ratio is not None and 0.0 < ratio <= 1.0 - 1e-12:
                tail = current * ratio / (1.0 - ratio)
                drift = abs(ratio - previous_ratio)
                uncertainty = 4.0 * current * drift / (1.0 - ratio) ** 2
                if k >= 4 and uncertainty <= rtol * abs(total + tail):
                    return total + tail
            previous_ratio = ratio
        else:
            previous_ratio = None
        previous = current
        upper = lower
    raise RuntimeError(
        "graded quadrature did not stabilize; integrand does not look "
        "algebraic toward the degenerate endpoint"
    )


def reciprocal_l1_norms(model: BeamModel, rtol: float = 1e-10) -> tuple[float, float]:
    """L1 norms of 1/K and 1/EI; finite only under weak degeneracy."""
    if not model.weak_weak:
        raise ValueError("1/K or 1/EI is not integrable under strong degeneracy")
    inv_k = integrate_graded(lambda x: 1.0 / np.asarray(model.K.evaluate(x), dtype=float), model.ell, rtol)
    inv_ei = integrate_graded(lambda x: 1.0 / np.asarray(model.EI.evaluate(x), dtype=float), model.ell, rtol)
    return inv_k, inv_ei


# ---------------------------------------------------------------------------
# Poincare constants

def poincare_dirichlet(model: BeamModel) -> float:
    """Constant C_D bounding the squared L2 norm of (w, psi) by the strain
    seminorm, for pairs vanishing at x = ell."""
    mu = model.mu
    branch = min(4.0, 1.0 / (2.0 - mu))
    shear_feedthrough = 1.0 + (2.0 * model.ell**2 * model.K.sup_norm / model.K_ell) * branch
    return (
        model.ell**2
        * max(1.0 / model.K_ell, 1.0 / model.EI_ell)
        * branch
        * max(2.0, shear_feedthrough)
    )


def poincare_robin(model: BeamModel) -> float:
    """Constant C_N bounding the squared L2 norm by the strain seminorm plus
    the boundary terms gamma*w(ell)^2 + delta*psi(ell)^2."""
    if model.bc is not BoundaryType.ROBIN:
        raise ValueError("C_N needs boundary parameters gamma, delta > 0 (Robin setup)")
    mu = model.mu
    branch = min(2.0, 1.0 / (2.0 - mu))
    interior = (
        2.0
        * model.ell**2
        * max(1.0 / model.K_ell, 1.0 / model.EI_ell)
        * branch
        * max(2.0, 1.0 + (2.0 * model.ell**2 * model.K.sup_norm / model.K_ell) * branch)
    )
    boundary = max(
        2.0 * model.ell / model.gamma,
        (8.0 * model.ell**3 * model.K.sup_norm / (model.delta * model.K_ell)) * branch,
    )
    return max(interior, boundary)


# ---------------------------------------------------------------------------
# multiplier bookkeeping constants

def c_F(model: BeamModel) -> float:
    """Constant bounding the cross term F(t) = int x (rho w_t (w_x+psi)
    + I_rho psi_t psi_x) dx by the energy, with per-profile length weights."""

    def length_weight(mu_a: float) -> float:
        if mu_a <= 1.0:
            return model.ell
        return max(model.ell ** (2.0 - mu_a), model.ell**mu_a)

    return max(
        math.sqrt(model.rho / model.K_ell) * length_weight(model.K.mu),
        math.sqrt(model.i_rho / model.EI_ell) * length_weight(model.EI.mu),
    )


def c_h(model: BeamModel) -> float:
    """Constant bounding the mixed interior term int x (-rho w_t psi_t
    + K (w_x+psi) psi_x) dx by the energy."""
    return max(
        model.ell * math.sqrt(model.rho / model.i_rho),
        math.sqrt(model.K.sup_norm / model.EI_ell) * max(1.0, model.ell**2),
    )


def smallness_ok(model: BeamModel) -> bool:
    """Whether mu + 2*C_h < 2, the condition making the observability
    brackets eventually positive."""
    return model.mu + 2.0 * c_h(model) < 2.0


def c_DL_c_NL(model: BeamModel) -> tuple[float, Optional[float]]:
    """Lower-order-term constants: C_DL from the clamped-tip Poincare
    constant, C_NL from the elastically-supported one (None unless the
    model carries Robin parameters)."""
    amplitude = max(math.sqrt(model.rho), math.sqrt(model.i_rho))
    c_dl = amplitude * math.sqrt(poincare_dirichlet(model))
    c_nl = amplitude * math.sqrt(poincare_robin(model)) if model.bc is BoundaryType.ROBIN else None
    return c_dl, c_nl


# ---------------------------------------------------------------------------
# travel times and observability thresholds

def travel_times(model: BeamModel, rtol: float = 1e-10) -> tuple[float, float]:
    """Transit times of the two wave families: int sqrt(rho/K) and
    int sqrt(i_rho/EI) over (0, ell)."""
    t1 = integrate_graded(
        lambda x: np.sqrt(model.rho / np.asarray(model.K.evaluate(x), dtype=float)), model.ell, rtol
    )
    t2 = integrate_graded(
        lambda x: np.sqrt(model.i_rho / np.asarray(model.EI.evaluate(x), dtype=float)), model.ell, rtol
    )
    return t1, t2


def robin_etas(model: BeamModel) -> tuple[float, float]:
    """Weights of the boundary-value terms in the Robin inverse inequality."""
    if model.bc is not BoundaryType.ROBIN:
        raise ValueError("eta weights are defined for the Robin setup only")
    bracket = 2.0 - model.mu - 2.0 * c_h(model)
    return model.gamma / model.K_ell + bracket, model.delta / model.EI_ell + bracket


def observability_times(
    model: BeamModel,
) -> tuple[Optional[float], Optional[float], Optional[float]]:
    """Observability time thresholds (T_dirichlet, T_robin, T_neumann).

    Each entry is the zero of the corresponding observability bracket, or
    None when the threshold is not asserted: smallness failing disables all
    three, missing Robin parameters disable the two velocity-trace entries,
    and strong degeneracy leaves the Robin entry without a closed form
    (the reciprocal stiffness norms diverge).
    """
    if not smallness_ok(model):
        return None, None, None
    bracket = 2.0 - model.mu - 2.0 * c_h(model)
    cf = c_F(model)
    c_dl, c_nl = c_DL_c_NL(model)
    t_dirichlet = (4.0 * cf + model.mu * c_dl) / bracket

    t_neumann = None
    t_robin = None
    if c_nl is not None:
        t_neumann = (4.0 * cf + model.mu * c_nl) / bracket
        if model.weak_weak:
            eta1, eta2 = robin_etas(model)
            inv_k, inv_ei = reciprocal_l1_norms(model)
            correction = 4.0 * max(eta1 * model.gamma * inv_k, eta2 * model.delta * inv_ei)
            t_robin = (4.0 * cf + model.mu * c_nl + correction) / bracket
    return t_dirichlet, t_robin, t_neumann


def robin_observability_constant(model: BeamModel, T: float) -> float:
    """Coercivity constant C_w of the velocity-trace observability bound at
    horizon T for the Robin setup under weak degeneracy.

    Affine and strictly increasing in T; nonpositive values mean the
    horizon is below the threshold ("not yet observable").
    """
    if model.bc is not BoundaryType.ROBIN:
        raise ValueError("C_w is defined for the Robin setup only")
    if not model.weak_weak:
        raise ValueError("C_w needs weak degeneracy (1/K, 1/EI integrable)")
    bracket = 2.0 - model.mu - 2.0 * c_h(model)
    _, c_nl = c_DL_c_NL(model)
    eta1, eta2 = robin_etas(model)
    inv_k, inv_ei = reciprocal_l1_norms(model)
    numerator = (
        bracket * T
        - 4.0 * c_F(model)
        - model.mu * c_nl
        - 4.0 * max(eta1 * model.gamma * inv_k, eta2 * model.delta * inv_ei)
    )
    denominator = 1.0 + (2.0 / model.ell) * max(
        eta1 * model.gamma / model.rho, eta2 * model.delta / model.i_rho
    )
    return numerator / denominator


# ---------------------------------------------------------------------------
# feedback decay chain

def decay_constants(model: BeamModel) -> dict:
    """All intermediate quantities of the guaranteed-decay construction.

    The mixed boundary terms of the flux-multiplier identity are split by
    Young's inequality with the coefficients the identity carries; absolute
    values make every weight a valid (if conservative) positive upper
    bound.  Exposed as a dict so the chain can be audited term by term.
    """
    if model.bc is not BoundaryType.ROBIN:
        raise ValueError("the decay chain needs boundary parameters gamma, delta > 0")
    if model.feedback is None or model.alpha <= 0.0 or model.beta <= 0.0:
        raise ValueError("the decay chain needs positive feedback gains alpha, beta")
    if not smallness_ok(model):
        raise ValueError("smallness violated: mu + 2*C_h >= 2")

    mu = model.mu
    ch = c_h(model)
    bracket_obs = 2.0 - mu - 2.0 * ch  # observability bracket
    bracket_fb = 2.0 - mu - ch  # feedback-chain bracket
    gamma, delta = model.gamma, model.delta
    alpha, beta = model.alpha, model.beta
    k_ell, ei_ell = model.K_ell, model.EI_ell

    mixed_w = 2.0 * model.ell * gamma / k_ell - mu / 2.0
    mixed_psi = 2.0 * model.ell * delta / ei_ell - mu / 2.0
    eta11 = model.ell * (model.rho + alpha**2 / k_ell) / alpha + 0.5 * abs(mixed_w)
    eta12 = model.ell * (model.i_rho + beta**2 / ei_ell) / beta + 0.5 * abs(mixed_psi)
    eta21 = (
        abs(model.ell * gamma / k_ell - mu / 2.0)
        + bracket_obs
        + (alpha / (2.0 * gamma)) * abs(mixed_w)
    )
    eta22 = (
        abs(model.ell * delta / ei_ell - mu / 2.0)
        + bracket_obs
        + (beta / (2.0 * delta)) * abs(mixed_psi)
    )

    cn = poincare_robin(model)
    _, c_nl = c_DL_c_NL(model)
    c2 = max(model.rho, model.i_rho) * max(1.0 / gamma**2, 1.0 / delta**2) * max(1.0 / alpha, 1.0 / beta) * cn
    c3 = 1.0 + 2.0 * max(model.rho, model.i_rho) * max(1.0 / gamma**3, 1.0 / delta**3)
    eta2max = max(eta21, eta22)
    omega = bracket_fb / (2.0 * eta2max * (1.0 + 2.0 * max(alpha / gamma**3, beta / delta**3)))
    c_tilde = (
        (1.0 / omega) * eta2max * (1.0 + c2)
        + 2.0 * eta2max * c3
        + max(eta11, eta12)
        + 2.0 * (2.0 * c_F(model) + 0.5 * mu * c_nl)
    )
    kappa = bracket_fb / (2.0 * c_tilde)
    return {
        "eta11": eta11,
        "eta12": eta12,
        "eta21": eta21,
        "eta22": eta22,
        "quasi_static_velocity": c2,
        "quasi_static_state": c3,
        "omega": omega,
        "c_tilde": c_tilde,
        "bracket_observability": bracket_obs,
        "bracket_feedback": bracket_fb,
        "kappa": kappa,
    }


def decay_rate(model: BeamModel) -> float:
    """Guaranteed exponential decay rate kappa of the feedback loop:
    E(t) <= E(0) * exp(1 - kappa*t) for t >= 1/kappa."""
    return decay_constants(model)["kappa"]


# ---------------------------------------------------------------------------
# assembled report

@dataclass(frozen=True)
class ConstantsReport:
    """Every named constant and threshold for one model.

    None marks a quantity that is not asserted for this model (wrong
    boundary setup, strong degeneracy, missing feedback, or smallness
    violated); ``notes`` says why, one line per absent entry.
    """

    mu: float
    C_D: float
    C_N: Optional[float]
    C_F: float
    C_h: float
    C_DL: float
    C_NL: Optional[float]
    eta1: Optional[float]
    eta2: Optional[float]
    C_w: Optional[float]
    T_dirichlet: Optional[float]
    T_robin: Optional[float]
    T_neumann: Optional[float]
    T1: float
    T2: float
    kappa: Optional[float]
    smallness_ok: bool
    notes: tuple = ()


def constants_report(model: BeamModel) -> ConstantsReport:
    """Assemble the full constants report, with notes for absent entries.

    The horizon-dependent constant C_w is reported at the reference horizon
    2 * T_robin (comfortably above the threshold, hence positive); use
    robin_observability_constant for other horizons.
    """
    notes = []
    small = smallness_ok(model)
    if not small:
        notes.append("smallness violated (mu + 2*C_h >= 2): time thresholds not asserted")

    if model.bc is BoundaryType.ROBIN:
        cn = poincare_robin(model)
    else:
        cn = None
        notes.append("C_N, C_NL: need Robin boundary parameters gamma, delta > 0")
    c_dl, c_nl = c_DL_c_NL(model)

    t_dir, t_rob, t_neu = observability_times(model)
    if small and model.bc is BoundaryType.ROBIN and not model.weak_weak:
        notes.append("T_robin, C_w: no closed-form bound under strong degeneracy")
    if small and model.bc is not BoundaryType.ROBIN:
        notes.append("T_robin, T_neumann: thresholds quote C_NL, absent without Robin parameters")

    eta1 = eta2 = None
    if model.bc is BoundaryType.ROBIN and small:
        eta1, eta2 = robin_etas(model)

    cw = None
    if t_rob is not None:
        cw = robin_observability_constant(model, 2.0 * t_rob)

    kappa = None
    if (
        model.bc is BoundaryType.ROBIN
        and model.feedback is not None
        and model.alpha > 0.0
        and model.beta > 0.0
        and small
    ):
        kappa = decay_rate(model)
    elif model.feedback is None or model.alpha <= 0.0 or model.beta <= 0.0:
        notes.append("kappa: needs positive feedback gains (and a Robin setup)")

    t1, t2 = travel_times(model)
    return ConstantsReport(
        mu=model.mu,
        C_D=poincare_dirichlet(model),
        C_N=cn,
        C_F=c_F(model),
        C_h=c_h(model),
        C_DL=c_dl,
        C_NL=c_nl,
        eta1=eta1,
        eta2=eta2,
        C_w=cw,
        T_dirichlet=t_dir,
        T_robin=t_rob,
        T_neumann=t_neu,
        T1=t1,
        T2=t2,
        kappa=kappa,
        smallness_ok=small,
        notes=tuple(notes),
    )
