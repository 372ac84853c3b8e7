"""Standing-wave profiles: shooting, tail matching, family continuation.

The standing wave e^{-i omega t} phi with phi = (a chi, i b sigma.xhat chi)
reduces to the radial system

    a' = (g(a^2 - b^2) - m - omega) b,
    b' + 2 b / rho = (g(a^2 - b^2) - m + omega) a,

integrated outward from a series start at rho = 0.  The ground state is the
nodeless solution separating trajectories whose a crosses zero (overshoot)
from those whose b turns back or that grow without a sign change (undershoot).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import BPoly
from scipy.optimize import brentq

from .core import (
    DiscreteSoler,
    RadialGrid,
    SolerModel,
    spinor_from_amplitudes,
    BETA,
    ALPHA,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RHO_START = 1e-5
MATCH_LEVEL = 1e-6
KNOT_SPACING = 0.02


class IntegrationError(RuntimeError):
    """The radial integrator failed; ``last_rho`` is the last valid radius."""

    def __init__(self, message: str, last_rho: float) -> None:
        super().__init__(f"{message} (last valid rho = {last_rho:.6g})")
        self.last_rho = last_rho


class BracketError(ValueError):
    pass


class ExcitedStateWarning(UserWarning):
    pass


@dataclass
class ShootResult:
    rho: NDArray
    a: NDArray
    b: NDArray
    tail_sign: str  # "overshoot", "undershoot" or "decayed"
    sol: object = field(repr=False, default=None)

    @property
    def end(self) -> float:
        return float(self.rho[-1])


def _rhs(model: SolerModel, omega: float):
    m = model.mass

    def f(r, y):
        a, b = y
        g = model.g(a * a - b * b)
        return [(g - m - omega) * b, (g - m + omega) * a - 2.0 * b / r]

    return f


def _series_start(model: SolerModel, omega: float, a0: float, r0: float):
    m = model.mass
    g0 = float(model.g(a0 * a0))
    b1 = (g0 - m + omega) * a0 / 3.0
    a2 = (g0 - m - omega) * b1 / 2.0
    return a0 + a2 * r0 * r0, b1 * r0, b1, a2


def _validate(model: SolerModel, omega: float) -> None:
    if not 0.0 < omega < model.mass:
        raise ValueError("omega must lie in (0, m)")


def shoot(model: SolerModel, omega: float, a0: float, r_max: float = 80.0) -> ShootResult:
    """Integrate the radial system from a(0) = a0 and classify the tail."""
    _validate(model, omega)
    if not a0 > 0:
        raise ValueError("a0 must be positive")
    y0 = _series_start(model, omega, a0, RHO_START)[:2]

    def hit_a(r, y):
        return y[0]

    def hit_b(r, y):
        return y[1]

    def blow_up(r, y):
        return abs(y[0]) + abs(y[1]) - (2.0 * a0 + 1.0)

    for ev in (hit_a, hit_b, blow_up):
        ev.terminal = True
    # b starts with the sign of b1; a turning point of a is a zero of b after
    # that, so only crossings against the initial sign count
    hit_b.direction = -1.0 if y0[1] > 0 else 1.0
    sol = solve_ivp(_rhs(model, omega), (RHO_START, r_max), y0, method="DOP853",
                    rtol=1e-12, atol=1e-14 * a0, events=[hit_a, hit_b, blow_up],
                    dense_output=True)
    if sol.status == -1:
        raise IntegrationError(sol.message, float(sol.t[-1]))
    a, b = sol.y
    if sol.t_events[0].size:
        sign = "overshoot"
    elif sol.t_events[1].size or sol.t_events[2].size:
        sign = "undershoot"
    else:
        sign = "decayed" if abs(a[-1]) + abs(b[-1]) < 1e-3 * a0 else "undershoot"
    return ShootResult(sol.t, a, b, sign, sol)


def find_bracket(model: SolerModel, omega: float, a_max: float = 3.0,
                 samples: int = 60, r_max: float = 80.0) -> tuple[float, float]:
    """First undershoot-to-overshoot transition of a coarse a0 scan."""
    grid = np.linspace(a_max / samples, a_max, samples)
    prev = None
    for a0 in grid:
        sign = shoot(model, omega, a0, r_max).tail_sign
        if prev is not None and prev[1] == "undershoot" and sign == "overshoot":
            return prev[0], float(a0)
        prev = (float(a0), sign)
    raise BracketError(f"no shooting bracket found for omega = {omega} in (0, {a_max}]")


# ----------------------------------------------------------------------------
# the profile object
# ----------------------------------------------------------------------------


@dataclass
class RadialProfile:
    """A standing wave as a piecewise quintic on [0, match_radius] joined to
    the exact linear tail a = A e^{-k rho}/rho beyond it."""

    omega: float
    mass: float
    a0: float
    kappa: float
    knots: NDArray
    values: NDArray  # shape (k, 2, 3): (a, a', a'') and (b, b', b'') per knot
    tail_amplitude: float
    match_radius: float
    residual: float = float("nan")
    tail: str = "matched"
    min_density: float = float("nan")
    nodeless: bool = True

    def __post_init__(self) -> None:
        self._a = BPoly.from_derivatives(self.knots, self.values[:, 0, :])
        self._b = BPoly.from_derivatives(self.knots, self.values[:, 1, :])

    @property
    def kappa_exact(self) -> float:
        return float(np.sqrt(self.mass**2 - self.omega**2))

    def __call__(self, rho, derivative: int = 0) -> tuple[NDArray, NDArray]:
        """(a, b) or their derivatives at rho >= 0."""
        rho = np.asarray(rho, dtype=float)
        inner = rho <= self.match_radius
        a = np.zeros_like(rho)
        b = np.zeros_like(rho)
        if np.any(inner):
            a[inner] = self._a(rho[inner], derivative)
            b[inner] = self._b(rho[inner], derivative)
        outer = ~inner
        if np.any(outer) and self.tail == "matched":
            a[outer], b[outer] = self._tail(rho[outer], derivative)
        return a, b

    def _tail(self, rho, derivative):
        k = self.kappa_exact
        A = self.tail_amplitude
        e = np.exp(-k * rho)
        a = A * e / rho
        b = A * e * (1 + k * rho) / ((self.mass + self.omega) * rho**2)
        if derivative == 0:
            return a, b
        if derivative == 1:
            # a' = -(m + omega) b and b' = -(m - omega) a - 2 b / rho in the tail
            return -(self.mass + self.omega) * b, -(self.mass - self.omega) * a - 2 * b / rho
        raise ValueError("tail derivatives above first order are not provided")

    def sample(self, grid: RadialGrid) -> NDArray:
        """Real (a, b) amplitudes on the staggered nodes, (p, q) order."""
        if grid.r_max > 0 and self.tail != "matched" and grid.r_max > self.match_radius:
            logger.debug("sampling a truncated profile beyond its matching radius")
        a, _ = self(grid.rho_p)
        _, b = self(grid.rho_q)
        return np.concatenate([a, b])

    def charge(self) -> float:
        """4 pi int (a^2 + b^2) rho^2 drho by Gauss quadrature per knot interval."""
        xg, wg = np.polynomial.legendre.leggauss(8)
        lo, hi = self.knots[:-1], self.knots[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        r = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
        w = (half[:, None] * wg[None, :]).ravel()
        a, b = self(r)
        inner = np.sum(w * (a * a + b * b) * r * r)
        if self.tail == "matched":
            f = lambda s: float(np.sum(np.square(self._tail(np.array([s]), 0)))) * s * s
            outer = quad(f, self.match_radius, np.inf, epsabs=1e-16, limit=200)[0]
        else:
            outer = 0.0
        return float(4 * np.pi * (inner + outer))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "omega": self.omega, "mass": self.mass, "a0": self.a0,
            "kappa": self.kappa, "tail_amplitude": self.tail_amplitude,
            "match_radius": self.match_radius, "residual": self.residual,
            "tail": self.tail, "min_density": self.min_density,
            "nodeless": self.nodeless,
            "knots": self.knots.tolist(), "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RadialProfile":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported profile schema version")
        return cls(
            omega=data["omega"], mass=data["mass"], a0=data["a0"], kappa=data["kappa"],
            knots=np.asarray(data["knots"]), values=np.asarray(data["values"]),
            tail_amplitude=data["tail_amplitude"], match_radius=data["match_radius"],
            residual=data["residual"], tail=data["tail"], min_density=data["min_density"],
            nodeless=data["nodeless"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "RadialProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _knot_values(model: SolerModel, omega: float, rho, a, b):
    """Values and first two derivatives of (a, b) from the ODE itself."""
    m = model.mass
    s = a * a - b * b
    g, g1, _ = model.g_all(s)
    ap = (g - m - omega) * b
    bp = (g - m + omega) * a - 2 * b / rho
    sp_ = 2 * a * ap - 2 * b * bp
    app = g1 * sp_ * b + (g - m - omega) * bp
    bpp = g1 * sp_ * a + (g - m + omega) * ap - 2 * bp / rho + 2 * b / rho**2
    return np.stack([np.stack([a, ap, app], -1), np.stack([b, bp, bpp], -1)], 1)


def _fit_decay(rho, a, a0) -> float:
    """Slope of -log(rho a) where a falls from 1e-3 to 1e-6 of a0."""
    sel = (a < 1e-3 * a0) & (a > MATCH_LEVEL * a0)
    if sel.sum() < 5:
        return float("nan")
    slope = np.polyfit(rho[sel], np.log(rho[sel] * a[sel]), 1)[0]
    return float(-slope)


def solve_profile(model: SolerModel, omega: float, bracket: Optional[tuple[float, float]] = None,
                  r_max: float = 80.0, tail: str = "matched",
                  accept_excited: bool = False) -> RadialProfile:
    """Bisect the shooting parameter and return the matched profile."""
    _validate(model, omega)
    if bracket is None:
        bracket = find_bracket(model, omega, r_max=r_max)
    lo, hi = map(float, bracket)
    s_lo = shoot(model, omega, lo, r_max)
    s_hi = shoot(model, omega, hi, r_max)
    if {s_lo.tail_sign, s_hi.tail_sign} != {"overshoot", "undershoot"}:
        raise BracketError(f"bracket ends classify as {s_lo.tail_sign} and {s_hi.tail_sign}")
    under_is_lo = s_lo.tail_sign == "undershoot"
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        s_mid = shoot(model, omega, mid, r_max)
        if s_mid.tail_sign == "decayed":
            s_lo = s_hi = s_mid
            lo = hi = mid
            break
        if (s_mid.tail_sign == "undershoot") == under_is_lo:
            lo, s_lo = mid, s_mid
        else:
            hi, s_hi = mid, s_mid
    else:
        raise BracketError("bisection stagnated")
    best = s_lo if s_lo.end >= s_hi.end else s_hi
    a0 = lo if best is s_lo else hi
    return _build_profile(model, omega, a0, best, tail, accept_excited)


def _build_profile(model, omega, a0, shot: ShootResult, tail, accept_excited) -> RadialProfile:
    sol = shot.sol
    amp = np.abs(shot.a) + np.abs(shot.b)
    small = np.flatnonzero(amp < MATCH_LEVEL * a0)
    if small.size == 0:
        raise IntegrationError("trajectory never reached the matching level", shot.end)
    i = small[0]
    level = lambda r: float(np.sum(np.abs(sol.sol(r)))) - MATCH_LEVEL * a0
    r_match = brentq(level, shot.rho[i - 1], shot.rho[i], xtol=1e-14)
    # fine knots for the quintic evaluator
    nk = int(np.ceil(r_match / KNOT_SPACING))
    knots = np.linspace(0.0, r_match, nk + 1)
    ya = sol.sol(np.maximum(knots[1:], RHO_START))
    vals = np.empty((nk + 1, 2, 3))
    vals[1:] = _knot_values(model, omega, knots[1:], ya[0], ya[1])
    _, _, b1, a2 = _series_start(model, omega, a0, 0.0)
    vals[0] = [[a0, 0.0, 2 * a2], [0.0, b1, 0.0]]
    # the first knot interval starts inside the series region
    vals[1] = _knot_values(model, omega, knots[1:2], ya[0][:1], ya[1][:1])[0]

    dense = np.linspace(RHO_START, r_match, 4000)
    ad, bd = sol.sol(dense)
    kappa = _fit_decay(dense, ad, a0)
    k_exact = np.sqrt(model.mass**2 - omega**2)
    a_m = float(sol.sol(r_match)[0])
    amp_tail = a_m * r_match * np.exp(k_exact * r_match)
    nodeless = bool(np.all(ad > 0))
    if not nodeless:
        msg = f"profile at omega = {omega} has a node: excited state"
        if not accept_excited:
            raise BracketError(msg)
        warnings.warn(msg, ExcitedStateWarning)
    prof = RadialProfile(omega=omega, mass=model.mass, a0=a0, kappa=kappa, knots=knots,
                         values=vals, tail_amplitude=amp_tail, match_radius=r_match,
                         tail=tail, nodeless=nodeless)
    prof.min_density = float(np.min(ad * ad - bd * bd))
    if prof.min_density < 0:
        logger.warning("a^2 - b^2 negative somewhere for omega = %g", omega)
    prof.residual = radial_residual(prof, model)
    return prof


# ----------------------------------------------------------------------------
# residuals
# ----------------------------------------------------------------------------


def radial_residual(profile: RadialProfile, model: SolerModel, r_max: Optional[float] = None) -> float:
    """Sup of the ODE residual of the evaluator, including the tail junction."""
    m, om = model.mass, profile.omega
    k = profile.knots
    r = np.concatenate([0.5 * (k[:-1] + k[1:]), k[1:]])
    outer_end = r_max if r_max is not None else profile.match_radius + 20.0
    r = np.concatenate([r, np.linspace(profile.match_radius * (1 + 1e-9), outer_end, 400)])
    a, b = profile(r)
    ap, bp = profile(r, 1)
    g = model.g(a * a - b * b)
    res_a = ap - (g - m - om) * b
    res_b = bp + 2 * b / r - (g - m + om) * a
    eps = 1e-9 * profile.match_radius
    left = np.array(profile(np.array([profile.match_radius - eps])))
    right = np.array(profile(np.array([profile.match_radius + eps])))
    jump = float(np.abs(left - right).max())
    return float(max(np.abs(res_a).max(), np.abs(res_b).max(), jump))


def evaluate_spinor(profile: RadialProfile, x: NDArray) -> NDArray:
    """The C^4 standing-wave profile at Cartesian points x, shape (k, 4)."""
    x = np.atleast_2d(x)
    rho = np.linalg.norm(x, axis=1)
    a, b = profile(rho)
    return spinor_from_amplitudes(a, b, x, "block")


def cartesian_residual(profile: RadialProfile, model: SolerModel, points: int = 128,
                       radius: float = 8.0, step: float = 1e-3, order: int = 4,
                       rng: Optional[np.random.Generator] = None) -> float:
    """Max over random points of |D_m u - omega u - g(u.beta u*) beta u|.

    Partial derivatives use central differences of the given order (2 or 4).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pts = rng.uniform(-1, 1, size=(points * 3, 3))
    pts = pts[np.linalg.norm(pts, axis=1) <= 1][:points] * radius
    if pts.shape[0] < points:
        raise RuntimeError("not enough sample points")
    u = evaluate_spinor(profile, pts)
    if order == 4:
        offsets, coef = (-2, -1, 1, 2), np.array([1, -8, 8, -1]) / 12.0
    elif order == 2:
        offsets, coef = (-1, 1), np.array([-0.5, 0.5])
    else:
        raise ValueError("order must be 2 or 4")
    du = np.zeros((pts.shape[0], 4), dtype=complex)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        deriv = sum(c * evaluate_spinor(profile, pts + o * e) for c, o in zip(coef, offsets)) / step
        du += -1j * deriv @ ALPHA[j].T
    s = np.real(np.einsum("ki,ij,kj->k", u, BETA, np.conj(u)))
    res = du + model.mass * u @ BETA.T - profile.omega * u - model.g(s)[:, None] * (u @ BETA.T)
    return float(np.abs(res).max())


def profile_residual(profile: Optional[RadialProfile], model: SolerModel, **kwargs) -> tuple[float, float]:
    """(radial_residual, cartesian_residual); a missing profile is the zero field."""
    if profile is None:
        return 0.0, 0.0
    return radial_residual(profile, model), cartesian_residual(profile, model, **kwargs)


# ----------------------------------------------------------------------------
# families
# ----------------------------------------------------------------------------


@dataclass
class ProfileFamily:
    omegas: NDArray
    profiles: list
    q: NDArray
    qprime: NDArray  # second-order differences at omegas[1:-1]
    failure: Optional[str] = None
    below_third: list = field(default_factory=list)

    @property
    def qprime_omegas(self) -> NDArray:
        return self.omegas[1:-1]

    def h3_verdict(self, threshold: float = 1e-3) -> dict:
        qp = self.qprime
        if qp.size == 0:
            return {"verdict": "not evaluated", "reason": "fewer than three members"}
        # an extremum of q shows up as a sign change of consecutive charge
        # differences, including the end intervals the centred values skip
        steps = np.diff(self.q)
        changes = [float(self.omegas[i + 1]) for i in range(steps.size - 1)
                   if np.sign(steps[i]) != np.sign(steps[i + 1])]
        small = [float(w) for w, v in zip(self.qprime_omegas, qp) if abs(v) <= threshold]
        holds = not changes and not small
        return {
            "verdict": "holds" if holds else "violated",
            "min_abs_qprime": float(np.min(np.abs(qp))),
            "sign_changes_near": changes,
            "near_zero_at": small,
            "threshold": threshold,
            "below_m_over_3": self.below_third,
        }

    def member(self, omega: float) -> RadialProfile:
        i = int(np.argmin(np.abs(self.omegas - omega)))
        if abs(self.omegas[i] - omega) > 1e-12:
            raise KeyError(f"omega = {omega} is not a family member")
        return self.profiles[i]


def _warm_bracket(model, omega, a_prev, r_max):
    for width in (0.05, 0.15, 0.4):
        lo, hi = a_prev * (1 - width), a_prev * (1 + width)
        try:
            if {shoot(model, omega, lo, r_max).tail_sign,
                    shoot(model, omega, hi, r_max).tail_sign} == {"undershoot", "overshoot"}:
                return lo, hi
        except IntegrationError:
            continue
    return find_bracket(model, omega, r_max=r_max)


def continue_family(model: SolerModel, omega_grid: Sequence[float],
                    bracket: Optional[tuple[float, float]] = None,
                    r_max: float = 80.0) -> ProfileFamily:
    """Warm-started continuation along an increasing omega grid."""
    omegas = np.asarray(omega_grid, dtype=float)
    if omegas.ndim != 1 or omegas.size == 0 or np.any(np.diff(omegas) <= 0):
        raise ValueError("omega grid must be non-empty and increasing")
    profiles = []
    failure = None
    for i, om in enumerate(omegas):
        try:
            if i == 0:
                prof = solve_profile(model, om, bracket, r_max=r_max)
            else:
                br = _warm_bracket(model, om, profiles[-1].a0, r_max)
                prof = solve_profile(model, om, br, r_max=r_max)
        except (BracketError, IntegrationError) as exc:
            failure = f"continuation stopped at omega = {om}: {exc}"
            logger.warning(failure)
            break
        profiles.append(prof)
    done = omegas[: len(profiles)]
    q = np.array([p.charge() for p in profiles])
    if done.size >= 3:
        qprime = np.gradient(q, done)[1:-1]
    else:
        qprime = np.zeros(0)
    third = [float(w) for w in done if w <= model.mass / 3]
    return ProfileFamily(done, profiles, q, qprime, failure, third)


# ----------------------------------------------------------------------------
# discrete standing waves
# ----------------------------------------------------------------------------


@dataclass
class DiscreteProfile:
    """An exact stationary state of the discrete functional on one grid.

    ``x`` holds real (a, b) amplitudes in (p, q) order; ``dx`` and ``d2x`` are
    the first two omega-derivatives along the discrete family.
    """

    grid: RadialGrid
    omega: float
    x: NDArray
    dx: NDArray
    d2x: NDArray
    residual: float

    @property
    def charge(self) -> float:
        return float(np.sum(self.grid.weights * self.x**2))

    @property
    def charge_slope(self) -> float:
        return float(2 * np.sum(self.grid.weights * self.x * self.dx))

    @property
    def doubled(self) -> NDArray:
        """Stored doubled vector of the wave (x, x)."""
        return np.concatenate([self.x, self.x]).astype(complex)

    @property
    def doubled_derivative(self) -> NDArray:
        return np.concatenate([self.dx, self.dx]).astype(complex)


def _real_jacobian(disc: DiscreteSoler, x, omega):
    """Jacobian of the physical-slice residual W^{-1} dK/dx2 for real fields."""
    n = disc.grid.size
    X = np.concatenate([x, x]).astype(complex)
    H = disc.hessian(X, omega)
    Winv = 1.0 / disc.grid.weights
    J = H[n:, :n] + H[n:, n:]
    return sp.csc_matrix((sp.diags(Winv) @ J).real)


def polish_profile(start: NDArray | RadialProfile, model: SolerModel, grid: RadialGrid,
                   omega: Optional[float] = None, tol: float = 1e-13,
                   max_iter: int = 30) -> DiscreteProfile:
    """Newton-solve the discrete stationary equation from a nearby start."""
    if isinstance(start, RadialProfile):
        omega = start.omega if omega is None else omega
        x = start.sample(grid)
    else:
        x = np.asarray(start, dtype=float).copy()
    if omega is None:
        raise ValueError("omega is required with an array start")
    disc = DiscreteSoler(grid, model)
    scale = np.abs(x).max()
    for _ in range(max_iter):
        r = np.real(disc.stationary_residual(x, omega))
        if np.abs(r).max() < tol * scale:
            break
        J = _real_jacobian(disc, x, omega)
        x = x - spla.spsolve(J, r)
    else:
        raise RuntimeError("discrete Newton iteration did not converge")
    # one more step brings x itself to roundoff; the Jacobian is poorly
    # conditioned near the internal-mode frequency
    x = x - spla.spsolve(_real_jacobian(disc, x, omega), r)
    J = _real_jacobian(disc, x, omega)
    lu = spla.splu(J)
    dx = lu.solve(x)
    # second derivative: J d2x = 2 dx - F_xx[dx, dx]
    n = grid.size
    X = np.concatenate([x, x]).astype(complex)
    dX = np.concatenate([dx, dx]).astype(complex)
    third = disc.third_gradient(X, dX, dX)
    curv = np.real(third[n:]) / grid.weights
    d2x = lu.solve(2 * dx - curv)
    res = float(np.abs(disc.stationary_residual(x, omega)).max())
    return DiscreteProfile(grid, float(omega), x, dx, d2x, res)


def discrete_family_member(base: DiscreteProfile, model: SolerModel, omega: float) -> DiscreteProfile:
    """Continue a discrete stationary state to a nearby omega."""
    dw = omega - base.omega
    guess = base.x + dw * base.dx + 0.5 * dw * dw * base.d2x
    return polish_profile(guess, model, base.grid, omega)
