"""Time evolution of the nonlinear Dirac equation in the radial block and modulation tracking.

The semi-discrete equation i x' = D x - gamma(x) beta x is advanced by Strang
splitting: the nonlinear part only rotates phases (gamma depends on |p|^2 and
|q|^2, which it leaves unchanged) and is solved exactly, the linear part uses
Crank-Nicolson, which is unitary for the quadrature weights.  A fourth-order
variant composes three Strang steps (Yoshida triple jump).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .core import (
    BlockSpinor,
    DiscreteSoler,
    RadialGrid,
    SolerModel,
    charge,
    conj_swap,
    energy,
    pair_vectors,
)
from .linop import SpectralData, spectral_projection
from .profile import DiscreteProfile, discrete_family_member
from .resolvent import weight

logger = logging.getLogger(__name__)


class ModulationError(RuntimeError):
    """Newton iteration for (omega, theta) failed: the field left the tube."""


@dataclass(frozen=True)
class EvolutionOptions:
    dt: float = 0.02
    boundary: str = "reflecting"  # or "absorbing"
    layer: float = 0.2  # absorbing layer width, fraction of r_max
    strength: float = 1.2
    ramp: int = 3
    stride: int = 50
    order: int = 2  # 2: Strang; 4 and 6: Yoshida compositions of Strang steps
    tau: float = 1.5

    def __post_init__(self) -> None:
        if self.boundary not in ("reflecting", "absorbing"):
            raise ValueError("boundary must be 'reflecting' or 'absorbing'")
        if self.order not in (2, 4, 6):
            raise ValueError("order must be 2, 4 or 6")
        if not 0 < self.layer < 1:
            raise ValueError("layer must be a fraction in (0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EvolutionState:
    u: BlockSpinor
    t: float
    options: EvolutionOptions


def absorbing_profile(grid: RadialGrid, options: EvolutionOptions) -> NDArray:
    """Polynomial ramp of the complex absorbing potential on all nodes."""
    if options.boundary == "reflecting":
        return np.zeros(grid.size)
    start = (1 - options.layer) * grid.r_max
    s = np.clip((grid.rho - start) / (grid.r_max - start), 0.0, None)
    return options.strength * s**options.ramp


def _triple_jump(weights: list[float], order: int) -> list[float]:
    """Raise a symmetric composition of even order by two (Yoshida)."""
    outer = 1.0 / (2.0 - 2.0 ** (1.0 / (order + 1)))
    inner = 1.0 - 2.0 * outer
    return [c * outer for c in weights] + [c * inner for c in weights] + [c * outer for c in weights]


COMPOSITIONS = {2: [1.0], 4: _triple_jump([1.0], 2)}
COMPOSITIONS[6] = _triple_jump(COMPOSITIONS[4], 4)


class Stepper:
    """Splitting integrator with cached Crank-Nicolson factorizations."""

    def __init__(self, grid: RadialGrid, model: SolerModel, options: EvolutionOptions) -> None:
        self.grid = grid
        self.model = model
        self.options = options
        self.disc = DiscreteSoler(grid, model)
        gamma = absorbing_profile(grid, options)
        self._op = (self.disc.dirac - 1j * sp.diags(gamma)).tocsc()
        self._eye = sp.identity(grid.size, format="csc")
        self._lu: dict = {}
        self._wc = grid.weights[: grid.n]
        self._we = grid.weights[grid.n :]

    def _factor(self, h: float):
        key = round(h, 15)
        if key not in self._lu:
            self._lu[key] = spla.splu((self._eye + 0.5j * h * self._op).tocsc())
        return self._lu[key]

    def linear(self, x: NDArray, h: float) -> NDArray:
        rhs = x - 0.5j * h * (self._op @ x)
        out = self._factor(h).solve(rhs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("linear solve produced non-finite values")
        return out

    def coupling(self, x: NDArray) -> NDArray:
        """DiscreteSoler.effective_coupling on the physical slice, with the
        edge/centre averages done by slicing instead of sparse products."""
        n = self.grid.n
        dens = np.abs(x) ** 2
        pp, qq = dens[:n], dens[n:]
        to_centres = lambda e: 0.5 * (np.concatenate([[0.0], e]) + np.concatenate([e, [0.0]]))
        to_edges = lambda c: 0.5 * (c[:-1] + c[1:])
        g_c = self.model.g(pp - to_centres(qq))
        gam_e = to_edges(self._wc * g_c) / self._we
        return np.concatenate([g_c, gam_e])

    def nonlinear(self, x: NDArray, h: float) -> NDArray:
        if self.model.is_linear:
            return x
        gam = self.coupling(x)
        n = self.grid.n
        out = x.copy()
        out[:n] *= np.exp(1j * gam[:n] * h)
        out[n:] *= np.exp(-1j * gam[n:] * h)
        return out

    def strang(self, x: NDArray, h: float) -> NDArray:
        x = self.nonlinear(x, 0.5 * h)
        x = self.linear(x, h)
        return self.nonlinear(x, 0.5 * h)

    def advance(self, x: NDArray, h: float) -> NDArray:
        """One composed step; neighbouring nonlinear half steps are merged."""
        weights = COMPOSITIONS[self.options.order]
        pending = 0.5 * weights[0] * h
        for i, c in enumerate(weights):
            x = self.nonlinear(x, pending)
            x = self.linear(x, c * h)
            pending = 0.5 * c * h + (0.5 * weights[i + 1] * h if i + 1 < len(weights) else 0.0)
        return self.nonlinear(x, pending)


def step(state: EvolutionState, dt: Optional[float] = None, model: Optional[SolerModel] = None,
         stepper: Optional[Stepper] = None) -> EvolutionState:
    """One step of size dt (default options.dt); negative dt runs backwards."""
    if stepper is None:
        if model is None:
            raise ValueError("a model or a stepper is required")
        stepper = Stepper(state.u.grid, model, state.options)
    dt = state.options.dt if dt is None else dt
    x = stepper.advance(state.u.vector, dt)
    return EvolutionState(BlockSpinor.from_vector(state.u.grid, x), state.t + dt, state.options)


# ----------------------------------------------------------------------------
# modulation
# ----------------------------------------------------------------------------


class DiscreteFamily:
    """Exact discrete standing waves near a base member, with second-order
    Taylor reuse inside a small radius around each polished member."""

    def __init__(self, base: DiscreteProfile, model: SolerModel, taylor_radius: float = 1e-6) -> None:
        self.model = model
        self.grid = base.grid
        self.taylor_radius = taylor_radius
        self._members = [base]

    def nearest(self, omega: float) -> DiscreteProfile:
        return min(self._members, key=lambda m: abs(m.omega - omega))

    def member(self, omega: float) -> tuple[NDArray, NDArray, NDArray]:
        """(x, dx, d2x) at omega."""
        near = self.nearest(omega)
        d = omega - near.omega
        if abs(d) > self.taylor_radius:
            near = discrete_family_member(near, self.model, omega)
            self._members.append(near)
            d = 0.0
        x = near.x + d * near.dx + 0.5 * d * d * near.d2x
        dx = near.dx + d * near.d2x
        return x, dx, near.d2x


@dataclass
class ModulationResult:
    omega: float
    theta: float
    R: NDArray  # stored doubled vector of exp(-i Sigma_3 theta) U - Phi_omega
    orthogonality: tuple  # (F, G) residuals
    iterations: int


def orthogonality_residuals(grid: RadialGrid, R: NDArray, x: NDArray, dx: NDArray) -> tuple[float, float]:
    """|pair(R, Phi)| and |pair(R, Sigma_3 dPhi)| relative to ||Phi||^2."""
    Phi = np.concatenate([x, x]).astype(complex)
    dS = np.concatenate([dx, -dx]).astype(complex)
    scale = pair_vectors(grid, Phi, Phi).real
    return (abs(pair_vectors(grid, R, Phi)) / scale, abs(pair_vectors(grid, R, dS)) / scale)


def modulate(u: BlockSpinor, family: DiscreteFamily, omega_guess: float, theta_guess: float,
             tol: float = 1e-13, max_iter: int = 40, trust: float = 0.05,
             max_distance: float = 0.5, slope_threshold: float = 1e-8) -> ModulationResult:
    """Newton on (F, G) = (Re b(r, phi), Im b(r, dphi)) with r = e^{-i theta} u - phi_omega.

    ``trust`` caps |d omega| per Newton step; ``max_distance`` bounds
    ||r|| / ||phi|| at the root (the tube radius).
    """
    grid = u.grid
    w = grid.weights
    y = u.vector
    om, th = float(omega_guess), float(theta_guess)
    for it in range(1, max_iter + 1):
        try:
            x, dx, d2x = family.member(om)
        except RuntimeError as exc:
            raise ModulationError(f"no family member at omega = {om:.6g}") from exc
        ey = np.exp(-1j * th) * y
        r = ey - x
        F = np.array([np.real(np.sum(w * r * x)), np.imag(np.sum(w * r * dx))])
        J = np.array([
            [np.real(np.sum(w * (-dx * x + r * dx))), np.imag(np.sum(w * ey * x))],
            [np.imag(np.sum(w * r * d2x)), -np.real(np.sum(w * ey * dx))],
        ])
        if abs(np.linalg.det(J)) < slope_threshold * max(np.sum(w * x * x), 1.0):
            raise ModulationError("modulation Jacobian is singular (charge slope near zero)")
        delta = np.linalg.solve(J, -F)
        if abs(delta[0]) > trust:
            delta *= trust / abs(delta[0])
        om += delta[0]
        th += delta[1]
        if not np.all(np.isfinite(delta)):
            raise ModulationError("Newton step is not finite")
        if abs(delta[0]) < tol * max(1.0, abs(om)) and abs(delta[1]) < tol * max(1.0, abs(th)):
            break
    else:
        raise ModulationError("modulation Newton did not converge")
    x, dx, _ = family.member(om)
    r = np.exp(-1j * th) * y - x
    if np.sqrt(np.sum(w * np.abs(r) ** 2) / np.sum(w * x * x)) > max_distance:
        raise ModulationError("field is too far from the family")
    R = np.concatenate([r, np.conj(r)])
    return ModulationResult(om, th, R, orthogonality_residuals(grid, R, x, dx), it)


def ansatz(family: DiscreteFamily, omega: float, theta: float, r: Optional[NDArray] = None) -> BlockSpinor:
    """u = e^{i theta} (phi_omega + r)."""
    x, _, _ = family.member(omega)
    v = x.astype(complex) if r is None else x + r
    return BlockSpinor.from_vector(family.grid, np.exp(1j * theta) * v)


def extract_modes(R: NDArray, S: SpectralData, theta: float = 0.0) -> tuple[NDArray, NDArray]:
    """(z, f) of a modulated remainder; f is the continuous part."""
    d = spectral_projection(S, R, theta)
    return d.z, d.f


# ----------------------------------------------------------------------------
# evolution with tracking
# ----------------------------------------------------------------------------


@dataclass
class ModulationTrack:
    times: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    z: list = field(default_factory=list)
    fnorms: list = field(default_factory=list)
    charge: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    orthogonality: list = field(default_factory=list)

    def arrays(self) -> dict:
        z = np.array(self.z, dtype=complex) if self.z else np.zeros((0, 0), dtype=complex)
        return {"t": np.array(self.times), "omega": np.array(self.omega), "theta": np.array(self.theta),
                "z": z, "fnorm": np.array(self.fnorms), "Q": np.array(self.charge),
                "E": np.array(self.energy), "valid": np.array(self.valid, dtype=bool)}

    def to_csv(self, path, header: Optional[dict] = None) -> None:
        a = self.arrays()
        k = a["z"].shape[1] if a["z"].ndim == 2 and a["z"].size else 0
        with open(path, "w", newline="") as fh:
            for key, val in (header or {}).items():
                fh.write(f"# {key}: {val}\n")
            wr = csv.writer(fh)
            wr.writerow(["t", "omega", "theta"] + [f"abs_z{j}" for j in range(k)] + ["fnorm", "Q", "E", "valid"])
            for i in range(len(a["t"])):
                zs = [abs(a["z"][i, j]) for j in range(k)]
                wr.writerow([repr(float(a["t"][i])), repr(float(a["omega"][i])), repr(float(a["theta"][i]))]
                            + [repr(float(v)) for v in zs]
                            + [repr(float(a["fnorm"][i])), repr(float(a["Q"][i])), repr(float(a["E"][i])),
                               int(a["valid"][i])])


@dataclass
class EvolutionResult:
    state: EvolutionState
    track: ModulationTrack


def evolve(u0: BlockSpinor, T: float, options: EvolutionOptions, model: SolerModel,
           family: Optional[DiscreteFamily] = None, spectrum: Optional[SpectralData] = None,
           omega_guess: Optional[float] = None, theta_guess: float = 0.0,
           modulation_kwargs: Optional[dict] = None) -> EvolutionResult:
    """Advance to time T, recording conservation and (with a family) modulation data."""
    stepper = Stepper(u0.grid, model, options)
    steps = int(round(T / options.dt))
    if abs(steps * options.dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a multiple of dt")
    track = ModulationTrack()
    mod_kw = modulation_kwargs or {}
    n_modes = len(spectrum.eigenvectors) if spectrum is not None else 0
    om = None
    if family is not None:
        om = family.nearest(0.0).omega if omega_guess is None else omega_guess
    th = theta_guess
    alive = family is not None
    wt = weight(u0.grid, options.tau)

    def record(x: NDArray, t: float) -> None:
        nonlocal om, th, alive
        u = BlockSpinor.from_vector(u0.grid, x)
        track.times.append(t)
        track.charge.append(charge(u))
        track.energy.append(energy(u, model)[0])
        if alive:
            try:
                res = modulate(u, family, om, th, **mod_kw)
            except ModulationError as exc:
                logger.warning("modulation lost at t = %g: %s", t, exc)
                alive = False
        if not alive:
            track.omega.append(np.nan)
            track.theta.append(np.nan)
            track.z.append(np.full(n_modes, np.nan, dtype=complex))
            track.fnorms.append(np.nan)
            track.valid.append(False)
            track.orthogonality.append((np.nan, np.nan))
            return
        om, th = res.omega, res.theta
        track.omega.append(om)
        track.theta.append(th)
        track.orthogonality.append(res.orthogonality)
        if spectrum is not None:
            z, f = extract_modes(res.R, spectrum)
        else:
            z, f = np.zeros(0, dtype=complex), res.R
        track.z.append(z)
        track.fnorms.append(float(np.sqrt(pair_vectors(u0.grid, wt * f, wt * f).real)))
        track.valid.append(True)

    x = u0.vector
    t = 0.0
    record(x, t)
    for k in range(1, steps + 1):
        x = stepper.advance(x, options.dt)
        t = k * options.dt
        if k % options.stride == 0 or k == steps:
            if alive:
                # u ~ exp(-i omega t) phi, so the phase runs backwards
                th -= om * (t - track.times[-1])
            record(x, t)
    state = EvolutionState(BlockSpinor.from_vector(u0.grid, x), t, options)
    return EvolutionResult(state, track)


def conservation_report(track: ModulationTrack) -> dict:
    Q = np.asarray(track.charge)
    E = np.asarray(track.energy)
    return {"charge_drift": float(np.max(np.abs(Q - Q[0])) / abs(Q[0])),
            "energy_drift": float(np.max(np.abs(E - E[0])) / max(abs(E[0]), 1e-300)),
            "charge_monotone_decreasing": bool(np.all(np.diff(Q) <= 1e-14 * abs(Q[0])))}


# ----------------------------------------------------------------------------
# stability experiments
# ----------------------------------------------------------------------------


def _trend(t: NDArray, y: NDArray) -> dict:
    """Least-squares slope with its t-statistic."""
    A = np.vstack([t - t.mean(), np.ones_like(t)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = max(len(t) - 2, 1)
    resid = y - A @ coef
    s2 = float(resid @ resid) / dof
    se = np.sqrt(s2 / max(np.sum((t - t.mean()) ** 2), 1e-300))
    stat = coef[0] / se if se > 0 else (-np.inf if coef[0] < 0 else np.inf if coef[0] > 0 else 0.0)
    return {"slope": float(coef[0]), "t_stat": float(stat)}


def classify_track(t: Sequence[float], zabs: Sequence[float], fnorm: Sequence[float],
                   omega: Sequence[float], valid: Optional[Sequence[bool]] = None,
                   noise: float = 1e-12, significance: float = 3.0, band_factor: float = 5.0) -> dict:
    """Three-way verdict from trends over the second half of a run."""
    t = np.asarray(t, dtype=float)
    zabs = np.asarray(zabs, dtype=float)
    fnorm = np.asarray(fnorm, dtype=float)
    omega = np.asarray(omega, dtype=float)
    valid = np.ones_like(t, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.all():
        return {"verdict": "inconsistent", "reason": "modulation lost"}
    half = t >= t[0] + 0.5 * (t[-1] - t[0])
    quarter = t >= t[0] + 0.75 * (t[-1] - t[0])

    def decay(y):
        if np.max(np.abs(y[half])) <= noise:
            return "flat", {"slope": 0.0, "t_stat": 0.0}
        tr = _trend(t[half], y[half])
        if tr["t_stat"] < -significance:
            return "decay", tr
        if tr["t_stat"] > significance:
            return "growth", tr
        return "flat", tr

    z_kind, z_tr = decay(zabs)
    f_kind, f_tr = decay(fnorm)
    band = float(np.max(omega[quarter]) - np.min(omega[quarter]))
    allowed = band_factor * float(fnorm[-1]) ** 2
    settled = band <= max(allowed, 1e-14)
    report = {"z_trend": z_kind, "z_fit": z_tr, "f_trend": f_kind, "f_fit": f_tr,
              "omega_band": band, "omega_band_allowed": allowed, "omega_settled": settled}
    if z_kind == "growth" or f_kind == "growth":
        report["verdict"] = "inconsistent"
    elif z_kind in ("decay", "flat") and f_kind in ("decay", "flat") and settled and (
            z_kind == "decay" or np.max(zabs[half]) <= noise) and (
            f_kind == "decay" or np.max(fnorm[half]) <= noise):
        report["verdict"] = "consistent with asymptotic stability"
    else:
        report["verdict"] = "inconclusive"
    return report


def perturbed_initial(profile: DiscreteProfile, S: Optional[SpectralData], kind: str,
                      amplitude: float, mode: int = 0, seed: int = 0) -> BlockSpinor:
    """Physical initial data phi + perturbation of the requested kind."""
    grid = profile.grid
    x = profile.x.astype(complex)
    if kind == "none" or amplitude == 0:
        return BlockSpinor.from_vector(grid, x)
    if kind == "bump":
        return BlockSpinor.from_vector(grid, (1 + amplitude) * x)
    if kind == "mode":
        xi = S.eigenvectors[mode]
        R = amplitude * xi + amplitude * conj_swap(xi)
        return BlockSpinor.from_vector(grid, x + R[: grid.size])
    if kind == "radiation":
        rng = np.random.default_rng(seed)
        rho = grid.rho
        r = (rng.normal(size=grid.size) + 1j * rng.normal(size=grid.size)) * np.exp(-((rho - 4) ** 2) / 4)
        R = np.concatenate([r, np.conj(r)])
        f = spectral_projection(S, R).f
        f = f / np.sqrt(pair_vectors(grid, f, f).real) * np.sqrt(pair_vectors(grid, profile.doubled, profile.doubled).real)
        return BlockSpinor.from_vector(grid, x + amplitude * f[: grid.size])
    raise ValueError(f"unknown perturbation kind {kind!r}")


def stability_experiment(profile: DiscreteProfile, model: SolerModel, S: SpectralData, perturbation: dict,
                         T: float, options: EvolutionOptions, gamma: Optional[float] = None) -> dict:
    """Run a perturbed evolution and classify the modulation track."""
    u0 = perturbed_initial(profile, S, perturbation.get("kind", "mode"), perturbation.get("amplitude", 1e-2),
                           perturbation.get("mode", 0), perturbation.get("seed", 0))
    family = DiscreteFamily(profile, model)
    result = evolve(u0, T, options, model, family, S, profile.omega, 0.0)
    a = result.track.arrays()
    zabs = np.abs(a["z"][:, 0]) if a["z"].size else np.zeros(len(a["t"]))
    verdict = classify_track(a["t"], zabs, a["fnorm"], a["omega"], a["valid"])
    report = {"verdict": verdict, "conservation": conservation_report(result.track),
              "T": T, "options": options.to_dict(), "perturbation": dict(perturbation)}
    if a["z"].size:
        z2 = zabs**2
        cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(a["t"]) * (z2[1:] ** 2 + z2[:-1] ** 2))])
        report["dissipation_integral"] = {"final": float(cum[-1]),
                                          "last_quarter_increment": float(cum[-1] - np.interp(0.75 * T, a["t"], cum)),
                                          "first_quarter_increment": float(np.interp(0.25 * T, a["t"], cum))}
        half = a["t"] >= 0.5 * T
        fit = _trend(a["t"][half], z2[half])
        report["measured_dz2dt"] = fit["slope"]
        if gamma is not None:
            report["golden_rule_dz2dt"] = float(-4 * gamma * np.mean(z2[half] ** 2))
    return {"report": report, "track": result.track, "state": result.state}
