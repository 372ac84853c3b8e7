"""Free Dirac resolvent, limiting absorption and dispersive diagnostics.

The free block resolvent (D - Lambda)^{-1} has the exact radial kernel

    G(rho, rho') = Psi_out(rho_>) Psi_reg(rho_<)^T / W,

built from modified spherical Bessel functions of k rho with
k = sqrt(m^2 - Lambda^2) (principal branch, Re k >= 0).  Boundary values on
|Lambda| > m use k = -i sign(Lambda) sqrt(Lambda^2 - m^2) from above and the
conjugate from below.  The kernel is discretised by the Nystrom rule on the
staggered grid; the p-q jump of G sits between nodes.  Resolvents of the
linearized operator follow from the Lippmann-Schwinger identity
R_H = R_0 - R_0 V (1 + R_0 V)^{-1} R_0 restricted to the support of V.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .core import (
    ALPHA,
    BETA,
    I4,
    RadialGrid,
    SolerModel,
    doubled_weights,
    pair_vectors,
    sigma3,
)
from .linop import LinearizedOperator, SpectralData, spectral_projection

logger = logging.getLogger(__name__)


class KernelSingularityError(ValueError):
    pass


class ThresholdError(ValueError):
    """A boundary value was requested exactly at a threshold."""


class ExtrapolationError(RuntimeError):
    pass


class LimitNotReachedError(RuntimeError):
    pass


class EigenvalueGuardError(ValueError):
    pass


# ----------------------------------------------------------------------------
# spectral parameter and branch
# ----------------------------------------------------------------------------


def decay_constant(mass: float, Lambda: complex, side: Optional[str] = None,
                   allow_threshold: bool = False) -> complex:
    """k with e^{-k r} the free kernel decay; boundary value for real |Lambda| > m."""
    Lambda = complex(Lambda)
    if Lambda.imag != 0 or side is None:
        k = np.sqrt(mass * mass - Lambda * Lambda + 0j)
        if k.real < 0:
            k = -k
        if Lambda.imag == 0 and abs(Lambda.real) > mass and side is None:
            raise ThresholdError("real Lambda in the continuum needs a side")
        return complex(k)
    lam = Lambda.real
    if abs(abs(lam) - mass) == 0:
        if not allow_threshold:
            raise ThresholdError("boundary value exactly at a threshold")
        return 0j
    if abs(lam) < mass:
        return complex(np.sqrt(mass * mass - lam * lam))
    root = np.sqrt(lam * lam - mass * mass)
    k = -1j * np.sign(lam) * root
    if side == "minus":
        k = np.conj(k)
    elif side != "plus":
        raise ValueError("side must be 'plus' or 'minus'")
    return complex(k)


# ----------------------------------------------------------------------------
# 3D kernel
# ----------------------------------------------------------------------------


def free_resolvent_kernel(mass: float, Lambda: complex, x: NDArray, y: NDArray,
                          side: Optional[str] = None, allow_threshold: bool = False) -> NDArray:
    """4x4 kernel of (D_m - Lambda)^{-1} at (x, y)."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise KernelSingularityError("kernel is singular at x = y")
    k = decay_constant(mass, Lambda, side, allow_threshold)
    e = np.exp(-k * r) / (4 * np.pi * r)
    adot = sum(ALPHA[j] * d[j] for j in range(3)) / r
    return ((mass * BETA + Lambda * I4) + 1j * adot * (1 + k * r) / r) * e


def _sphere_rule(n_theta: int, n_phi: int):
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - ct * ct)
    dirs = np.stack([np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)),
                     np.outer(ct, np.ones(n_phi))], -1).reshape(-1, 3)
    w = np.outer(wt, np.full(n_phi, 2 * np.pi / n_phi)).ravel()
    return dirs, w


def kernel_apply_3d(mass: float, Lambda: complex, field_fn, x: NDArray, side: Optional[str] = None,
                    s_max: float = 14.0, panels: int = 6, order: int = 16,
                    n_theta: int = 40, n_phi: int = 48) -> NDArray:
    """int R(x, y) F(y) dy by quadrature in spherical coordinates centred at x.

    The Jacobian s^2 cancels the kernel singularity, so the integrand is smooth
    in the radial variable s = |y - x|.
    """
    k = decay_constant(mass, Lambda, side)
    xs, ws = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, s_max, panels + 1)
    s = np.concatenate([0.5 * (a + b) + 0.5 * (b - a) * xs for a, b in zip(edges[:-1], edges[1:])])
    wsum = np.concatenate([0.5 * (b - a) * ws for a, b in zip(edges[:-1], edges[1:])])
    dirs, wd = _sphere_rule(n_theta, n_phi)
    adn = np.einsum("dj,jab->dab", dirs, np.array(ALPHA))
    out = np.zeros(4, dtype=complex)
    for si, wi in zip(s, wsum):
        pts = x[None, :] + si * dirs
        F = field_fn(pts)
        radial = np.exp(-k * si) / (4 * np.pi)
        scalar = (mass * BETA + Lambda * I4) * si
        vals = F @ scalar.T - 1j * (1 + k * si) * np.einsum("dab,db->da", adn, F)
        out += wi * radial * np.einsum("d,da->a", wd, vals)
    return out


# ----------------------------------------------------------------------------
# radial kernel
# ----------------------------------------------------------------------------


def _scaled_i0(x):
    """e^{-x} i0(x) with i0(x) = sinh(x)/x."""
    x = np.asarray(x, dtype=complex)
    out = np.empty_like(x)
    small = np.abs(x) < 0.05
    xs = x[small]
    out[small] = np.exp(-xs) * (1 + xs**2 / 6 + xs**4 / 120 + xs**6 / 5040)
    xl = x[~small]
    out[~small] = -np.expm1(-2 * xl) / (2 * xl)
    return out


def _scaled_j1(x):
    """e^{-x} i1(x) / x with i1(x) = (x cosh x - sinh x)/x^2."""
    x = np.asarray(x, dtype=complex)
    out = np.empty_like(x)
    small = np.abs(x) < 0.05
    xs = x[small]
    out[small] = np.exp(-xs) * (1 / 3 + xs**2 / 30 + xs**4 / 840 + xs**6 / 45360)
    xl = x[~small]
    e2 = np.exp(-2 * xl)
    out[~small] = (xl * (1 + e2) + np.expm1(-2 * xl)) / (2 * xl**3)
    return out


def block_green(mass: float, Lambda: complex, k: complex, rho: NDArray, rho_src: NDArray,
                row_kind: NDArray, col_kind: NDArray) -> NDArray:
    """Radial kernel entries G[row, col] for (p or q) rows at rho and columns at rho_src.

    ``row_kind``/``col_kind`` hold 0 for p and 1 for q.  u = int G f rho'^2 drho'.
    """
    r = rho[:, None]
    s = rho_src[None, :]
    big = np.maximum(r, s)
    small = np.minimum(r, s)
    E = np.exp(-k * (big - small))
    i0s = _scaled_i0(k * small)
    j1s = _scaled_j1(k * small)
    rk = row_kind[:, None]
    ck = col_kind[None, :]
    above = r > s
    G = np.zeros(np.broadcast(r, s).shape, dtype=complex)
    # p row, p column
    pp = (rk == 0) & (ck == 0)
    G = np.where(pp, (mass + Lambda) * E * i0s / big, G)
    # q row, q column
    qq = (rk == 1) & (ck == 1)
    G = np.where(qq, -(mass - Lambda) * E * (1 + k * big) * small * j1s / big**2, G)
    # p row, q column
    pq = (rk == 0) & (ck == 1)
    val_pq = np.where(above, -k * k * E * small * j1s / big, E * i0s * (1 + k * big) / big**2)
    G = np.where(pq, val_pq, G)
    # q row, p column
    qp = (rk == 1) & (ck == 0)
    val_qp = np.where(above, E * (1 + k * big) * i0s / big**2, -k * k * E * small * j1s / big)
    G = np.where(qp, val_qp, G)
    return G


def block_resolvent_matrix(grid: RadialGrid, mass: float, Lambda: complex,
                           side: Optional[str] = None, allow_threshold: bool = False) -> NDArray:
    """Nystrom matrix of (D - Lambda)^{-1} on the staggered nodes."""
    k = decay_constant(mass, Lambda, side, allow_threshold)
    kind = np.concatenate([np.zeros(grid.n, int), np.ones(grid.n - 1, int)])
    G = block_green(mass, complex(Lambda), k, grid.rho, grid.rho, kind, kind)
    return G * (grid.weights / (4 * np.pi))[None, :]


def block_resolvent_continuum(mass: float, Lambda: complex, p_fn, q_fn, rho: NDArray,
                              side: Optional[str] = None, cut: float = 30.0) -> tuple[NDArray, NDArray]:
    """(p, q) of (D - Lambda)^{-1} f at radii rho by adaptive quadrature."""
    from scipy.integrate import quad

    k = decay_constant(mass, Lambda, side)
    Lc = complex(Lambda)
    out_p = np.zeros(len(rho), dtype=complex)
    out_q = np.zeros(len(rho), dtype=complex)
    for i, r0 in enumerate(rho):
        for row, out in ((0, out_p), (1, out_q)):
            def integrand(s, part):
                kinds = np.array([0, 1])
                g = block_green(mass, Lc, k, np.array([r0]), np.array([s, s]), np.array([row]), kinds)[0]
                v = (g[0] * p_fn(s) + g[1] * q_fn(s)) * s * s
                return v.real if part == 0 else v.imag
            total = 0j
            for a, b in ((0.0, r0), (r0, cut)):
                re = quad(integrand, a, b, args=(0,), epsabs=1e-12, epsrel=1e-11, limit=200)[0]
                im = quad(integrand, a, b, args=(1,), epsabs=1e-12, epsrel=1e-11, limit=200)[0]
                total += re + 1j * im
            out[i] = total
    return out_p, out_q


def free_resolvent_apply_radial(grid: RadialGrid, model: SolerModel, omega: float, lam: float,
                                v: NDArray, side: str = "plus", eps: float = 0.0,
                                threshold_mode: bool = False) -> NDArray:
    """(H_{omega,0} - lam -+ i eps)^{-1} v on a stored doubled vector."""
    return free_doubled_matrix(grid, model, omega, lam, side, eps, threshold_mode) @ v


def free_doubled_matrix(grid: RadialGrid, model: SolerModel, omega: float, lam: float,
                        side: str = "plus", eps: float = 0.0,
                        threshold_mode: bool = False) -> NDArray:
    sgn = 1.0 if side == "plus" else -1.0
    other = "minus" if side == "plus" else "plus"
    m = model.mass
    z = lam + 1j * sgn * eps
    thresholds = (m - omega, -m - omega, omega - m, omega + m)
    if eps == 0 and not threshold_mode and any(abs(lam - t) < 1e-14 for t in thresholds):
        raise ThresholdError("use the threshold scan for boundary values at thresholds")
    # block channel: D - (omega + z); partner channel: -(D - (omega - z))
    Rb = block_resolvent_matrix(grid, m, omega + z, side if eps == 0 else None, threshold_mode)
    Rp = block_resolvent_matrix(grid, m, omega - z, other if eps == 0 else None, threshold_mode)
    n = grid.size
    out = np.zeros((2 * n, 2 * n), dtype=complex)
    out[:n, :n] = Rb
    out[n:, n:] = -Rp
    return out


# ----------------------------------------------------------------------------
# interacting resolvent
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ResolventQuery:
    lam: float
    side: str = "plus"
    epsilons: tuple = ()
    tau: float = 1.5

    def __post_init__(self) -> None:
        if self.side not in ("plus", "minus"):
            raise ValueError("side must be 'plus' or 'minus'")
        e = np.asarray(self.epsilons, dtype=float)
        if e.size and (e.size < 3 or np.any(e <= 0) or np.any(np.diff(e) >= 0)):
            raise ValueError("epsilon sequence must hold >= 3 strictly decreasing positive values")

    @classmethod
    def default(cls, L: LinearizedOperator, lam: float, side: str = "plus", tau: float = 1.5,
                scale: float = 1.0) -> "ResolventQuery":
        g = L.gap
        return cls(lam, side, tuple(scale * f * g for f in (1e-2, 5e-3, 2.5e-3)), tau)


def potential_support(L: LinearizedOperator, rel: float = 1e-10) -> NDArray:
    V = abs(L.V).tocsr()
    if V.nnz == 0:
        return np.zeros(0, dtype=int)
    rows = np.asarray(V.max(axis=1).todense()).ravel()
    cols = np.asarray(V.max(axis=0).todense()).ravel()
    top = max(rows.max(), cols.max())
    return np.flatnonzero((rows > rel * top) | (cols > rel * top))


class InteractingResolvent:
    """R_H(lam +- i eps) = R0 - R0[:, S] V_SS (1 + R0[S, S] V_SS)^{-1} R0[S, :]."""

    def __init__(self, L: LinearizedOperator, lam: float, side: str = "plus", eps: float = 0.0,
                 threshold_mode: bool = False) -> None:
        self.L = L
        self.lam = lam
        self.side = side
        self.eps = eps
        self.R0 = free_doubled_matrix(L.grid, L.model, L.omega, lam, side, eps, threshold_mode)
        self.S = potential_support(L)
        if self.S.size:
            self.V_SS = L.V.tocsr()[self.S][:, self.S].toarray()
            M = np.eye(self.S.size) + self.R0[np.ix_(self.S, self.S)] @ self.V_SS
            self._lu = sla.lu_factor(M)

    def apply(self, v: NDArray) -> NDArray:
        w = self.R0 @ v
        if self.S.size == 0:
            return w
        y = sla.lu_solve(self._lu, w[self.S])
        return w - self.R0[:, self.S] @ (self.V_SS @ y)

    def apply_adjoint(self, v: NDArray) -> NDArray:
        """Adjoint for the pairing: W^{-1} R^dagger W."""
        wts = doubled_weights(self.L.grid)
        x = wts * v
        out = self.R0.conj().T @ x
        if self.S.size:
            out = out - _adjoint_tail(self, x)
        return out / wts

    def matrix(self) -> NDArray:
        if self.S.size == 0:
            return self.R0.copy()
        X = sla.lu_solve(self._lu, self.R0[self.S, :])
        return self.R0 - self.R0[:, self.S] @ (self.V_SS @ X)


def _adjoint_tail(res: InteractingResolvent, x: NDArray) -> NDArray:
    # (R0[:,S] V (1+R0_SS V)^{-1} R0[S,:])^dagger x
    #   = R0[S,:]^dagger (1+R0_SS V)^{-dagger} V^dagger R0[:,S]^dagger x
    S = res.S
    t = res.V_SS.conj().T @ (res.R0[:, S].conj().T @ x)
    u = sla.lu_solve(res._lu, t, trans=2)
    return res.R0[S, :].conj().T @ u


def _richardson(eps: NDArray, values: list) -> tuple[NDArray, float]:
    """Neville extrapolation to eps = 0; error is the last table increment."""
    T = [np.asarray(v) for v in values]
    e = np.asarray(eps, dtype=float)
    table = [T]
    for j in range(1, len(T)):
        prev = table[-1]
        nxt = []
        for i in range(len(prev) - 1):
            nxt.append((e[i] * prev[i + 1] - e[i + j] * prev[i]) / (e[i] - e[i + j]))
        table.append(nxt)
    best = table[-1][0]
    second = table[-2][-1] if len(table) > 1 else table[-1][0]
    return best, float(np.max(np.abs(best - second)))


@dataclass
class ResolventResult:
    value: NDArray  # extrapolated R^+ v
    direct: NDArray  # boundary value at eps = 0
    error: float  # weighted-norm error bar, relative
    per_eps: list = field(default_factory=list)
    agreement: float = float("nan")  # weighted distance direct vs extrapolated, relative


def weight(grid: RadialGrid, tau: float) -> NDArray:
    rho = np.concatenate([grid.rho, grid.rho])
    return (1 + rho * rho) ** (-tau / 2)


def weighted_norm(L: LinearizedOperator, x: NDArray, tau: float) -> float:
    return L.norm(weight(L.grid, tau) * x)


def resolvent_apply(L: LinearizedOperator, query: ResolventQuery, v: NDArray,
                    tolerance: float = 1e-3) -> ResolventResult:
    """R^{side}(lam) v by eps-extrapolation, with the eps = 0 boundary value alongside."""
    eps = np.asarray(query.epsilons, dtype=float)
    if eps.size == 0:
        eps = np.asarray(ResolventQuery.default(L, query.lam, query.side).epsilons)
    per = [InteractingResolvent(L, query.lam, query.side, e).apply(v) for e in eps]
    value, _ = _richardson(eps, per)
    direct = InteractingResolvent(L, query.lam, query.side, 0.0).apply(v)
    scale = max(weighted_norm(L, direct, query.tau), 1e-300)
    wt = weight(L.grid, query.tau)
    # compare with the extrapolation that drops the smallest eps
    err = L.norm(wt * (_richardson(eps[:-1], per[:-1])[0] - value))
    res = ResolventResult(value, direct, err / scale, per, L.norm(wt * (value - direct)) / scale)
    if res.error > tolerance:
        raise ExtrapolationError(f"eps extrapolation error {res.error:.3g} above tolerance")
    return res


def gap_direct_solve(L: LinearizedOperator, lam: float, v: NDArray) -> NDArray:
    """(H - lam)^{-1} v with the finite-difference operator (gap values only)."""
    if abs(lam) >= L.gap:
        raise ValueError("direct finite-difference solve only inside the gap")
    A = (L.H - lam * sp.identity(L.size, format="csr")).tocsc()
    return spla.spsolve(A, v.astype(complex))


# ----------------------------------------------------------------------------
# Birman-Schwinger and thresholds
# ----------------------------------------------------------------------------


def birman_schwinger_eigen(L: LinearizedOperator, lam: float, side: str = "plus", tau: float = 1.0,
                           threshold_mode: bool = False) -> NDArray:
    """Eigenvalues of <x>^{-tau} R0(lam) V <x>^{tau}, sorted by |1 + mu|."""
    S = potential_support(L)
    if S.size == 0:
        return np.zeros(L.size, dtype=complex)
    R0 = free_doubled_matrix(L.grid, L.model, L.omega, lam, side, 0.0, threshold_mode)
    wt = weight(L.grid, tau)[S]
    K = (wt[:, None] * R0[np.ix_(S, S)]) @ (L.V.tocsr()[S][:, S].toarray() / wt[None, :])
    mu = np.linalg.eigvals(K)
    return mu[np.argsort(np.abs(1 + mu))]


def near_nullvector(L: LinearizedOperator, lam: float, side: str = "plus",
                    threshold_mode: bool = True) -> tuple[float, NDArray]:
    """Smallest singular value of 1 + R0 V on the support and the full-grid
    field u = -R0 V u_S continued from the corresponding vector."""
    S = potential_support(L)
    R0 = free_doubled_matrix(L.grid, L.model, L.omega, lam, side, 0.0, threshold_mode)
    V_SS = L.V.tocsr()[S][:, S].toarray()
    M = np.eye(S.size) + R0[np.ix_(S, S)] @ V_SS
    U, s, Vh = np.linalg.svd(M)
    uS = Vh[-1].conj()
    u = -R0[:, S] @ (V_SS @ uS)
    return float(s[-1]), u


def threshold_resonance_scan(L: LinearizedOperator, tau: float = 1.0,
                             resonance_threshold: float = 0.05) -> dict:
    """min |1 + mu| at the four thresholds, both sides."""
    m, w = L.model.mass, L.omega
    out = {}
    for name, lam in (("+(m-w)", m - w), ("-(m-w)", -(m - w)), ("+(m+w)", m + w), ("-(m+w)", -(m + w))):
        if L.is_free:
            out[name] = {"min_abs_one_plus_mu": 1.0, "verdict": "no resonance"}
            continue
        vals = {}
        for side in ("plus", "minus"):
            mu = birman_schwinger_eigen(L, lam, side, tau, threshold_mode=True)
            vals[side] = float(np.min(np.abs(1 + mu)))
        best = min(vals.values())
        entry = {"min_abs_one_plus_mu": best, "by_side": vals,
                 "verdict": "no resonance" if best > resonance_threshold else "near resonance"}
        if best <= resonance_threshold:
            _, u = near_nullvector(L, lam)
            entry["nullvector_character"] = _l2_character(L.grid, u)
        out[name] = entry
    return out


def _l2_character(grid: RadialGrid, u: NDArray) -> dict:
    """Tail exponent of a threshold null vector.

    Threshold solutions decay like rho^{-1} (resonance, weighted L^2 only) or
    like rho^{-2} or faster (L^2 eigenvector).
    """
    n = grid.size
    amp = np.sqrt(np.abs(u[: grid.n]) ** 2 + np.abs(u[n : n + grid.n]) ** 2)
    rho = grid.rho_p
    band = (rho > 0.3 * grid.r_max) & (rho < 0.8 * grid.r_max) & (amp > 0)
    slope = float(np.polyfit(np.log(rho[band]), np.log(amp[band]), 1)[0])
    return {"tail_exponent": slope, "looks_like": "eigenvector" if slope < -1.5 else "resonance"}


# ----------------------------------------------------------------------------
# LAP scan
# ----------------------------------------------------------------------------


def weighted_resolvent_norm(L: LinearizedOperator, spectrum: Optional[SpectralData], lam: float,
                            eps: float, side: str = "plus", tau: float = 1.5,
                            iterations: int = 60, seed: int = 0) -> float:
    """|| <x>^{-tau} R(lam +- i eps) P_c <x>^{-tau} || by power iteration on A^* A."""
    res = InteractingResolvent(L, lam, side, eps)
    wt = weight(L.grid, tau)

    def proj(x):
        return x if spectrum is None else spectral_projection(spectrum, x).f

    def proj_adj(x):
        if spectrum is None:
            return x
        # P_c^* = Sigma_3 P_c Sigma_3 for the pairing adjoint
        return sigma3(spectral_projection(spectrum, sigma3(x)).f)

    def A(x):
        return wt * res.apply(proj(wt * x))

    def A_adj(x):
        return wt * proj_adj(res.apply_adjoint(wt * x))

    rng = np.random.default_rng(seed)
    x = rng.normal(size=L.size) + 1j * rng.normal(size=L.size)
    x /= L.norm(x)
    val = 0.0
    for _ in range(iterations):
        y = A_adj(A(x))
        nrm = L.norm(y)
        if nrm == 0:
            return 0.0
        new = np.sqrt(nrm)
        x = y / nrm
        if abs(new - val) < 1e-10 * new:
            val = new
            break
        val = new
    return float(val)


def lap_bound_scan(L: LinearizedOperator, spectrum: Optional[SpectralData], lambdas: Sequence[float],
                   tau: float = 1.5, side: str = "plus", eps_scale: float = 1.0,
                   margin: Optional[float] = None, guard: bool = True) -> dict:
    """Sup over the lambda grid of the eps-extrapolated weighted resolvent norm."""
    margin = 0.05 * L.gap if margin is None else margin
    if guard and spectrum is not None:
        ev = np.concatenate([spectrum.eigenvalues, -spectrum.eigenvalues, [0.0]])
        for lam in lambdas:
            if np.min(np.abs(ev - lam)) < margin:
                raise EigenvalueGuardError(f"lambda = {lam} within {margin} of a discrete eigenvalue")
    eps = np.array([f * L.gap * eps_scale for f in (1e-2, 5e-3, 2.5e-3)])
    values = []
    for lam in lambdas:
        norms = [weighted_resolvent_norm(L, spectrum, lam, e, side, tau) for e in eps]
        ext, _ = _richardson(eps, norms)
        values.append(float(np.real(ext)))
    values = np.array(values)
    i = int(np.argmax(values))
    return {"lambdas": list(map(float, lambdas)), "norms": values.tolist(),
            "sup": float(values[i]), "argmax": float(lambdas[i]), "tau": tau}


# ----------------------------------------------------------------------------
# free propagator and decay
# ----------------------------------------------------------------------------


class FreePropagator:
    """exp(-i t H_{omega,0}) by eigen-decomposition of the symmetrised block Dirac matrix."""

    def __init__(self, grid: RadialGrid, model: SolerModel, omega: float) -> None:
        from .core import DiscreteSoler

        self.grid = grid
        self.omega = omega
        D = DiscreteSoler(grid, model).dirac.toarray()
        s = np.sqrt(grid.weights)
        A = (s[:, None] * D) / s[None, :]
        A = 0.5 * (A + A.T)
        self.energies, self.modes = np.linalg.eigh(A)
        self._s = s

    def __call__(self, psi: NDArray, t: float) -> NDArray:
        n = self.grid.size
        out = np.empty(2 * n, dtype=complex)
        for slot, sign in ((0, 1.0), (1, -1.0)):
            x = psi[slot * n : (slot + 1) * n] * self._s
            c = self.modes.T @ x
            c = c * np.exp(-1j * sign * t * (self.energies - self.omega))
            out[slot * n : (slot + 1) * n] = (self.modes @ c) / self._s
        return out


def free_propagator(psi: NDArray, t: float, grid: RadialGrid, model: SolerModel, omega: float) -> NDArray:
    return FreePropagator(grid, model, omega)(psi, t)


def support_radius(grid: RadialGrid, psi: NDArray, rel: float = 1e-8) -> float:
    rho = np.concatenate([grid.rho, grid.rho])
    big = np.abs(psi) > rel * np.abs(psi).max()
    return float(rho[big].max()) if big.any() else 0.0


def decay_fit(prop: FreePropagator, psi0: NDArray, tau: float, t_grid: Sequence[float]) -> dict:
    """Slope of log || <x>^{-tau} e^{-i t H0} psi0 || against log <t>."""
    grid = prop.grid
    t = np.asarray(t_grid, dtype=float)
    t_reflect = grid.r_max - support_radius(grid, psi0)
    truncated = bool(np.any(t > t_reflect))
    if truncated:
        warnings.warn("time grid reaches the reflection time; fit truncated", RuntimeWarning)
        t = t[t <= t_reflect]
    if t.size < 3:
        raise ValueError("not enough times before reflection")
    wt = weight(grid, tau)
    w = doubled_weights(grid)
    norms = np.array([np.sqrt(np.sum(w * np.abs(wt * prop(psi0, ti)) ** 2)) for ti in t])
    x = np.log(np.sqrt(1 + t * t))
    slope, icpt = np.polyfit(x, np.log(norms), 1)
    return {"slope": float(slope), "times": t.tolist(), "norms": norms.tolist(),
            "t_reflect": float(t_reflect), "truncated": truncated}


def smoothing_integrals(prop: FreePropagator, psi0: NDArray, tau: float, T_values: Sequence[float],
                        dt: float = 0.25) -> list:
    """int_0^T || <x>^{-tau} e^{-i t H0} psi0 ||^2 dt for increasing T (trapezoid)."""
    grid = prop.grid
    wt = weight(grid, tau)
    w = doubled_weights(grid)
    T_max = max(T_values)
    ts = np.arange(0.0, T_max + dt / 2, dt)
    vals = np.array([np.sum(w * np.abs(wt * prop(psi0, ti)) ** 2) for ti in ts])
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (vals[1:] + vals[:-1]))])
    return [float(np.interp(T, ts, cum)) for T in T_values]


# ----------------------------------------------------------------------------
# wave operators
# ----------------------------------------------------------------------------


def _expm_apply(H, v: NDArray, t: float) -> NDArray:
    """exp(-i t H) v."""
    if t == 0:
        return v.copy()
    return spla.expm_multiply(-1j * t * H.tocsc(), v.astype(complex))


def wave_operator(L: LinearizedOperator, v: NDArray, T: float, direction: int = 1,
                  kind: str = "W", spectrum: Optional[SpectralData] = None) -> NDArray:
    """W v ~ e^{i t H} e^{-i t H0} v or Z v ~ e^{i t H0} e^{-i t H} P_c v at t = direction * T."""
    if L.is_free:
        return np.array(v, dtype=complex, copy=True)
    t = direction * T
    if kind == "W":
        return _expm_apply(L.H, _expm_apply(L.H0, v, t), -t)
    if kind == "Z":
        x = v if spectrum is None else spectral_projection(spectrum, v).f
        return _expm_apply(L.H0, _expm_apply(L.H, x, t), -t)
    raise ValueError("kind must be 'W' or 'Z'")


def _cauchy_doubling(evaluate, scale: float, norm, T0: float, T_max: float, tol: float) -> dict:
    """Double T until successive values differ by less than tol (relative)."""
    T = T0
    prev = evaluate(T)
    history = []
    while 2 * T <= T_max:
        T *= 2
        cur = evaluate(T)
        inc = norm(cur - prev) / scale
        if history and inc > history[-1][1]:
            raise LimitNotReachedError(f"Cauchy increment grew to {inc:.3g} at T = {T:g}")
        history.append((T, inc))
        prev = cur
        if inc < tol:
            return {"value": cur, "T": T, "increment": inc, "history": history}
    raise LimitNotReachedError(f"no Cauchy convergence before the reflection time {T_max:g}")


def reflection_time(grid: RadialGrid, v: NDArray) -> float:
    """Time for the fastest (unit speed) part of v to reach the box edge."""
    return grid.r_max - support_radius(grid, v)


def wave_operator_limit(L: LinearizedOperator, v: NDArray, direction: int = 1, kind: str = "W",
                        spectrum: Optional[SpectralData] = None, T0: float = 5.0,
                        tol: float = 5e-2, T_max: Optional[float] = None) -> dict:
    """The time limit of W or Z with T chosen by the Cauchy criterion."""
    T_max = reflection_time(L.grid, v) if T_max is None else T_max
    return _cauchy_doubling(lambda T: wave_operator(L, v, T, direction, kind, spectrum),
                            max(L.norm(v), 1e-300), L.norm, T0, T_max, tol)


def inverse_pair_check(L: LinearizedOperator, v: NDArray, spectrum: Optional[SpectralData],
                       direction: int = 1, T0: float = 5.0, tol: float = 5e-2,
                       T_max: Optional[float] = None) -> dict:
    """||Z(W(v)) - v|| / ||v|| at the T where Z_T W_T v is Cauchy to tol."""
    if L.is_free:
        return {"residual": 0.0, "T": 0.0, "increment": 0.0, "history": []}
    T_max = reflection_time(L.grid, v) if T_max is None else T_max

    def composite(T):
        return wave_operator(L, wave_operator(L, v, T, direction, "W"), T, direction, "Z", spectrum)

    out = _cauchy_doubling(composite, max(L.norm(v), 1e-300), L.norm, T0, T_max, tol)
    out["residual"] = L.norm(out["value"] - v) / max(L.norm(v), 1e-300)
    return out


def discrete_content(spectrum: SpectralData, w: NDArray) -> dict:
    """Relative size of the eigenvector and generalized-kernel parts of w."""
    grid = spectrum.grid

    def nrm(x):
        return float(np.sqrt(max(pair_vectors(grid, x, x).real, 0.0)))

    d = spectral_projection(spectrum, w)
    total = max(nrm(w), 1e-300)
    phi_s3, dphi = spectrum.kernel_vectors
    kernel_part = d.kernel[0] * phi_s3 + d.kernel[1] * dphi
    mode_part = w - d.f - kernel_part
    return {"kernel_relative": nrm(kernel_part) / total, "modes_relative": nrm(mode_part) / total}
