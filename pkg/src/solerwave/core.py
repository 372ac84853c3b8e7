"""Dirac algebra, radial block fields, pairings and the discrete Soler functional.

Fields are restricted to the angular block

    u(x) = ( p(rho) chi , i q(rho) (sigma . xhat) chi ),   chi = (1, 0),

which the scalar self-interaction preserves because u . beta u* = |p|^2 - |q|^2
is radial.  The charge conjugate of a block field lives in the partner block

    v(x) = ( -i q(rho) (sigma . xhat) chi' , p(rho) chi' ),   chi' = (0, 1),

and is stored with the same two amplitudes.  Conjugation therefore maps the
block amplitudes (p, q) to partner amplitudes (conj p, conj q).

Radial amplitudes live on a staggered uniform grid: p at cell centres
(i + 1/2) h, q at the interior cell edges (j + 1) h.  The origin edge carries
q(0) = 0 implicitly and the outer edge carries the Dirichlet closure q(R) = 0.
The staggering keeps the discrete Dirac operator free of spurious doubler
modes while remaining exactly symmetric for the quadrature weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

logger = logging.getLogger(__name__)

ComplexArray = NDArray[np.complex128]
RealArray = NDArray[np.float64]

# ----------------------------------------------------------------------------
# constant matrices
# ----------------------------------------------------------------------------

I2 = np.eye(2, dtype=complex)
I4 = np.eye(4, dtype=complex)
SIGMA = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)
Z2 = np.zeros((2, 2), dtype=complex)
ALPHA = tuple(np.block([[Z2, s], [s, Z2]]) for s in SIGMA)
BETA = np.block([[I2, Z2], [Z2, -I2]])
S3 = np.block([[SIGMA[2], Z2], [Z2, SIGMA[2]]])
# u^c = CONJ_MATRIX @ conj(u); the matrix i beta alpha_2 is real and an involution
CONJ_MATRIX = 1j * BETA @ ALPHA[1]

_Z4 = np.zeros((4, 4), dtype=complex)
BIG_SIGMA = (
    np.block([[_Z4, I4], [I4, _Z4]]),
    np.block([[_Z4, 1j * I4], [-1j * I4, _Z4]]),
    np.block([[I4, _Z4], [_Z4, -I4]]),
)
BIG_BETA = np.block([[BETA, _Z4], [_Z4, BETA]])
BIG_S3 = np.block([[S3, _Z4], [_Z4, S3]])

CHI = np.array([1, 0], dtype=complex)
CHI_DOWN = np.array([0, 1], dtype=complex)


def commutation_residual() -> float:
    """Largest deviation from the Clifford relations of alpha_j and beta."""
    worst = 0.0
    for j in range(3):
        for k in range(3):
            anti = ALPHA[j] @ ALPHA[k] + ALPHA[k] @ ALPHA[j]
            worst = max(worst, np.abs(anti - 2.0 * (j == k) * I4).max())
        worst = max(worst, np.abs(ALPHA[j] @ BETA + BETA @ ALPHA[j]).max())
    worst = max(worst, np.abs(BETA @ BETA - I4).max())
    return float(worst)


def conjugate4(u: ComplexArray) -> ComplexArray:
    """Charge conjugation C u = i beta alpha_2 u* on C^4 (last axis)."""
    return np.conj(u) @ CONJ_MATRIX.T


def bar_product(u: ComplexArray, v: Optional[ComplexArray] = None) -> ComplexArray:
    """The scalar u . beta v* (v defaults to u), contracted over the last axis."""
    v = u if v is None else v
    return np.einsum("...i,ij,...j->...", u, BETA, np.conj(v))


# ----------------------------------------------------------------------------
# nonlinearity
# ----------------------------------------------------------------------------


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of a tabulated object."""


@dataclass(frozen=True)
class SolerModel:
    """Mass and scalar nonlinearity g of the Soler equation.

    kind is one of ``"cubic"`` (g(s) = s), ``"polynomial"`` (g(s) = sum_k
    coeffs[k-1] s^k, no constant term) or ``"table"`` (cubic spline through
    ``table = (s_values, g_values)``, which must contain s = 0 with g = 0).
    """

    mass: float = 1.0
    kind: str = "cubic"
    coeffs: tuple[float, ...] = ()
    table: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None

    def __post_init__(self) -> None:
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if self.kind not in ("cubic", "polynomial", "table"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind == "polynomial" and not self.coeffs:
            raise ValueError("polynomial model needs at least one coefficient")
        if self.kind == "table":
            if self.table is None:
                raise ValueError("table model needs (s_values, g_values)")
            s, gv = (np.asarray(t, dtype=float) for t in self.table)
            if s.shape != gv.shape or s.size < 4 or np.any(np.diff(s) <= 0):
                raise ValueError("table must hold >= 4 strictly increasing samples")
            zero = np.flatnonzero(s == 0.0)
            if zero.size != 1 or gv[zero[0]] != 0.0:
                raise ValueError("table must contain s = 0 with g(0) = 0")

    @property
    def is_linear(self) -> bool:
        if self.kind == "polynomial":
            return all(c == 0 for c in self.coeffs)
        return False

    @cached_property
    def _spline(self) -> CubicSpline:
        s, gv = (np.asarray(t, dtype=float) for t in self.table)
        return CubicSpline(s, gv)

    @cached_property
    def _spline_primitive(self):
        anti = self._spline.antiderivative()
        return lambda s: anti(s) - anti(0.0)

    def _check_table(self, s) -> None:
        lo, hi = self.table[0][0], self.table[0][-1]
        sr = np.real(s)
        if np.any(sr < lo) or np.any(sr > hi):
            raise DomainError(f"argument outside tabulated range [{lo}, {hi}]")

    def g_all(self, s):
        """Return (g, g', g'') at s; polynomial kinds accept complex input."""
        if self.kind == "cubic":
            s = np.asarray(s)
            return s * 1.0, np.ones_like(s), np.zeros_like(s)
        if self.kind == "polynomial":
            s = np.asarray(s)
            g = np.zeros_like(s * 1.0)
            g1 = np.zeros_like(g)
            g2 = np.zeros_like(g)
            for k, c in enumerate(self.coeffs, start=1):
                g = g + c * s**k
                g1 = g1 + c * k * s ** (k - 1)
                if k >= 2:
                    g2 = g2 + c * k * (k - 1) * s ** (k - 2)
            return g, g1, g2
        self._check_table(s)
        sp_ = self._spline
        s = np.real(np.asarray(s, dtype=complex)) if np.iscomplexobj(s) else np.asarray(s, dtype=float)
        return sp_(s), sp_(s, 1), sp_(s, 2)

    def g(self, s):
        return self.g_all(s)[0]

    def primitive(self, s):
        """G with G' = g and G(0) = 0."""
        if self.kind == "cubic":
            s = np.asarray(s)
            return 0.5 * s * s
        if self.kind == "polynomial":
            s = np.asarray(s)
            out = np.zeros_like(s * 1.0)
            for k, c in enumerate(self.coeffs, start=1):
                out = out + c * s ** (k + 1) / (k + 1)
            return out
        self._check_table(s)
        return self._spline_primitive(np.asarray(s, dtype=float))

    def to_dict(self) -> dict:
        out = {"mass": self.mass, "kind": self.kind}
        if self.kind == "polynomial":
            out["coeffs"] = list(self.coeffs)
        if self.kind == "table":
            out["table"] = [list(self.table[0]), list(self.table[1])]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SolerModel":
        table = data.get("table")
        if table is not None:
            table = (tuple(float(v) for v in table[0]), tuple(float(v) for v in table[1]))
        return cls(
            mass=float(data.get("mass", 1.0)),
            kind=str(data.get("kind", "cubic")),
            coeffs=tuple(float(c) for c in data.get("coeffs", ())),
            table=table,
        )


def nonlinearity_eval(model: SolerModel, s: float) -> tuple[float, float, float]:
    """(g(s), g'(s), g''(s)) as plain floats."""
    if not np.isfinite(s):
        raise ValueError("s must be finite")
    g, g1, g2 = model.g_all(np.float64(s))
    return float(g), float(g1), float(g2)


# ----------------------------------------------------------------------------
# grid and fields
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialGrid:
    """Uniform staggered radial grid on [0, r_max] with n cells."""

    n: int
    r_max: float

    def __post_init__(self) -> None:
        if self.n < 4 or not self.r_max > 0:
            raise ValueError("grid needs n >= 4 cells and r_max > 0")

    @property
    def h(self) -> float:
        return self.r_max / self.n

    @cached_property
    def edges(self) -> RealArray:
        """All cell edges 0 = rho_0 < ... < rho_n = r_max."""
        return np.linspace(0.0, self.r_max, self.n + 1)

    @cached_property
    def rho_p(self) -> RealArray:
        return (np.arange(self.n) + 0.5) * self.h

    @cached_property
    def rho_q(self) -> RealArray:
        return np.arange(1, self.n) * self.h

    @property
    def size(self) -> int:
        """Length of one (p, q) amplitude vector."""
        return 2 * self.n - 1

    @cached_property
    def rho(self) -> RealArray:
        """Node radii in (p, q) order."""
        return np.concatenate([self.rho_p, self.rho_q])

    @cached_property
    def weights(self) -> RealArray:
        """Quadrature weights for 4 pi int rho^2 drho in (p, q) order.

        Midpoint rule for the centre-sampled p, trapezoid rule for the
        edge-sampled q (both end values of q vanish).
        """
        return 4.0 * np.pi * self.h * self.rho**2

    @cached_property
    def average_pq(self) -> sp.csr_matrix:
        """Average of edge values onto centres, (n, n-1); q(0) = q(R) = 0."""
        n = self.n
        rows = np.concatenate([np.arange(n - 1), np.arange(1, n)])
        cols = np.concatenate([np.arange(n - 1), np.arange(n - 1)])
        return sp.csr_matrix((np.full(rows.size, 0.5), (rows, cols)), shape=(n, n - 1))

    @cached_property
    def diff_pq(self) -> sp.csr_matrix:
        """Edge-to-centre difference (q_i - q_{i-1}) / h, shape (n, n-1)."""
        n = self.n
        rows = np.concatenate([np.arange(n - 1), np.arange(1, n)])
        cols = np.concatenate([np.arange(n - 1), np.arange(n - 1)])
        vals = np.concatenate([np.full(n - 1, 1.0), np.full(n - 1, -1.0)]) / self.h
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n - 1))

    def split(self, x: NDArray) -> tuple[NDArray, NDArray]:
        return x[..., : self.n], x[..., self.n :]

    def sample(self, p_fn: Callable, q_fn: Callable) -> ComplexArray:
        """Evaluate radial functions on the staggered nodes, (p, q) order."""
        return np.concatenate([np.asarray(p_fn(self.rho_p), dtype=complex),
                               np.asarray(q_fn(self.rho_q), dtype=complex)])

    def refine(self, factor: int = 2) -> "RadialGrid":
        return RadialGrid(self.n * factor, self.r_max)

    def to_dict(self) -> dict:
        return {"n": self.n, "r_max": self.r_max, "layout": "staggered-uniform"}


@dataclass(frozen=True)
class BlockSpinor:
    """Radial amplitudes of a field in the block (or, for sector="partner",
    of a field in the conjugate partner block)."""

    grid: RadialGrid
    p: ComplexArray
    q: ComplexArray
    sector: str = "block"

    def __post_init__(self) -> None:
        if self.sector not in ("block", "partner"):
            raise ValueError("sector must be 'block' or 'partner'")
        object.__setattr__(self, "p", np.asarray(self.p, dtype=complex))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=complex))
        if self.p.shape != (self.grid.n,) or self.q.shape != (self.grid.n - 1,):
            raise ValueError("amplitude shapes do not match the grid")

    @property
    def vector(self) -> ComplexArray:
        return np.concatenate([self.p, self.q])

    @classmethod
    def from_vector(cls, grid: RadialGrid, x: NDArray, sector: str = "block") -> "BlockSpinor":
        p, q = grid.split(np.asarray(x, dtype=complex))
        return cls(grid, p, q, sector)

    @classmethod
    def from_functions(cls, grid: RadialGrid, p_fn: Callable, q_fn: Callable,
                       sector: str = "block") -> "BlockSpinor":
        return cls.from_vector(grid, grid.sample(p_fn, q_fn), sector)

    def density(self) -> tuple[RealArray, RealArray]:
        """u . beta u* on the centre and edge node sets (see DiscreteSoler)."""
        return DiscreteSoler.node_products(self.grid, self.vector, np.conj(self.vector),
                                           sign=1.0 if self.sector == "block" else -1.0)

    def __add__(self, other: "BlockSpinor") -> "BlockSpinor":
        _same(self, other)
        return BlockSpinor(self.grid, self.p + other.p, self.q + other.q, self.sector)

    def __mul__(self, c: complex) -> "BlockSpinor":
        return BlockSpinor(self.grid, c * self.p, c * self.q, self.sector)

    __rmul__ = __mul__


def _same(a, b) -> None:
    if a.grid != b.grid:
        raise ValueError("grid mismatch")
    if getattr(a, "sector", None) != getattr(b, "sector", None):
        raise ValueError("sector mismatch")


@dataclass(frozen=True)
class DoubledField:
    """A pair (r, r^c): first in the block, second in the partner block.

    For a physical field the partner amplitudes are the complex conjugates of
    the block amplitudes.  ``vector`` stacks (p1, q1, p2, q2).
    """

    grid: RadialGrid
    first: ComplexArray
    second: ComplexArray

    def __post_init__(self) -> None:
        object.__setattr__(self, "first", np.asarray(self.first, dtype=complex))
        object.__setattr__(self, "second", np.asarray(self.second, dtype=complex))
        if self.first.shape != (self.grid.size,) or self.second.shape != (self.grid.size,):
            raise ValueError("doubled field shape does not match the grid")

    @property
    def vector(self) -> ComplexArray:
        return np.concatenate([self.first, self.second])

    @classmethod
    def from_vector(cls, grid: RadialGrid, v: NDArray) -> "DoubledField":
        v = np.asarray(v, dtype=complex)
        return cls(grid, v[: grid.size], v[grid.size :])

    @classmethod
    def physical(cls, u: BlockSpinor) -> "DoubledField":
        if u.sector != "block":
            raise ValueError("physical doubled fields start from a block field")
        x = u.vector
        return cls(u.grid, x, np.conj(x))

    def constraint_residual(self) -> float:
        """Distance from the physical (reality) constraint, relative."""
        scale = max(np.linalg.norm(self.first), 1e-300)
        return float(np.linalg.norm(self.second - np.conj(self.first)) / scale)

    def block(self) -> BlockSpinor:
        return BlockSpinor.from_vector(self.grid, self.first, "block")

    def partner(self) -> BlockSpinor:
        return BlockSpinor.from_vector(self.grid, self.second, "partner")


# ----------------------------------------------------------------------------
# structural maps on stored doubled vectors
# ----------------------------------------------------------------------------


def sigma3(v: NDArray) -> NDArray:
    half = v.shape[0] // 2
    out = np.array(v, dtype=complex, copy=True)
    out[half:] *= -1.0
    return out


def sigma1(v: NDArray) -> NDArray:
    half = v.shape[0] // 2
    return np.concatenate([v[half:], v[:half]])


def conj_swap(v: NDArray) -> NDArray:
    """The map Sigma_1 C in stored coordinates: swap the slots and conjugate."""
    return np.conj(sigma1(v))


def phase_rotate(v: NDArray, theta: float) -> NDArray:
    """exp(i Sigma_3 theta) in stored coordinates."""
    half = v.shape[0] // 2
    out = np.array(v, dtype=complex, copy=True)
    out[:half] *= np.exp(1j * theta)
    out[half:] *= np.exp(-1j * theta)
    return out


# ----------------------------------------------------------------------------
# pairings, charge and energy
# ----------------------------------------------------------------------------


def doubled_weights(grid: RadialGrid) -> RealArray:
    return np.concatenate([grid.weights, grid.weights])


def pair_vectors(grid: RadialGrid, x: NDArray, y: NDArray) -> complex:
    """<X, Y*> for stored doubled vectors: sum of w x conj(y)."""
    return complex(np.sum(doubled_weights(grid) * x * np.conj(y)))


def bilinear_vectors(grid: RadialGrid, x: NDArray, y: NDArray) -> complex:
    """Weighted bilinear sum of w x y, the stored form of <X, iba2 Y>."""
    return complex(np.sum(doubled_weights(grid) * x * y))


def pair(X: DoubledField, Y: DoubledField) -> complex:
    """The pairing <X, Y*> = int (x1 . y1* + x2 . y2*) dx reduced to the block.

    The angular integrals of chi.chi and |sigma.xhat chi|^2 are both 4 pi, so
    the reduction is the radial quadrature of all four amplitude products.
    """
    if X.grid != Y.grid:
        raise ValueError("grid mismatch")
    return pair_vectors(X.grid, X.vector, Y.vector)


def charge(u: BlockSpinor) -> float:
    """Q = 4 pi int (|p|^2 + |q|^2) rho^2 drho."""
    x = u.vector
    return float(np.sum(u.grid.weights * np.abs(x) ** 2))


def charge_conjugate(u: BlockSpinor) -> BlockSpinor:
    """C u; maps block amplitudes (p, q) to partner amplitudes (p*, q*) and back."""
    other = "partner" if u.sector == "block" else "block"
    return BlockSpinor(u.grid, np.conj(u.p), np.conj(u.q), other)


def energy(u: BlockSpinor, model: SolerModel) -> tuple[float, float, float]:
    """(E, E_K, E_P) of a block field on its grid."""
    if u.sector != "block":
        raise ValueError("energy is defined for block fields")
    disc = DiscreteSoler(u.grid, model)
    x = u.vector
    e_kin = float(np.real(np.sum(u.grid.weights * np.conj(x) * (disc.dirac @ x))))
    e_pot = float(np.real(disc.potential_energy(x, np.conj(x))))
    return e_kin + e_pot, e_kin, e_pot


# ----------------------------------------------------------------------------
# 3D reconstruction
# ----------------------------------------------------------------------------


def _unit(x: NDArray) -> tuple[RealArray, RealArray]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rho = np.linalg.norm(x, axis=-1)
    safe = np.where(rho > 0, rho, 1.0)
    xhat = x / safe[:, None]
    xhat[rho == 0] = np.array([0.0, 0.0, 1.0])
    return rho, xhat


def sigma_dot(xhat: RealArray) -> ComplexArray:
    """sigma . xhat for each row of xhat, shape (k, 2, 2)."""
    return np.einsum("kj,jab->kab", xhat, np.array(SIGMA))


def spinor_from_amplitudes(p: NDArray, q: NDArray, x: NDArray, sector: str = "block") -> ComplexArray:
    """Assemble C^4 values from amplitude values p(|x|), q(|x|) at points x."""
    _, xhat = _unit(x)
    sx = sigma_dot(xhat)
    p = np.asarray(p, dtype=complex).reshape(-1)
    q = np.asarray(q, dtype=complex).reshape(-1)
    out = np.zeros((xhat.shape[0], 4), dtype=complex)
    if sector == "block":
        out[:, :2] = p[:, None] * CHI
        out[:, 2:] = 1j * q[:, None] * (sx @ CHI)
    else:
        out[:, :2] = -1j * q[:, None] * (sx @ CHI_DOWN)
        out[:, 2:] = p[:, None] * CHI_DOWN
    return out


def amplitudes_from_spinor(u: ComplexArray, x: NDArray, sector: str = "block"):
    """Project C^4 values at points x back onto (p, q) and report the
    component orthogonal to the sector."""
    _, xhat = _unit(x)
    sx = sigma_dot(xhat)
    u = np.atleast_2d(u)
    if sector == "block":
        p = u[:, 0]
        w = sx @ CHI
        q = -1j * np.einsum("ka,ka->k", u[:, 2:], np.conj(w))
    else:
        p = u[:, 3]
        w = sx @ CHI_DOWN
        q = 1j * np.einsum("ka,ka->k", u[:, :2], np.conj(w))
    rebuilt = spinor_from_amplitudes(p, q, x, sector)
    leak = np.linalg.norm(u - rebuilt, axis=-1)
    return p, q, leak


class RadialInterpolant:
    """Cubic-spline evaluation of grid amplitudes, p even and q odd in rho."""

    def __init__(self, grid: RadialGrid, x: NDArray) -> None:
        p, q = grid.split(np.asarray(x, dtype=complex))
        rp = np.concatenate([-grid.rho_p[::-1], grid.rho_p])
        rq = np.concatenate([-grid.r_max, -grid.rho_q[::-1], [0.0], grid.rho_q, [grid.r_max]], axis=None)
        pv = np.concatenate([p[::-1], p])
        qv = np.concatenate([[0.0], -q[::-1], [0.0], q, [0.0]])
        self.grid = grid
        self._p = CubicSpline(rp, pv)
        self._q = CubicSpline(rq, qv)

    def __call__(self, rho: NDArray) -> tuple[ComplexArray, ComplexArray]:
        rho = np.asarray(rho, dtype=float)
        if np.any(rho > self.grid.r_max * (1 + 1e-12)):
            raise DomainError("radius beyond r_max")
        return self._p(rho), self._q(rho)


def reconstruct_spinor(u: BlockSpinor, x: NDArray) -> ComplexArray:
    """Evaluate the C^4 field of a block (or partner) spinor at points x.

    Returns shape (k, 4) for k points, or (4,) for a single point.
    """
    single = np.asarray(x).ndim == 1
    rho, _ = _unit(x)
    if np.any(rho > u.grid.r_max * (1 + 1e-12)):
        raise DomainError("point outside the radial domain")
    p, q = RadialInterpolant(u.grid, u.vector)(rho)
    out = spinor_from_amplitudes(p, q, x, u.sector)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# discrete Soler functional
# ----------------------------------------------------------------------------


class DiscreteSoler:
    """The discrete energy functional on a staggered grid.

    In stored doubled coordinates X = (x1, x2) with x = (p, q),

        E(X) = sum w x2 . D x1 + E_P,   Q(X) = sum w x2 . x1,
        E_P  = -sum_centres w G(s_c),

    where s_c = p1 p2 - avg(q1 q2).  Along the physical slice x2 = conj(x1)
    these are the charge, the energy and the density |p|^2 - |q|^2 at the
    centres.  The potential is sampled at centres only: splitting it between
    centres and edges makes the coupling at the first centre wrong by O(1),
    since the edge next to the origin carries four times the centre weight.
    The edge density s_e = avg(p1 p2) - q1 q2 is still reported by
    densities().  Every function here is holomorphic in (x1, x2), so
    derivatives are complex multilinear forms.  The linearised operator is
    Sigma_3 Sigma_1 W^{-1} Hess(E - omega Q).
    """

    def __init__(self, grid: RadialGrid, model: SolerModel) -> None:
        self.grid = grid
        self.model = model

    # -- linear part ------------------------------------------------------

    @cached_property
    def dirac(self) -> sp.csr_matrix:
        """Radial Dirac operator on (p, q), symmetric for the grid weights."""
        g = self.grid
        m = self.model.mass
        A = g.average_pq
        Dd = g.diff_pq
        inv_rp = sp.diags(1.0 / g.rho_p)
        inv_rq = sp.diags(1.0 / g.rho_q)
        # P <- dP/drho-type maps in the rho-scaled variables P = rho p, Q = rho q
        d_pq = inv_rp @ (Dd @ sp.diags(g.rho_q) + A)
        d_qp = inv_rq @ (Dd.T @ sp.diags(g.rho_p) + inv_rq @ A.T @ sp.diags(g.rho_p))
        n = g.n
        top = sp.hstack([sp.identity(n) * m, d_pq])
        bottom = sp.hstack([d_qp, -m * sp.identity(n - 1)])
        return sp.vstack([top, bottom]).tocsr()

    @cached_property
    def beta(self) -> sp.dia_matrix:
        n = self.grid.n
        return sp.diags(np.concatenate([np.ones(n), -np.ones(n - 1)]))

    # -- densities ----------------------------------------------------------

    @staticmethod
    def node_products(grid: RadialGrid, x1: NDArray, x2: NDArray, sign: float = 1.0):
        """(s_centre, s_edge) for the bilinear density of x1 and x2."""
        p1, q1 = grid.split(x1)
        p2, q2 = grid.split(x2)
        pp = p1 * p2
        qq = q1 * q2
        A = grid.average_pq
        s_c = pp - A @ qq
        s_e = A.T @ pp - qq
        return sign * s_c, sign * s_e

    def densities(self, x1: NDArray, x2: NDArray):
        return self.node_products(self.grid, x1, x2)

    def density_gradient(self, c_c: NDArray, c_e: NDArray, y: NDArray) -> NDArray:
        """Gradient in z of sum c_c s_c(z, y) + sum c_e s_e(z, y)."""
        g = self.grid
        A = g.average_pq
        yp, yq = g.split(y)
        gp = c_c * yp + (A @ c_e) * yp
        gq = -(A.T @ c_c) * yq - c_e * yq
        return np.concatenate([gp, gq])

    @property
    def _wc(self) -> RealArray:
        return self.grid.weights[: self.grid.n]

    @property
    def _we(self) -> RealArray:
        return self.grid.weights[self.grid.n :]

    # -- functional and derivatives ----------------------------------------

    def potential_energy(self, x1: NDArray, x2: NDArray) -> complex:
        s_c, _ = self.densities(x1, x2)
        return -np.sum(self._wc * self.model.primitive(s_c))

    def functional(self, X: NDArray, omega: float) -> complex:
        """K(X) = E(X) - omega Q(X) on a stored doubled vector."""
        n = self.grid.size
        x1, x2 = X[:n], X[n:]
        w = self.grid.weights
        kin = np.sum(w * x2 * (self.dirac @ x1))
        return kin - omega * np.sum(w * x2 * x1) + self.potential_energy(x1, x2)

    def effective_coupling(self, x1: NDArray, x2: NDArray) -> NDArray:
        """Node values gamma with dE_P/dx2 = -W gamma beta x1 (same for x1 by symmetry)."""
        s_c, _ = self.densities(x1, x2)
        g_c = self.model.g(s_c)
        gam_e = (self.grid.average_pq.T @ (self._wc * g_c)) / self._we
        return np.concatenate([g_c, gam_e])

    def stationary_residual(self, x: NDArray, omega: float) -> NDArray:
        """D x - omega x - gamma beta x for a block field (physical slice)."""
        gam = self.effective_coupling(x, np.conj(x))
        return self.dirac @ x - omega * x - gam * (self.beta @ x)

    def gradient(self, X: NDArray, omega: float) -> NDArray:
        """Coordinate gradient of K, stacked (d/dx1, d/dx2)."""
        n = self.grid.size
        x1, x2 = X[:n], X[n:]
        w = self.grid.weights
        gam = self.effective_coupling(x1, x2)
        b = self.beta.diagonal()
        g1 = (self.dirac.T @ (w * x2)) - omega * w * x2 - w * gam * b * x2
        g2 = w * (self.dirac @ x1) - omega * w * x1 - w * gam * b * x1
        return np.concatenate([g1, g2])

    def _ds(self, X0: NDArray, dX: NDArray):
        n = self.grid.size
        a = self.densities(dX[:n], X0[n:])
        b = self.densities(X0[:n], dX[n:])
        return a[0] + b[0], a[1] + b[1]

    def _d2s(self, dX: NDArray, dY: NDArray):
        n = self.grid.size
        a = self.densities(dX[:n], dY[n:])
        b = self.densities(dY[:n], dX[n:])
        return a[0] + b[0], a[1] + b[1]

    def _grad_ds(self, X0: NDArray, c_c: NDArray, c_e: NDArray) -> NDArray:
        """Gradient in Z of sum c . ds[Z] at X0."""
        n = self.grid.size
        return np.concatenate([self.density_gradient(c_c, c_e, X0[n:]),
                               self.density_gradient(c_c, c_e, X0[:n])])

    def _grad_d2s(self, dX: NDArray, c_c: NDArray, c_e: NDArray) -> NDArray:
        """Gradient in Z of sum c . d2s[dX, Z]."""
        return self._grad_ds(dX, c_c, c_e)

    def hessian(self, X0: NDArray, omega: float) -> sp.csr_matrix:
        """Complex Hessian of K at X0 as a sparse symmetric matrix."""
        grid = self.grid
        n = grid.size
        w = grid.weights
        x1, x2 = X0[:n], X0[n:]
        s_c, _ = self.densities(x1, x2)
        _, g1_c, _ = self.model.g_all(s_c)
        gam = self.effective_coupling(x1, x2)
        b = self.beta.diagonal()
        W = sp.diags(w)
        lin = W @ self.dirac - omega * W - sp.diags(w * gam * b)
        Z = sp.csr_matrix((n, n))
        H = sp.bmat([[Z, lin.T], [lin, Z]])
        # rank structure from g' ds ds
        A = grid.average_pq
        p1, q1 = grid.split(x1)
        p2, q2 = grid.split(x2)
        # Jacobian of s_c with respect to (x1, x2)
        Jc = sp.bmat([[sp.diags(p2), -A @ sp.diags(q2), sp.diags(p1), -A @ sp.diags(q1)]])
        H = H - Jc.T @ sp.diags(self._wc * g1_c) @ Jc
        return H.tocsr()

    def third_gradient(self, X0: NDArray, dX: NDArray, dY: NDArray) -> NDArray:
        """Gradient in Z of the third derivative d3K(X0)[dX, dY, Z].

        Only the potential contributes: with s' = ds, s'' = d2s,
        d3(-G(s))[X,Y,Z] = -(g'' s'_X s'_Y s'_Z + g'(s'_X s''_YZ + s'_Y s''_XZ + s'_Z s''_XY)).
        """
        n = self.grid.size
        s_c, _ = self.densities(X0[:n], X0[n:])
        _, g1_c, g2_c = self.model.g_all(s_c)
        dxc, _ = self._ds(X0, dX)
        dyc, _ = self._ds(X0, dY)
        dxyc, _ = self._d2s(dX, dY)
        wc = self._wc
        none = np.zeros(self.grid.n - 1)
        # coefficient of s'_Z
        out = self._grad_ds(X0, -wc * (g2_c * dxc * dyc + g1_c * dxyc), none)
        # coefficients of s''_{YZ} and s''_{XZ}
        out = out + self._grad_d2s(dY, -wc * g1_c * dxc, none)
        out = out + self._grad_d2s(dX, -wc * g1_c * dyc, none)
        return out

    def linearized_matrix(self, X0: NDArray, omega: float) -> sp.csr_matrix:
        """Sigma_3 Sigma_1 W^{-1} Hess(K)(X0)."""
        n = self.grid.size
        Winv = sp.diags(1.0 / doubled_weights(self.grid))
        J = sp.bmat([[None, sp.identity(n)], [-sp.identity(n), None]])
        return (J @ Winv @ self.hessian(X0, omega)).tocsr()
