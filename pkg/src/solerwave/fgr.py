"""Discrete-to-continuum couplings, the Fermi golden rule form and homological equations.

The interaction functional K = E - omega Q is expanded around the wave Phi
along U = sum_j z_j xi_j + zbar_j S conj(xi_j) + f.  Its cubic part contains

    sum_{|mu + nu| = 2} z^mu zbar^nu b(K_{mu nu}, J f),

with b the weighted bilinear form and J the symplectic swap.  The coupling
vectors K_{mu nu} drive the radiation f at frequency lambda . (mu - nu), and
the golden-rule form Im pair(R^+(r) H_r, Sigma_3 H_r) measures how much
energy each resonant frequency r sheds into the continuum.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .core import DiscreteSoler, SolerModel, bilinear_vectors, conj_swap, sigma3
from .linop import LinearizedOperator, SpectralData, spectral_projection
from .profile import DiscreteProfile
from .resolvent import ResolventQuery, resolvent_apply

logger = logging.getLogger(__name__)

MAX_MODES = 6


class AssemblyRejectedError(RuntimeError):
    """Coupling vectors disagree with the finite-difference oracle."""


class SmallDivisorError(ValueError):
    pass


class NormalFormError(ValueError):
    """A resonant (normal-form) term was passed to the homological solver."""


class AccuracyWarning(UserWarning):
    pass


def symplectic(v: NDArray) -> NDArray:
    """J (a, b) = (b, -a): the stored form of Sigma_3 Sigma_1."""
    n = v.shape[0] // 2
    return np.concatenate([v[n:], -v[:n]])


# ----------------------------------------------------------------------------
# finite-difference oracle
# ----------------------------------------------------------------------------

_STENCIL = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))


def _mixed_derivative(fun: Callable[[NDArray], complex], base: NDArray, dirs: Sequence[NDArray],
                      h: float) -> complex:
    total = 0j
    for combo in itertools.product(_STENCIL, repeat=len(dirs)):
        point = base.copy()
        coef = 1.0
        for (k, c), d in zip(combo, dirs):
            point = point + k * h * d
            coef *= c
        total += coef * fun(point)
    return total / h ** len(dirs)


def energy_directional_derivative(profile: DiscreteProfile, model: SolerModel, dirs: Sequence[NDArray],
                                  step: float = 0.05) -> complex:
    """d^p K(Phi)[d_1, ..., d_p] by tensor five-point stencils with step Richardson.

    p = len(dirs) in {1, 2, 3}.  The directions are stored doubled vectors;
    each is scaled to unit max-norm before differencing and the result is
    scaled back.
    """
    if len(dirs) not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    disc = DiscreteSoler(profile.grid, model)
    base = profile.doubled
    scales = [max(float(np.abs(d).max()), 1e-300) for d in dirs]
    unit = [np.asarray(d, dtype=complex) / s for d, s in zip(dirs, scales)]

    def fun(X):
        return disc.functional(X, profile.omega)

    coarse = _mixed_derivative(fun, base, unit, step)
    fine = _mixed_derivative(fun, base, unit, step / 2)
    finer = _mixed_derivative(fun, base, unit, step / 4)
    noise = 1e-14 * abs(fun(base)) / (step / 4) ** len(dirs)
    if abs(finer - fine) > max(abs(fine - coarse), noise):
        warnings.warn("finite-difference Richardson sequence is not monotone", AccuracyWarning)
    return (16 * finer - fine) / 15 * float(np.prod(scales))


def hamiltonian_quadratic_form(L: LinearizedOperator, X: NDArray) -> complex:
    """b(-J H X, X): the Hessian of K written through H."""
    return bilinear_vectors(L.grid, -symplectic(L.H @ X), X)


# ----------------------------------------------------------------------------
# coupling vectors
# ----------------------------------------------------------------------------


@dataclass
class CouplingSet:
    lambdas: NDArray
    indices: list  # (mu, nu) tuples of tuples
    vectors: dict  # (mu, nu) -> projected stored doubled vector
    raw: dict = field(default_factory=dict)  # before projection
    symmetry_residual: float = 0.0
    oracle_residual: float = float("nan")

    def frequency(self, mu, nu) -> float:
        return float(np.dot(self.lambdas, np.subtract(mu, nu)))

    def vector(self, mu, nu) -> NDArray:
        return self.vectors[(tuple(mu), tuple(nu))]


def _unit(k: int, j: int) -> tuple:
    e = [0] * k
    e[j] += 1
    return tuple(e)


def _plus(a: tuple, b: tuple) -> tuple:
    return tuple(x + y for x, y in zip(a, b))


def coupling_gradients(profile: DiscreteProfile, model: SolerModel, S: SpectralData) -> dict:
    """Gradients in f of the z^mu zbar^nu coefficients of the cubic part of K."""
    disc = DiscreteSoler(profile.grid, model)
    Phi = profile.doubled
    xi = list(S.eigenvectors)
    xc = [conj_swap(x) for x in xi]
    k = len(xi)
    zero = (0,) * k
    out = {}
    for i in range(k):
        for j in range(i, k):
            key = _plus(_unit(k, i), _unit(k, j))
            factor = 0.5 if i == j else 1.0
            out[(key, zero)] = factor * disc.third_gradient(Phi, xi[i], xi[j])
            out[(zero, key)] = factor * disc.third_gradient(Phi, xc[i], xc[j])
        for j in range(k):
            out[(_unit(k, i), _unit(k, j))] = disc.third_gradient(Phi, xi[i], xc[j])
    return out


def coupling_vectors(profile: DiscreteProfile, model: SolerModel, S: SpectralData,
                     validate: bool = True, tolerance: float = 1e-6, seed: int = 0) -> CouplingSet:
    """K_{mu nu} = P_c J W^{-1} grad_{mu nu}, validated against the energy oracle."""
    if S.count > MAX_MODES:
        raise ValueError(f"at most {MAX_MODES} discrete modes are supported")
    grads = coupling_gradients(profile, model, S)
    w = np.concatenate([profile.grid.weights, profile.grid.weights])
    raw = {key: symplectic(g / w) for key, g in grads.items()}
    vecs = {key: spectral_projection(S, v).f for key, v in raw.items()}
    sym = 0.0
    for (mu, nu), v in vecs.items():
        partner = vecs[(nu, mu)]
        scale = max(np.abs(v).max(), 1e-300)
        sym = max(sym, float(np.abs(v + conj_swap(partner)).max() / scale))
    cs = CouplingSet(np.asarray(S.eigenvalues, dtype=float), list(vecs), vecs, raw, sym)
    if validate and S.count:
        cs.oracle_residual = _validate_couplings(profile, model, S, grads, seed)
        if cs.oracle_residual > tolerance:
            raise AssemblyRejectedError(f"coupling oracle mismatch {cs.oracle_residual:.3g}")
    return cs


def _validate_couplings(profile, model, S, grads, seed) -> float:
    rng = np.random.default_rng(seed)
    n = profile.grid.size
    rho = np.concatenate([profile.grid.rho, profile.grid.rho])
    test = (rng.normal(size=2 * n) + 1j * rng.normal(size=2 * n)) * np.exp(-rho / 4)
    xi = list(S.eigenvectors)
    worst = 0.0
    for i, j in itertools.combinations_with_replacement(range(len(xi)), 2):
        fd = energy_directional_derivative(profile, model, [xi[i], xi[j], test])
        key = (_plus(_unit(len(xi), i), _unit(len(xi), j)), (0,) * len(xi))
        factor = 0.5 if i == j else 1.0
        exact = np.dot(grads[key], test) / factor
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-300))
    return float(worst)


def tail_rate(grid, v: NDArray, band: tuple = (0.3, 0.7)) -> float:
    """Exponential decay rate of |v| over a radial band (fractions of r_max)."""
    n = grid.size
    amp = np.abs(v[: grid.n]) + np.abs(v[n : n + grid.n])
    rho = grid.rho_p
    sel = (rho > band[0] * grid.r_max) & (rho < band[1] * grid.r_max) & (amp > 1e-300)
    return float(-np.polyfit(rho[sel], np.log(amp[sel]), 1)[0])


# ----------------------------------------------------------------------------
# golden-rule form
# ----------------------------------------------------------------------------


@dataclass
class GoldenRuleValue:
    value: float
    error: float
    r: float


def _threshold_distance(L: LinearizedOperator, r: float) -> float:
    m, w = L.model.mass, L.omega
    return min(abs(abs(r) - (m - w)), abs(abs(r) - (m + w)))


def fgr_pair_matrix(L: LinearizedOperator, r: float, vectors: Sequence[NDArray],
                    edge: Optional[float] = None, tolerance: float = 1e-2) -> tuple[NDArray, NDArray]:
    """A[a, b] = pair(R^+(r) B_a, Sigma_3 B_b) and an entrywise error bar."""
    edge = 1e-3 * L.gap if edge is None else edge
    if not r > L.gap:
        raise ValueError("the golden-rule form needs r above the gap edge")
    if _threshold_distance(L, r) < edge:
        raise ValueError("r is within the threshold margin; use the threshold scan")
    q = ResolventQuery.default(L, r, "plus")
    k = len(vectors)
    A = np.zeros((k, k), dtype=complex)
    E = np.zeros((k, k))
    for a, Ba in enumerate(vectors):
        res = resolvent_apply(L, q, Ba, tolerance=tolerance)
        for b, Bb in enumerate(vectors):
            val = L.pair(res.value, sigma3(Bb))
            direct = L.pair(res.direct, sigma3(Bb))
            A[a, b] = val
            E[a, b] = abs(val - direct) + res.error * abs(val)
    return A, E


def fgr_quadratic_form(L: LinearizedOperator, r: float, G: NDArray, spectrum: Optional[SpectralData] = None,
                       projection_tolerance: float = 1e-8) -> GoldenRuleValue:
    """Gamma(r, G) = Im pair(R^+(r) G, Sigma_3 G) with a propagated error bar."""
    G = np.asarray(G, dtype=complex)
    if not np.any(G):
        return GoldenRuleValue(0.0, 0.0, r)
    if spectrum is not None:
        Gc = spectral_projection(spectrum, G).f
        if L.norm(G - Gc) > projection_tolerance * L.norm(G):
            raise ValueError("G must lie in the continuous subspace")
    A, E = fgr_pair_matrix(L, r, [G])
    return GoldenRuleValue(float(A[0, 0].imag), float(E[0, 0]), r)


# ----------------------------------------------------------------------------
# hypotheses on the eigenvalues
# ----------------------------------------------------------------------------


def multiplicity_integers(lambdas: Sequence[float], gap: float) -> list:
    """N_j with N_j lambda_j < gap < (N_j + 1) lambda_j, or None if the strict bounds fail."""
    out = []
    for lam in lambdas:
        N = int(np.floor(gap / lam))
        ok = N >= 1 and N * lam < gap < (N + 1) * lam
        out.append(N if ok else None)
    return out


def _integer_vectors(k: int, max_norm: int, nonnegative: bool):
    rng = range(0, max_norm + 1) if nonnegative else range(-max_norm, max_norm + 1)
    for mu in itertools.product(rng, repeat=k):
        if sum(abs(x) for x in mu) <= max_norm:
            yield mu


def nondegeneracy_checks(lambdas: Sequence[float], mass: float, omega: float,
                         tol: float = 1e-9) -> dict:
    """Arithmetic checks on the eigenvalue vector: no combination hits m +- omega,
    and no nontrivial combination vanishes (up to tol)."""
    lam = np.asarray(lambdas, dtype=float)
    k = lam.size
    if k > MAX_MODES:
        raise ValueError(f"at most {MAX_MODES} discrete modes are supported")
    Ns = multiplicity_integers(lam, mass - omega)
    N1 = max((N for N in Ns if N is not None), default=1)
    bound = 2 * N1 + 3
    hits, zeros = [], []
    for mu in _integer_vectors(k, bound, nonnegative=False):
        val = float(np.dot(mu, lam))
        if min(abs(val - (mass + omega)), abs(val - (mass - omega))) <= tol:
            hits.append(mu)
        if any(mu) and abs(val) <= tol:
            zeros.append(mu)
    distinct = bool(k < 2 or np.min(np.abs(np.subtract.outer(lam, lam))[~np.eye(k, dtype=bool)]) > tol)
    return {"N": Ns, "N1": N1, "index_bound": bound,
            "multiplicity_holds": all(N is not None for N in Ns),
            "threshold_hits": hits, "threshold_combinations_hold": not hits,
            "vanishing_combinations": zeros, "distinct": distinct,
            "independence_holds": (not zeros) and distinct, "mode_cap": MAX_MODES}


def resonant_indices(lambdas: Sequence[float], gap: float, max_norm: int) -> list:
    """alpha >= 0 with lambda.alpha > gap and lambda.alpha - lambda_k < gap for every k in supp alpha."""
    lam = np.asarray(lambdas, dtype=float)
    out = []
    for alpha in _integer_vectors(lam.size, max_norm, nonnegative=True):
        if not any(alpha):
            continue
        r = float(np.dot(alpha, lam))
        if r > gap and all(r - lam[j] < gap for j in range(lam.size) if alpha[j]):
            out.append(alpha)
    return out


def _group_by_frequency(lambdas, alphas, tol=1e-10) -> list:
    groups: list = []
    for a in alphas:
        r = float(np.dot(a, lambdas))
        for g in groups:
            if abs(g[0] - r) <= tol:
                g[1].append(a)
                break
        else:
            groups.append([r, [a]])
    return [(r, als) for r, als in sorted(groups)]


def fgr_check(L: LinearizedOperator, S: SpectralData, C: CouplingSet, samples: int = 200,
              seed: int = 0, tol: float = 1e-9) -> dict:
    """Leading-order golden-rule positivity report over the resonant frequencies."""
    lam = np.asarray(S.eigenvalues, dtype=float)
    m, w = L.model.mass, L.omega
    report = {"order": "leading", "lambdas": lam.tolist(), "signatures": list(map(int, S.signatures))}
    if lam.size == 0:
        report.update(verdict="no discrete modes", resonances=[])
        return report
    nd = nondegeneracy_checks(lam, m, w, tol)
    report["nondegeneracy"] = {k: v for k, v in nd.items()}
    alphas = resonant_indices(lam, m - w, nd["index_bound"])
    groups = _group_by_frequency(lam, alphas)
    report["window"] = {"all_below_upper_threshold": all(r < m + w for r, _ in groups),
                        "omega_above_third": bool(w > m / 3)}
    blocks = []
    unsupported = []
    for r, als in groups:
        usable = [a for a in als if sum(a) == 2]
        unsupported.extend(a for a in als if sum(a) != 2)
        if not usable:
            continue
        zero = (0,) * lam.size
        vecs = [C.vector(a, zero) for a in usable]
        A, E = fgr_pair_matrix(L, r, vecs)
        M = A.T
        herm = (M - M.conj().T) / 2j
        err = float(np.abs(E).sum())
        blocks.append({"r": r, "alphas": usable, "matrix": A, "hermitian": herm, "error": err,
                       "min_eig": float(np.linalg.eigvalsh(herm).min())})
    report["unsupported_indices"] = unsupported
    if not blocks:
        report.update(verdict="no supported resonances", resonances=[])
        return report
    # lhs = 2 sum_r r c_r^H herm_r c_r with c_a = zeta^alpha
    quotient_min = min(2 * b["r"] * b["min_eig"] for b in blocks)
    error = max(2 * b["r"] * b["error"] for b in blocks)
    rng = np.random.default_rng(seed)
    sampled = []
    for _ in range(samples):
        zeta = rng.normal(size=lam.size) + 1j * rng.normal(size=lam.size)
        zeta /= np.linalg.norm(zeta)
        lhs = 0.0
        denom = 0.0
        for b in blocks:
            c = np.array([np.prod(zeta ** np.array(a)) for a in b["alphas"]])
            lhs += 2 * b["r"] * float(np.real(c.conj() @ b["hermitian"] @ c))
            denom += float(np.sum(np.abs(c) ** 2))
        sampled.append(lhs / denom)
    if quotient_min > 3 * error:
        verdict = "positive"
    elif quotient_min >= -3 * error:
        verdict = "nonnegative-degenerate"
    else:
        verdict = "violated"
    report.update(
        resonances=[{"r": b["r"], "alphas": [list(a) for a in b["alphas"]], "gamma_min": b["min_eig"],
                     "gamma_diagonal": np.real(np.diag(b["hermitian"])).tolist(), "error": b["error"]}
                    for b in blocks],
        min_quotient=float(quotient_min), sampled_min=float(min(sampled)),
        sampled_max=float(max(sampled)), error=float(error), verdict=verdict)
    return report


# ----------------------------------------------------------------------------
# homological equation
# ----------------------------------------------------------------------------


@dataclass
class HomologicalSolution:
    lambdas: NDArray
    scalars: dict  # (mu, nu) -> complex
    vectors: dict  # (mu, nu) -> stored doubled vector Y
    sides: dict = field(default_factory=dict)

    def evaluate(self, z: NDArray, f: NDArray, grid) -> complex:
        """chi(z, f) = sum c z^mu zbar^nu + sum z^mu zbar^nu b(Y, J f)."""
        total = 0j
        for (mu, nu), c in self.scalars.items():
            total += c * _monomial(z, mu, nu)
        for (mu, nu), Y in self.vectors.items():
            total += _monomial(z, mu, nu) * bilinear_vectors(grid, Y, symplectic(f))
        return total


def _monomial(z: NDArray, mu, nu) -> complex:
    z = np.asarray(z, dtype=complex)
    return complex(np.prod(z ** np.array(mu)) * np.prod(np.conj(z) ** np.array(nu)))


def _divisor(lambdas, mu, nu, c: float) -> float:
    L = float(np.dot(lambdas, np.subtract(mu, nu)))
    if abs(L) < c / 2:
        if abs(L) <= 1e-12:
            raise NormalFormError(f"lambda.(mu - nu) = 0 for {mu}, {nu}")
        raise SmallDivisorError(f"|lambda.(mu - nu)| = {abs(L):.3g} below c/2 = {c / 2:.3g}")
    return L


def solve_homological(L: LinearizedOperator, S: SpectralData, scalars: dict, vectors: dict,
                      separation: Optional[float] = None, margin: Optional[float] = None) -> HomologicalSolution:
    """chi with {D_2, chi} = sum k z^mu zbar^nu + sum z^mu zbar^nu b(K, J f).

    Scalars: chi = k / (i lambda.(mu - nu)).  Vectors: Y = i (H - L)^{-1} K with
    L = lambda.(mu - nu); in the continuum the boundary value R^+ is used for
    either sign of L.  Since C Sigma_1 maps R^+(L) to R^+(-L), inputs with
    K_{nu mu} = -C Sigma_1 K_{mu nu} give Y_{nu mu} = -C Sigma_1 Y_{mu nu}.
    """
    lam = np.asarray(S.eigenvalues, dtype=float)
    c = float(lam.min()) if separation is None and lam.size else (separation or 0.0)
    margin = 1e-3 * L.gap if margin is None else margin
    out_s = {}
    for (mu, nu), k in scalars.items():
        d = _divisor(lam, mu, nu, c)
        out_s[(tuple(mu), tuple(nu))] = complex(k) / (1j * d)
    out_v = {}
    sides = {}
    for (mu, nu), K in vectors.items():
        d = _divisor(lam, mu, nu, c)
        K = np.asarray(K, dtype=complex)
        if abs(d) < L.gap:
            ev = np.concatenate([lam, -lam, [0.0]])
            if np.min(np.abs(ev - d)) < margin:
                raise SmallDivisorError("lambda.(mu - nu) sits on a discrete eigenvalue")
            A = (L.H - d * sp.identity(L.size, format="csr")).tocsc()
            Y = 1j * spla.spsolve(A, K)
            sides[(tuple(mu), tuple(nu))] = "gap"
        else:
            res = resolvent_apply(L, ResolventQuery.default(L, d, "plus"), K)
            Y = 1j * res.value
            sides[(tuple(mu), tuple(nu))] = "plus"
        out_v[(tuple(mu), tuple(nu))] = Y
    return HomologicalSolution(lam, out_s, out_v, sides)


def homological_symmetry_residual(sol: HomologicalSolution) -> float:
    """max |Y_{nu mu} + C Sigma_1 Y_{mu nu}| / |Y| over the supplied pairs."""
    worst = 0.0
    for (mu, nu), Y in sol.vectors.items():
        other = sol.vectors.get((nu, mu))
        if other is None:
            continue
        worst = max(worst, float(np.abs(other + conj_swap(Y)).max() / max(np.abs(Y).max(), 1e-300)))
    return worst


def poisson_bracket_fd(L: LinearizedOperator, lambdas: Sequence[float], chi: Callable, z: NDArray,
                       f: NDArray, step: float = 1e-3) -> complex:
    """{D_2, chi}(z, f) = -d/dt chi(exp(-i lambda t) z, exp(-i t H) f) at t = 0."""
    lam = np.asarray(lambdas, dtype=float)
    Hc = L.H.tocsc()

    def at(t):
        zt = np.exp(-1j * lam * t) * z
        ft = spla.expm_multiply(-1j * t * Hc, f.astype(complex))
        return chi(zt, ft)

    def central(h):
        return (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h)

    return -(16 * central(step / 2) - central(step)) / 15


def poisson_residual(L: LinearizedOperator, sol: HomologicalSolution, scalars: dict, vectors: dict,
                     z: NDArray, f: NDArray, step: float = 1e-3) -> float:
    """|{D_2, chi} - input| / |input| at one point (z, f)."""
    grid = L.grid
    lhs = poisson_bracket_fd(L, sol.lambdas, lambda zz, ff: sol.evaluate(zz, ff, grid), z, f, step)
    rhs = 0j
    for (mu, nu), k in scalars.items():
        rhs += k * _monomial(z, mu, nu)
    for (mu, nu), K in vectors.items():
        rhs += _monomial(z, mu, nu) * bilinear_vectors(grid, K, symplectic(f))
    return float(abs(lhs - rhs) / max(abs(rhs), 1e-300))
