"""Linearized operator around a standing wave on the doubled radial block.

Stored coordinates are X = (x1, x2) with x1 the block amplitudes of r and x2
the partner amplitudes of r^c.  The operator is assembled as the Hamiltonian
matrix of the discrete functional K = E - omega Q,

    H = [[0, I], [-I, 0]] W^{-1} Hess K(Phi),

which splits as H0 = diag(D - omega, -(D - omega)) (the partner block carries
-D) plus the potential V.  Because Hess K is complex symmetric, W Sigma_3 H is
Hermitian for real waves and the conjugation identity H = -S conj(H) S holds
with S the slot swap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from .core import (
    ALPHA,
    BETA,
    CONJ_MATRIX,
    S3,
    DiscreteSoler,
    RadialGrid,
    SolerModel,
    amplitudes_from_spinor,
    conj_swap,
    doubled_weights,
    pair_vectors,
    phase_rotate,
    sigma3,
    spinor_from_amplitudes,
)
from .profile import DiscreteProfile, RadialProfile, evaluate_spinor

logger = logging.getLogger(__name__)


class DecompositionError(ValueError):
    """The spectral decomposition is ill-conditioned (charge slope near zero)."""


@dataclass
class LinearizedOperator:
    grid: RadialGrid
    model: SolerModel
    omega: float
    H: sp.csr_matrix
    H0: sp.csr_matrix
    V: sp.csr_matrix
    wave: NDArray  # stored doubled vector of Phi
    wave_derivative: Optional[NDArray] = None
    exact_wave: bool = False

    @property
    def size(self) -> int:
        return self.H.shape[0]

    @property
    def gap(self) -> float:
        return self.model.mass - self.omega

    @property
    def weights(self) -> NDArray:
        return doubled_weights(self.grid)

    @property
    def sigma3(self) -> sp.dia_matrix:
        n = self.grid.size
        return sp.diags(np.concatenate([np.ones(n), -np.ones(n)]))

    @property
    def sigma1(self) -> sp.csr_matrix:
        n = self.grid.size
        return sp.bmat([[None, sp.identity(n)], [sp.identity(n), None]]).tocsr()

    @staticmethod
    def C_map(v: NDArray) -> NDArray:
        """C Sigma_1 in stored coordinates (antilinear)."""
        return conj_swap(v)

    def pair(self, x: NDArray, y: NDArray) -> complex:
        return pair_vectors(self.grid, x, y)

    def norm(self, x: NDArray) -> float:
        return float(np.sqrt(max(self.pair(x, x).real, 0.0)))

    @property
    def is_free(self) -> bool:
        return self.V.nnz == 0 or abs(self.V).max() == 0


def _free_part(grid: RadialGrid, model: SolerModel, omega: float) -> sp.csr_matrix:
    disc = DiscreteSoler(grid, model)
    L = disc.dirac - omega * sp.identity(grid.size)
    return sp.bmat([[L, None], [None, -L]]).tocsr()


def assemble_linearized(profile: RadialProfile | DiscreteProfile, model: SolerModel,
                        grid: Optional[RadialGrid] = None) -> LinearizedOperator:
    """Assemble H, H0 and V around a sampled or exactly discrete wave."""
    if isinstance(profile, DiscreteProfile):
        if grid is not None and grid != profile.grid:
            raise ValueError("profile/grid mismatch")
        grid = profile.grid
        x = profile.x
        dX = profile.doubled_derivative
        exact = True
    else:
        if grid is None:
            raise ValueError("a grid is required for a continuum profile")
        if abs(profile.mass - model.mass) > 0:
            raise ValueError("profile/model mass mismatch")
        x = profile.sample(grid)
        dX = None
        exact = False
    omega = profile.omega
    X = np.concatenate([x, x]).astype(complex)
    disc = DiscreteSoler(grid, model)
    H = disc.linearized_matrix(X, omega)
    H.eliminate_zeros()
    H0 = _free_part(grid, model, omega)
    V = (H - H0).tocsr()
    V.eliminate_zeros()
    return LinearizedOperator(grid, model, omega, H.tocsr(), H0, V, X, dX, exact)


def free_operator(grid: RadialGrid, model: SolerModel, omega: float) -> LinearizedOperator:
    H0 = _free_part(grid, model, omega)
    zero = np.zeros(2 * grid.size, dtype=complex)
    return LinearizedOperator(grid, model, omega, H0.copy(), H0, sp.csr_matrix(H0.shape), zero)


# ----------------------------------------------------------------------------
# pointwise 3D linearization (oracle)
# ----------------------------------------------------------------------------


def _fd_dirac(field_fn: Callable, x: NDArray, mass: float, step: float) -> NDArray:
    """D_m applied to a C^4-valued function by fourth-order central differences."""
    out = mass * field_fn(x) @ BETA.T
    coef = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        d = sum(c * field_fn(x + o * e) for o, c in coef) / step
        out = out - 1j * d @ ALPHA[j].T
    return out


def apply_linearization_3d(wave_fn: Callable, model: SolerModel, omega: float,
                           first_fn: Callable, second_fn: Callable, x: NDArray,
                           step: float = 1e-3) -> tuple[NDArray, NDArray]:
    """The doubled linearization at points x, acting on (r, r^c) given as
    C^4-valued functions.  Returns the two C^4 components.

    With ds = r . beta phi* + phi . beta (M r^c), M = i beta alpha_2:
      top    = (D - omega - g beta) r   - g' ds beta phi,
      bottom = (D + omega - g beta) r^c - g' ds~ beta phi^c,
    where ds~ = (M r^c) . beta phi + phi* . beta r.
    """
    phi = wave_fn(x)
    s = np.real(np.einsum("ki,ij,kj->k", phi, BETA, np.conj(phi)))
    g, g1, _ = model.g_all(s)
    r = first_fn(x)
    rc = second_fn(x)
    M = CONJ_MATRIX
    bphi = phi @ BETA.T
    ds = np.einsum("ki,ki->k", r, np.conj(bphi)) + np.einsum("ki,ki->k", bphi, rc @ M.T)
    ds_t = np.einsum("ki,ki->k", rc @ M.T, bphi) + np.einsum("ki,ki->k", np.conj(bphi), r)
    phic = np.conj(phi) @ M.T
    top = (_fd_dirac(first_fn, x, model.mass, step) - omega * r
           - g[:, None] * (r @ BETA.T) - (g1 * ds)[:, None] * bphi)
    bottom = (_fd_dirac(second_fn, x, model.mass, step) + omega * rc
              - g[:, None] * (rc @ BETA.T) - (g1 * ds_t)[:, None] * (phic @ BETA.T))
    return top, bottom


def action_oracle(L: LinearizedOperator, profile: RadialProfile, amplitudes: dict,
                  radii: NDArray, rng: Optional[np.random.Generator] = None) -> float:
    """Max deviation between the matrix action and the 3D linearization.

    ``amplitudes`` maps "p1", "q1", "p2", "q2" to smooth callables of rho.  The
    3D evaluation happens at points of radius ``radii`` (grid nodes) in random
    directions and is projected back onto the block and partner amplitudes.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    grid = L.grid
    X = np.concatenate([grid.sample(amplitudes["p1"], amplitudes["q1"]),
                        grid.sample(amplitudes["p2"], amplitudes["q2"])])
    HX = L.H @ X
    n = grid.size

    def field(sector, pk, qk):
        def fn(pts):
            rho = np.linalg.norm(pts, axis=1)
            return spinor_from_amplitudes(amplitudes[pk](rho), amplitudes[qk](rho), pts, sector)
        return fn

    worst = 0.0
    for which, rad_set in (("p", grid.rho_p), ("q", grid.rho_q)):
        idx = np.flatnonzero(np.isin(rad_set, radii))
        if idx.size == 0:
            continue
        dirs = rng.normal(size=(idx.size, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        pts = rad_set[idx][:, None] * dirs
        top, bottom = apply_linearization_3d(
            lambda y: evaluate_spinor(profile, y), L.model, L.omega,
            field("block", "p1", "q1"), field("partner", "p2", "q2"), pts)
        p1, q1, _ = amplitudes_from_spinor(top, pts, "block")
        p2, q2, _ = amplitudes_from_spinor(bottom, pts, "partner")
        off = 0 if which == "p" else grid.n
        got1 = HX[off + idx]
        got2 = HX[n + off + idx]
        want1, want2 = (p1, p2) if which == "p" else (q1, q2)
        worst = max(worst, np.abs(got1 - want1).max(), np.abs(got2 - want2).max())
    return float(worst)


# ----------------------------------------------------------------------------
# symmetry algebra
# ----------------------------------------------------------------------------


def adjoint_residual(L: LinearizedOperator) -> float:
    """|| H^* - Sigma_3 H Sigma_3 || / ||H|| with H^* the pairing adjoint."""
    w = L.weights
    H = L.H
    Hstar = sp.diags(1.0 / w) @ H.conj().T @ sp.diags(w)
    S3m = L.sigma3
    diff = Hstar - S3m @ H @ S3m
    return float(abs(diff).max() / max(abs(H).max(), 1e-300))


def conjugation_residual(L: LinearizedOperator) -> float:
    """|| H + (C Sigma_1) H (C Sigma_1) || / ||H|| in stored coordinates."""
    S1 = L.sigma1
    diff = L.H + S1 @ L.H.conj() @ S1
    return float(abs(diff).max() / max(abs(L.H).max(), 1e-300))


def sector_residuals(field_fn: Callable, points: NDArray) -> tuple[float, float]:
    """Residuals of X(-x) = beta Sigma_3 X(x) and X(-x1,-x2,x3) = S_3 Sigma_3 X(x)
    for an 8-component field, relative to its size at the points."""
    big_b = np.kron(np.diag([1.0, -1.0]), BETA)
    big_s = np.kron(np.diag([1.0, -1.0]), S3)
    X = field_fn(points)
    scale = max(np.abs(X).max(), 1e-300)
    flip = points * np.array([-1.0, -1.0, 1.0])
    res_a = np.abs(field_fn(-points) - X @ big_b.T).max() / scale
    res_b = np.abs(field_fn(flip) - X @ big_s.T).max() / scale
    return float(res_a), float(res_b)


def doubled_field_fn(grid: RadialGrid, X: NDArray) -> Callable:
    """8-component 3D evaluation of a stored doubled vector (spline in rho)."""
    from .core import RadialInterpolant

    n = grid.size
    first = RadialInterpolant(grid, X[:n])
    second = RadialInterpolant(grid, X[n:])

    def fn(pts):
        rho = np.linalg.norm(pts, axis=1)
        p1, q1 = first(rho)
        p2, q2 = second(rho)
        return np.concatenate([spinor_from_amplitudes(p1, q1, pts, "block"),
                               spinor_from_amplitudes(p2, q2, pts, "partner")], axis=1)

    return fn


def symmetry_check(L: LinearizedOperator, spectrum: Optional["SpectralData"] = None,
                   samples: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    report = {
        "adjoint_residual": adjoint_residual(L),
        "conjugation_residual": conjugation_residual(L),
    }
    if spectrum is not None:
        report["negation_residual"] = spectrum.negation_residual
        report["quadruple_residual"] = spectrum.quadruple_residual
    # membership of random smooth block/partner data in the symmetry sector
    coeffs = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))

    def amp(c):
        return lambda r: (c[0] + c[1] * r + c[2] * r * r) * np.exp(-r * r / 8)

    X = np.concatenate([L.grid.sample(amp(coeffs[0]), lambda r: r * amp(coeffs[1])(r)),
                        L.grid.sample(amp(coeffs[2]), lambda r: r * amp(coeffs[3])(r))])
    pts = rng.normal(size=(samples, 3)) * 2.0
    res_a, res_b = sector_residuals(doubled_field_fn(L.grid, X), pts)
    report["sector_A_residual"] = res_a
    report["sector_B_residual"] = res_b
    return report


# ----------------------------------------------------------------------------
# spectrum
# ----------------------------------------------------------------------------


@dataclass
class SpectralData:
    omega: float
    gap: float
    eigenvalues: NDArray  # positive members lambda_j of the real pairs
    eigenvectors: list  # xi_j as stored doubled vectors
    signatures: NDArray
    all_eigenvalues: NDArray  # everything found in the window (both signs)
    complex_eigenvalues: NDArray
    zero_cluster: NDArray
    zero_tolerance: float
    threshold_suspect: NDArray
    kernel_vectors: tuple = ()
    charge_slope: float = float("nan")
    grid: Optional[RadialGrid] = None
    dense_check: Optional[float] = None
    notes: list = field(default_factory=list)

    @property
    def count(self) -> int:
        """2n: nonzero gap eigenvalues counted with both signs."""
        return int(2 * len(self.eigenvalues))

    @property
    def negation_residual(self) -> float:
        lam = self.all_eigenvalues
        if lam.size == 0:
            return 0.0
        return float(max(np.min(np.abs(lam + v)) for v in lam))

    @property
    def quadruple_residual(self) -> float:
        z = self.complex_eigenvalues
        if z.size == 0:
            return 0.0
        worst = 0.0
        for v in z:
            for t in (-v, np.conj(v), -np.conj(v)):
                worst = max(worst, float(np.min(np.abs(z - t))))
        return worst

    @property
    def linearly_stable_candidate(self) -> bool:
        return (self.complex_eigenvalues.size == 0 and len(self.zero_cluster) == 2
                and bool(np.all(self.signatures > 0)))

    def verdicts(self) -> dict:
        return {
            "H5_kernel_dimension": int(len(self.zero_cluster)),
            "H6_count_2n": self.count,
            "H6_inside_gap": bool(np.all(np.abs(self.eigenvalues) < self.gap)),
            "H6_threshold_suspect": self.threshold_suspect.tolist(),
            "H6_coverage_caveat": "only the invariant angular block and its partner are analysed",
            "complex_eigenvalues": [[float(z.real), float(z.imag)] for z in self.complex_eigenvalues],
            "signatures": self.signatures.astype(int).tolist(),
            "linear_stability_candidate": self.linearly_stable_candidate,
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "omega": self.omega,
            "eigenvalues": self.eigenvalues.tolist(),
            "signatures": self.signatures.astype(int).tolist(),
            "zero_cluster": [[float(z.real), float(z.imag)] for z in self.zero_cluster],
            "zero_tolerance": self.zero_tolerance,
            "charge_slope": self.charge_slope,
            "negation_residual": self.negation_residual,
            "dense_check": self.dense_check,
            "verdicts": self.verdicts(),
            "notes": self.notes,
        }


def _sigma3_gram_schmidt(L: LinearizedOperator, vecs: list) -> tuple[list, list]:
    """Orthonormalize eigenvectors of one eigenvalue cluster in the indefinite
    form pair(x, Sigma_3 y); returns vectors and signatures."""
    out, sig = [], []
    for v in vecs:
        v = v.astype(complex)
        for u, e in zip(out, sig):
            v = v - e * L.pair(v, sigma3(u)) * u
        nrm = L.pair(v, sigma3(v)).real
        if abs(nrm) < 1e-14 * L.norm(v) ** 2:
            raise np.linalg.LinAlgError("eigenvector with vanishing signature form")
        e = 1.0 if nrm > 0 else -1.0
        out.append(v / np.sqrt(abs(nrm)))
        sig.append(e)
    return out, sig


def _fix_phase(v: NDArray) -> NDArray:
    k = int(np.argmax(np.abs(v)))
    return v * np.exp(-1j * np.angle(v[k]))


def discrete_spectrum(L: LinearizedOperator, window: Optional[tuple[float, float]] = None,
                      k: int = 24, dense_limit: int = 2000,
                      zero_tolerance: Optional[float] = None) -> SpectralData:
    """Eigenvalues of H in the gap, their eigenvectors and Krein signatures."""
    gap = L.gap
    lo, hi = window if window is not None else (-gap, gap)
    if lo < -gap - 1e-15 or hi > gap + 1e-15:
        raise ValueError("window must lie inside the spectral gap")
    edge = 1e-3 * gap
    N = L.size
    shift = 1e-3 * gap
    if N <= dense_limit:
        lam, vec = sla.eig(L.H.toarray())
    else:
        kk = min(k, N - 2)
        try:
            lam, vec = spla.eigs(L.H.tocsc(), k=kk, sigma=shift, which="LM", tol=1e-13)
        except spla.ArpackNoConvergence as exc:
            raise RuntimeError("eigensolver did not converge") from exc
    # the box carries an exact threshold mode (constant p, q = 0) that
    # rounding can place a hair inside the gap
    inside = (np.abs(lam.real) < max(abs(lo), abs(hi)) - 1e-12 * gap) & (np.abs(lam.imag) < gap)
    lam, vec = lam[inside], vec[:, inside]
    # zero cluster
    if zero_tolerance is None:
        if L.is_free:
            zero_tolerance = 1e-6 * gap
        elif L.exact_wave:
            # the size-2 Jordan block at zero splits by ~ sqrt(eps ||H||) under roundoff
            jordan = np.sqrt(np.finfo(float).eps * spla.norm(L.H, 1))
            zero_tolerance = max(1e-6 * gap, 100 * jordan)
        else:
            zero_tolerance = max(1e-6 * gap, 10 * np.sqrt(kernel_residual(L)))
    zmask = np.abs(lam) < zero_tolerance
    zero_cluster = lam[zmask]
    lam, vec = lam[~zmask], vec[:, ~zmask]
    real = np.abs(lam.imag) < 1e-8 * gap
    complex_eigs = lam[~real]
    lam_r = lam[real].real
    vec_r = vec[:, real]
    pos = lam_r > 0
    order = np.argsort(lam_r[pos])
    eig_pos = lam_r[pos][order]
    vec_pos = [vec_r[:, pos][:, i] for i in order]
    # a real operator has real eigenvectors for real eigenvalues
    vec_pos = [_fix_phase(v) for v in vec_pos]
    vectors, sigs = [], []
    i = 0
    while i < eig_pos.size:
        j = i
        while j + 1 < eig_pos.size and eig_pos[j + 1] - eig_pos[i] < 1e-8 * gap:
            j += 1
        vs, es = _sigma3_gram_schmidt(L, vec_pos[i : j + 1])
        vectors += vs
        sigs += es
        i = j + 1
    suspect = eig_pos[np.abs(np.abs(eig_pos) - gap) < edge]
    data = SpectralData(
        omega=L.omega, gap=gap, eigenvalues=eig_pos, eigenvectors=vectors,
        signatures=np.array(sigs), all_eigenvalues=np.sort(lam_r),
        complex_eigenvalues=complex_eigs, zero_cluster=zero_cluster,
        zero_tolerance=float(zero_tolerance), threshold_suspect=suspect, grid=L.grid,
    )
    if L.wave_derivative is not None:
        data.kernel_vectors = (sigma3(L.wave), L.wave_derivative)
        data.charge_slope = float(L.pair(L.wave_derivative, L.wave).real)
    if N > dense_limit:
        data.notes.append("shift-invert Arnoldi; dense cross-check skipped above the size limit")
    else:
        data.notes.append("dense eigen-decomposition")
    return data


def reduced_spectrum(L: LinearizedOperator) -> NDArray:
    """Independent route: lambda^2 as eigenvalues of L_- L_+ (real waves only).

    In the coordinates x1 + x2 and x1 - x2 the operator decouples into
    lambda (x1 + x2) = L_- (x1 - x2) and lambda (x1 - x2) = L_+ (x1 + x2).
    """
    n = L.grid.size
    H = L.H.tocsr()
    A = H[:n, :n]
    B = H[:n, n:]
    Lm = (A - B).toarray().real
    Lp = (A + B).toarray().real
    mu = np.linalg.eigvals(Lm @ Lp)
    return mu


# ----------------------------------------------------------------------------
# generalized kernel
# ----------------------------------------------------------------------------


def kernel_residual(L: LinearizedOperator) -> float:
    """|| H Sigma_3 Phi || / || Phi || in the pairing norm."""
    return L.norm(L.H @ sigma3(L.wave)) / L.norm(L.wave)


def generalized_kernel_check(L: LinearizedOperator, derivative: Optional[NDArray] = None,
                             spectrum: Optional[SpectralData] = None,
                             lstsq_limit: int = 2000) -> dict:
    """Residuals of the two generalized-kernel identities.

    ``derivative`` is d Phi / d omega as a stored doubled vector (for example a
    centred difference along a family); it defaults to the exact discrete one.
    """
    dphi = L.wave_derivative if derivative is None else derivative
    if dphi is None:
        raise ValueError("d Phi / d omega is required (family neighbours or a discrete wave)")
    phi = L.wave
    nphi = L.norm(phi)
    Hd = L.H @ dphi
    s3phi = sigma3(phi)
    report = {
        "kernel_residual": L.norm(L.H @ s3phi) / nphi,
        # with the time dependence e^{-i omega t} the chain closes with a plus sign
        "chain_residual": L.norm(Hd - s3phi) / nphi,
        "chain_residual_opposite_sign": L.norm(Hd + s3phi) / nphi,
        "charge_slope": float(L.pair(dphi, phi).real),
    }
    if spectrum is not None:
        report["zero_cluster_dimension"] = int(len(spectrum.zero_cluster))
    if L.size <= lstsq_limit:
        Hd_dense = L.H.toarray()
        sol, *_ = np.linalg.lstsq(Hd_dense, dphi, rcond=None)
        report["range_distance"] = L.norm(Hd_dense @ sol - dphi) / L.norm(dphi)
    return report


# ----------------------------------------------------------------------------
# embedded eigenvalue
# ----------------------------------------------------------------------------

GAMMA = ALPHA[0] @ ALPHA[1] @ ALPHA[2]


def embedded_eigencheck(profile: RadialProfile, model: SolerModel, points: int = 200,
                        radius: float = 6.0, seed: int = 0, step: float = 1e-3) -> dict:
    """Pointwise check of H Y = -2 omega Y for Y = (alpha_1 alpha_2 alpha_3 beta phi, 0)."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(4 * points, 3))
    pts = pts[np.linalg.norm(pts, axis=1) <= 1][:points] * radius
    omega = profile.omega

    def wave(x):
        return evaluate_spinor(profile, x)

    def y_fn(x):
        return wave(x) @ (GAMMA @ BETA).T

    def zero(x):
        return np.zeros((np.atleast_2d(x).shape[0], 4), dtype=complex)

    top, bottom = apply_linearization_3d(wave, model, omega, y_fn, zero, pts, step=step)
    Y = y_fn(pts)
    scale = np.sqrt(np.mean(np.sum(np.abs(Y) ** 2, axis=1)))
    res = np.sqrt(np.mean(np.sum(np.abs(top + 2 * omega * Y) ** 2 + np.abs(bottom) ** 2, axis=1)))
    res_max = np.max(np.linalg.norm(np.concatenate([top + 2 * omega * Y, bottom], axis=1), axis=1))

    def y8(x):
        return np.concatenate([y_fn(x), zero(x)], axis=1)

    res_a, res_b = sector_residuals(y8, pts)
    big_b = np.kron(np.diag([1.0, -1.0]), BETA)
    anti = np.abs(y8(-pts) + y8(pts) @ big_b.T).max() / np.abs(y8(pts)).max()
    return {
        "relative_residual": float(res / scale),
        "max_pointwise_residual": float(res_max / np.abs(Y).max()),
        "sector_A_residual": res_a,
        "sector_B_residual": res_b,
        "antisymmetric_A_residual": float(anti),
        "in_sector": bool(res_a < 1e-10 and res_b < 1e-10),
        "embedded": bool(model.mass - omega < 2 * omega < model.mass + omega),
    }


# ----------------------------------------------------------------------------
# decomposition
# ----------------------------------------------------------------------------


@dataclass
class Decomposition:
    kernel: NDArray  # coefficients of (Sigma_3 Phi, d Phi)
    z: NDArray
    zbar: NDArray
    f: NDArray

    def reconstruct(self, S: SpectralData, theta: float = 0.0) -> NDArray:
        phi_s3, dphi = S.kernel_vectors
        out = self.kernel[0] * phi_s3 + self.kernel[1] * dphi
        for zj, wj, xi in zip(self.z, self.zbar, S.eigenvectors):
            out = out + zj * xi + wj * conj_swap(xi)
        return phase_rotate(out, theta) + self.f


def spectral_projection(S: SpectralData, X: NDArray, theta: float = 0.0,
                        slope_threshold: float = 1e-8) -> Decomposition:
    """Split X into kernel, discrete and continuous parts with rotated basis
    vectors exp(i Sigma_3 theta) v."""
    if not S.kernel_vectors:
        raise DecompositionError("kernel vectors are missing")
    q1 = S.charge_slope
    if not abs(q1) > slope_threshold:
        raise DecompositionError(f"charge slope {q1} too small for the decomposition")
    grid = S.grid
    pair = lambda a, b: pair_vectors(grid, a, b)
    Y = phase_rotate(np.asarray(X, dtype=complex), -theta)
    phi_s3, dphi = S.kernel_vectors
    phi = sigma3(phi_s3)
    c0 = pair(Y, sigma3(dphi)) / q1
    c1 = pair(Y, phi) / q1
    rest = Y - c0 * phi_s3 - c1 * dphi
    z = np.zeros(len(S.eigenvectors), dtype=complex)
    w = np.zeros_like(z)
    for j, (xi, e) in enumerate(zip(S.eigenvectors, S.signatures)):
        z[j] = e * pair(Y, sigma3(xi))
        xc = conj_swap(xi)
        w[j] = -e * pair(Y, sigma3(xc))
        rest = rest - z[j] * xi - w[j] * xc
    return Decomposition(np.array([c0, c1]), z, w, phase_rotate(rest, theta))


def continuous_projector(S: SpectralData) -> Callable[[NDArray], NDArray]:
    return lambda X: spectral_projection(S, X).f


def projector_matrix(S: SpectralData) -> NDArray:
    """Dense P_c, built column by column (moderate sizes only)."""
    N = 2 * S.grid.size
    P = np.empty((N, N), dtype=complex)
    eye = np.eye(N)
    for i in range(N):
        P[:, i] = spectral_projection(S, eye[:, i]).f
    return P
