import numpy as np
import pytest
import scipy.sparse.linalg as spla

from solerwave.core import DiscreteSoler, RadialGrid, SolerModel, spinor_from_amplitudes
from solerwave.linop import free_operator, spectral_projection
from solerwave.resolvent import (
    EigenvalueGuardError, ExtrapolationError, FreePropagator, InteractingResolvent, KernelSingularityError,
    LimitNotReachedError, ResolventQuery, ThresholdError, block_resolvent_continuum, block_resolvent_matrix,
    decay_constant, free_resolvent_kernel, gap_direct_solve, inverse_pair_check, kernel_apply_3d,
    lap_bound_scan, resolvent_apply, smoothing_integrals, threshold_resonance_scan, wave_operator,
    weighted_norm,
)

P_FN = lambda r: np.exp(-r**2 / 2) * (1 + 0.3 * r)
Q_FN = lambda r: r * np.exp(-r**2 / 2)


def test_decay_constant_branches():
    assert decay_constant(1.0, 0.6) == pytest.approx(0.8)
    kp = decay_constant(1.0, 1.25, "plus")
    km = decay_constant(1.0, 1.25, "minus")
    assert kp == pytest.approx(-0.75j) and km == pytest.approx(0.75j)
    # the outgoing choice for negative energies flips
    assert decay_constant(1.0, -1.25, "plus") == pytest.approx(0.75j)
    # off the axis the root with positive real part is taken
    assert decay_constant(1.0, 1.25 + 0.1j).real > 0
    with pytest.raises(ThresholdError):
        decay_constant(1.0, 1.25)
    with pytest.raises(ThresholdError):
        decay_constant(1.0, 1.0, "plus")
    assert decay_constant(1.0, 1.0, "plus", allow_threshold=True) == 0


def test_kernel_is_singular_on_the_diagonal():
    with pytest.raises(KernelSingularityError):
        free_resolvent_kernel(1.0, 0.5, np.zeros(3), np.zeros(3))


def test_kernel_inverts_the_free_dirac_pointwise():
    # (D_m - Lambda) R(., y) = 0 away from y, checked by central differences
    from solerwave.core import ALPHA, BETA

    lam, y, x = 0.4, np.zeros(3), np.array([0.7, -0.3, 0.5])
    h = 1e-4
    D = 1.0 * BETA @ free_resolvent_kernel(1.0, lam, x, y) - lam * free_resolvent_kernel(1.0, lam, x, y)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        d = (free_resolvent_kernel(1.0, lam, x + e, y) - free_resolvent_kernel(1.0, lam, x - e, y)) / (2 * h)
        D = D - 1j * ALPHA[j] @ d
    assert np.abs(D).max() < 1e-6


@pytest.mark.parametrize("lam,side", [(0.5, None), (0.9 + 0.2j, None), (1.4, "plus"), (-1.3, "minus")])
def test_3d_quadrature_matches_radial_continuum(lam, side):
    def field(pts):
        r = np.linalg.norm(pts, axis=1)
        return spinor_from_amplitudes(P_FN(r), Q_FN(r), pts, "block")

    x = np.array([0.3, -0.5, 0.8])
    u3 = kernel_apply_3d(1.0, lam, field, x, side)
    pp, qq = block_resolvent_continuum(1.0, lam, P_FN, Q_FN, np.array([np.linalg.norm(x)]), side, cut=12)
    u_rad = spinor_from_amplitudes(pp[0], qq[0], x[None], "block")[0]
    assert np.abs(u3 - u_rad).max() < 1e-5 * np.abs(u3).max()


@pytest.mark.parametrize("lam,side", [(0.5, None), (1.4, "plus")])
def test_nystrom_resolvent_inverts_the_grid_dirac(lam, side):
    model = SolerModel()
    worst = []
    for n in (200, 400, 800):
        g = RadialGrid(n, 20.0)
        v = np.concatenate([P_FN(g.rho_p), Q_FN(g.rho_q)])
        u = block_resolvent_matrix(g, 1.0, lam, side) @ v
        res = DiscreteSoler(g, model).dirac @ u - lam * u - v
        mask = (g.rho > 0.5) & (g.rho < 15)
        worst.append(np.abs(res[mask]).max())
    assert np.all(np.log2(np.array(worst[:-1]) / np.array(worst[1:])) > 1.8), worst


@pytest.fixture(scope="module")
def probe(small09):
    _, L, S = small09
    g = L.grid
    rho = np.concatenate([g.rho, g.rho])
    v = np.exp(-rho**2 / 4) * (1 + 0.5j * np.concatenate([np.ones(g.size), -np.ones(g.size)]))
    return L, S, v


def test_gap_resolvent_two_routes(probe):
    L, _, v = probe
    a = InteractingResolvent(L, 0.05).apply(v)
    b = gap_direct_solve(L, 0.05, v)
    # continuum free kernel against the finite-difference operator: O(h^2)
    assert L.norm(a - b) / L.norm(b) < 3e-2
    with pytest.raises(ValueError):
        gap_direct_solve(L, 0.5, v)


def test_resolvent_adjoint(probe, rng):
    L, _, _ = probe
    res = InteractingResolvent(L, 0.5, "plus", 1e-3)
    x = rng.normal(size=L.size) + 1j * rng.normal(size=L.size)
    y = rng.normal(size=L.size) + 1j * rng.normal(size=L.size)
    lhs = L.pair(res.apply(x), y)
    assert abs(lhs - L.pair(x, res.apply_adjoint(y))) < 1e-10 * abs(lhs)


def test_matrix_and_apply_agree(probe):
    L, _, v = probe
    res = InteractingResolvent(L, 0.3, "plus", 1e-3)
    assert np.abs(res.matrix() @ v - res.apply(v)).max() < 1e-10 * np.abs(res.apply(v)).max()


def test_boundary_value_matches_extrapolation(probe):
    L, S, v = probe
    f = spectral_projection(S, v).f
    r = resolvent_apply(L, ResolventQuery.default(L, 0.5), f)
    assert r.error < 1e-3
    assert r.agreement < 1e-5
    # the boundary value solves (H - 0.5) w = f away from the box edge
    rho = np.concatenate([L.grid.rho, L.grid.rho])
    mask = (rho > 0.5) & (rho < 12)
    assert np.abs((L.H @ r.direct - 0.5 * r.direct - f)[mask]).max() < 2e-2


def test_extrapolation_tolerance_is_enforced(probe):
    L, S, v = probe
    f = spectral_projection(S, v).f
    with pytest.raises(ExtrapolationError):
        resolvent_apply(L, ResolventQuery(0.5, "plus", (0.5, 0.3, 0.2)), f, tolerance=1e-12)


def test_query_validation():
    with pytest.raises(ValueError):
        ResolventQuery(0.5, "up")
    with pytest.raises(ValueError):
        ResolventQuery(0.5, "plus", (1e-2, 2e-2, 3e-3))


def test_lap_scan_guards_eigenvalues(probe):
    L, S, _ = probe
    with pytest.raises(EigenvalueGuardError):
        lap_bound_scan(L, S, [float(S.eigenvalues[0])])


def test_free_limits(grid200, model):
    L0 = free_operator(grid200, model, 0.9)
    v = np.exp(-np.concatenate([grid200.rho, grid200.rho]) ** 2).astype(complex)
    assert np.array_equal(wave_operator(L0, v, 10.0), v)
    assert inverse_pair_check(L0, v, None)["residual"] == 0.0
    scan = threshold_resonance_scan(L0)
    assert all(e["verdict"] == "no resonance" for e in scan.values())


def test_free_propagator_two_routes(grid200, model):
    L0 = free_operator(grid200, model, 0.9)
    prop = FreePropagator(grid200, model, 0.9)
    rho = np.concatenate([grid200.rho, grid200.rho])
    psi = (np.exp(-rho**2 / 2) * (1 + 0.2j * rho)).astype(complex)
    a = prop(psi, 3.0)
    b = spla.expm_multiply(-3j * L0.H.tocsc(), psi)
    assert L0.norm(a - b) < 1e-10 * L0.norm(psi)
    # unitary in the weighted norm
    assert L0.norm(a) == pytest.approx(L0.norm(psi), rel=1e-12)


def test_smoothing_integrals_grow_and_saturate(grid200, model):
    prop = FreePropagator(grid200, model, 0.9)
    rho = np.concatenate([grid200.rho, grid200.rho])
    psi = np.exp(-rho**2 / 2).astype(complex)
    psi[grid200.size:] = 0
    vals = smoothing_integrals(prop, psi, 1.5, [2.0, 4.0, 8.0, 12.0])
    inc = np.diff(vals)
    assert np.all(inc > 0)
    # increments shrink as the weighted norm decays
    assert inc[-1] / 4 < inc[0] / 2


def test_wave_operator_refuses_to_pass_the_reflection_time(probe):
    L, S, v = probe
    f = spectral_projection(S, v).f
    with pytest.raises(LimitNotReachedError):
        inverse_pair_check(L, f, S, T0=5.0, tol=1e-12, T_max=12.0)


def test_weighted_norm_is_weaker(probe):
    L, _, v = probe
    assert weighted_norm(L, v, 1.5) < L.norm(v)
