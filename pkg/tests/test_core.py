import numpy as np
import pytest

from solerwave.core import (
    BlockSpinor, DiscreteSoler, DomainError, DoubledField, RadialGrid, SolerModel,
    amplitudes_from_spinor, bar_product, charge, charge_conjugate, commutation_residual, conj_swap,
    conjugate4, energy, nonlinearity_eval, pair, pair_vectors, phase_rotate, reconstruct_spinor,
    sigma1, sigma3, spinor_from_amplitudes,
)


def test_clifford_relations():
    assert commutation_residual() < 1e-15


def test_conjugation_is_an_involution(rng):
    u = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
    assert np.abs(conjugate4(conjugate4(u)) - u).max() < 1e-15


def test_bar_product_flips_sign_under_conjugation(rng):
    u = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
    assert np.abs(bar_product(conjugate4(u)) + bar_product(u)).max() < 1e-13


@pytest.mark.parametrize("model", [
    SolerModel(),
    SolerModel(kind="polynomial", coeffs=(1.0, -0.3, 0.05)),
    SolerModel(kind="table", table=((-1.0, -0.5, 0.0, 0.5, 1.0), (-1.0, -0.5, 0.0, 0.5, 1.0))),
])
def test_primitive_derivative_matches_g(model):
    s = np.linspace(-0.8, 0.8, 9)
    h = 1e-5
    fd = (model.primitive(s + h) - model.primitive(s - h)) / (2 * h)
    assert np.abs(fd - model.g(s)).max() < 1e-8
    assert abs(float(model.primitive(0.0))) < 1e-15


def test_model_validation():
    with pytest.raises(ValueError):
        SolerModel(mass=0.0)
    with pytest.raises(ValueError):
        SolerModel(kind="quartic")
    with pytest.raises(ValueError):
        SolerModel(kind="table", table=((0.0, 1.0, 2.0, 3.0), (1.0, 1.0, 2.0, 3.0)))
    with pytest.raises(ValueError):
        nonlinearity_eval(SolerModel(), float("nan"))


def test_table_domain_is_enforced():
    m = SolerModel(kind="table", table=((-1.0, -0.5, 0.0, 0.5, 1.0), (-1.0, -0.5, 0.0, 0.5, 1.0)))
    with pytest.raises(DomainError):
        m.g(2.0)


def test_model_round_trip():
    m = SolerModel(mass=2.0, kind="polynomial", coeffs=(1.0, 0.5))
    assert SolerModel.from_dict(m.to_dict()) == m


def test_grid_layout():
    g = RadialGrid(10, 5.0)
    assert g.size == 19
    assert np.allclose(g.rho_p, (np.arange(10) + 0.5) * 0.5)
    assert np.allclose(g.rho_q, (np.arange(1, 10)) * 0.5)
    # the weights integrate 4 pi rho^2 exactly on the centres
    assert abs(np.sum(g.weights[: g.n]) - 4 / 3 * np.pi * 5.0**3) / (4 / 3 * np.pi * 125) < 1e-2


def test_dirac_is_weight_symmetric_and_second_order():
    p = lambda r: np.exp(-r**2)
    q = lambda r: r * np.exp(-r**2)
    errs = []
    for n in (200, 400, 800):
        g = RadialGrid(n, 20.0)
        D = DiscreteSoler(g, SolerModel()).dirac.toarray()
        WD = np.diag(g.weights) @ D
        assert np.abs(WD - WD.T).max() < 1e-14 * np.abs(WD).max()
        y = D @ g.sample(p, q)
        # m p + q' + 2q/r and -p' - m q for the two test amplitudes
        ex_p = p(g.rho_p) + np.exp(-g.rho_p**2) * (3 - 2 * g.rho_p**2)
        ex_q = 2 * g.rho_q * np.exp(-g.rho_q**2) - q(g.rho_q)
        errs.append(np.sqrt(np.sum(g.weights * np.abs(y - np.concatenate([ex_p, ex_q])) ** 2)))
    assert np.all(np.log2(np.array(errs[:-1]) / np.array(errs[1:])) > 1.9)


def test_doubled_maps():
    v = np.arange(6) + 1j * np.arange(6)[::-1]
    assert np.allclose(sigma3(sigma3(v)), v)
    assert np.allclose(sigma1(sigma1(v)), v)
    assert np.allclose(conj_swap(conj_swap(v)), v)
    assert np.allclose(phase_rotate(phase_rotate(v, 0.3), -0.3), v)


def test_pairing_and_charge(rng):
    g = RadialGrid(20, 4.0)
    x = rng.normal(size=g.size) + 1j * rng.normal(size=g.size)
    u = BlockSpinor.from_vector(g, x)
    X = DoubledField.physical(u)
    assert X.constraint_residual() < 1e-15
    assert abs(pair(X, X) - 2 * charge(u)) < 1e-10
    assert abs(pair_vectors(g, X.vector, X.vector).imag) < 1e-12
    uc = charge_conjugate(u)
    assert uc.sector == "partner"
    assert charge_conjugate(uc).sector == "block"
    with pytest.raises(ValueError):
        u + uc


def test_energy_is_gauge_invariant(rng):
    g = RadialGrid(30, 6.0)
    x = (rng.normal(size=g.size) + 1j * rng.normal(size=g.size)) * np.exp(-g.rho)
    u = BlockSpinor.from_vector(g, x)
    e1 = energy(u, SolerModel())
    e2 = energy(BlockSpinor.from_vector(g, np.exp(0.7j) * x), SolerModel())
    assert np.allclose(e1, e2, rtol=1e-12)


def test_spinor_amplitude_round_trip(rng):
    pts = rng.normal(size=(10, 3))
    p = rng.normal(size=10) + 1j * rng.normal(size=10)
    q = rng.normal(size=10) + 1j * rng.normal(size=10)
    for sector in ("block", "partner"):
        u = spinor_from_amplitudes(p, q, pts, sector)
        pp, qq, leak = amplitudes_from_spinor(u, pts, sector)
        assert np.allclose(pp, p) and np.allclose(qq, q) and leak.max() < 1e-13


def test_block_is_mapped_to_partner_by_conjugation(rng):
    pts = rng.normal(size=(10, 3))
    p = rng.normal(size=10) + 1j * rng.normal(size=10)
    q = rng.normal(size=10) + 1j * rng.normal(size=10)
    u = spinor_from_amplitudes(p, q, pts, "block")
    assert np.abs(conjugate4(u) - spinor_from_amplitudes(np.conj(p), np.conj(q), pts, "partner")).max() < 1e-13


def test_block_field_solves_free_dirac_radially():
    # the 3D field built from smooth amplitudes is consistent with the grid Dirac
    g = RadialGrid(400, 10.0)
    u = BlockSpinor.from_functions(g, lambda r: np.exp(-r**2), lambda r: r * np.exp(-r**2))
    pts = np.array([[0.3, 0.4, 0.5], [1.0, -0.2, 0.1]])
    val = reconstruct_spinor(u, pts)
    rho = np.linalg.norm(pts, axis=1)
    want = spinor_from_amplitudes(np.exp(-rho**2), rho * np.exp(-rho**2), pts)
    assert np.abs(val - want).max() < 1e-5
    with pytest.raises(DomainError):
        reconstruct_spinor(u, np.array([20.0, 0.0, 0.0]))


@pytest.fixture(scope="module")
def setup():
    g = RadialGrid(60, 10.0)
    d = DiscreteSoler(g, SolerModel(kind="polynomial", coeffs=(1.0, -0.3, 0.05)))
    rng = np.random.default_rng(0)
    N = 2 * g.size
    draws = [rng.normal(size=N) + 1j * rng.normal(size=N) for _ in range(4)]
    return d, 0.5 * draws[0], draws[1], draws[2], draws[3]


class TestDiscreteFunctional:
    """Holomorphic derivatives of E - omega Q against central differences."""

    def test_gradient(self, setup):
        d, X0, U, _, _ = setup
        K = lambda X: d.functional(X, 0.8)
        e = 1e-4
        fd = (K(X0 + e * U) - K(X0 - e * U)) / (2 * e)
        assert abs(fd - d.gradient(X0, 0.8) @ U) / abs(fd) < 1e-7

    def test_hessian(self, setup):
        d, X0, U, V, _ = setup
        K = lambda X: d.functional(X, 0.8)
        e = 1e-4
        fd = (K(X0 + e * U + e * V) - K(X0 + e * U - e * V) - K(X0 - e * U + e * V)
              + K(X0 - e * U - e * V)) / (4 * e * e)
        H = d.hessian(X0, 0.8)
        assert abs(fd - U @ (H @ V)) / abs(fd) < 1e-6
        assert abs(H - H.T).max() < 1e-12

    def test_third_gradient(self, setup):
        d, X0, U, V, Z = setup
        e = 1e-4
        fd = V @ ((d.hessian(X0 + e * U, 0.8) - d.hessian(X0 - e * U, 0.8)) @ Z) / (2 * e)
        assert abs(fd - d.third_gradient(X0, U, V) @ Z) / abs(fd) < 1e-6

    def test_coupling_is_the_gradient_of_the_potential(self, setup):
        d, X0, U, _, _ = setup
        g = d.grid
        x = X0[: g.size]
        # on the physical slice, d E_P / d x2 = -w * gamma * (sign) * x1
        e = 1e-6
        y = np.zeros(g.size, dtype=complex)
        y[3] = 1.0
        fd = (d.potential_energy(x, np.conj(x) + e * y) - d.potential_energy(x, np.conj(x) - e * y)) / (2 * e)
        gam = d.effective_coupling(x, np.conj(x))
        assert abs(fd + g.weights[3] * gam[3] * x[3]) < 1e-8 * max(1.0, abs(fd))
