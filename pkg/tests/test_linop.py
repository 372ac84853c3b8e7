import numpy as np
import pytest

from solerwave.core import RadialGrid, conj_swap, pair_vectors, sigma3
from solerwave.linop import (
    DecompositionError, action_oracle, assemble_linearized,
    discrete_spectrum, embedded_eigencheck, free_operator, generalized_kernel_check, kernel_residual,
    projector_matrix, reduced_spectrum, spectral_projection, symmetry_check,
)


def test_operator_symmetries(op09, spec09):
    rep = symmetry_check(op09, spec09)
    assert rep["adjoint_residual"] < 1e-14
    assert rep["conjugation_residual"] < 1e-14
    assert rep["negation_residual"] < 1e-12
    # random block and partner data lies in the symmetry sector
    assert rep["sector_A_residual"] < 1e-12 and rep["sector_B_residual"] < 1e-12


def test_exact_wave_spans_the_kernel_chain(op09, spec09):
    rep = generalized_kernel_check(op09, spectrum=spec09, lstsq_limit=0)
    assert rep["kernel_residual"] < 1e-12
    assert rep["chain_residual"] < 1e-12
    assert rep["chain_residual_opposite_sign"] == pytest.approx(2.0, rel=1e-9)
    assert rep["zero_cluster_dimension"] == 2
    assert rep["charge_slope"] == pytest.approx(spec09.charge_slope)


def test_one_internal_mode_with_positive_signature(spec09):
    assert spec09.count == 2
    assert spec09.signatures.tolist() == [1.0]
    assert spec09.complex_eigenvalues.size == 0
    assert 0 < spec09.eigenvalues[0] < spec09.gap
    assert spec09.linearly_stable_candidate


def test_arnoldi_agrees_with_dense(op09, spec09):
    sparse = discrete_spectrum(op09, dense_limit=0)
    assert np.allclose(sparse.eigenvalues, spec09.eigenvalues, rtol=1e-10)
    assert len(sparse.zero_cluster) == 2


def test_reduced_route_agrees(op09, spec09):
    lam = np.sort(np.sqrt(np.abs(reduced_spectrum(op09))))
    # the smallest value is the zero mode; the next is the internal mode
    assert lam[0] < 1e-4
    assert lam[1] == pytest.approx(spec09.eigenvalues[0], rel=1e-9)


def test_eigenvectors_solve_the_eigenproblem(op09, spec09):
    for lam, xi in zip(spec09.eigenvalues, spec09.eigenvectors):
        assert op09.norm(op09.H @ xi - lam * xi) < 1e-10 * op09.norm(xi)
        # the partner vector belongs to -lambda
        xc = conj_swap(xi)
        assert op09.norm(op09.H @ xc + lam * xc) < 1e-10 * op09.norm(xc)


def test_spectral_window_must_sit_in_the_gap(op09):
    with pytest.raises(ValueError):
        discrete_spectrum(op09, window=(-0.5, 0.5))


def test_free_operator_has_no_gap_eigenvalues(grid200, model):
    L0 = free_operator(grid200, model, 0.9)
    assert L0.is_free
    S0 = discrete_spectrum(L0)
    assert S0.eigenvalues.size == 0


class TestProjection:
    def test_reconstruction(self, spec09, disc09, rng):
        g = disc09.grid
        rho = np.concatenate([g.rho, g.rho])
        X = (rng.normal(size=2 * g.size) + 1j * rng.normal(size=2 * g.size)) * np.exp(-rho / 3)
        for theta in (0.0, 0.8):
            d = spectral_projection(spec09, X, theta)
            assert np.abs(d.reconstruct(spec09, theta) - X).max() < 1e-12 * np.abs(X).max()

    def test_continuous_part_is_orthogonal_to_the_discrete_data(self, spec09, disc09, rng):
        g = disc09.grid
        rho = np.concatenate([g.rho, g.rho])
        X = (rng.normal(size=2 * g.size) + 1j * rng.normal(size=2 * g.size)) * np.exp(-rho / 3)
        f = spectral_projection(spec09, X).f
        phi_s3, dphi = spec09.kernel_vectors
        scale = np.sqrt(pair_vectors(g, f, f).real)
        for v in (phi_s3, dphi, *spec09.eigenvectors, *map(conj_swap, spec09.eigenvectors)):
            w = sigma3(v)
            assert abs(pair_vectors(g, f, w)) < 1e-10 * scale * np.sqrt(pair_vectors(g, w, w).real)

    def test_projector_is_idempotent_and_kills_modes(self, small09):
        _, L, S = small09
        P = projector_matrix(S)
        assert np.abs(P @ P - P).max() < 1e-10
        for v in (*S.kernel_vectors, *S.eigenvectors):
            assert L.norm(P @ v) < 1e-10 * L.norm(v)

    def test_needs_kernel_vectors(self, profile09, model, grid200):
        L = assemble_linearized(profile09, model, grid200)
        S = discrete_spectrum(L)
        with pytest.raises(DecompositionError):
            spectral_projection(S, np.ones(L.size))


def test_action_matches_pointwise_linearization(profile09, model, grid200):
    amps = {
        "p1": lambda r: np.exp(-r**2 / 4),
        "q1": lambda r: r * np.exp(-r**2 / 4),
        "p2": lambda r: (1 + 0.5 * r) * np.exp(-r**2 / 5),
        "q2": lambda r: 0.3 * r * np.exp(-r**2 / 6),
    }
    L = assemble_linearized(profile09, model, grid200)
    radii = np.concatenate([grid200.rho_p, grid200.rho_q])
    radii = radii[(radii > 1) & (radii < 5)]
    # the staggered stencils are O(h^2) accurate; h = 0.1 here
    assert action_oracle(L, profile09, amps, radii) < 2e-2


def test_sampled_wave_kernel_residual_is_discretization_error(profile09, model):
    res = [kernel_residual(assemble_linearized(profile09, model, RadialGrid(n, 30.0))) for n in (100, 200)]
    assert res[1] < res[0] / 3.5


def test_embedded_eigenvector_sits_outside_the_sector(profile09, model):
    rep = embedded_eigencheck(profile09, model)
    assert rep["relative_residual"] < 1e-6
    assert not rep["in_sector"]
    assert rep["antisymmetric_A_residual"] < 1e-12
    assert rep["embedded"]
