import json

import numpy as np
import pytest

from solerwave.core import RadialGrid
from solerwave.profile import (
    BracketError, ProfileFamily, RadialProfile, cartesian_residual, continue_family, discrete_family_member,
    find_bracket, polish_profile, profile_residual, radial_residual, shoot, solve_profile,
)


def test_profile_solves_the_radial_system(profile09, model):
    radial, cart = profile_residual(profile09, model)
    assert radial < 1e-8
    assert cart < 1e-8
    assert abs(profile09.kappa / profile09.kappa_exact - 1) < 1e-2
    assert profile09.nodeless and profile09.min_density > 0


def test_second_order_cartesian_check_sees_discretization(profile09, model):
    # the same points with a cruder difference stencil: larger but still small
    coarse = cartesian_residual(profile09, model, order=2)
    fine = cartesian_residual(profile09, model, order=4)
    assert fine < coarse < 1e-4


def test_shooting_classifies_both_sides(model):
    lo, hi = find_bracket(model, 0.9)
    assert shoot(model, 0.9, lo).tail_sign == "undershoot"
    assert shoot(model, 0.9, hi).tail_sign == "overshoot"


def test_bad_inputs(model):
    with pytest.raises(ValueError):
        solve_profile(model, 1.2)
    with pytest.raises(ValueError):
        shoot(model, 0.9, -1.0)
    lo, _ = find_bracket(model, 0.9)
    with pytest.raises(BracketError):
        solve_profile(model, 0.9, (0.5 * lo, lo))


def test_zero_field_has_zero_residual(model):
    assert profile_residual(None, model) == (0.0, 0.0)


def test_profile_serialization(profile09, model, tmp_path):
    path = tmp_path / "p.json"
    profile09.save(path)
    back = RadialProfile.load(path)
    r = np.linspace(0.0, 60.0, 301)
    assert np.array_equal(np.array(back(r)), np.array(profile09(r)))
    assert radial_residual(back, model) == pytest.approx(profile09.residual, rel=1e-12)
    data = json.loads(path.read_text())
    data["schema_version"] = -1
    with pytest.raises(ValueError):
        RadialProfile.from_dict(data)


def test_tail_continues_the_ode(profile09, model):
    # beyond the matching radius the closed-form tail must keep solving the system
    assert radial_residual(profile09, model, r_max=profile09.match_radius + 40) < 1e-8


def test_discrete_wave_converges_to_the_continuum(profile09, model):
    """Amplitudes, charge and charge slope approach the continuum at second order."""
    d = 1e-3
    qprime = (solve_profile(model, 0.9 + d).charge() - solve_profile(model, 0.9 - d).charge()) / (2 * d)
    q = profile09.charge()
    dist, dq, dslope = [], [], []
    for n in (200, 400, 800):
        g = RadialGrid(n, 40.0)
        D = polish_profile(profile09, model, g)
        assert D.residual < 1e-13
        dist.append(np.sqrt(np.sum(g.weights * (D.x - profile09.sample(g)) ** 2)))
        dq.append(abs(D.charge - q))
        dslope.append(abs(D.charge_slope - qprime))
    for errs in (dist, dq, dslope):
        order = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(order > 1.9), errs


def test_discrete_derivatives_match_neighbours(disc09, model):
    h = 1e-3
    up = discrete_family_member(disc09, model, 0.9 + h)
    down = discrete_family_member(disc09, model, 0.9 - h)
    d1 = (up.x - down.x) / (2 * h)
    d2 = (up.x - 2 * disc09.x + down.x) / h**2
    assert np.abs(d1 - disc09.dx).max() < 1e-4 * np.abs(disc09.dx).max()
    assert np.abs(d2 - disc09.d2x).max() < 1e-3 * np.abs(disc09.d2x).max()


def test_polish_needs_omega_for_array_start(disc09, model):
    with pytest.raises(ValueError):
        polish_profile(disc09.x, model, disc09.grid)


def test_family_derivative_on_uneven_grid(model, profile09):
    fam = continue_family(model, [0.896, 0.9, 0.905])
    d = 1e-3
    qprime = (solve_profile(model, 0.9 + d).charge() - solve_profile(model, 0.9 - d).charge()) / (2 * d)
    assert fam.qprime_omegas.tolist() == [0.9]
    assert fam.qprime[0] == pytest.approx(qprime, rel=1e-2)
    assert fam.member(0.9).a0 == pytest.approx(profile09.a0, rel=1e-9)
    with pytest.raises(KeyError):
        fam.member(0.91)


def test_family_rejects_unsorted_grid(model):
    with pytest.raises(ValueError):
        continue_family(model, [0.9, 0.8])


def _synthetic_family(omegas, q):
    omegas = np.asarray(omegas, dtype=float)
    q = np.asarray(q, dtype=float)
    return ProfileFamily(omegas, [None] * omegas.size, q, np.gradient(q, omegas)[1:-1])


def test_charge_minimum_between_nodes_is_reported():
    # q falls then rises; the turning point sits between the last two centred values
    fam = _synthetic_family([0.80, 0.85, 0.90, 0.95], [50.0, 48.0, 46.5, 46.6])
    v = fam.h3_verdict()
    assert v["verdict"] == "violated"
    assert v["sign_changes_near"] == [0.9]


def test_monotone_charge_holds():
    fam = _synthetic_family([0.80, 0.85, 0.90, 0.95], [50.0, 48.0, 46.5, 45.9])
    assert fam.h3_verdict()["verdict"] == "holds"


def test_flat_charge_is_flagged():
    fam = _synthetic_family([0.80, 0.85, 0.90], [50.0, 50.00001, 50.00002])
    v = fam.h3_verdict()
    assert v["verdict"] == "violated" and v["near_zero_at"] == [0.85]


def test_short_family_is_not_evaluated():
    fam = ProfileFamily(np.array([0.9]), [None], np.array([48.0]), np.zeros(0))
    assert fam.h3_verdict()["verdict"] == "not evaluated"
