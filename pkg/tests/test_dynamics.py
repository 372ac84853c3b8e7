import csv

import numpy as np
import pytest

from solerwave.core import BlockSpinor, RadialGrid, SolerModel, charge, conj_swap, pair_vectors
from solerwave.dynamics import (
    DiscreteFamily, EvolutionOptions, EvolutionState, ModulationError, ModulationTrack, Stepper, absorbing_profile,
    ansatz, classify_track, conservation_report, evolve, extract_modes, modulate, perturbed_initial, step,
)
from solerwave.linop import spectral_projection
from solerwave.profile import discrete_family_member
from solerwave.resolvent import FreePropagator

LINEAR = SolerModel(kind="polynomial", coeffs=(0.0,))


def test_options_validation():
    with pytest.raises(ValueError):
        EvolutionOptions(boundary="open")
    with pytest.raises(ValueError):
        EvolutionOptions(order=3)
    with pytest.raises(ValueError):
        EvolutionOptions(layer=1.5)


def test_absorbing_profile_vanishes_inside():
    g = RadialGrid(100, 10.0)
    gam = absorbing_profile(g, EvolutionOptions(boundary="absorbing"))
    assert np.all(gam[g.rho < 8.0] == 0) and gam.max() > 0
    assert not absorbing_profile(g, EvolutionOptions()).any()


@pytest.fixture(scope="module")
def data(small09, model):
    disc = small09[0]
    rng = np.random.default_rng(1)
    x0 = disc.x * (1 + 0.05 * rng.normal(size=disc.grid.size)) + 0j
    return disc, Stepper(disc.grid, model, EvolutionOptions(dt=0.05)), x0


@pytest.fixture(scope="module")
def family(disc09, model):
    return DiscreteFamily(disc09, model)


class TestStepper:
    def test_time_reversible(self, data):
        _, st, x0 = data
        x = x0.copy()
        for _ in range(100):
            x = st.advance(x, 0.05)
        for _ in range(100):
            x = st.advance(x, -0.05)
        assert np.abs(x - x0).max() < 1e-12

    def test_gauge_covariant(self, data):
        _, st, x0 = data
        a, b = x0.copy(), np.exp(0.7j) * x0
        for _ in range(100):
            a, b = st.advance(a, 0.05), st.advance(b, 0.05)
        assert np.abs(b - np.exp(0.7j) * a).max() < 1e-12

    def test_charge_conserved_without_absorption(self, data):
        disc, st, x0 = data
        g = disc.grid
        x = x0.copy()
        for _ in range(200):
            x = st.advance(x, 0.05)
        q0 = charge(BlockSpinor.from_vector(g, x0))
        assert abs(charge(BlockSpinor.from_vector(g, x)) / q0 - 1) < 1e-12

    def test_step_wrapper(self, data, model):
        disc, st, x0 = data
        s0 = EvolutionState(BlockSpinor.from_vector(disc.grid, x0), 0.0, st.options)
        s1 = step(s0, model=model)
        assert s1.t == pytest.approx(0.05)
        assert np.array_equal(s1.u.vector, st.advance(x0, 0.05))
        with pytest.raises(ValueError):
            step(s0)


def test_linear_flow_matches_exact_propagator():
    g = RadialGrid(200, 20.0)
    psi = g.sample(lambda r: np.exp(-r**2 / 2), lambda r: 0.3 * r * np.exp(-r**2 / 2)).astype(complex)
    # exact e^{-i t D} from the eigen-decomposition, omega = 0
    prop = FreePropagator(g, LINEAR, 0.0)
    T = 4.0
    exact = prop(np.concatenate([psi, np.zeros_like(psi)]), T)[: g.size]
    errs = []
    for dt in (0.2, 0.1):
        st = Stepper(g, LINEAR, EvolutionOptions(dt=dt))
        x = psi.copy()
        for _ in range(int(round(T / dt))):
            x = st.advance(x, dt)
        errs.append(np.sqrt(np.sum(g.weights * np.abs(x - exact) ** 2)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.05)


def _pulse_reflection(boundary):
    R, h, dt = 30.0, 0.2, 0.1
    g, big = RadialGrid(int(R / h), R), RadialGrid(int(5 * R / h), 5 * R)

    def init(grid):
        p = np.exp(-(grid.rho_p - 10) ** 2 / 8) * np.exp(2j * grid.rho_p)
        return np.concatenate([p, np.zeros(grid.n - 1)])

    x, xb = init(g), init(big)
    sa = Stepper(g, LINEAR, EvolutionOptions(dt=dt, boundary=boundary))
    sb = Stepper(big, LINEAR, EvolutionOptions(dt=dt))
    nrm = np.sqrt(np.sum(g.weights * np.abs(x) ** 2))
    inner = g.rho < 0.8 * R
    worst = 0.0
    for k in range(1, int(4 * R / dt) + 1):
        x, xb = sa.advance(x, dt), sb.advance(xb, dt)
        if k % 50 == 0:
            pa, qa = g.split(x)
            pb, qb = big.split(xb)
            diff = np.concatenate([pa - pb[: g.n], qa - qb[: g.n - 1]])
            worst = max(worst, np.sqrt(np.sum((g.weights * np.abs(diff) ** 2)[inner])) / nrm)
    return worst


def test_absorbing_layer_suppresses_reflection():
    assert _pulse_reflection("absorbing") < 0.05
    assert _pulse_reflection("reflecting") > 0.3


def test_standing_wave_rotates_at_fourth_order(small09, model):
    disc = small09[0]
    g, om = disc.grid, disc.omega
    errs = []
    for dt in (0.05, 0.025):
        st = Stepper(g, model, EvolutionOptions(dt=dt, order=4))
        x = disc.x + 0j
        n = int(round(10 * 2 * np.pi / om / dt))
        for _ in range(n):
            x = st.advance(x, dt)
        diff = x - np.exp(-1j * om * n * dt) * disc.x
        errs.append(np.sqrt(np.sum(g.weights * np.abs(diff) ** 2) / np.sum(g.weights * disc.x**2)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(4.0, abs=0.2)


class TestModulation:
    @pytest.mark.parametrize("omega,theta", [(0.9, 0.3), (0.88, -2.0), (0.93, 1.1)])
    def test_round_trip(self, family, disc09, model, omega, theta):
        x = disc09.x if omega == 0.9 else discrete_family_member(disc09, model, omega).x
        u = BlockSpinor.from_vector(disc09.grid, np.exp(1j * theta) * x)
        r = modulate(u, family, 0.9, theta + 0.05)
        assert abs(r.omega - omega) < 1e-12 and abs(r.theta - theta) < 1e-12
        assert np.abs(r.R).max() < 1e-10

    def test_ansatz_inverts_modulation(self, family, disc09):
        u = ansatz(family, 0.9, 0.4)
        r = modulate(u, family, 0.9, 0.3)
        assert abs(r.theta - 0.4) < 1e-12

    def test_orthogonality_on_perturbed_data(self, family, disc09, spec09, rng):
        g = disc09.grid
        rho = np.concatenate([g.rho, g.rho])
        X = (rng.normal(size=2 * g.size) + 1j * rng.normal(size=2 * g.size)) * np.exp(-rho / 3)
        f = spectral_projection(spec09, X + conj_swap(X)).f
        f *= np.sqrt(pair_vectors(g, disc09.doubled, disc09.doubled).real / pair_vectors(g, f, f).real)
        u = BlockSpinor.from_vector(g, np.exp(0.4j) * (disc09.x + 1e-3 * f[: g.size]))
        r = modulate(u, family, 0.9, 0.4)
        assert max(r.orthogonality) < 1e-10
        assert abs(r.omega - 0.9) < 1e-4

    def test_far_data_is_rejected(self, family, disc09):
        u = BlockSpinor.from_vector(disc09.grid, 3.0 * disc09.x + 0j)
        with pytest.raises(ModulationError):
            modulate(u, family, 0.9, 0.0)

    def test_mode_extraction(self, spec09):
        xi = spec09.eigenvectors[0]
        z, f = extract_modes(xi, spec09)
        assert abs(z[0] - 1) < 1e-12 and np.abs(f).max() < 1e-10 * np.abs(xi).max()

    def test_mode_perturbation_is_seen(self, family, disc09, spec09):
        u = perturbed_initial(disc09, spec09, "mode", 1e-2)
        r = modulate(u, family, 0.9, 0.0)
        z, _ = extract_modes(r.R, spec09)
        assert abs(abs(z[0]) - 1e-2) < 1e-3

    def test_unknown_perturbation(self, disc09, spec09):
        with pytest.raises(ValueError):
            perturbed_initial(disc09, spec09, "kick", 1e-2)


class TestClassification:
    t = np.linspace(0.0, 100.0, 201)

    def test_decay(self):
        y = 1e-2 * np.exp(-self.t / 50)
        rep = classify_track(self.t, y, 0.1 * y, 0.9 + 0 * self.t)
        assert rep["verdict"] == "consistent with asymptotic stability"

    def test_growth(self):
        y = 1e-2 * np.exp(self.t / 50)
        rep = classify_track(self.t, y, y, 0.9 + 0 * self.t)
        assert rep["verdict"] == "inconsistent"

    def test_flat_is_inconclusive(self):
        rng = np.random.default_rng(4)
        y = 1e-2 * (1 + 1e-3 * rng.normal(size=self.t.size))
        rep = classify_track(self.t, y, y, 0.9 + 0 * self.t)
        assert rep["verdict"] == "inconclusive"

    def test_wandering_frequency_is_inconclusive(self):
        y = 1e-2 * np.exp(-self.t / 50)
        rep = classify_track(self.t, y, y, 0.9 + 1e-3 * np.sin(self.t))
        assert not rep["omega_settled"] and rep["verdict"] == "inconclusive"

    def test_lost_modulation(self):
        valid = np.ones(self.t.size, dtype=bool)
        valid[-1] = False
        rep = classify_track(self.t, self.t, self.t, self.t, valid)
        assert rep["verdict"] == "inconsistent"


def test_evolve_records_a_track(small09, model, tmp_path):
    disc, _, S = small09
    opt = EvolutionOptions(dt=0.05, order=2, stride=10)
    u0 = perturbed_initial(disc, S, "mode", 1e-2)
    out = evolve(u0, 2.0, opt, model, DiscreteFamily(disc, model), S, 0.9)
    a = out.track.arrays()
    assert a["t"].tolist() == pytest.approx([0.0, 0.5, 1.0, 1.5, 2.0])
    assert a["valid"].all()
    # theta runs backwards at rate omega
    assert a["theta"][-1] == pytest.approx(-0.9 * 2.0, abs=1e-2)
    rep = conservation_report(out.track)
    assert rep["charge_drift"] < 1e-12
    path = tmp_path / "track.csv"
    out.track.to_csv(path, {"seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed: 0"
    rows = list(csv.reader(lines[1:]))
    assert rows[0][:4] == ["t", "omega", "theta", "abs_z0"]
    assert len(rows) == 6
    with pytest.raises(ValueError):
        evolve(u0, 2.01, opt, model)


def test_conservation_report_flags_growth():
    track = ModulationTrack(charge=[1.0, 1.0, 1.1], energy=[2.0, 2.0, 2.0])
    rep = conservation_report(track)
    assert rep["charge_drift"] == pytest.approx(0.1)
    assert not rep["charge_monotone_decreasing"]
