from dataclasses import replace

import numpy as np
import pytest

from vibroimpact.contact import ContactConfig
from vibroimpact.integrator import (
    Excitation,
    IntegrationError,
    IntegratorState,
    base_acceleration,
    base_displacement,
    harmonic_response,
    initial_state,
    linear_steady_state,
    modal_energy,
    simulate,
    stable_time_step,
    step,
)
from vibroimpact.postproc import contact_activity, demodulate_fundamental
from vibroimpact.presets import twin_beam_rom

CC = ContactConfig()
OPEN = 1e3  # clearance that is never closed, in beam lengths


@pytest.fixture(scope="module")
def rom_open():
    return twin_beam_rom(12, clearance=OPEN)


@pytest.fixture(scope="module")
def rom_impact():
    return twin_beam_rom(12, clearance=2.41e-3)


def condensed_leapfrog_step(rom, exc, dt, t, eta, etad):
    """Reference: one leapfrog step of the g-condensed modal equations, trapezoidal damping."""
    Kc = rom.K_etaeta - rom.K_geta.T @ np.linalg.solve(rom.K_gg, rom.K_geta)
    qdd = -exc.amplitude * exc.omega**2 * np.sin(exc.omega * t + exc.phase)
    rhs = Kc @ eta + rom.beta * qdd
    etad = ((1 / dt - rom.D / 2) * etad - rhs) / (1 / dt + rom.D / 2)
    return eta + dt * etad, etad


class TestExcitation:
    def test_zero_level(self):
        exc = Excitation(10.0, 0.0)
        assert not np.any(base_acceleration(exc, np.linspace(0, 3, 50)))

    def test_extremum(self):
        exc = Excitation(5.0, 0.2, phase=0.3)
        t = (np.pi / 2 - 0.3) / 5.0
        assert base_acceleration(exc, t) == pytest.approx(-25.0 * 0.2, rel=1e-14)

    def test_second_difference_is_second_order(self):
        exc = Excitation(7.0, 0.01, phase=0.4)
        t = 0.37
        errs = []
        for h in (1e-2, 5e-3, 2.5e-3):
            fd = (base_displacement(exc, t + h) - 2 * base_displacement(exc, t)
                  + base_displacement(exc, t - h)) / h**2
            errs.append(abs(fd - base_acceleration(exc, t)))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        np.testing.assert_allclose(ratios, 4.0, rtol=0.01)

    @pytest.mark.parametrize("omega,amp", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.1)])
    def test_invalid(self, omega, amp):
        with pytest.raises(ValueError):
            Excitation(omega, amp)


class TestStep:
    def test_zero_excitation_from_rest(self, rom_impact):
        exc = Excitation(rom_impact.omegas[1], 0.0)
        ts = simulate(rom_impact, CC, exc, None, exc.period / 200, n_steps=600)
        for name, ch in ts.channels.items():
            if name != "iterations":
                assert not np.any(ch), name

    def test_matches_independent_leapfrog(self, rom_open):
        exc = Excitation(1.01 * rom_open.omegas[1], 6e-5 * rom_open.length_scale)
        dt = exc.period / 1000
        s = linear_steady_state(rom_open, exc, dt, CC)
        eta, etad = s.eta, s.eta_dot
        scale = np.abs(s.eta).max()
        for j in range(3000):
            ref_eta, ref_etad = condensed_leapfrog_step(rom_open, exc, dt, s.t, s.eta, s.eta_dot)
            eta, etad = condensed_leapfrog_step(rom_open, exc, dt, s.t, eta, etad)
            s = step(s, rom_open, CC, exc, dt)
            assert np.abs(s.eta - ref_eta).max() <= 1e-12 * scale, j
            np.testing.assert_allclose(s.g, -np.linalg.solve(rom_open.K_gg,
                                                             rom_open.K_geta @ s.eta),
                                       rtol=0, atol=1e-12 * np.abs(s.g).max())
        # independently propagated trajectory stays on top of the integrator's
        assert np.abs(s.eta - eta).max() <= 1e-10 * scale
        assert s.j == 3000 and s.t == pytest.approx(3000 * dt)
        np.testing.assert_array_equal(s.lam, 0.0)

    def test_simulate_agrees_with_step(self, rom_impact):
        exc = Excitation(rom_impact.omegas[1], 6e-5 * rom_impact.length_scale)
        dt = exc.period / 1000
        s = linear_steady_state(rom_impact, exc, dt, CC)
        ts = simulate(rom_impact, CC, exc, None, dt, s, n_steps=2000)
        for _ in range(2000):
            s = step(s, rom_impact, CC, exc, dt)
        # step() accumulates t while simulate() uses t0 + j dt; otherwise the same arithmetic
        np.testing.assert_allclose(ts.final_state.eta, s.eta, rtol=1e-9)
        np.testing.assert_allclose(ts.final_state.g, s.g, rtol=1e-9)

    def test_time_reversibility(self, rom_open):
        rom = rom_open.with_damping(np.zeros(rom_open.n_modes))
        exc = Excitation(rom.omegas[1], 0.0)
        dt = 2 * np.pi / rom.omegas[1] / 500
        rng = np.random.default_rng(4)
        eta0 = 1e-4 * rng.standard_normal(rom.n_modes)
        s0 = IntegratorState(g=-np.linalg.solve(rom.K_gg, rom.K_geta @ eta0),
                             lam=np.zeros(rom.n_boundary), eta=eta0,
                             eta_dot=1e-2 * rng.standard_normal(rom.n_modes))
        N = 5000
        s = s0
        for _ in range(N):
            s = step(s, rom, CC, exc, dt)
        nxt = step(s, rom, CC, exc, dt)
        # reversed state: same displacement, negated velocity at the next half step
        b = replace(s, eta_dot=-nxt.eta_dot)
        for _ in range(N):
            b = step(b, rom, CC, exc, dt)
        np.testing.assert_allclose(b.eta, s0.eta, rtol=0, atol=1e-9 * np.abs(eta0).max())

    def test_linear_regime_matches_frf(self, rom_open):
        exc = Excitation(1.03 * rom_open.omegas[1], 2e-5 * rom_open.length_scale)
        dt = exc.period / 1000
        s0 = linear_steady_state(rom_open, exc, dt, CC)
        ts = simulate(rom_open, CC, exc, None, dt, s0, n_steps=20 * 1000)
        U = harmonic_response(rom_open, exc)
        for i, name in enumerate(rom_open.observer_names):
            amp, _ = demodulate_fundamental(ts, f"u_{name}")
            assert amp == pytest.approx(abs(U[i]), rel=5e-3)

    def test_impacts_come_in_clusters(self, rom_impact):
        exc = Excitation(rom_impact.omegas[1], 6e-5 * rom_impact.length_scale)
        dt = exc.period / 1000
        s = linear_steady_state(rom_impact, exc, dt, CC)
        s = simulate(rom_impact, CC, exc, None, dt, s, n_steps=200_000, stride=1000).final_state
        ts = simulate(rom_impact, CC, exc, None, dt, s, n_steps=150_000, stride=10)
        st = contact_activity(ts)
        quiet = np.array([b[0] - a[1] for a, b in zip(st.clusters[:-1], st.clusters[1:])])
        spp = 100
        assert st.n_clusters >= 5
        assert st.impacts_per_cluster.max() >= 2  # consecutive impacts
        assert quiet.max() >= 3 * spp  # contact-free phases lasting several periods
        assert 0 < st.fraction < 0.1

    def test_contact_laws_hold_over_impacting_run(self, rom_impact):
        exc = Excitation(rom_impact.omegas[1], 6e-5 * rom_impact.length_scale)
        dt = exc.period / 1000
        s = linear_steady_state(rom_impact, exc, dt, CC)
        ts = simulate(rom_impact, CC, exc, None, dt, s, n_steps=100_000)
        inv = ts.meta["invariants"]
        assert ts.meta["active_steps"] > 0
        assert inv["min_lambda_n"] >= -1e-9
        assert inv["min_gap"] >= -1e-9 * rom_impact.length_scale
        assert inv["max_friction_excess"] <= 0.0

    def test_energy_balance_residual_vanishes(self):
        rom = twin_beam_rom(8, clearance=2.33e-3)
        exc = Excitation(rom.omegas[1], 6e-5 * rom.length_scale)
        Kr = rom.stiffness()

        def energy(s, v):
            y = np.concatenate([s.g, s.eta])
            return 0.5 * v @ v + 0.5 * y @ Kr @ y

        residuals = []
        for spp in (500, 1000, 2000, 4000):
            dt = exc.period / spp
            states = [linear_steady_state(rom, exc, dt, CC)]
            for _ in range(6 * spp + 1):
                states.append(step(states[-1], rom, CC, exc, dt))
            work = damping = contact = 0.0
            for a, b in zip(states[:-2], states[1:-1]):
                vh = b.eta_dot  # velocity on [t_a, t_b]
                qdd = 0.5 * (base_acceleration(exc, a.t) + base_acceleration(exc, b.t))
                work -= (rom.beta @ vh) * qdd * dt
                damping += vh @ (rom.D * vh) * dt
                contact += 0.5 * (a.lam + b.lam) @ (b.g - a.g)
            e0 = energy(states[0], 0.5 * (states[0].eta_dot + states[1].eta_dot))
            e1 = energy(states[-2], 0.5 * (states[-2].eta_dot + states[-1].eta_dot))
            e_max = max(modal_energy(rom, s.g, s.eta, s.eta_dot) for s in states[::50])
            assert sum(np.any(s.lam) for s in states) > 0
            residuals.append(abs(e1 - e0 - work + damping - contact) / e_max)
        ratios = np.array(residuals[:-1]) / np.array(residuals[1:])
        assert np.all(ratios >= 2.0), residuals

    def test_non_finite_state_is_fatal(self, rom_open):
        s = initial_state(rom_open)
        bad = replace(s, eta=np.full(rom_open.n_modes, np.nan))
        with pytest.raises(IntegrationError, match="non-finite"):
            step(bad, rom_open, CC, Excitation(1.0, 0.0), 1e-5)

    def test_unstable_step_diverges_to_error(self, rom_open):
        exc = Excitation(rom_open.omegas[1], 1e-5 * rom_open.length_scale)
        dt = 3 * stable_time_step(rom_open)
        with pytest.raises(IntegrationError, match="non-finite"):
            simulate(rom_open, CC, exc, None, dt, n_steps=100_000)

    def test_stability_limit(self, rom_open):
        assert stable_time_step(rom_open) <= 2 / rom_open.omegas.max()
