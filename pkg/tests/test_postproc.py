import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibroimpact.contact import ContactConfig
from vibroimpact.integrator import Excitation, harmonic_response, linear_steady_state, simulate
from vibroimpact.postproc import (
    SeriesError,
    TimeSeries,
    contact_activity,
    demodulate_fundamental,
    harmonic_prominence,
    impact_period_mask,
    morlet_energy_constant,
    per_period_amplitudes,
    rms,
    wavelet_spectrogram,
)
from vibroimpact.presets import twin_beam_rom

OMEGA = 2 * np.pi * 50.0
SPP = 200
DT = 2 * np.pi / OMEGA / SPP


def series(x, **meta):
    t = np.arange(len(x)) * DT
    return TimeSeries(t, {"x": np.asarray(x, float)}, {"omega": OMEGA, "dt": DT, **meta})


def t_axis(periods):
    return np.arange(periods * SPP) * DT


class TestRms:
    def test_constant(self):
        assert rms(np.full(10, -3.0)) == 3.0

    def test_sine_over_whole_periods(self):
        t = t_axis(7)
        assert rms(2.5 * np.sin(OMEGA * t + 0.3)) == pytest.approx(2.5 / np.sqrt(2), rel=1e-6)

    def test_empty(self):
        with pytest.raises(SeriesError):
            rms(np.zeros(0))

    def test_unknown_channel_is_named(self):
        with pytest.raises(SeriesError, match="v_missing"):
            rms(series(np.ones(4)), "v_missing")

    @settings(max_examples=50)
    @given(alpha=st.floats(-1e6, 1e6).filter(lambda a: a == 0 or abs(a) > 1e-100))
    def test_homogeneous(self, alpha):
        # squares of subnormal scalings underflow, so those are excluded
        u = np.sin(np.linspace(0, 9, 101)) + 0.3
        assert rms(alpha * u) == pytest.approx(abs(alpha) * rms(u), rel=1e-12, abs=1e-300)

    def test_normalized_rms_of_linear_run_matches_frf(self):
        rom = twin_beam_rom(8, clearance=1e3)
        q = 2e-5 * rom.length_scale
        exc = Excitation(0.97 * rom.omegas[1], q)
        dt = exc.period / 1000
        ts = simulate(rom, ContactConfig(), exc, None, dt,
                      linear_steady_state(rom, exc, dt), n_steps=20_000)
        U = harmonic_response(rom, exc)[rom.observer("tip_upper")]
        # tip velocity RMS over (Omega q_base) is the dimensionless FRF magnitude over sqrt 2
        assert rms(ts, "v_tip_upper") / (exc.omega * q) == pytest.approx(
            abs(U) / (np.sqrt(2) * q), rel=5e-3)


class TestPerPeriodAmplitudes:
    def test_pure_sine(self):
        x = 1.7 * np.sin(OMEGA * t_axis(10))
        lo, hi, mean = per_period_amplitudes(series(x), "x")
        np.testing.assert_allclose([lo, hi, mean], 1.7, rtol=1e-3)

    def test_modulated_signal(self):
        t = t_axis(40)
        x = (1 + 0.5 * np.sin(OMEGA * t / 10)) * np.sin(OMEGA * t)
        lo, hi, mean = per_period_amplitudes(series(x), "x")
        assert hi / lo == pytest.approx(3.0, rel=0.05)
        assert lo <= mean <= hi

    def test_too_short(self):
        with pytest.raises(SeriesError, match="two excitation periods"):
            per_period_amplitudes(series(np.ones(int(1.5 * SPP))), "x")

    @settings(max_examples=30)
    @given(amps=st.lists(st.floats(0.1, 10.0), min_size=2, max_size=8))
    def test_ordering(self, amps):
        x = np.concatenate([a * np.sin(OMEGA * t_axis(1)) for a in amps])
        lo, hi, mean = per_period_amplitudes(series(x), "x")
        assert lo <= mean <= hi
        assert (lo == hi) == (max(amps) - min(amps) < 1e-12 * max(amps)) or hi - lo < 1e-9 * hi


class TestDemodulation:
    def test_amplitude_and_phase(self):
        t = t_axis(5)
        a, phi = demodulate_fundamental(0.8 * np.sin(OMEGA * t + 0.7), omega=OMEGA, t=t)
        assert a == pytest.approx(0.8, rel=1e-6)
        assert phi == pytest.approx(0.7, abs=1e-6)

    def test_rejects_higher_harmonic(self):
        t = t_axis(5)
        a, phi = demodulate_fundamental(np.sin(OMEGA * t) + 3 * np.sin(6 * OMEGA * t),
                                        omega=OMEGA, t=t)
        assert a == pytest.approx(1.0, rel=1e-9)
        assert phi == pytest.approx(0.0, abs=1e-9)

    def test_linearity(self, rng):
        t = t_axis(6)
        u = np.sin(OMEGA * t + 0.2) + 0.1 * rng.standard_normal(t.size)
        v = 0.5 * np.cos(OMEGA * t) + 0.1 * rng.standard_normal(t.size)

        def phasor(x):
            a, p = demodulate_fundamental(x, omega=OMEGA, t=t)
            return a * np.exp(1j * p)

        assert phasor(u + v) == pytest.approx(phasor(u) + phasor(v), rel=1e-12)

    def test_base_channel_of_impacting_run(self):
        rom = twin_beam_rom(8, clearance=2.41e-3)
        q = 6e-5 * rom.length_scale
        exc = Excitation(rom.omegas[1], q)
        dt = exc.period / 1000
        ts = simulate(rom, ContactConfig(), exc, None, dt, linear_steady_state(rom, exc, dt),
                      n_steps=30_000)
        assert ts.meta["active_steps"] > 0
        a, _ = demodulate_fundamental(ts, "q_base")
        assert a == pytest.approx(q, rel=1e-9)

    def test_too_short(self):
        t = t_axis(1)[: SPP // 2]
        with pytest.raises(SeriesError):
            demodulate_fundamental(np.sin(OMEGA * t), omega=OMEGA, t=t)


class TestActivity:
    def gap_series(self, gap, g0=0.0):
        t = np.arange(gap.size) * DT
        return TimeSeries(t, {"g_0": gap, "g_1": np.zeros_like(gap)},
                          {"omega": OMEGA, "dt": DT, "pair_dim": 2, "g0": [g0]})

    def test_never_closing(self):
        st = contact_activity(self.gap_series(np.full(1000, 0.1)))
        assert st.fraction == 0 and st.impacts == 0 and st.n_clusters == 0

    def test_square_wave_clusters(self):
        # 3 clusters; each of two short closures half a quarter period apart
        gap = np.ones(40 * SPP)
        for c in (5, 17, 30):
            for k in (0, 1):
                s = c * SPP + k * SPP // 4
                gap[s : s + 10] = -0.01
        st = contact_activity(self.gap_series(gap))
        assert st.impacts == 6
        assert st.n_clusters == 3
        np.testing.assert_array_equal(st.impacts_per_cluster, [2, 2, 2])
        assert st.fraction == pytest.approx(60 / gap.size)

    def test_clearance_offset(self):
        gap = np.full(2 * SPP, -0.5)
        assert contact_activity(self.gap_series(gap, g0=1.0)).impacts == 0
        assert contact_activity(self.gap_series(gap, g0=0.5)).fraction == 1.0

    def test_no_gap_channels(self):
        with pytest.raises(SeriesError):
            contact_activity(series(np.ones(10)))

    def test_impact_period_mask(self):
        gap = np.ones(6 * SPP)
        gap[2 * SPP + 10] = -1.0
        m = impact_period_mask(self.gap_series(gap))
        assert m.sum() == SPP and m[2 * SPP : 3 * SPP].all()
        assert impact_period_mask(self.gap_series(gap), edge=SPP)[2 * SPP]


class TestSpectrogram:
    fs = 2000.0

    def test_tone_ridge(self):
        t = np.arange(4000) / self.fs
        f0 = 83.0
        spec = wavelet_spectrogram(1.5 * np.sin(2 * np.pi * f0 * t), freq_range=(20, 400),
                                   n_freqs=96, dt=1 / self.fs)
        mid = slice(1000, 3000)
        ridge = spec.frequencies[np.argmax(spec.log_magnitude[:, mid], axis=0)]
        step = spec.frequencies[1] / spec.frequencies[0]
        assert np.all(np.abs(np.log(ridge / f0)) <= np.log(step))
        # amplitude normalization: |W| = A on the ridge
        assert 10 ** spec.log_magnitude[:, mid].max(axis=0).mean() == pytest.approx(1.5, rel=0.01)

    def test_chirp_ridge_is_monotone(self):
        t = np.arange(8000) / self.fs
        f_start, f_end = 30.0, 300.0
        phase = 2 * np.pi * (f_start * t + 0.5 * (f_end - f_start) / t[-1] * t**2)
        spec = wavelet_spectrogram(np.sin(phase), freq_range=(10, 500), n_freqs=80,
                                   dt=1 / self.fs)
        ridge = spec.frequencies[np.argmax(spec.log_magnitude, axis=0)][500:-500:50]
        assert np.all(np.diff(ridge) >= 0)
        assert ridge[-1] > 5 * ridge[0]

    def test_energy_normalization(self, rng):
        t = np.arange(16000) / self.fs
        x = sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in
                zip(rng.uniform(0.5, 2, 5), [60, 90, 130, 170, 210], rng.uniform(0, 6, 5)))
        spec = wavelet_spectrogram(x, freq_range=(5, 900), n_freqs=300, dt=1 / self.fs)
        dlnf = np.log(spec.frequencies[1] / spec.frequencies[0])
        energy = np.sum(10 ** (2 * spec.log_magnitude)) * dlnf / self.fs
        expected = morlet_energy_constant() * np.sum((x - x.mean()) ** 2) / self.fs
        assert energy == pytest.approx(expected, rel=0.02)

    def test_energy_scales_quadratically(self):
        t = np.arange(4000) / self.fs
        x = np.sin(2 * np.pi * 100 * t)
        a = wavelet_spectrogram(x, freq_range=(20, 400), n_freqs=50, dt=1 / self.fs)
        b = wavelet_spectrogram(3 * x, freq_range=(20, 400), n_freqs=50, dt=1 / self.fs)
        ratio = np.sum(10 ** (2 * b.log_magnitude)) / np.sum(10 ** (2 * a.log_magnitude))
        assert ratio == pytest.approx(9.0, rel=1e-10)

    def test_above_nyquist(self):
        with pytest.raises(SeriesError, match="Nyquist"):
            wavelet_spectrogram(np.zeros(100), freq_range=(10, 1500), dt=1 / self.fs)

    def test_harmonic_prominence(self):
        t = np.arange(8000) / self.fs
        rng = np.random.default_rng(0)
        x = np.sin(2 * np.pi * 50 * t) + 0.2 * np.sin(2 * np.pi * 300 * t)
        x += 1e-3 * rng.standard_normal(t.size)
        spec = wavelet_spectrogram(x, freq_range=(20, 900), n_freqs=80, dt=1 / self.fs)
        assert harmonic_prominence(spec, 300.0) > 10.0
        mask = np.zeros(t.size, bool)
        with pytest.raises(SeriesError):
            harmonic_prominence(spec, 300.0, mask)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ts = TimeSeries(np.arange(5) * 0.1, {"a": np.arange(5) / 3.0, "b": -np.ones(5)},
                        {"omega": 1.0, "note": "x"})
        ts.save(tmp_path / "s")
        back = TimeSeries.load(tmp_path / "s")
        np.testing.assert_array_equal(back.t, ts.t)
        np.testing.assert_array_equal(back["a"], ts["a"])
        assert back.meta == ts.meta

    def test_channel_length_mismatch(self):
        with pytest.raises(SeriesError, match="samples"):
            TimeSeries(np.arange(3), {"a": np.zeros(4)})
