"""Strongly modulated response at the second fundamental.

Settles the impacting system at ``Omega = w2`` and reports the impact
clusters, the per-period amplitude spread and the level of the sixth
harmonic in the wavelet spectrogram during impact periods.

    python3 demos/03_modulated_response.py
"""

import numpy as np

from vibroimpact.contact import ContactConfig
from vibroimpact.integrator import Excitation, linear_steady_state, simulate
from vibroimpact.postproc import (
    contact_activity,
    harmonic_prominence,
    impact_period_mask,
    per_period_amplitudes,
    wavelet_spectrogram,
)
from vibroimpact.presets import twin_beam_rom

rom = twin_beam_rom(12, clearance=2.41e-3)
cc = ContactConfig()
exc = Excitation(rom.omegas[1], 6e-5 * rom.length_scale)
spp = 1000
dt = exc.period / spp

s = linear_steady_state(rom, exc, dt, cc)
s = simulate(rom, cc, exc, None, dt, s, n_steps=200 * spp, stride=spp).final_state
ts = simulate(rom, cc, exc, None, dt, s, n_steps=150 * spp, stride=10)

act = contact_activity(ts)
lo, hi, mean = per_period_amplitudes(ts, "v_tip_upper")
quiet = [b[0] - a[1] for a, b in zip(act.clusters[:-1], act.clusters[1:])]
print(f"{act.impacts} impacts in {act.n_clusters} clusters over 150 periods")
print(f"impacts per cluster: {np.bincount(act.impacts_per_cluster)[1:]} (1, 2, ...)")
print(f"longest contact-free phase: {max(quiet) / 100:.1f} periods")
print(f"per-period velocity amplitude: min {lo:.4f}, mean {mean:.4f}, max {hi:.4f} m/s "
      f"(max/min {hi / lo:.2f})")

f0 = exc.omega / (2 * np.pi)
spec = wavelet_spectrogram(ts, "v_tip_upper", (0.5 * f0, 10 * f0), 128)
mask = impact_period_mask(ts, edge=500)
print(f"sixth harmonic above the broadband floor in impact periods: "
      f"{harmonic_prominence(spec, 6 * f0, mask):.1f} dB")
