"""Build the twin-beam model, reduce it and check the open-contact response.

Prints the retained free-interface frequencies, the static check of the
reduced model and a short linear stepped sine next to the analytic FRF.

    python3 demos/01_reduce_and_linear_frf.py
"""

import numpy as np

from vibroimpact.contact import ContactConfig
from vibroimpact.harness import SweepPlan, stepped_sine
from vibroimpact.integrator import Excitation, harmonic_response
from vibroimpact.model import build_twin_beam_model
from vibroimpact.presets import twin_beam_rom
from vibroimpact.rom import boundary_transform, macneal_reduce, static_check

model = build_twin_beam_model()
tm = boundary_transform(model)
print(f"FE model: {model.n_dofs} DOFs, {tm.n_pairs} contact pair(s)")

rep = static_check(tm, macneal_reduce(tm, 12))
print(f"static check: worst boundary error {rep['max_boundary_rel_error']:.1e}")

rom = twin_beam_rom(12)
f = rom.frequencies
print("free-interface frequencies (Hz):", np.array2string(f[:6], precision=2))
print(f"f2/f1 = {f[1] / f[0]:.4f}, f3/f2 = {f[2] / f[1]:.3f}")

# a base level far below the clearance keeps the contact open
L = rom.length_scale
plan = SweepPlan.from_grid([0.97, 0.99, 1.0, 1.01, 1.03], "up", level=0.5e-5 * L,
                           clearance=2.33e-3 * L, wait_periods=800, record_periods=50,
                           stride=10)
res = stepped_sine(rom, ContactConfig(), plan, keep_series=False)
i = rom.observer("tip_upper")
print("\nOmega/w2   RMS v (sim)   RMS v (FRF)   deviation")
for s in res.steps:
    U = harmonic_response(rom, Excitation(s.omega, plan.level))[i]
    ref = s.omega * abs(U) / np.sqrt(2)
    print(f"{s.ratio:8.3f}   {s.rms['v_tip_upper']:.5e}   {ref:.5e}   "
          f"{100 * (s.rms['v_tip_upper'] / ref - 1):+.3f} %")
