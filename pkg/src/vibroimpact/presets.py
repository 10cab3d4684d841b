"""Default parameters of the twin-beam study and a one-call ROM factory."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .modal import damping_matrix
from .model import ElasticLayer, TwinBeamSpec, attach_elastic_layers, build_twin_beam_model
from .rom import ReducedModel, boundary_transform, macneal_reduce

# Flap-wise modes of the planar model in ascending order: 1st bending lower
# and upper beam, 2nd bending lower and upper beam; the last value fills
# every higher mode.
DAMPING_RATIOS = (0.00153, 0.00183, 0.00186, 0.00143)

N_MODES = 12
STEPS_PER_PERIOD = 1000
MU = 0.4

# base displacement levels and clearances in units of the beam length
LEVELS = (0.5e-5, 0.8e-5, 2e-5, 6e-5)
CLEARANCE = 2.33e-3
# (level, direction, clearance) in the order the tests are run
TEST_SEQUENCE = (
    (2e-5, "down", 2.33e-3),
    (2e-5, "up", 2.33e-3),
    (6e-5, "up", 2.41e-3),
    (6e-5, "down", 2.78e-3),
)
FREQ_BAND = (0.95, 1.10)
FREQ_STEP = 0.005


def frequency_grid(band=FREQ_BAND, step=FREQ_STEP) -> np.ndarray:
    n = int(round((band[1] - band[0]) / step))
    return np.round(band[0] + step * np.arange(n + 1), 10)


def twin_beam_rom(n_modes: int = N_MODES, spec: TwinBeamSpec | None = None,
                  damping=DAMPING_RATIOS, clearance: float = CLEARANCE) -> ReducedModel:
    """Reduced twin-beam model with modal damping and clearance ``clearance * length``."""
    spec = spec or TwinBeamSpec()
    tm = boundary_transform(build_twin_beam_model(spec))
    rom = macneal_reduce(tm, n_modes)
    D = np.diag(damping_matrix(rom.omegas, damping))
    rom = replace(rom.with_damping(D), length_scale=spec.length)
    return rom.with_clearance(clearance * spec.length)


def elastic_root_model(log10_k, spec: TwinBeamSpec | None = None):
    """Twin beam held by grounded spring layers instead of a rigid clamp.

    ``log10_k = (lower, upper)`` are the base-10 logarithms of the normal
    stiffness (N/m) of the layers that ground the first two nodes of the
    lower and upper beam; two springs per beam restrain both the root
    translation and rotation.
    """
    spec = replace(spec or TwinBeamSpec(), clamped=False)
    model = build_twin_beam_model(spec)
    nn = spec.n_elements + 1
    k_lower, k_upper = (10.0 ** float(v) for v in log10_k)
    layers = [
        ElasticLayer(pairs=((0, None), (1, None)), k_n=k_lower, k_t=k_lower),
        ElasticLayer(pairs=((nn, None), (nn + 1, None)), k_n=k_upper, k_t=k_upper),
    ]
    return attach_elastic_layers(model, layers)
