"""
Derived quantities of simulated time series.

RMS values, per-period zero-to-peak amplitudes, synchronous
demodulation of the fundamental harmonic, contact-activity statistics
and a Morlet wavelet spectrogram.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TimeSeries",
    "SeriesError",
    "rms",
    "per_period_amplitudes",
    "demodulate_fundamental",
    "ActivityStats",
    "contact_activity",
    "Spectrogram",
    "wavelet_spectrogram",
    "morlet_frequencies",
    "morlet_energy_constant",
    "harmonic_prominence",
    "period_peaks",
    "cluster_mask",
    "impact_period_mask",
]

MORLET_W0 = 6.0
CSV_FORMAT = "%.17g"


class SeriesError(ValueError):
    pass


@dataclass
class TimeSeries:
    """Uniformly sampled named channels.

    ``t`` holds the sample times; every channel has the same length.
    ``meta`` carries run parameters (``dt``, ``omega``, ``amplitude``,
    ``stride``, ...). ``final_state`` is set by the integrator and not
    persisted.
    """

    t: np.ndarray
    channels: dict
    meta: dict = field(default_factory=dict)
    final_state: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        for name, ch in self.channels.items():
            if len(ch) != len(self.t):
                raise SeriesError(f"channel {name!r} has {len(ch)} samples, expected {len(self.t)}")

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.channels[name]
        except KeyError:
            raise SeriesError(
                f"unknown channel {name!r}; available: {', '.join(self.channels)}"
            ) from None

    def __len__(self):
        return len(self.t)

    @property
    def dt(self) -> float:
        if len(self.t) > 1:
            return float(self.t[1] - self.t[0])
        return float(self.meta["dt"]) * int(self.meta.get("stride", 1))

    @property
    def gap_channels(self) -> list[str]:
        d = int(self.meta.get("pair_dim", 1))
        names = sorted((c for c in self.channels if c.startswith("g_")),
                       key=lambda c: int(c[2:]))
        return names[0::d]

    def tail(self, n: int) -> "TimeSeries":
        return TimeSeries(self.t[-n:], {k: v[-n:] for k, v in self.channels.items()},
                          dict(self.meta), self.final_state)

    def to_csv(self, path) -> None:
        names = list(self.channels)
        data = np.column_stack([self.t] + [np.asarray(self.channels[n], float) for n in names])
        np.savetxt(path, data, delimiter=",", header=",".join(["t"] + names), comments="",
                   fmt=CSV_FORMAT)

    def save(self, path) -> None:
        """``<path>.csv`` plus ``<path>.json`` holding ``meta``."""
        path = Path(path)
        self.to_csv(path.with_suffix(".csv"))
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TimeSeries":
        path = Path(path)
        csv = path.with_suffix(".csv")
        header = csv.read_text().split("\n", 1)[0].split(",")
        if not header or header[0] != "t":
            raise SeriesError(f"{csv}: first column must be 't'")
        data = np.loadtxt(csv, delimiter=",", skiprows=1, ndmin=2)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(data[:, 0], {n: data[:, i + 1] for i, n in enumerate(header[1:])}, meta)


def _channel(series, channel) -> np.ndarray:
    if isinstance(series, TimeSeries):
        return np.asarray(series[channel], dtype=float)
    return np.asarray(series, dtype=float)


def rms(series, channel: str | None = None) -> float:
    x = _channel(series, channel)
    if x.size == 0:
        raise SeriesError("empty series")
    return float(np.sqrt(np.mean(x**2)))


def _period_slices(n: int, samples_per_period: float):
    """Index ranges of complete periods, anchored at the first sample."""
    n_per = int(np.floor(n / samples_per_period + 1e-9))
    edges = np.round(np.arange(n_per + 1) * samples_per_period).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def per_period_amplitudes(series, channel: str | None = None, omega: float | None = None,
                          dt: float | None = None) -> tuple[float, float, float]:
    """Min, max and mean over excitation periods of the per-period peak ``|x|``.

    Periods start at the first sample (runs start at zero excitation
    phase); a trailing partial period is dropped.
    """
    x = _channel(series, channel)
    if isinstance(series, TimeSeries):
        omega = omega or series.meta["omega"]
        dt = dt or series.dt
    spp = 2 * np.pi / omega / dt
    slices = _period_slices(x.size, spp)
    if len(slices) < 2:
        raise SeriesError("need at least two excitation periods")
    peaks = np.array([np.abs(x[s]).max() for s in slices])
    return float(peaks.min()), float(peaks.max()), float(peaks.mean())


def period_peaks(series, channel: str, omega=None, dt=None) -> np.ndarray:
    x = _channel(series, channel)
    if isinstance(series, TimeSeries):
        omega = omega or series.meta["omega"]
        dt = dt or series.dt
    return np.array([np.abs(x[s]).max() for s in _period_slices(x.size, 2 * np.pi / omega / dt)])


def demodulate_fundamental(series, channel: str | None = None, omega: float | None = None,
                           t: np.ndarray | None = None) -> tuple[float, float]:
    """Amplitude and phase of the component at ``omega``.

    Projects the signal onto ``sin`` and ``cos`` over the largest whole
    number of periods, so that ``A sin(omega t + phi)`` returns
    ``(A, phi)``.
    """
    x = _channel(series, channel)
    if isinstance(series, TimeSeries):
        omega = omega or series.meta["omega"]
        t = series.t if t is None else t
        if channel is not None and channel.startswith("v_"):
            t = t + series.meta.get("velocity_shift", 0.0)
    t = np.asarray(t, dtype=float)
    dt = t[1] - t[0]
    spp = 2 * np.pi / omega / dt
    n_per = int(np.floor(x.size / spp + 1e-9))
    if n_per < 1:
        raise SeriesError("need at least one excitation period")
    n = int(round(n_per * spp))
    xs, ts = x[:n], t[:n]
    a = 2.0 / n * np.sum(xs * np.sin(omega * ts))
    b = 2.0 / n * np.sum(xs * np.cos(omega * ts))
    return float(np.hypot(a, b)), float(np.arctan2(b, a))


@dataclass
class ActivityStats:
    active: np.ndarray
    fraction: float
    clusters: list  # (start index, stop index, impacts in cluster)
    impacts: int

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def impacts_per_cluster(self) -> np.ndarray:
        return np.array([c[2] for c in self.clusters], dtype=int)


def contact_activity(series: TimeSeries, period: float | None = None) -> ActivityStats:
    """Contact is active when any pair's physical gap is closed.

    An impact is a maximal run of active samples. Impacts separated by
    less than half an excitation period of inactivity form one cluster.
    """
    names = series.gap_channels
    if not names:
        raise SeriesError("series has no gap channels")
    g0 = np.asarray(series.meta.get("g0", [0.0] * len(names)), dtype=float)
    gaps = np.column_stack([series[n] for n in names]) + g0
    scale = max(float(series.meta.get("length_scale", 1.0)), 1e-300)
    active = np.any(gaps <= 1e-9 * scale, axis=1)
    period = period or 2 * np.pi / series.meta["omega"]
    max_quiet = 0.5 * period / series.dt
    runs = _runs(active)
    clusters = []
    for start, stop in runs:
        if clusters and start - clusters[-1][1] <= max_quiet:
            a, _, n = clusters[-1]
            clusters[-1] = (a, stop, n + 1)
        else:
            clusters.append((start, stop, 1))
    return ActivityStats(active=active, fraction=float(active.mean()) if active.size else 0.0,
                         clusters=clusters, impacts=len(runs))


def cluster_mask(stats: ActivityStats) -> np.ndarray:
    """Boolean mask of the samples inside impact clusters (first to last contact)."""
    m = np.zeros(stats.active.size, dtype=bool)
    for a, b, _ in stats.clusters:
        m[a:b] = True
    return m


def impact_period_mask(series: TimeSeries, edge: int = 0) -> np.ndarray:
    """Samples lying in excitation periods that contain any contact.

    Periods are anchored at the first sample; a trailing partial period
    counts as one period. ``edge`` samples at both ends are excluded,
    which keeps wavelet end effects out of averages.
    """
    active = contact_activity(series).active
    spp = 2 * np.pi / series.meta["omega"] / series.dt
    mask = np.zeros(active.size, dtype=bool)
    edges = np.round(np.arange(0, active.size / spp + 1) * spp).astype(int)
    for a, b in zip(edges[:-1], edges[1:]):
        if active[a:b].any():
            mask[a:b] = True
    if edge:
        mask[:edge] = False
        mask[max(active.size - edge, 0):] = False
    return mask


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    d = np.diff(m.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


@dataclass
class Spectrogram:
    t: np.ndarray
    frequencies: np.ndarray
    log_magnitude: np.ndarray  # (n_freqs, n_times), log10 |W|

    def save(self, stem) -> None:
        stem = Path(stem)
        np.savetxt(stem.with_name(stem.name + "_map.csv"), self.log_magnitude, delimiter=",",
                   fmt=CSV_FORMAT)
        np.savetxt(stem.with_name(stem.name + "_t.csv"), self.t, fmt=CSV_FORMAT)
        np.savetxt(stem.with_name(stem.name + "_f.csv"), self.frequencies, fmt=CSV_FORMAT)


def morlet_frequencies(f_min: float, f_max: float, n: int) -> np.ndarray:
    return np.geomspace(f_min, f_max, n)


def wavelet_spectrogram(series, channel: str | None = None, freq_range=None,
                        n_freqs: int = 64, dt: float | None = None,
                        w0: float = MORLET_W0) -> Spectrogram:
    """Continuous wavelet transform with an analytic Morlet wavelet.

    Evaluated in the frequency domain. At analysis frequency ``f`` the
    scale is ``s = w0 / (2 pi f)`` and the filter is
    ``2 exp(-(s w - w0)^2 / 2)`` for ``w > 0`` (zero otherwise), so a
    sinusoid of amplitude ``A`` at ``f`` yields ``|W| = A`` on its ridge.
    The signal mean is removed first. Returns ``log10 |W|`` on a
    log-spaced grid of ``n_freqs`` frequencies spanning ``freq_range``.

    With this normalization ``sum_f |W(f, t)|^2 dln(f)`` integrates over
    time to ``MORLET_ENERGY(w0) * sum x^2 dt`` for signals inside the band.
    """
    x = _channel(series, channel)
    if isinstance(series, TimeSeries):
        dt = dt or series.dt
        t = series.t
    else:
        t = np.arange(x.size) * dt
    if freq_range is None:
        raise SeriesError("freq_range is required")
    f_min, f_max = map(float, freq_range)
    if not 0 < f_min < f_max:
        raise SeriesError("invalid frequency range")
    nyquist = 0.5 / dt
    if f_max > nyquist:
        raise SeriesError(f"f_max {f_max:g} Hz above Nyquist {nyquist:g} Hz")
    freqs = morlet_frequencies(f_min, f_max, n_freqs)
    n = x.size
    nfft = 1 << int(np.ceil(np.log2(2 * n)))  # zero padding against wrap-around
    X = np.fft.fft(x - x.mean(), nfft)
    w = 2 * np.pi * np.fft.fftfreq(nfft, dt)
    pos = w > 0
    out = np.empty((n_freqs, n))
    for i, f in enumerate(freqs):
        s = w0 / (2 * np.pi * f)
        psi = np.zeros(nfft)
        psi[pos] = 2.0 * np.exp(-0.5 * (s * w[pos] - w0) ** 2)
        W = np.fft.ifft(X * psi)[:n]
        out[i] = np.log10(np.abs(W) + 1e-300)
    return Spectrogram(t=np.asarray(t, dtype=float), frequencies=freqs, log_magnitude=out)


def morlet_energy_constant(w0: float = MORLET_W0) -> float:
    """``1/2 int_0^inf |psi_hat(u)|^2 du / u`` for the filter of :func:`wavelet_spectrogram`."""
    from scipy.integrate import quad

    val, _ = quad(lambda u: 4.0 * np.exp(-((u - w0) ** 2)) / u, 1e-12, w0 + 40, limit=200,
                  points=[w0])
    return 0.5 * val


def harmonic_prominence(spec: Spectrogram, f_line: float, mask=None) -> float:
    """Mean level of ``f_line`` above the broadband floor, in dB.

    At each instant the floor is the median of ``log10 |W|`` over the
    frequency axis; the line level is read at the grid bin closest to
    ``f_line``. The difference ``20 (log10|W_line| - floor)`` is averaged
    over the instants selected by ``mask`` (all by default).
    """
    i = int(np.argmin(np.abs(np.log(spec.frequencies / f_line))))
    diff = spec.log_magnitude[i] - np.median(spec.log_magnitude, axis=0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise SeriesError("empty selection")
        diff = diff[mask]
    return float(20.0 * diff.mean())
