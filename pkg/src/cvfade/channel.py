"""Fading loss channels: transmission histograms, a beam-wander generator, and
moment propagation through loss, detector efficiency and excess noise."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator
from scipy.special import i0e

NOISE_AT = ("receiver", "sender")


@dataclass(frozen=True)
class ChannelParams:
    efficiency: float = 1.0
    excess_noise: float = 0.0
    monitor_tap: float = 0.0
    noise_at: str = "receiver"

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if self.excess_noise < 0:
            raise ValueError("excess noise must be >= 0")
        if not 0 <= self.monitor_tap < 0.04:
            raise ValueError("monitor tap must be in [0, 0.04)")
        if self.noise_at not in NOISE_AT:
            raise ValueError(f"noise_at must be one of {NOISE_AT}")


def propagate(amplitude: complex, variance: float, transmission: float, params: ChannelParams) -> tuple[complex, float]:
    """Coherent amplitude and quadrature variance (SNU) after loss and noise.

    With ``noise_at='receiver'``: V' = 1 + T eta (V - 1) + eps.
    With ``noise_at='sender'``:   V' = 1 + T eta (V - 1 + eps).
    """
    if not 0 <= transmission <= 1:
        raise ValueError(f"transmission {transmission} outside [0, 1]")
    if variance < 1 - 1e-9:
        raise ValueError(f"variance {variance} below the vacuum level")
    g = transmission * params.efficiency
    amp = math.sqrt(g) * complex(amplitude)
    eps = params.excess_noise
    if params.noise_at == "receiver":
        var = 1 + g * (variance - 1) + eps
    else:
        var = 1 + g * (variance - 1 + eps)
    return amp, var


# ---------------------------------------------------------------------------
# histograms


@dataclass(frozen=True)
class TransmissionHistogram:
    """Binned transmission distribution.

    Bin ``i`` covers [edges[i], edges[i+1]). ``probabilities`` are the
    unfiltered relative frequencies; ``retained`` marks bins with at least
    ``min_count`` samples. ``bin_means`` are the sample means inside each bin.
    """

    bin_edges: np.ndarray
    counts: np.ndarray
    probabilities: np.ndarray
    bin_means: np.ndarray
    retained: np.ndarray
    min_count: int = 0

    def __post_init__(self):
        e = np.asarray(self.bin_edges, dtype=float)
        if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        for name in ("counts", "probabilities", "bin_means", "retained"):
            if len(getattr(self, name)) != len(e) - 1:
                raise ValueError(f"{name} has wrong length")
        for name in ("bin_edges", "counts", "probabilities", "bin_means", "retained"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def retained_mass(self) -> float:
        return float(self.probabilities[self.retained].sum())

    @property
    def mean(self) -> float:
        """Unfiltered mean transmission (equals the sample mean)."""
        occupied = self.counts > 0
        return float(np.sum(self.probabilities[occupied] * self.bin_means[occupied]))

    def bin_index(self, t) -> np.ndarray:
        """Bin index per value, -1 when outside every bin."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.bin_edges, t, side="right") - 1
        last = len(self.bin_edges) - 2
        idx = np.where(t == self.bin_edges[-1], last, idx)
        return np.where((idx < 0) | (idx > last), -1, idx)

    def retained_bins(self) -> np.ndarray:
        return np.flatnonzero(self.retained)

    def with_min_count(self, min_count: int) -> "TransmissionHistogram":
        return TransmissionHistogram(
            self.bin_edges, self.counts, self.probabilities, self.bin_means, self.counts >= min_count, min_count
        )


def _grid_edges(lo: float, hi: float, width: float) -> np.ndarray:
    k0 = math.floor(lo / width)
    while k0 * width > lo:
        k0 -= 1
    k1 = math.floor(hi / width) + 1
    while k1 * width <= hi:
        k1 += 1
    # rounded so that CSV edges read 0.756 rather than 0.7559999999999999
    edges = np.round(np.arange(k0, k1 + 1) * width, 12)
    if edges[-1] > 1.0:
        # keep edges inside [0, 1]; a value of exactly 1 falls in the last bin
        if edges[-2] >= 1.0 and len(edges) > 2:
            edges = edges[:-1]
        else:
            edges[-1] = 1.0
    if len(edges) < 2 or edges[-1] <= edges[-2]:
        # all samples at exactly 1: a single bin ending at 1
        edges = np.array([1.0 - width, 1.0])
    return edges


class HistogramBuilder:
    """Streaming histogram on the grid of integer multiples of ``bin_width``.

    Counts and per-bin sums are accumulated on the full [0, 1] grid, then
    trimmed to the occupied range, so the result does not depend on how the
    samples were chunked (up to the summation order of the bin means).
    """

    def __init__(self, bin_width: float):
        if bin_width <= 0:
            raise ValueError("bin width must be positive")
        self.bin_width = float(bin_width)
        self.edges = _grid_edges(0.0, 1.0, self.bin_width)
        nb = len(self.edges) - 1
        self.counts = np.zeros(nb, dtype=np.int64)
        self.sums = np.zeros(nb)
        self.lo, self.hi = math.inf, -math.inf

    def add(self, samples) -> None:
        t = np.asarray(samples, dtype=float).reshape(-1)
        if t.size == 0:
            return
        if t.min() < 0 or t.max() > 1:
            raise ValueError("transmission samples must lie in [0, 1]")
        nb = len(self.counts)
        idx = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, nb - 1)
        self.counts += np.bincount(idx, minlength=nb)
        self.sums += np.bincount(idx, weights=t, minlength=nb)
        self.lo, self.hi = min(self.lo, float(t.min())), max(self.hi, float(t.max()))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def build(self, min_count: int = 0, target_mass: float | None = None) -> "TransmissionHistogram":
        """Histogram over the occupied range; ``target_mass`` tunes ``min_count``."""
        if self.total == 0:
            raise ValueError("no transmission samples")
        occ = np.flatnonzero(self.counts)
        i0, i1 = occ[0], occ[-1] + 1
        edges = self.edges[i0 : i1 + 1]
        counts = self.counts[i0:i1]
        sums = self.sums[i0:i1]
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.5 * (edges[:-1] + edges[1:]))
        probs = counts / self.total
        hist = TransmissionHistogram(edges, counts, probs, means, counts >= min_count, int(min_count))
        if target_mass is not None:
            hist = hist.with_min_count(tune_min_count(hist, target_mass))
        return hist


def empirical_histogram(samples: Sequence[float], bin_width: float, min_count: int = 0) -> TransmissionHistogram:
    """Histogram on the grid of integer multiples of ``bin_width``."""
    t = np.asarray(samples, dtype=float)
    if t.size == 0:
        raise ValueError("no transmission samples")
    builder = HistogramBuilder(bin_width)
    builder.add(t)
    return builder.build(min_count)


def tune_min_count(hist: TransmissionHistogram, target_mass: float) -> int:
    """Count threshold whose retained mass is closest to ``target_mass``.

    Ties go to the larger retained mass.
    """
    if not 0 < target_mass <= 1:
        raise ValueError("target mass must be in (0, 1]")
    best, best_err = 0, math.inf
    for c in np.unique(hist.counts[hist.counts > 0]):
        err = abs(hist.probabilities[hist.counts >= c].sum() - target_mass)
        if err < best_err - 1e-15:
            best, best_err = int(c), err
    return best


def read_transmissions(path) -> np.ndarray:
    """One transmission value per line; '#' comments and blank lines ignored."""
    vals = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            vals.append(float(line))
    return np.array(vals)


def write_histogram(hist: TransmissionHistogram, path, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines.append("bin_lo,bin_hi,count,prob,t_mean,retained")
    for i in range(hist.n_bins):
        lines.append(
            f"{float(hist.bin_edges[i])!r},{float(hist.bin_edges[i + 1])!r},{int(hist.counts[i])},"
            f"{float(hist.probabilities[i])!r},{float(hist.bin_means[i])!r},{int(hist.retained[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_histogram(path) -> TransmissionHistogram:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not rows or not rows[0].startswith("bin_lo"):
        raise ValueError(f"{path}: missing histogram header")
    data = [r.split(",") for r in rows[1:]]
    lo = [float(r[0]) for r in data]
    edges = np.array(lo + [float(data[-1][1])])
    counts = np.array([int(r[2]) for r in data])
    retained = np.array([bool(int(r[5])) for r in data])
    kept = counts[retained]
    return TransmissionHistogram(
        edges,
        counts,
        np.array([float(r[3]) for r in data]),
        np.array([float(r[4]) for r in data]),
        retained,
        int(kept.min()) if kept.size else 0,
    )


# ---------------------------------------------------------------------------
# beam wander


@dataclass(frozen=True)
class BeamGeometry:
    """Gaussian beam (1/e^2 intensity radius) on a hard circular aperture,
    with an isotropic Gaussian wander of its centre (per-axis std ``jitter_sigma``)."""

    beam_radius: float
    aperture_radius: float
    jitter_sigma: float

    def __post_init__(self):
        if self.beam_radius <= 0 or self.aperture_radius <= 0 or self.jitter_sigma < 0:
            raise ValueError("beam and aperture radii must be positive, jitter nonnegative")


class IntegrationError(RuntimeError):
    pass


def beam_wander_transmission(geometry: BeamGeometry, offset: float, tol: float = 1e-10) -> float:
    """Power fraction inside the aperture for a beam displaced by ``offset``.

    The angular integral of the displaced Gaussian is done in closed form
    (modified Bessel I0); the radial one numerically.
    """
    if offset < 0:
        raise ValueError("offset must be >= 0")
    w, a, r = geometry.beam_radius, geometry.aperture_radius, float(offset)
    k = 4.0 / (w * w)

    def integrand(rho):
        # exp(-2 (rho^2 + r^2)/w^2) I0(4 rho r / w^2), rescaled to avoid overflow
        return k * rho * math.exp(-2.0 * (rho - r) ** 2 / (w * w)) * i0e(k * rho * r)

    pts = [min(max(r, 0.0), a)] if 0 < r < a else None
    val, err = integrate.quad(integrand, 0.0, a, points=pts, epsabs=tol, epsrel=tol, limit=200)
    if err > 1e3 * tol:
        raise IntegrationError(f"radial integral did not converge (error estimate {err:.1e})")
    return float(min(max(val, 0.0), 1.0))


@lru_cache(maxsize=16)
def _transmission_table(geometry: BeamGeometry, n: int = 801) -> tuple[float, PchipInterpolator]:
    """Monotone interpolant of T(r) on [0, r_max]; beyond r_max T is taken as T(r_max)."""
    r_max = geometry.aperture_radius + 4.0 * geometry.beam_radius + 9.0 * geometry.jitter_sigma
    r = np.linspace(0.0, r_max, n)
    t = np.array([beam_wander_transmission(geometry, x) for x in r])
    t = np.minimum.accumulate(t)
    return r_max, PchipInterpolator(r, t, extrapolate=False)


def transmissions_from_offsets(geometry: BeamGeometry, offsets: np.ndarray) -> np.ndarray:
    r_max, table = _transmission_table(geometry)
    r = np.minimum(np.asarray(offsets, dtype=float), r_max)
    return np.clip(table(r), 0.0, 1.0)


def sample_transmissions(geometry: BeamGeometry, n: int, seed) -> np.ndarray:
    """Transmissions for ``n`` random beam-centre offsets (deterministic per seed)."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if geometry.jitter_sigma == 0:
        return np.full(n, beam_wander_transmission(geometry, 0.0))
    xy = rng.normal(0.0, geometry.jitter_sigma, size=(n, 2))
    return transmissions_from_offsets(geometry, np.hypot(xy[:, 0], xy[:, 1]))


def expected_transmission(geometry: BeamGeometry) -> float:
    """E[T] over the Rayleigh-distributed offset, by quadrature."""
    s = geometry.jitter_sigma
    if s == 0:
        return beam_wander_transmission(geometry, 0.0)

    def f(r):
        return beam_wander_transmission(geometry, r) * r / (s * s) * math.exp(-r * r / (2 * s * s))

    val, _ = integrate.quad(f, 0.0, 12 * s, limit=200)
    return float(val)
