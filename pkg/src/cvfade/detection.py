"""Heterodyne measurement records: simulation, ingestion, shot-noise
normalization, transmission binning and Q-function estimation.

Outcome convention: a heterodyne outcome pair (x, p) of a coherent state
|alpha> has mean (2 Re alpha, 2 Im alpha) and variance 2 per quadrature, so a
vacuum reference has variance 2 SNU and a state variance is recovered as
Var(outcome) - 1.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .alphabet import Alphabet
from .certify import StateMoments
from .channel import (
    BeamGeometry,
    ChannelParams,
    TransmissionHistogram,
    transmissions_from_offsets,
)

log = logging.getLogger(__name__)

RECORD_HEADER = "k,signal_x,signal_p,vacuum_x,vacuum_p,monitor_T"
MOMENTS_HEADER = "bin_lo,bin_hi,prob,state,mean_x,mean_p,var_x,var_p,n,se_mean,se_var"
# records are folded in blocks aligned to the slot index, so every path
# through the pipeline performs identical floating-point operations
BLOCK = 65536


class CoverageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SlotRecord:
    state_label: int
    signal_x: float
    signal_p: float
    vacuum_x: float
    vacuum_p: float
    monitor_T: float

    def __post_init__(self):
        if not 0 <= self.monitor_T <= 1:
            raise ValueError(f"monitor_T {self.monitor_T} outside [0, 1]")
        if self.state_label < 0:
            raise ValueError("negative state label")


@dataclass
class RecordSet:
    """Columnar slot records. ``signal`` and ``vacuum`` are (n, 2) arrays."""

    labels: np.ndarray
    signal: np.ndarray
    vacuum: np.ndarray
    monitor_T: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.labels)
        self.signal = np.asarray(self.signal, dtype=float).reshape(n, 2)
        self.vacuum = np.asarray(self.vacuum, dtype=float).reshape(n, 2)
        self.monitor_T = np.asarray(self.monitor_T, dtype=float).reshape(n)
        if n and (self.monitor_T.min() < 0 or self.monitor_T.max() > 1):
            raise ValueError("monitor_T outside [0, 1]")
        if n and self.labels.min() < 0:
            raise ValueError("negative state label")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx) -> "RecordSet":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return RecordSet(self.labels[idx], self.signal[idx], self.vacuum[idx], self.monitor_T[idx])

    def __iter__(self) -> Iterator[SlotRecord]:
        for i in range(len(self)):
            yield SlotRecord(
                int(self.labels[i]),
                float(self.signal[i, 0]),
                float(self.signal[i, 1]),
                float(self.vacuum[i, 0]),
                float(self.vacuum[i, 1]),
                float(self.monitor_T[i]),
            )

    def scaled(self, factor: float) -> "RecordSet":
        """Same records with every raw outcome multiplied by ``factor``."""
        return RecordSet(self.labels, self.signal * factor, self.vacuum * factor, self.monitor_T)

    @classmethod
    def from_records(cls, records: Iterable[SlotRecord]) -> "RecordSet":
        rows = [(r.state_label, r.signal_x, r.signal_p, r.vacuum_x, r.vacuum_p, r.monitor_T) for r in records]
        if not rows:
            return cls.empty()
        a = np.array(rows, dtype=float)
        return cls(a[:, 0].astype(np.int64), a[:, 1:3], a[:, 3:5], a[:, 5])

    @classmethod
    def empty(cls) -> "RecordSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def concat(cls, parts: Sequence["RecordSet"]) -> "RecordSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.signal for p in parts]),
            np.concatenate([p.vacuum for p in parts]),
            np.concatenate([p.monitor_T for p in parts]),
        )


# ---------------------------------------------------------------------------
# simulation


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(block,)))


def _draw_transmissions(source, rng: np.random.Generator, start: int, n: int) -> np.ndarray:
    if isinstance(source, BeamGeometry):
        if source.jitter_sigma == 0:
            return transmissions_from_offsets(source, np.zeros(n))
        xy = rng.normal(0.0, source.jitter_sigma, size=(n, 2))
        return transmissions_from_offsets(source, np.hypot(xy[:, 0], xy[:, 1]))
    if isinstance(source, TransmissionHistogram):
        p = source.probabilities / source.probabilities.sum()
        b = rng.choice(len(p), size=n, p=p)
        lo, hi = source.bin_edges[b], source.bin_edges[b + 1]
        return np.minimum(lo + rng.random(n) * (hi - lo), 1.0)
    t = np.asarray(source, dtype=float)
    if t.ndim == 0:
        return np.full(n, float(t))
    return t[start : start + n]


def simulate_blocks(
    alphabet: Alphabet,
    transmissions,
    params: ChannelParams,
    n_slots: int,
    seed: int,
    raw_scale: float = 1.0,
    lo_tracks_channel: bool = True,
) -> Iterator[RecordSet]:
    """Yield simulated records in consecutive blocks of ``BLOCK`` slots.

    ``transmissions`` is a ``BeamGeometry``, a ``TransmissionHistogram``, a
    scalar, or an explicit per-slot array of at least ``n_slots`` values. When
    ``lo_tracks_channel`` is set the local oscillator shares the channel, so
    the raw outcome scale goes as sqrt(T). The random stream of block ``b``
    depends only on (seed, b), so ``raw_scale`` multiplies otherwise identical
    draws.
    """
    if n_slots <= 0:
        raise ValueError("n_slots must be positive")
    if raw_scale <= 0:
        raise ValueError("raw_scale must be positive")
    arr = None
    if not isinstance(transmissions, (BeamGeometry, TransmissionHistogram)):
        arr = np.asarray(transmissions, dtype=float)
        if arr.ndim == 1 and len(arr) < n_slots:
            raise ValueError(f"{len(arr)} transmissions for {n_slots} slots")
    amps = np.asarray(alphabet.amplitudes, dtype=complex)
    priors = np.asarray(alphabet.priors, dtype=float)
    g_eff = params.efficiency
    for b, start in enumerate(range(0, n_slots, BLOCK)):
        n = min(BLOCK, n_slots - start)
        rng = _block_rng(seed, b)
        t = _draw_transmissions(transmissions if arr is None else arr, rng, start, n)
        if np.any((t < 0) | (t > 1)):
            raise ValueError("transmission outside [0, 1]")
        labels = rng.choice(len(amps), size=n, p=priors)
        z = rng.standard_normal((n, 4))
        g = t * g_eff
        amp = np.sqrt(g) * amps[labels]
        if params.noise_at == "receiver":
            var = 1.0 + params.excess_noise
        else:
            var = 1.0 + g * params.excess_noise
        sd = np.sqrt(var + 1.0)
        sig = np.column_stack([2 * amp.real + sd * z[:, 0], 2 * amp.imag + sd * z[:, 1]])
        vac = math.sqrt(2.0) * z[:, 2:4]
        scale = raw_scale * (np.sqrt(t) if lo_tracks_channel else np.ones(n))
        yield RecordSet(labels, sig * scale[:, None], vac * scale[:, None], t)


def simulate_records(
    alphabet: Alphabet,
    transmissions,
    params: ChannelParams,
    n_slots: int,
    seed: int,
    raw_scale: float = 1.0,
    lo_tracks_channel: bool = True,
) -> RecordSet:
    """All simulated records at once; see ``simulate_blocks``."""
    return RecordSet.concat(
        list(simulate_blocks(alphabet, transmissions, params, n_slots, seed, raw_scale, lo_tracks_channel))
    )


# ---------------------------------------------------------------------------
# record files


def format_record_lines(records: RecordSet) -> list[str]:
    out = []
    for k, (sx, sp), (vx, vp), t in zip(records.labels, records.signal, records.vacuum, records.monitor_T):
        out.append(f"{int(k)},{float(sx)!r},{float(sp)!r},{float(vx)!r},{float(vp)!r},{float(t)!r}")
    return out


def write_records(blocks: RecordSet | Iterable[RecordSet], path, header: Sequence[str] = ()) -> int:
    """Write records (a set or an iterable of blocks); returns the slot count."""
    if isinstance(blocks, RecordSet):
        blocks = [blocks]
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        fh.write(f"# {RECORD_HEADER}\n")
        for blk in blocks:
            fh.write("\n".join(format_record_lines(blk)))
            if len(blk):
                fh.write("\n")
            n += len(blk)
    return n


@dataclass
class IngestStats:
    lines: int = 0
    records: int = 0
    skipped: int = 0
    first_bad: list = field(default_factory=list)


def _parse_line(line: str):
    parts = line.split(",")
    if len(parts) != 6:
        return None
    try:
        k = int(parts[0])
        vals = [float(x) for x in parts[1:]]
    except ValueError:
        return None
    if k < 0 or not all(math.isfinite(v) for v in vals) or not 0 <= vals[4] <= 1:
        return None
    return k, vals


def iter_record_file(path, stats: IngestStats | None = None, chunk: int = BLOCK) -> Iterator[RecordSet]:
    """Stream a record file in chunks. Unparseable lines are counted and skipped."""
    stats = stats if stats is not None else IngestStats()
    labels: list[int] = []
    rows: list[list[float]] = []

    def flush():
        a = np.array(rows, dtype=float).reshape(-1, 5)
        blk = RecordSet(np.array(labels, dtype=np.int64), a[:, 0:2], a[:, 2:4], a[:, 4])
        labels.clear()
        rows.clear()
        return blk

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            stats.lines += 1
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parsed = _parse_line(line)
            if parsed is None:
                stats.skipped += 1
                if len(stats.first_bad) < 5:
                    stats.first_bad.append(lineno)
                continue
            labels.append(parsed[0])
            rows.append(parsed[1])
            stats.records += 1
            if len(labels) == chunk:
                yield flush()
    if labels:
        yield flush()
    if stats.skipped:
        log.warning("%s: skipped %d unparseable lines (first at %s)", path, stats.skipped, stats.first_bad)


def read_records(path) -> tuple[RecordSet, IngestStats]:
    stats = IngestStats()
    recs = RecordSet.concat(list(iter_record_file(path, stats)))
    return recs, stats


def _rechunk(blocks: Iterable[RecordSet], size: int = BLOCK) -> Iterator[RecordSet]:
    """Re-slice a block stream into consecutive pieces of exactly ``size``."""
    pending: list[RecordSet] = []
    held = 0
    for blk in blocks:
        pending.append(blk)
        held += len(blk)
        while held >= size:
            merged = RecordSet.concat(pending)
            yield merged[:size]
            rest = merged[size:]
            pending = [rest] if len(rest) else []
            held = len(rest)
    if held:
        yield RecordSet.concat(pending)


# ---------------------------------------------------------------------------
# streaming moments


@dataclass
class _Moments:
    """Count, means and centred second moments for a group of 2-vectors."""

    n: np.ndarray
    mean: np.ndarray  # (..., 2)
    m2: np.ndarray  # (..., 2) sums of squared deviations
    cxy: np.ndarray  # (...,) sum of cross deviations

    @classmethod
    def zeros(cls, shape) -> "_Moments":
        shape = tuple(shape)
        return cls(np.zeros(shape), np.zeros(shape + (2,)), np.zeros(shape + (2,)), np.zeros(shape))

    @classmethod
    def from_groups(cls, group: np.ndarray, values: np.ndarray, n_groups: int) -> "_Moments":
        n = np.bincount(group, minlength=n_groups).astype(float)
        safe = np.maximum(n, 1.0)
        mean = np.column_stack([np.bincount(group, weights=values[:, j], minlength=n_groups) / safe for j in (0, 1)])
        d = values - mean[group]
        m2 = np.column_stack([np.bincount(group, weights=d[:, j] ** 2, minlength=n_groups) for j in (0, 1)])
        cxy = np.bincount(group, weights=d[:, 0] * d[:, 1], minlength=n_groups)
        return cls(n, mean, m2, cxy)

    def merge(self, other: "_Moments") -> "_Moments":
        """Pairwise (Chan et al.) combination."""
        n = self.n + other.n
        safe = np.maximum(n, 1.0)
        delta = other.mean - self.mean
        w = (self.n * other.n / safe)[..., None]
        mean = self.mean + delta * (other.n / safe)[..., None]
        m2 = self.m2 + other.m2 + delta**2 * w
        cxy = self.cxy + other.cxy + delta[..., 0] * delta[..., 1] * w[..., 0]
        return _Moments(n, mean, m2, cxy)

    def variance(self) -> np.ndarray:
        return self.m2 / np.maximum(self.n - 1, 1)[..., None]

    def covariance(self) -> np.ndarray:
        return self.cxy / np.maximum(self.n - 1, 1)


@dataclass
class MomentAccumulator:
    """Per-(bin, state) signal and per-bin vacuum statistics of raw outcomes."""

    histogram: TransmissionHistogram
    n_states: int
    signal: _Moments = None
    vacuum: _Moments = None
    t_sum: np.ndarray = None
    out_of_range: int = 0
    bad_label: int = 0

    def __post_init__(self):
        nb = self.histogram.n_bins
        self.signal = _Moments.zeros((nb, self.n_states))
        self.vacuum = _Moments.zeros((nb,))
        self.t_sum = np.zeros(nb)

    def add(self, block: RecordSet) -> None:
        nb, ns = self.histogram.n_bins, self.n_states
        idx = self.histogram.bin_index(block.monitor_T)
        ok_label = block.labels < ns
        self.bad_label += int(np.count_nonzero(~ok_label))
        inside = idx >= 0
        self.out_of_range += int(np.count_nonzero(~inside & ok_label))
        keep = inside & ok_label
        b, k = idx[keep], block.labels[keep]
        sig = _Moments.from_groups(b * ns + k, block.signal[keep], nb * ns)
        sig = _Moments(sig.n.reshape(nb, ns), sig.mean.reshape(nb, ns, 2), sig.m2.reshape(nb, ns, 2), sig.cxy.reshape(nb, ns))
        self.signal = self.signal.merge(sig)
        self.vacuum = self.vacuum.merge(_Moments.from_groups(b, block.vacuum[keep], nb))
        self.t_sum += np.bincount(b, weights=block.monitor_T[keep], minlength=nb)

    def add_all(self, blocks: Iterable[RecordSet]) -> "MomentAccumulator":
        for blk in _rechunk(blocks):
            self.add(blk)
        return self


# ---------------------------------------------------------------------------
# normalization and binned moments


@dataclass(frozen=True)
class NormalizedMoments:
    mean: np.ndarray  # (2,) SNU
    state_var: np.ndarray  # (2,) SNU, heterodyne-corrected
    cov: float
    n_signal: int
    n_vacuum: int
    se_mean: np.ndarray
    se_var: np.ndarray

    @property
    def amplitude(self) -> complex:
        return complex(self.mean[0], self.mean[1]) / 2


class NormalizationError(ValueError):
    pass


def _normalize(sig_n, sig_mean, sig_var, sig_cov, vac_n, vac_var) -> NormalizedMoments:
    if vac_n < 2 or np.any(~(vac_var > 0)):
        raise NormalizationError("degenerate vacuum reference")
    if sig_n < 2:
        raise NormalizationError("fewer than two signal samples")
    c2 = 2.0 / vac_var
    c = np.sqrt(c2)
    mean = c * sig_mean
    out_var = c2 * sig_var
    cov = float(c[0] * c[1] * sig_cov)
    # the vacuum calibration error propagates into both moments
    se_mean = np.sqrt(out_var / sig_n + mean**2 / (2.0 * (vac_n - 1)))
    se_var = out_var * np.sqrt(2.0 / (sig_n - 1) + 2.0 / (vac_n - 1))
    return NormalizedMoments(mean, out_var - 1.0, cov, int(sig_n), int(vac_n), se_mean, se_var)


def normalize(signal: np.ndarray, vacuum: np.ndarray) -> NormalizedMoments:
    """Shot-noise-normalized moments of raw (n, 2) signal and vacuum outcomes.

    Each quadrature is scaled by c = sqrt(2 / Var_raw(vacuum)).
    """
    signal = np.asarray(signal, dtype=float).reshape(-1, 2)
    vacuum = np.asarray(vacuum, dtype=float).reshape(-1, 2)
    if len(vacuum) < 2:
        raise NormalizationError("need at least two vacuum samples")
    s = _Moments.from_groups(np.zeros(len(signal), int), signal, 1)
    v = _Moments.from_groups(np.zeros(len(vacuum), int), vacuum, 1)
    return _normalize(len(signal), s.mean[0], s.variance()[0], s.covariance()[0], len(vacuum), v.variance()[0])


@dataclass
class BinnedMoments:
    """Normalized per-(bin, state) moments for the retained transmission bins."""

    histogram: TransmissionHistogram
    n_states: int
    entries: dict  # bin index -> tuple[NormalizedMoments, ...]
    t_mean: dict = field(default_factory=dict)
    raw_vacuum_var: dict = field(default_factory=dict)
    raw_signal_var: dict = field(default_factory=dict)
    rejected: dict = field(default_factory=dict)
    out_of_range: int = 0

    @property
    def bins(self) -> list[int]:
        return sorted(self.entries)

    def state_moments(self, b: int, conservative: bool = True) -> tuple[StateMoments, ...]:
        """Certification inputs; one stderr per moment kind (the larger quadrature)."""
        out = []
        for m in self.entries[b]:
            out.append(
                StateMoments(
                    float(m.mean[0]),
                    float(m.mean[1]),
                    float(m.state_var[0]),
                    float(m.state_var[1]),
                    float(m.se_mean.max()) if conservative else float(m.se_mean.mean()),
                    float(m.se_var.max()) if conservative else float(m.se_var.mean()),
                    m.cov,
                )
            )
        return tuple(out)

    def as_mapping(self) -> dict:
        return {b: self.state_moments(b) for b in self.bins}

    def unphysical(self) -> list[tuple[int, int]]:
        return [(b, k) for b in self.bins for k, m in enumerate(self.entries[b]) if np.any(m.state_var <= -0.5)]


def binned_from_accumulator(acc: MomentAccumulator) -> BinnedMoments:
    hist = acc.histogram
    out = BinnedMoments(hist, acc.n_states, {}, out_of_range=acc.out_of_range)
    vvar = acc.vacuum.variance()
    svar = acc.signal.variance()
    scov = acc.signal.covariance()
    for b in range(hist.n_bins):
        if not hist.retained[b]:
            continue
        nv = acc.vacuum.n[b]
        if nv == 0:
            out.rejected[b] = "no records"
            continue
        try:
            ents = tuple(
                _normalize(acc.signal.n[b, k], acc.signal.mean[b, k], svar[b, k], scov[b, k], nv, vvar[b])
                for k in range(acc.n_states)
            )
        except NormalizationError as exc:
            out.rejected[b] = str(exc)
            continue
        out.entries[b] = ents
        out.t_mean[b] = float(acc.t_sum[b] / nv)
        out.raw_vacuum_var[b] = vvar[b].copy()
        out.raw_signal_var[b] = svar[b].copy()
    if out.out_of_range:
        log.warning("%d records outside every transmission bin", out.out_of_range)
    if acc.bad_label:
        log.warning("%d records with labels outside the alphabet", acc.bad_label)
    if out.rejected:
        log.warning("rejected bins: %s", out.rejected)
    return out


def bin_records(
    records: RecordSet | Iterable[RecordSet], histogram: TransmissionHistogram, n_states: int
) -> BinnedMoments:
    """Bin records by monitor transmission and normalize each retained bin."""
    if isinstance(records, RecordSet):
        records = [records]
    acc = MomentAccumulator(histogram, n_states).add_all(records)
    return binned_from_accumulator(acc)


def write_moments(binned: BinnedMoments, path, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines.append(MOMENTS_HEADER)
    h = binned.histogram
    for b in binned.bins:
        for k, (m, sm) in enumerate(zip(binned.entries[b], binned.state_moments(b))):
            lines.append(
                ",".join(
                    repr(float(v))
                    for v in (h.bin_edges[b], h.bin_edges[b + 1], h.probabilities[b])
                )
                + f",{k},{float(sm.mean_x)!r},{float(sm.mean_p)!r},{float(sm.var_x)!r},{float(sm.var_p)!r},{m.n_signal},"
                f"{float(sm.se_mean)!r},{float(sm.se_var)!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class MomentTable:
    """Moments read back from CSV, keyed by bin lower edge order."""

    edges: list  # [(lo, hi)]
    probs: list
    moments: list  # list of tuple[StateMoments]
    counts: list

    def as_mapping(self) -> dict:
        return {i: m for i, m in enumerate(self.moments)}


def read_moments(path) -> MomentTable:
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    if not rows or rows[0] != MOMENTS_HEADER:
        raise ValueError(f"{path}: expected header {MOMENTS_HEADER!r}")
    grouped: dict = {}
    for ln in rows[1:]:
        f = ln.split(",")
        if len(f) != 11:
            raise ValueError(f"{path}: malformed row {ln!r}")
        key = (float(f[0]), float(f[1]))
        grouped.setdefault(key, {"prob": float(f[2]), "states": {}})
        grouped[key]["states"][int(f[3])] = (
            StateMoments(float(f[4]), float(f[5]), float(f[6]), float(f[7]), float(f[9]), float(f[10])),
            int(f[8]),
        )
    table = MomentTable([], [], [], [])
    for key in sorted(grouped):
        g = grouped[key]
        ks = sorted(g["states"])
        if ks != list(range(len(ks))):
            raise ValueError(f"{path}: bin {key} has states {ks}")
        table.edges.append(key)
        table.probs.append(g["prob"])
        table.moments.append(tuple(g["states"][k][0] for k in ks))
        table.counts.append(tuple(g["states"][k][1] for k in ks))
    return table


def write_variance_table(binned: BinnedMoments, path, header: Sequence[str] = ()) -> None:
    """Per-bin vacuum and signal variances, raw and normalized."""
    lines = [f"# {h}" for h in header]
    lines.append("bin_lo,bin_hi,t_mean,state,raw_vac_x,raw_vac_p,raw_sig_x,raw_sig_p,var_x,var_p")
    h = binned.histogram
    for b in binned.bins:
        for k, m in enumerate(binned.entries[b]):
            rv, rs = binned.raw_vacuum_var[b], binned.raw_signal_var[b][k]
            lines.append(
                f"{float(h.bin_edges[b])!r},{float(h.bin_edges[b + 1])!r},{float(binned.t_mean[b])!r},{k},"
                f"{float(rv[0])!r},{float(rv[1])!r},{float(rs[0])!r},{float(rs[1])!r},{float(m.state_var[0])!r},{float(m.state_var[1])!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Q function


@dataclass(frozen=True)
class GridSpec:
    """Square grid over beta = (x + i p) / 2 centred on ``center``."""

    half_width: float = 4.0
    bin_width: float = 0.15
    center: complex = 0j

    def __post_init__(self):
        if self.half_width <= 0 or self.bin_width <= 0:
            raise ValueError("grid sizes must be positive")

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        n = max(1, int(round(2 * self.half_width / self.bin_width)))
        e = (np.arange(n + 1) - n / 2) * self.bin_width
        return e + self.center.real, e + self.center.imag


@dataclass
class QEstimate:
    re_edges: np.ndarray
    im_edges: np.ndarray
    density: np.ndarray  # (n_re, n_im), integrates to the covered fraction
    counts: np.ndarray
    n_samples: int
    coverage: float

    @property
    def bin_area(self) -> float:
        return float(np.diff(self.re_edges)[0] * np.diff(self.im_edges)[0])

    def stderr(self) -> np.ndarray:
        return np.sqrt(self.counts) / (self.n_samples * self.bin_area)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return 0.5 * (self.re_edges[1:] + self.re_edges[:-1]), 0.5 * (self.im_edges[1:] + self.im_edges[:-1])

    def peak(self, window: int = 3) -> float:
        """Peak value from a weighted log-quadratic fit around the largest bin.

        The fitted Gaussian's bin-averaging loss is divided out, so a smooth
        peak is not biased low by the finite bin size.
        """
        q = self.density
        i, j = np.unravel_index(np.argmax(q), q.shape)
        i0, i1 = max(0, i - window), min(q.shape[0], i + window + 1)
        j0, j1 = max(0, j - window), min(q.shape[1], j + window + 1)
        xr, xi = self.centers()
        X, Y = np.meshgrid(xr[i0:i1] - xr[i], xi[j0:j1] - xi[j], indexing="ij")
        c = self.counts[i0:i1, j0:j1].ravel()
        ok = c > 0
        if ok.sum() < 6:
            return float(q[i, j])
        x, y = X.ravel()[ok], Y.ravel()[ok]
        A = np.column_stack([np.ones_like(x), x, y, x * x, y * y, x * y])
        w = np.sqrt(c[ok])
        coef, *_ = np.linalg.lstsq(A * w[:, None], np.log(q[i0:i1, j0:j1].ravel()[ok]) * w, rcond=None)
        H = np.array([[2 * coef[3], coef[5]], [coef[5], 2 * coef[4]]])
        if np.any(np.linalg.eigvalsh(H) >= 0):
            return float(q[i, j])
        shift = -np.linalg.solve(H, coef[1:3])
        top = coef[0] + coef[1:3] @ shift + 0.5 * shift @ H @ shift
        # box-average correction for a Gaussian with the fitted curvatures
        corr = 1.0
        hr, hi = np.diff(self.re_edges)[0], np.diff(self.im_edges)[0]
        for h, curv in ((hr, -H[0, 0]), (hi, -H[1, 1])):
            s = 1.0 / math.sqrt(curv)
            u = h / (2 * math.sqrt(2) * s)
            corr *= math.erf(u) * math.sqrt(math.pi) / (2 * u)
        return float(math.exp(top) / corr)


def estimate_q(normalized: np.ndarray, grid: GridSpec = GridSpec()) -> QEstimate:
    """Histogram estimate of the Husimi Q function from normalized outcomes.

    ``normalized`` holds (n, 2) shot-noise-normalized heterodyne outcomes;
    each sample maps to beta = (x + i p) / 2 and Q is normalized so that its
    integral over the whole plane is one.
    """
    v = np.asarray(normalized, dtype=float).reshape(-1, 2)
    if len(v) == 0:
        raise ValueError("no samples")
    er, ei = grid.edges()
    counts, _, _ = np.histogram2d(v[:, 0] / 2, v[:, 1] / 2, bins=[er, ei])
    area = np.diff(er)[0] * np.diff(ei)[0]
    coverage = counts.sum() / len(v)
    if coverage < 0.999:
        warnings.warn(f"Q grid covers only {coverage:.4f} of the samples", CoverageWarning, stacklevel=2)
    return QEstimate(er, ei, counts / (len(v) * area), counts, len(v), float(coverage))


def normalized_outcomes(records: RecordSet, state: int | None = None) -> np.ndarray:
    """Signal outcomes scaled by the records' own vacuum reference."""
    c = np.sqrt(2.0 / records.vacuum.var(axis=0, ddof=1))
    sig = records.signal if state is None else records.signal[records.labels == state]
    return sig * c


# ---------------------------------------------------------------------------
# Stokes detection


def stokes_to_quadrature(s1_raw, s2_raw, lo_calibration: float) -> tuple[np.ndarray, np.ndarray]:
    """Quadratures from Stokes samples with a bright circular LO: divide by sqrt|<S3>|."""
    if lo_calibration == 0 or not math.isfinite(lo_calibration):
        raise ValueError("LO calibration must be finite and non-zero")
    r = math.sqrt(abs(lo_calibration))
    return np.asarray(s1_raw, dtype=float) / r, np.asarray(s2_raw, dtype=float) / r


def simulate_stokes(
    alpha: complex, n: int, lo_photons: float, seed, excess_noise: float = 0.0
) -> tuple[np.ndarray, np.ndarray, float]:
    """Samples of S1 and S2 (measured on separate shots) and the LO's <S3>.

    In the bright-LO limit S1 ~ sqrt(n_LO) X and S2 ~ sqrt(n_LO) P with the
    signal's quadrature statistics, so Var(S1) Var(S2) >= <S3>^2 with equality
    for a coherent state.
    """
    if lo_photons <= 0:
        raise ValueError("LO photon number must be positive")
    rng = np.random.default_rng(seed)
    sd = math.sqrt(1.0 + excess_noise)
    r = math.sqrt(lo_photons)
    s1 = r * (2 * complex(alpha).real + sd * rng.standard_normal(n))
    s2 = r * (2 * complex(alpha).imag + sd * rng.standard_normal(n))
    return s1, s2, float(lo_photons)
