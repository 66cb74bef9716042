"""Pipeline stages shared by the command-line tools.

The staged route (simulate -> ingest -> certify -> rate, through files) and
the single-shot route feed identical numbers through identical operations,
so their outputs agree byte for byte.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import __version__, certify, detection, rates
from .alphabet import Alphabet, source_model
from .channel import (
    HistogramBuilder,
    TransmissionHistogram,
    empirical_histogram,
    read_histogram,
    read_transmissions,
    write_histogram,
)
from .config import RunConfig
from .detection import MomentTable, RecordSet

log = logging.getLogger(__name__)

FILES = {
    "records": "records.csv",
    "histogram": "histogram.csv",
    "moments": "moments.csv",
    "variances": "variances.csv",
    "q": "q_function.csv",
    "results": "results.csv",
    "rates": "rates.csv",
    "rates_per_bin": "rates_per_bin.csv",
    "curves": "curves.csv",
    "comparison": "comparison.csv",
    "report": "report.txt",
}


def header(cfg: RunConfig) -> list[str]:
    return [f"cvfade {__version__} config_hash={cfg.digest()} log_base={cfg.certify.log_base!r}"]


def out_path(cfg: RunConfig, key: str, out_dir=None) -> Path:
    d = Path(out_dir if out_dir is not None else cfg.output)
    d.mkdir(parents=True, exist_ok=True)
    return d / FILES[key]


# ---------------------------------------------------------------------------
# simulation


def transmission_source(cfg: RunConfig):
    ch = cfg.channel
    if ch.source == "fixed":
        return ch.transmission
    if ch.source == "geometry":
        return ch.geometry()
    t = read_transmissions(ch.file)
    if len(t) >= cfg.detection.n_slots:
        return t
    # too short to replay slot by slot: resample its histogram
    return empirical_histogram(t, cfg.detection.bin_width)


def simulation_blocks(cfg: RunConfig) -> Iterator[RecordSet]:
    det = cfg.detection
    return detection.simulate_blocks(
        cfg.alphabet.build(),
        transmission_source(cfg),
        cfg.channel.params(),
        det.n_slots,
        det.seed,
        det.raw_scale,
        det.lo_tracks_channel,
    )


def finish_histogram(builder: HistogramBuilder, cfg: RunConfig) -> TransmissionHistogram:
    det = cfg.detection
    return builder.build(det.min_count, det.retained_mass)


def simulate_to_files(cfg: RunConfig, out_dir=None) -> tuple[Path, TransmissionHistogram]:
    builder = HistogramBuilder(cfg.detection.bin_width)

    def tee():
        for blk in simulation_blocks(cfg):
            builder.add(blk.monitor_T)
            yield blk

    rec = out_path(cfg, "records", out_dir)
    detection.write_records(tee(), rec, header(cfg))
    hist = finish_histogram(builder, cfg)
    write_histogram(hist, out_path(cfg, "histogram", out_dir), header(cfg))
    return rec, hist


# ---------------------------------------------------------------------------
# binning and Q function


@dataclass
class QCollector:
    """Raw signal samples of one bin, capped per state, in slot order."""

    bin_index: int
    n_states: int
    cap: int
    samples: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = [[] for _ in range(self.n_states)]
        self._held = [0] * self.n_states

    def add(self, blk: RecordSet, hist: TransmissionHistogram) -> None:
        if self.cap <= 0 or self.bin_index < 0:
            return
        sel = hist.bin_index(blk.monitor_T) == self.bin_index
        for k in range(self.n_states):
            room = self.cap - self._held[k]
            if room <= 0:
                continue
            rows = blk.signal[sel & (blk.labels == k)][:room]
            self.samples[k].append(rows)
            self._held[k] += len(rows)

    def estimates(self, vacuum_var: np.ndarray, grid=detection.GridSpec()) -> dict:
        c = np.sqrt(2.0 / vacuum_var)
        out = {}
        per = [np.concatenate(s) * c if s else np.zeros((0, 2)) for s in self.samples]
        for k, v in enumerate(per):
            if len(v):
                out[str(k)] = detection.estimate_q(v, grid)
        mixed = np.concatenate(per)
        if len(mixed):
            out["mixed"] = detection.estimate_q(mixed, grid)
        return out


def q_bin(hist: TransmissionHistogram) -> int:
    kept = hist.retained_bins()
    if not kept.size:
        return -1
    return int(kept[np.argmax(hist.counts[kept])])


@dataclass
class Ingested:
    binned: detection.BinnedMoments
    q: dict
    stats: detection.IngestStats | None = None


def bin_stream(blocks: Iterable[RecordSet], hist: TransmissionHistogram, cfg: RunConfig) -> Ingested:
    n_states = cfg.alphabet.build().size
    acc = detection.MomentAccumulator(hist, n_states)
    qc = QCollector(q_bin(hist), n_states, cfg.detection.q_samples)
    for blk in detection._rechunk(blocks):
        acc.add(blk)
        qc.add(blk, hist)
    binned = detection.binned_from_accumulator(acc)
    q = {}
    if qc.bin_index in binned.entries:
        q = qc.estimates(binned.raw_vacuum_var[qc.bin_index])
    return Ingested(binned, q)


def write_q(q: dict, path, head: Sequence[str]) -> None:
    lines = [f"# {h}" for h in head]
    for name, est in q.items():
        lines.append(f"# peak {name} {float(est.peak())!r}")
    lines.append("state,re,im,q,stderr")
    for name, est in q.items():
        xr, xi = est.centers()
        se = est.stderr()
        for i, a in enumerate(xr):
            for j, b in enumerate(xi):
                lines.append(f"{name},{float(a)!r},{float(b)!r},{float(est.density[i, j])!r},{float(se[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ingested(ing: Ingested, cfg: RunConfig, out_dir=None) -> None:
    h = header(cfg)
    detection.write_moments(ing.binned, out_path(cfg, "moments", out_dir), h)
    detection.write_variance_table(ing.binned, out_path(cfg, "variances", out_dir), h)
    if ing.q:
        write_q(ing.q, out_path(cfg, "q", out_dir), h)


def ingest_files(records_path, hist_path, cfg: RunConfig, out_dir=None) -> Ingested:
    hist = read_histogram(hist_path)
    stats = detection.IngestStats()
    ing = bin_stream(detection.iter_record_file(records_path, stats), hist, cfg)
    ing.stats = stats
    write_ingested(ing, cfg, out_dir)
    return ing


def moment_table(binned: detection.BinnedMoments) -> MomentTable:
    """The in-memory equivalent of writing and re-reading the moments CSV."""
    h = binned.histogram
    table = MomentTable([], [], [], [])
    for b in binned.bins:
        table.edges.append((float(h.bin_edges[b]), float(h.bin_edges[b + 1])))
        table.probs.append(float(h.probabilities[b]))
        sms = binned.state_moments(b)
        table.moments.append(tuple(certify.StateMoments(m.mean_x, m.mean_p, m.var_x, m.var_p, m.se_mean, m.se_var) for m in sms))
        table.counts.append(tuple(m.n_signal for m in binned.entries[b]))
    return table


# ---------------------------------------------------------------------------
# certification and rates


def ideal_table(cfg: RunConfig) -> MomentTable:
    """A single pseudo-bin of noise-free moments at the configured fixed transmission."""
    t = cfg.channel.transmission
    moms = certify.ideal_moments(cfg.alphabet.build(), t, cfg.channel.params())
    moms = tuple(certify.StateMoments(m.mean_x, m.mean_p, m.var_x, m.var_p) for m in moms)
    return MomentTable([(t, t)], [1.0], [moms], [(0,) * len(moms)])


def certification_cutoff(cfg: RunConfig, table: MomentTable) -> int:
    if cfg.certify.cutoff is not None:
        return cfg.certify.cutoff
    return max(certify.cutoff_for_moments(m) for m in table.moments)


def certify_table(cfg: RunConfig, table: MomentTable, workers: int = 1, sigmas=None) -> tuple[list, dict]:
    c = cfg.certify
    sigmas = tuple(float(s) for s in (sigmas if sigmas is not None else c.sigma))
    alphabet: Alphabet = cfg.alphabet.build()
    moments = table.moments
    if c.trusted_loss:
        moments = [tuple(certify.trusted_detector_moments(m, cfg.channel.efficiency)) for m in moments]
    tab = MomentTable(table.edges, table.probs, list(moments), table.counts)
    source = source_model(alphabet, certification_cutoff(cfg, tab))
    raw = certify.certify_all(
        tab.as_mapping(), source, sigmas, log_base=c.log_base, tol=c.tol, workers=workers
    )
    out = []
    for (i, s), res in raw.items():
        lo, hi = tab.edges[i]
        out.append(
            rates.BinResult(
                lo,
                hi,
                tab.probs[i],
                s,
                float(res.negativity_min),
                float(res.log_negativity),
                res.status,
                float(res.duality_gap),
            )
        )
    return out, raw


def write_results(cfg: RunConfig, results, out_dir=None) -> Path:
    p = out_path(cfg, "results", out_dir)
    rates.write_results(results, p, header(cfg))
    return p


def rate_report(cfg: RunConfig, results, hist: TransmissionHistogram | None, out_dir=None, state_rate=None, log_base=None):
    base = cfg.certify.log_base if log_base is None else log_base
    rep = rates.aggregate(results, hist, cfg.certify.state_rate if state_rate is None else state_rate, base)
    rates.write_report(rep, out_path(cfg, "rates", out_dir), header(cfg))
    rows = rates.per_bin_table(rep, results)
    lines = [f"# {h}" for h in header(cfg)]
    if rows:
        cols = list(rows[0])
        lines.append(",".join(cols))
        lines += [",".join(repr(float(r[c])) for c in cols) for r in rows]
    out_path(cfg, "rates_per_bin", out_dir).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rep


def run_all(cfg: RunConfig, workers: int = 1, out_dir=None) -> dict:
    """Single-shot simulate, bin, certify and aggregate without record files."""
    builder = HistogramBuilder(cfg.detection.bin_width)
    for blk in simulation_blocks(cfg):
        builder.add(blk.monitor_T)
    hist = finish_histogram(builder, cfg)
    write_histogram(hist, out_path(cfg, "histogram", out_dir), header(cfg))
    ing = bin_stream(simulation_blocks(cfg), hist, cfg)
    write_ingested(ing, cfg, out_dir)
    table = moment_table(ing.binned)
    results, raw = certify_table(cfg, table, workers)
    write_results(cfg, results, out_dir)
    report = rate_report(cfg, results, hist, out_dir)
    return {"histogram": hist, "ingested": ing, "table": table, "results": results, "raw": raw, "report": report}


# ---------------------------------------------------------------------------
# sweeps


def _sweep_point(args):
    fam, eps, amp, t, noise_at, tol = args
    res = certify.theoretical_point(fam, amp, t, eps, noise_at, tol=tol)
    return res.negativity_min, res.status


def sweep(cfg: RunConfig, workers: int = 1, out_dir=None) -> dict:
    """Theoretical curves (all variances equal) and the alphabet comparison."""
    sw = cfg.sweep
    jobs = [
        (fam, float(eps), float(a), sw.transmission, cfg.channel.noise_at, cfg.certify.tol)
        for fam in sw.families
        for eps in sw.epsilons
        for a in sw.amplitudes
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(_sweep_point, jobs))
    else:
        vals = [_sweep_point(j) for j in jobs]
    h = header(cfg)
    lines = [f"# {x}" for x in h] + ["family,transmission,epsilon,amplitude,negativity,status"]
    curves: dict = {}
    for (fam, eps, a, t, _, _), (n, st) in zip(jobs, vals):
        lines.append(f"{fam},{float(t)!r},{float(eps)!r},{float(a)!r},{float(n)!r},{st}")
        curves.setdefault((fam, eps), []).append((a, n))
    out_path(cfg, "curves", out_dir).write_text("\n".join(lines) + "\n", encoding="utf-8")

    comp = [f"# {x}" for x in h] + ["family,epsilon,best_amplitude,max_negativity"]
    thresholds = {}
    for fam in sw.families:
        thresholds[fam] = math.inf
        for eps in sorted(sw.epsilons):
            pts = curves[(fam, float(eps))]
            a, n = max(pts, key=lambda p: p[1])
            comp.append(f"{fam},{float(eps)!r},{float(a)!r},{float(n)!r}")
            if n < 1e-6 and math.isinf(thresholds[fam]):
                thresholds[fam] = float(eps)
    comp += [f"# threshold {fam} {float(thresholds[fam])!r}" for fam in sw.families]
    out_path(cfg, "comparison", out_dir).write_text("\n".join(comp) + "\n", encoding="utf-8")
    return {"curves": curves, "thresholds": thresholds}


# ---------------------------------------------------------------------------
# report


def _read_rows(path: Path) -> list[list[str]]:
    rows = [ln.split(",") for ln in path.read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    return rows[1:]


def report(run_dir) -> str:
    """Consolidated plain-text summary of whatever a run directory contains."""
    d = Path(run_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    parts = []
    hp = d / FILES["histogram"]
    if hp.exists():
        h = read_histogram(hp)
        parts.append("transmission histogram")
        parts.append(
            f"  bins {h.n_bins}, width {h.bin_edges[1] - h.bin_edges[0]:.4g}, mean T {h.mean:.4f}, "
            f"retained {int(h.retained.sum())} bins / mass {h.retained_mass:.4f}"
        )
    vp = d / FILES["variances"]
    if vp.exists():
        rows = _read_rows(vp)
        t = np.array([float(r[2]) for r in rows])
        vac = np.array([0.5 * (float(r[4]) + float(r[5])) for r in rows])
        var = np.array([0.5 * (float(r[8]) + float(r[9])) for r in rows])
        slope = float(t @ vac / (t @ t))
        resid = vac - slope * t
        parts.append("variances")
        parts.append(f"  raw vacuum variance ~ {slope:.6g} * T (max relative residual {np.max(np.abs(resid) / vac):.2e})")
        parts.append(f"  state variance mean {var.mean():.4f} SNU (min {var.min():.4f}, max {var.max():.4f})")
    qp = d / FILES["q"]
    if qp.exists():
        parts.append("Q function peaks (most populated retained bin)")
        for ln in qp.read_text(encoding="utf-8").splitlines():
            if ln.startswith("# peak "):
                _, _, name, val = ln.split()
                parts.append(f"  {name:>6}: {float(val):.4f}")
    cp = d / FILES["comparison"]
    if cp.exists():
        parts.append("alphabet comparison (max over amplitude)")
        for r in _read_rows(cp):
            parts.append(f"  {r[0]:>4} eps {float(r[1]):<6g} best amplitude {float(r[2]):.2f} negativity {float(r[3]):.5f}")
        for ln in cp.read_text(encoding="utf-8").splitlines():
            if ln.startswith("# threshold"):
                parts.append("  zero-negativity threshold " + " ".join(ln.split()[2:]))
    rp = d / FILES["results"]
    if rp.exists():
        res, _ = rates.read_results(rp)
        parts.append("per-bin certification")
        parts.append("  bin_lo   bin_hi   prob      sigma  negativity  log_neg   status")
        for r in res:
            parts.append(
                f"  {r.bin_lo:.4f}  {r.bin_hi:.4f}  {r.prob:.5f}  {r.sigma:5g}  {r.negativity:10.6f}  {r.log_negativity:8.5f}  {r.status}"
            )
    ratep = d / FILES["rates"]
    if ratep.exists():
        parts.append("rates")
        for ln in ratep.read_text(encoding="utf-8").splitlines():
            if ln.startswith("# ") and ("total rate" in ln or "state rate" in ln or "log base" in ln):
                parts.append("  " + ln[2:])
    if not parts:
        raise FileNotFoundError(f"{d} contains no pipeline outputs")
    text = "\n".join(parts) + "\n"
    (d / FILES["report"]).write_text(text, encoding="utf-8")
    return text
