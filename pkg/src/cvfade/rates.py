"""Aggregate per-bin logarithmic negativity into an entanglement transfer rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .certify import log_negativity
from .channel import TransmissionHistogram

DEFAULT_STATE_RATE = 2.22e6  # states per second


@dataclass(frozen=True)
class BinResult:
    """Certified outcome of one (bin, sigma) solve as needed for aggregation."""

    bin_lo: float
    bin_hi: float
    prob: float
    sigma: float
    negativity: float
    log_negativity: float
    status: str = "optimal"
    gap: float = 0.0


@dataclass
class RateReport:
    state_rate: float
    log_base: float
    per_bin: dict  # sigma -> list of (prob, E_N) in bin order
    total_rate: dict  # sigma -> units per second
    capped: dict = field(default_factory=dict)  # sigma -> bins lowered to keep sigma ordering
    nonoptimal: dict = field(default_factory=dict)  # sigma -> count of non-optimal solves

    @property
    def sigmas(self) -> list[float]:
        return sorted(self.total_rate)

    @property
    def unit(self) -> str:
        return "ebit" if self.log_base == 2 else ("nat" if abs(self.log_base - math.e) < 1e-12 else f"log{self.log_base:g}")

    def summary(self) -> str:
        lines = [
            f"state rate        : {self.state_rate:.6g} states/s",
            f"log base          : {self.log_base:.6g}",
            f"retained bins     : {len(self.per_bin[self.sigmas[0]]) if self.sigmas else 0}",
        ]
        for s in self.sigmas:
            extra = []
            if self.capped.get(s):
                extra.append(f"{self.capped[s]} capped")
            if self.nonoptimal.get(s):
                extra.append(f"{self.nonoptimal[s]} non-optimal")
            note = f"  ({', '.join(extra)})" if extra else ""
            lines.append(f"total rate {s:g} sigma: {self.total_rate[s] / 1e6:.6f} M log-neg units/s{note}")
        return "\n".join(lines)


def aggregate(
    results: Sequence[BinResult],
    histogram: TransmissionHistogram | None,
    state_rate: float,
    log_base: float = 2.0,
) -> RateReport:
    """total(sigma) = state_rate * sum_i p_i * E_N,i with unrenormalized probabilities.

    Bin probabilities must match the histogram's retained bins when one is
    given. Per bin, the value at a looser sigma level is capped by the values
    at the tighter levels: feasible sets are nested, so a larger value can
    only appear when a tighter level failed to certify (e.g. an infeasible
    point estimate), and is then discarded.
    """
    if state_rate < 0:
        raise ValueError("state rate must be >= 0")
    if histogram is not None:
        _check_against_histogram(results, histogram)
    by_bin: dict = {}
    for r in results:
        key = (r.bin_lo, r.bin_hi)
        if r.sigma in by_bin.setdefault(key, {}):
            raise ValueError(f"duplicate result for bin {key} at sigma {r.sigma}")
        by_bin[key][r.sigma] = r
    sigmas = sorted({r.sigma for r in results})
    per_bin = {s: [] for s in sigmas}
    capped = {s: 0 for s in sigmas}
    nonopt = {s: 0 for s in sigmas}
    for key in sorted(by_bin):
        entry = by_bin[key]
        if sorted(entry) != sigmas:
            raise ValueError(f"bin {key} lacks some sigma levels")
        ceiling = math.inf
        for s in sigmas:
            r = entry[s]
            if r.negativity < 0:
                raise ValueError("negative negativity in results")
            e = log_negativity(r.negativity, log_base) if r.status == "optimal" else 0.0
            if r.status != "optimal":
                nonopt[s] += 1
            if e > ceiling:
                capped[s] += 1
                e = ceiling
            ceiling = e
            per_bin[s].append((r.prob, e))
    total = {s: state_rate * math.fsum(p * e for p, e in per_bin[s]) for s in sigmas}
    return RateReport(state_rate, log_base, per_bin, total, capped, nonopt)


def _check_against_histogram(results: Sequence[BinResult], hist: TransmissionHistogram) -> None:
    for r in results:
        idx = hist.bin_index(0.5 * (r.bin_lo + r.bin_hi))
        i = int(idx)
        if i < 0 or not hist.retained[i]:
            raise ValueError(f"result bin [{r.bin_lo}, {r.bin_hi}) is not a retained histogram bin")
        if not (math.isclose(hist.bin_edges[i], r.bin_lo, abs_tol=1e-12) and math.isclose(hist.bin_edges[i + 1], r.bin_hi, abs_tol=1e-12)):
            raise ValueError(f"result bin [{r.bin_lo}, {r.bin_hi}) does not match histogram edges")
        if not math.isclose(hist.probabilities[i], r.prob, rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError(f"probability mismatch for bin [{r.bin_lo}, {r.bin_hi})")


# ---------------------------------------------------------------------------
# files

RESULTS_HEADER = "bin_lo,bin_hi,prob,sigma,negativity,log_negativity,status,gap"
RATE_HEADER = "sigma,total_rate,capped,nonoptimal"


def write_results(results: Sequence[BinResult], path, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines.append(RESULTS_HEADER)
    for r in results:
        lines.append(
            f"{float(r.bin_lo)!r},{float(r.bin_hi)!r},{float(r.prob)!r},{float(r.sigma)!r},{float(r.negativity)!r},"
            f"{float(r.log_negativity)!r},{r.status},{float(r.gap)!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path) -> tuple[list[BinResult], float | None]:
    """Results rows plus the log base recorded in the header (if any)."""
    base = None
    rows = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.startswith("#"):
            if "log_base=" in ln:
                base = float(ln.split("log_base=", 1)[1].split()[0])
            continue
        if ln:
            rows.append(ln)
    if not rows or rows[0] != RESULTS_HEADER:
        raise ValueError(f"{path}: expected header {RESULTS_HEADER!r}")
    out = []
    for ln in rows[1:]:
        f = ln.split(",")
        if len(f) != 8:
            raise ValueError(f"{path}: malformed row {ln!r}")
        out.append(
            BinResult(float(f[0]), float(f[1]), float(f[2]), float(f[3]), float(f[4]), float(f[5]), f[6], float(f[7]))
        )
    return out, base


def write_report(report: RateReport, path, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines += [f"# {ln}" for ln in report.summary().splitlines()]
    lines.append(RATE_HEADER)
    for s in report.sigmas:
        lines.append(f"{float(s)!r},{float(report.total_rate[s])!r},{report.capped.get(s, 0)},{report.nonoptimal.get(s, 0)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def per_bin_table(report: RateReport, results: Sequence[BinResult]) -> list[dict]:
    """Rows of the per-sub-channel rate figure: state_rate * p_i * E_N,i per sigma."""
    keys = sorted({(r.bin_lo, r.bin_hi) for r in results})
    rows = []
    for i, key in enumerate(keys):
        row = {"bin_lo": key[0], "bin_hi": key[1]}
        for s in report.sigmas:
            p, e = report.per_bin[s][i]
            row["prob"] = p
            row[f"rate_{s:g}"] = report.state_rate * p * e
        rows.append(row)
    return rows


def from_mapping(results: Mapping, histogram: TransmissionHistogram, log_base: float = 2.0) -> list[BinResult]:
    """BinResults from a certify_all style mapping {(bin, sigma): CertificationResult}."""
    out = []
    for (b, s), res in sorted(results.items()):
        out.append(
            BinResult(
                float(histogram.bin_edges[b]),
                float(histogram.bin_edges[b + 1]),
                float(histogram.probabilities[b]),
                float(s),
                float(res.negativity_min),
                float(log_negativity(res.negativity_min, log_base)) if res.optimal else 0.0,
                res.status,
                float(res.duality_gap),
            )
        )
    return out
