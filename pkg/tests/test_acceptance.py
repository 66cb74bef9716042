"""Acceptance criteria 1 to 11, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also collected in the terminal summary.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import record_criterion

from cvfade import certify, detection, fock, pipeline, sdp
from cvfade.alphabet import four_state, source_model, two_state
from cvfade.channel import ChannelParams
from cvfade.config import load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SWEEP_T = 0.63
AMPLITUDES = [round(0.1 * i, 1) for i in range(1, 17)]
EPSILONS = [0.01, 0.2, 0.4, 0.8, 1.0, 1.3]
EPS_REF = 0.01
PINNED_TOTAL = 2197444.24  # sigma = 0 total of the first validated reference run


def check(number, title, ok, detail):
    record_criterion(number, title, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    cfg = load_config(CONFIGS / "reference.toml")
    out = tmp_path_factory.mktemp("reference")
    t0 = time.perf_counter()
    res = pipeline.run_all(cfg, out_dir=out)
    res["seconds"] = time.perf_counter() - t0
    res["config"] = cfg
    return res


@pytest.fixture(scope="module")
def comparison():
    out = {}
    for margin in (0, 4):
        t0 = time.perf_counter()
        rows, thresholds = certify.compare_alphabets(SWEEP_T, EPSILONS, AMPLITUDES, cutoff_margin=margin)
        out[margin] = (rows, thresholds, time.perf_counter() - t0)
    return out


def _row(rows, family, eps):
    return next(r for r in rows if r.family == family and r.epsilon == eps)


def _bin_curve(reference_run, margin):
    """Certified N_min on ideal moments at each retained bin's mean T times eta."""
    cfg = reference_run["config"]
    binned = reference_run["ingested"].binned
    eta = cfg.channel.efficiency
    alph = four_state(1.0)
    vals = []
    for b in binned.bins:
        moms = certify.ideal_moments(alph, binned.t_mean[b] * eta, ChannelParams(excess_noise=EPS_REF))
        src = source_model(alph, certify.cutoff_for_moments(moms) + margin)
        vals.append(certify.certify_bin(moms, src).negativity_min)
    return [binned.t_mean[b] for b in binned.bins], vals


def _oracle_cases(margin):
    out = []
    for family in (two_state, four_state):
        for alpha in (0.5, 1.0):
            alph = family(alpha)
            src = source_model(alph, fock.default_cutoff(alpha) + margin)
            exact = fock.negativity_exact(src.density())
            got = certify.certify_bin(certify.ideal_moments(alph, 1.0), src).negativity_min
            out.append((family.__name__, alpha, got, exact))
    return out


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_overlaps():
    t0 = time.perf_counter()
    errs = []
    for a in (0.5, 1.0, 1.5):
        n = fock.default_cutoff(a)
        ov = fock.coherent_state(a, n).inner(fock.coherent_state(-a, n))
        errs.append(abs(abs(ov) - math.exp(-2 * a * a)))
    dt = time.perf_counter() - t0
    check(1, "coherent overlaps", max(errs) < 1e-10 and dt < 1, f"max error {max(errs):.1e}, {dt:.2f} s")


def test_criterion_02_q_peaks():
    t0 = time.perf_counter()
    vac = detection.simulate_records(two_state(0.0), 1.0, ChannelParams(), 270_000, seed=20)
    vac_peak = detection.estimate_q(detection.normalized_outcomes(vac)).peak()
    mix = detection.simulate_records(four_state(0.9), 1.0, ChannelParams(), 270_000, seed=21)
    mix_peak = detection.estimate_q(detection.normalized_outcomes(mix)).peak()
    dt = time.perf_counter() - t0
    rel = abs(vac_peak * math.pi - 1)
    ok = rel < 0.02 and abs(mix_peak - 0.14) <= 0.01 and dt < 30
    check(2, "Q-function peaks", ok, f"vacuum {vac_peak * math.pi:.4f}/pi ({rel:.2%} off), mixture {mix_peak:.4f}, {dt:.1f} s")


def test_criterion_03_sdp_certificates():
    t0 = time.perf_counter()
    v = np.zeros(4, complex)
    v[[0, 3]] = 1 / math.sqrt(2)
    bell = sdp.solve(certify.tomography_problem(fock.DensityOperator((2, 2), np.outer(v, v.conj()))), tol=1e-9)
    bell_ok = bell.optimal and abs(bell.objective_value - 0.5) < 1e-6 and bell.duality_gap < 1e-7
    rng = np.random.default_rng(2024)
    passed = 0
    for _ in range(20):
        dims = (3, 4)
        x0 = []
        for n in dims:
            g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
            x0.append(g @ g.conj().T / np.trace(g @ g.conj().T).real)
        b = sdp.SdpBuilder(dims)
        for k, n in enumerate(dims):
            h = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
            h = (h + h.conj().T) / 2
            b.set_objective(k, h @ h + 0.1 * np.eye(n))
        for _ in range(5):
            coeffs = {}
            for k, n in enumerate(dims):
                h = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
                coeffs[k] = (h + h.conj().T) / 2
            b.add_equality(coeffs, sum(np.vdot(coeffs[k], x0[k]).real for k in coeffs))
        prob = b.build()
        sol = sdp.solve(prob)
        obj, eq, _ = prob.evaluate(sol.block_values)
        ok = (
            sol.optimal
            and abs(obj - sol.objective_value) < 1e-6
            and np.max(np.abs(eq - prob.eq_rhs)) < 1e-6
            and sol.dual_value <= sol.objective_value + 1e-9
            and min(np.linalg.eigvalsh(x).min() for x in sol.block_values) > -1e-8
        )
        passed += ok
    dt = time.perf_counter() - t0
    check(
        3,
        "SDP solver",
        bell_ok and passed == 20 and dt < 60,
        f"Bell {bell.objective_value:.9f} gap {bell.duality_gap:.1e}; random {passed}/20; {dt:.1f} s",
    )


def test_criterion_04_oracle_equivalence():
    t0 = time.perf_counter()
    cases = _oracle_cases(0)
    dt = time.perf_counter() - t0
    worst = max(abs(g - e) for *_, g, e in cases)
    check(4, "oracle equivalence at T=1", worst < 1e-5 and dt < 120, f"max |SDP - exact| {worst:.1e} over 4 cases, {dt:.1f} s")


def test_criterion_05_alphabet_comparison(comparison):
    rows, th, dt = comparison[0]
    two, four = _row(rows, "two", EPS_REF), _row(rows, "four", EPS_REF)
    ok = four.max_negativity > two.max_negativity and th["four"] > th["two"]
    check(
        5,
        "four-state beats two-state",
        ok,
        f"max N at eps 0.01: four {four.max_negativity:.4f} vs two {two.max_negativity:.4f}; "
        f"zero thresholds four {th['four']:g} vs two {th['two']:g}; {dt:.0f} s",
    )


def test_criterion_06_optimal_amplitude(comparison):
    rows, _, _ = comparison[0]
    best = _row(rows, "four", EPS_REF).best_amplitude
    check(6, "optimal four-state amplitude", 0.8 <= best <= 1.2, f"argmax {best:g}")


def test_criterion_07_subchannel_monotonicity(reference_run):
    ts, vals = _bin_curve(reference_run, 0)
    ok = all(b >= a - 1e-7 for a, b in zip(vals, vals[1:]))
    detail = ", ".join(f"{t:.3f}:{v:.4f}" for t, v in zip(ts, vals))
    check(7, "N_min nondecreasing in T", ok, detail)


def test_criterion_08_sigma_nesting(reference_run):
    by_bin = {}
    for r in reference_run["results"]:
        v = r.negativity if r.status == sdp.OPTIMAL else math.inf  # infeasible point estimates certify nothing
        by_bin.setdefault((r.bin_lo, r.bin_hi), []).append((r.sigma, v))
    bad = []
    for key, vals in by_bin.items():
        seq = [v for _, v in sorted(vals)]
        if any(b > a + 1e-7 for a, b in zip(seq, seq[1:])):
            bad.append(key)
    check(8, "sigma nesting", not bad and by_bin, f"{len(by_bin)} bins x 4 levels, violations {bad}")


def test_criterion_09_rate_pipeline(reference_run):
    hist = reference_run["histogram"]
    rep = reference_run["report"]
    total = rep.total_rate[0.0]
    widths = np.diff(hist.bin_edges)
    ok = (
        1e6 <= total <= 3e6
        and hist.n_bins == 35
        and np.allclose(widths, 0.009)
        and abs(hist.mean - 0.761) < 1e-3
        and abs(hist.retained_mass - 0.92) < 5e-3
        and reference_run["seconds"] < 900
    )
    pinned = math.isclose(total, PINNED_TOTAL, rel_tol=1e-5)
    check(
        9,
        "reference rate",
        ok and pinned,
        f"total {total / 1e6:.4f} M/s (pinned {PINNED_TOTAL / 1e6:.4f}); {hist.n_bins} bins, mean T {hist.mean:.4f}, "
        f"retained {hist.retained_mass:.4f}; {reference_run['seconds']:.0f} s",
    )


def test_criterion_10_raw_scale_invariance(tmp_path):
    cfg = parse_config(
        {
            "alphabet": {"kind": "four", "amplitude": 1.0},
            "channel": {
                "source": "geometry",
                "beam_radius": 1.0,
                "aperture_radius": 0.873,
                "jitter_sigma": 0.12743,
                "efficiency": 0.83,
                "excess_noise": 0.01,
            },
            "detection": {"n_slots": 200_000, "seed": 5, "bin_width": 0.009, "retained_mass": 0.5, "q_samples": 0},
            "certify": {"sigma": [1.0, 2.0]},
        }
    )
    runs = {}
    for scale in (1.0, 7.3, 0.02):
        runs[scale] = pipeline.run_all(cfg.replace("detection", raw_scale=scale), out_dir=tmp_path / f"s{scale}")
    worst = 0.0
    base = runs[1.0]
    for scale, other in runs.items():
        for b in base["ingested"].binned.bins:
            for u, v in zip(base["ingested"].binned.state_moments(b), other["ingested"].binned.state_moments(b)):
                for name in ("mean_x", "mean_p", "var_x", "var_p", "se_mean", "se_var"):
                    worst = max(worst, _rel(getattr(u, name), getattr(v, name)))
        for u, v in zip(base["results"], other["results"]):
            worst = max(worst, abs(u.negativity - v.negativity))
        for s in base["report"].sigmas:
            worst = max(worst, _rel(base["report"].total_rate[s], other["report"].total_rate[s]))
    check(10, "raw-scale invariance", worst < 1e-9, f"largest change over scales 7.3 and 0.02: {worst:.1e}")


def test_criterion_11_cutoff_stability(comparison, reference_run):
    shifts = {}
    c4 = [_rel(g0, g4) for (*_, g0, _), (*_, g4, _) in zip(_oracle_cases(0), _oracle_cases(4))]
    shifts["4"] = max(c4)
    rows0, th0, _ = comparison[0]
    rows4, th4, _ = comparison[4]
    shifts["5"] = max(_rel(_row(rows0, f, EPS_REF).max_negativity, _row(rows4, f, EPS_REF).max_negativity) for f in ("two", "four"))
    thresholds_same = th0 == th4
    argmax_same = _row(rows0, "four", EPS_REF).best_amplitude == _row(rows4, "four", EPS_REF).best_amplitude
    _, v0 = _bin_curve(reference_run, 0)
    _, v4 = _bin_curve(reference_run, 4)
    shifts["7"] = max(_rel(a, b) for a, b in zip(v0, v4))
    ok = max(shifts.values()) < 0.01 and thresholds_same and argmax_same
    detail = ", ".join(f"crit {k}: {v:.1e}" for k, v in shifts.items())
    check(11, "cutoff +4 stability", ok, f"{detail}; thresholds equal {thresholds_same}; argmax equal {argmax_same}")
