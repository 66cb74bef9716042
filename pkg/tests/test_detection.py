import math
import warnings

import numpy as np
import pytest

from cvfade import detection, fock
from cvfade.alphabet import calibrated, four_state, two_state
from cvfade.channel import ChannelParams, empirical_histogram
from cvfade.detection import GridSpec, RecordSet, bin_records, normalize, simulate_records


def single_bin(t=1.0):
    return empirical_histogram([t], 0.01)


def test_vacuum_signal_matches_vacuum_port():
    rec = simulate_records(two_state(0.0), 1.0, ChannelParams(), 100_000, seed=1)
    nm = normalize(rec.signal, rec.vacuum)
    assert np.all(np.abs(nm.mean) < 3 * nm.se_mean)
    # vacuum sits at 1 SNU, so the excess over vacuum vanishes
    assert np.all(np.abs(nm.state_var - 1.0) < 3 * nm.se_var)


def test_coherent_state_recovered():
    rec = simulate_records(calibrated([0.9]), 1.0, ChannelParams(), 200_000, seed=2)
    nm = normalize(rec.signal, rec.vacuum)
    assert abs(nm.mean[0] - 1.8) < 3 * nm.se_mean[0]
    assert abs(nm.mean[1]) < 3 * nm.se_mean[1]
    assert np.all(np.abs(nm.state_var - 1.0) < 3 * nm.se_var)


def test_excess_noise_recovered():
    rec = simulate_records(calibrated([0.5]), 0.7, ChannelParams(efficiency=0.83, excess_noise=0.01), 400_000, seed=3)
    nm = normalize(rec.signal, rec.vacuum)
    assert np.all(np.abs(nm.state_var - 1.01) < 3 * nm.se_var)
    assert nm.amplitude.real == pytest.approx(math.sqrt(0.7 * 0.83) * 0.5, abs=3 * nm.se_mean[0])


def test_known_gaussian_fixture(rng):
    # raw outcomes with arbitrary gain: vacuum variance 2 g^2, signal variance (v + 1) g^2
    g, n = 3.7, 300_000
    vac = g * math.sqrt(2) * rng.standard_normal((n, 2))
    sig = g * (np.array([0.6, -1.2]) + np.sqrt([2.3, 2.05]) * rng.standard_normal((n, 2)))
    nm = normalize(sig, vac)
    assert np.all(np.abs(nm.mean - [0.6, -1.2]) < 3 * nm.se_mean)
    assert np.all(np.abs(nm.state_var - [1.3, 1.05]) < 3 * nm.se_var)


def test_normalization_scale_invariance():
    rec = simulate_records(four_state(0.8), 0.6, ChannelParams(excess_noise=0.01), 20_000, seed=4)
    a = normalize(rec.signal, rec.vacuum)
    b = normalize(rec.scaled(7.3).signal, rec.scaled(7.3).vacuum)
    for name in ("mean", "state_var", "se_mean", "se_var"):
        assert np.allclose(getattr(a, name), getattr(b, name), rtol=1e-12, atol=1e-12)


def test_simulated_raw_scale_invariance():
    kw = dict(alphabet=four_state(0.8), transmissions=0.6, params=ChannelParams(excess_noise=0.01), n_slots=20_000, seed=5)
    a = bin_records(simulate_records(**kw), single_bin(0.6), 4)
    b = bin_records(simulate_records(raw_scale=7.3, **kw), single_bin(0.6), 4)
    for u, v in zip(a.state_moments(0), b.state_moments(0)):
        assert np.allclose([u.mean_x, u.mean_p, u.var_x, u.var_p], [v.mean_x, v.mean_p, v.var_x, v.var_p], atol=1e-9)


def test_heterodyne_vacuum_variance_is_two():
    rec = simulate_records(two_state(0.0), 0.5, ChannelParams(), 100_000, seed=6)
    out = detection.normalized_outcomes(rec)
    assert out.var(axis=0, ddof=1) == pytest.approx([2.0, 2.0], rel=0.02)


def test_degenerate_vacuum_rejected():
    with pytest.raises(detection.NormalizationError):
        normalize(np.ones((10, 2)), np.zeros((10, 2)))


def test_variance_stderr_for_15000_states():
    m = detection._normalize(15000, np.zeros(2), np.full(2, 2.02), 0.0, 15000, np.full(2, 2.0))
    assert m.se_var / (m.state_var + 1) == pytest.approx([0.01633] * 2, abs=1e-5)


def test_single_bin_reduces_to_normalize():
    rec = simulate_records(two_state(0.7), 0.8, ChannelParams(), 30_000, seed=7)
    binned = bin_records(rec, single_bin(0.8), 2)
    for k in range(2):
        direct = normalize(rec.signal[rec.labels == k], rec.vacuum)
        got = binned.entries[0][k]
        assert np.allclose(got.mean, direct.mean, rtol=1e-12)
        assert np.allclose(got.state_var, direct.state_var, rtol=1e-11)


def test_order_invariance(rng):
    rec = simulate_records(four_state(0.9), np.linspace(0.5, 0.9, 40_000), ChannelParams(), 40_000, seed=8)
    hist = empirical_histogram(rec.monitor_T, 0.05)
    a = bin_records(rec, hist, 4)
    b = bin_records(rec[rng.permutation(len(rec))], hist, 4)
    assert a.bins == b.bins
    for bn in a.bins:
        for u, v in zip(a.entries[bn], b.entries[bn]):
            assert np.allclose(u.mean, v.mean, rtol=1e-12) and np.allclose(u.state_var, v.state_var, rtol=1e-10)


def test_chunking_invariance():
    rec = simulate_records(four_state(0.9), np.linspace(0.5, 0.9, 70_000), ChannelParams(), 70_000, seed=9)
    hist = empirical_histogram(rec.monitor_T, 0.05)
    whole = bin_records(rec, hist, 4)
    pieces = bin_records([rec[i:i + 9999] for i in range(0, len(rec), 9999)], hist, 4)
    for bn in whole.bins:
        for u, v in zip(whole.entries[bn], pieces.entries[bn]):
            assert np.array_equal(u.mean, v.mean) and np.array_equal(u.state_var, v.state_var)


def test_out_of_range_counted():
    rec = simulate_records(two_state(0.5), np.r_[np.full(500, 0.8), np.full(20, 0.3)], ChannelParams(), 520, seed=1)
    binned = bin_records(rec, single_bin(0.8), 2)
    assert binned.out_of_range == 20


def test_unretained_bins_dropped():
    t = np.r_[np.full(1000, 0.805), np.full(5, 0.6)]
    hist = empirical_histogram(t, 0.01, min_count=100)
    rec = simulate_records(two_state(0.5), t, ChannelParams(), len(t), seed=2)
    binned = bin_records(rec, hist, 2)
    assert [hist.bin_edges[b] for b in binned.bins] == pytest.approx([0.8])


def test_vacuum_variance_linear_in_transmission():
    t = np.linspace(0.55, 0.95, 200_000)
    rec = simulate_records(four_state(1.0), t, ChannelParams(), len(t), seed=10)
    binned = bin_records(rec, empirical_histogram(t, 0.05), 4)
    tm = np.array([binned.t_mean[b] for b in binned.bins])
    vv = np.array([binned.raw_vacuum_var[b][0] for b in binned.bins])
    slope = (tm @ vv) / (tm @ tm)
    assert np.max(np.abs(vv - slope * tm) / vv) < 0.03
    assert slope == pytest.approx(2.0, rel=0.02)


def test_amplitude_scales_with_sqrt_t():
    t = np.linspace(0.55, 0.95, 200_000)
    rec = simulate_records(four_state(1.0), t, ChannelParams(), len(t), seed=11)
    binned = bin_records(rec, empirical_histogram(t, 0.05), 4)
    for b in binned.bins:
        m = binned.entries[b][0]
        assert m.amplitude.real / math.sqrt(binned.t_mean[b]) == pytest.approx(1.0, abs=4 * m.se_mean[0] / 2)


def test_simulation_deterministic_per_block():
    kw = dict(alphabet=two_state(0.6), transmissions=0.7, params=ChannelParams(), seed=12)
    a = simulate_records(n_slots=1000, **kw)
    b = simulate_records(n_slots=1000, **kw)
    assert np.array_equal(a.signal, b.signal) and np.array_equal(a.labels, b.labels)
    big = simulate_records(n_slots=detection.BLOCK + 10, **kw)
    first = simulate_records(n_slots=detection.BLOCK, **kw)
    assert np.array_equal(big.signal[: detection.BLOCK], first.signal)


def test_simulation_errors():
    with pytest.raises(ValueError):
        simulate_records(two_state(0.5), 0.5, ChannelParams(), 0, seed=1)
    with pytest.raises(ValueError):
        simulate_records(two_state(0.5), [0.5, 0.5], ChannelParams(), 3, seed=1)
    with pytest.raises(ValueError):
        detection.SlotRecord(0, 0, 0, 0, 0, 1.5)


def test_record_file_roundtrip(tmp_path):
    rec = simulate_records(four_state(0.9), 0.7, ChannelParams(), 300, seed=13)
    path = tmp_path / "r.csv"
    assert detection.write_records(rec, path, ["test"]) == 300
    back, stats = detection.read_records(path)
    assert stats.records == 300 and stats.skipped == 0
    assert np.array_equal(back.signal, rec.signal) and np.array_equal(back.monitor_T, rec.monitor_T)


def test_unparseable_lines_skipped(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("# k,...\n0,1,2,3,4,0.5\ngarbage\n1,1,2,3\n1,1,nan,3,4,0.5\n2,1,2,3,4,1.5\n1,0.1,0.2,0.3,0.4,0.6\n")
    recs, stats = detection.read_records(path)
    assert len(recs) == 2 and stats.skipped == 4 and stats.first_bad == [3, 4, 5, 6]


def test_slot_record_iteration():
    rec = simulate_records(two_state(0.6), 0.7, ChannelParams(), 5, seed=14)
    again = RecordSet.from_records(list(rec))
    assert np.array_equal(again.vacuum, rec.vacuum)


def test_moment_file_roundtrip(tmp_path):
    t = np.linspace(0.6, 0.8, 20_000)
    rec = simulate_records(four_state(0.9), t, ChannelParams(), len(t), seed=15)
    binned = bin_records(rec, empirical_histogram(t, 0.05), 4)
    path = tmp_path / "m.csv"
    detection.write_moments(binned, path)
    table = detection.read_moments(path)
    assert len(table.moments) == len(binned.bins)
    for row, b in zip(table.moments, binned.bins):
        for u, v in zip(row, binned.state_moments(b)):
            assert (u.mean_x, u.var_p, u.se_var) == (v.mean_x, v.var_p, v.se_var)


def test_q_estimate_coherent_state_oracle():
    alpha = 0.6 + 0.3j
    rec = simulate_records(calibrated([alpha]), 1.0, ChannelParams(), 200_000, seed=16)
    q = detection.estimate_q(detection.normalized_outcomes(rec), GridSpec(3.0, 0.15, alpha))
    cr, ci = q.centers()
    # bin averages of the exact Q by 5x5 midpoint sub-sampling
    h = np.diff(q.re_edges)[0]
    sub = (np.arange(5) - 2) * h / 5
    rho = fock.coherent_state(alpha, 30).density()
    exact = np.zeros_like(q.density)
    for dx in sub:
        for dy in sub:
            b = (cr[:, None] + dx) + 1j * (ci[None, :] + dy)
            exact += fock.q_function(rho, b, warn_ratio=1.0).real / 25
    assert np.max(np.abs(q.density - exact)) < 3 * q.stderr().max()


def test_q_vacuum_peak_and_coverage():
    rec = simulate_records(two_state(0.0), 1.0, ChannelParams(), 100_000, seed=17)
    q = detection.estimate_q(detection.normalized_outcomes(rec))
    assert q.peak() == pytest.approx(1 / math.pi, rel=0.03)
    with pytest.warns(detection.CoverageWarning):
        detection.estimate_q(detection.normalized_outcomes(rec), GridSpec(half_width=0.5))


def test_stokes_conversion():
    s1, s2, s3 = detection.simulate_stokes(0.5 - 0.2j, 200_000, 1e6, seed=18)
    x, p = detection.stokes_to_quadrature(s1, s2, s3)
    assert x.mean() == pytest.approx(1.0, abs=0.01) and p.mean() == pytest.approx(-0.4, abs=0.01)
    # coherent light saturates the uncertainty relation
    assert s1.var() * s2.var() / s3**2 == pytest.approx(1.0, rel=0.02)
    with pytest.raises(ValueError):
        detection.stokes_to_quadrature(s1, s2, 0.0)
