import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfade import channel
from cvfade.channel import BeamGeometry, ChannelParams, HistogramBuilder, empirical_histogram, propagate


def monte_carlo_transmission(geom, offset, n=4_000_000, seed=3):
    # photons drawn from the Gaussian intensity profile, counted inside the aperture
    rng = np.random.default_rng(seed)
    xy = rng.normal(0.0, geom.beam_radius / 2, size=(n, 2))
    xy[:, 0] += offset
    return np.mean(np.hypot(xy[:, 0], xy[:, 1]) <= geom.aperture_radius)


def test_propagate_identity():
    amp, var = propagate(0.7 - 0.2j, 1.3, 1.0, ChannelParams())
    assert amp == 0.7 - 0.2j and var == pytest.approx(1.3, abs=1e-15)


def test_propagate_measured_attenuation():
    amp, _ = propagate(1.0, 1.0, 0.812, ChannelParams())
    assert abs(amp) == pytest.approx(0.901, abs=0.002)


def test_propagate_plug_in_variance():
    _, var = propagate(0.0, 1.01, 0.5, ChannelParams(efficiency=0.83))
    assert var == pytest.approx(1.00415, abs=1e-12)


def test_propagate_variance_against_gaussian_samples(rng):
    # beam splitter on a noisy input plus vacuum, then detector loss as a second splitter
    v_in, t, eta, n = 1.01, 0.5, 0.83, 2_000_000
    x = rng.normal(0, math.sqrt(v_in), n)
    for g in (t, eta):
        x = math.sqrt(g) * x + math.sqrt(1 - g) * rng.normal(0, 1, n)
    _, var = propagate(0.0, v_in, t, ChannelParams(efficiency=eta))
    assert x.var() == pytest.approx(var, abs=4 * math.sqrt(2 / n) * var)


@pytest.mark.parametrize("noise_at", ["receiver", "sender"])
def test_propagate_noise_placement(noise_at):
    p = ChannelParams(efficiency=0.8, excess_noise=0.05, noise_at=noise_at)
    _, var = propagate(1.0, 1.0, 0.5, p)
    assert var == pytest.approx(1.05 if noise_at == "receiver" else 1.02, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 3), st.floats(0.05, 1))
def test_pure_loss_semigroup(t1, t2, v, eta):
    p = ChannelParams(efficiency=eta)
    a1, v1 = propagate(0.6j, v, t1, p)
    a2, v2 = propagate(a1, v1, t2, ChannelParams())
    a12, v12 = propagate(0.6j, v, t1 * t2, p)
    assert a2 == pytest.approx(a12, abs=1e-12) and v2 == pytest.approx(v12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0.05, 1), st.floats(0, 0.5))
def test_coherent_input_gets_vacuum_plus_noise(t, eta, eps):
    _, var = propagate(1.0, 1.0, t, ChannelParams(efficiency=eta, excess_noise=eps))
    assert var == pytest.approx(1 + eps, abs=1e-14)


@pytest.mark.parametrize("t", [-0.1, 1.1])
def test_propagate_rejects_bad_transmission(t):
    with pytest.raises(ValueError):
        propagate(1.0, 1.0, t, ChannelParams())


def test_propagate_rejects_subvacuum_variance():
    with pytest.raises(ValueError):
        propagate(1.0, 0.9, 0.5, ChannelParams())


def test_channel_params_validation():
    for kw in ({"efficiency": 0}, {"excess_noise": -1}, {"monitor_tap": 0.05}, {"noise_at": "middle"}):
        with pytest.raises(ValueError):
            ChannelParams(**kw)


def test_constant_samples_single_bin():
    h = empirical_histogram([0.8] * 100, 0.009)
    assert h.retained.sum() == 1
    assert h.probabilities[h.retained][0] == pytest.approx(1.0)


def test_all_samples_at_one():
    h = empirical_histogram([1.0] * 10, 0.01)
    assert h.n_bins == 1 and h.bin_edges[-1] == 1.0 and h.probabilities[0] == 1.0


def test_histogram_mean_is_sample_mean(rng):
    t = rng.beta(8, 2.5, 50_000)
    h = empirical_histogram(t, 0.009)
    assert h.mean == pytest.approx(t.mean(), abs=1e-12)
    assert h.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(h.bin_edges) > 0)


def test_histogram_filtering(rng):
    t = rng.beta(8, 2.5, 50_000)
    h = empirical_histogram(t, 0.009, min_count=200)
    assert np.all(h.counts[h.retained] >= 200)
    assert np.all(h.counts[~h.retained] < 200)
    full = empirical_histogram(t, 0.009)
    # filtering does not renormalize
    assert np.array_equal(h.probabilities, full.probabilities)
    assert h.retained_mass < 1.0


def test_tune_min_count_closest(rng):
    t = rng.beta(8, 2.5, 50_000)
    h = empirical_histogram(t, 0.009)
    c = channel.tune_min_count(h, 0.92)
    masses = {int(k): h.probabilities[h.counts >= k].sum() for k in np.unique(h.counts[h.counts > 0])}
    best = min(abs(m - 0.92) for m in masses.values())
    assert abs(masses[c] - 0.92) == pytest.approx(best, abs=1e-15)


def test_streaming_builder_matches_one_shot(rng):
    t = rng.beta(8, 2.5, 30_000)
    b = HistogramBuilder(0.009)
    for chunk in np.array_split(t, 7):
        b.add(chunk)
    h1, h2 = b.build(50), empirical_histogram(t, 0.009, 50)
    assert np.array_equal(h1.counts, h2.counts)
    assert np.array_equal(h1.bin_edges, h2.bin_edges)
    assert np.allclose(h1.bin_means, h2.bin_means, rtol=1e-13)


def test_histogram_errors():
    with pytest.raises(ValueError):
        empirical_histogram([], 0.01)
    with pytest.raises(ValueError):
        empirical_histogram([0.5], 0.0)
    with pytest.raises(ValueError):
        empirical_histogram([1.2], 0.01)


def test_bin_index_edges(rng):
    h = empirical_histogram(rng.uniform(0.2, 0.4, 1000), 0.05)
    assert h.bin_index(h.bin_edges[0]) == 0
    assert h.bin_index(h.bin_edges[-1]) == h.n_bins - 1
    assert h.bin_index(0.05) == -1


def test_histogram_file_roundtrip(tmp_path, rng):
    h = empirical_histogram(rng.beta(8, 2.5, 5000), 0.009, 40)
    p = tmp_path / "h.csv"
    channel.write_histogram(h, p, ["note"])
    back = channel.read_histogram(p)
    for name in ("bin_edges", "counts", "probabilities", "bin_means", "retained"):
        assert np.array_equal(getattr(back, name), getattr(h, name)), name


def test_read_transmissions(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# monitor\n0.7\n\n0.75  # tail\n")
    assert channel.read_transmissions(p).tolist() == [0.7, 0.75]


def test_beam_centered_large_aperture():
    g = BeamGeometry(1.0, 5.0, 0.0)
    assert channel.beam_wander_transmission(g, 0.0) == pytest.approx(1.0, abs=1e-12)
    # closed form for a centred beam
    g = BeamGeometry(1.0, 0.8, 0.0)
    assert channel.beam_wander_transmission(g, 0.0) == pytest.approx(1 - math.exp(-2 * 0.64), abs=1e-10)


def test_beam_far_offset_vanishes():
    assert channel.beam_wander_transmission(BeamGeometry(1.0, 1.0, 0.1), 20.0) < 1e-12


@pytest.mark.parametrize("geom, r", [(BeamGeometry(1.0, 0.873, 0.1), 0.4), (BeamGeometry(0.7, 1.2, 0.1), 1.1)])
def test_beam_against_monte_carlo(geom, r):
    got = channel.beam_wander_transmission(geom, r)
    assert got == pytest.approx(monte_carlo_transmission(geom, r), abs=1e-3)


def test_beam_monotone_in_offset():
    g = BeamGeometry(1.0, 0.873, 0.1)
    vals = [channel.beam_wander_transmission(g, r) for r in np.linspace(0, 4, 40)]
    assert np.all(np.diff(vals) <= 1e-12)
    with pytest.raises(ValueError):
        channel.beam_wander_transmission(g, -1.0)


def test_sampling_deterministic_and_zero_jitter():
    g = BeamGeometry(1.0, 0.9, 0.2)
    assert np.array_equal(channel.sample_transmissions(g, 100, 5), channel.sample_transmissions(g, 100, 5))
    z = channel.sample_transmissions(BeamGeometry(1.0, 0.9, 0.0), 50, 1)
    assert np.all(z == z[0])
    with pytest.raises(ValueError):
        channel.sample_transmissions(g, 0, 1)


def test_sample_mean_matches_quadrature():
    g = BeamGeometry(1.0, 0.873, 0.2)
    t = channel.sample_transmissions(g, 200_000, 11)
    se = t.std() / math.sqrt(t.size)
    assert abs(t.mean() - channel.expected_transmission(g)) < 3 * se
