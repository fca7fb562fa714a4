import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hipa.grid import grating, read_csv, smooth_disk
from hipa.rng import SplitMix64
from hipa.spectral import (DegenerateSpectrum, NonHermitianSpectrum, bin_edges, dft, extract_band,
                           high_band_energy_ratio, idft, make_mask, max_radius, mix_bands, radial_psd,
                           write_psd_csv)
from oracles import direct_dft, lattice_points

small = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(-1, 1))


def rand(seed, shape):
    return SplitMix64(seed).uniform(shape)


@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (8, 8), (16, 16), (7, 16)])
def test_matches_direct_sum(shape):
    x = rand(1, shape)
    assert np.max(np.abs(dft(x) - direct_dft(x))) < 1e-9


def test_constant_is_dc_only():
    F = dft(np.full((6, 4), 0.3))
    assert abs(F[0, 0] - 0.3 * 24) < 1e-9
    F[0, 0] = 0
    assert np.max(np.abs(F)) < 1e-9


def test_single_cosine():
    m = np.arange(8)[:, None] * np.ones((1, 8))
    P = np.abs(dft(np.cos(2 * np.pi * m / 8))) ** 2
    assert P[1, 0] == pytest.approx(P[7, 0]) and P[1, 0] > 0
    P[1, 0] = P[7, 0] = 0
    assert P.max() < 1e-18


@settings(max_examples=50, deadline=None)
@given(small)
def test_roundtrip_parseval_linearity(x):
    F = dft(x)
    assert np.max(np.abs(idft(F) - x)) < 1e-9
    e = np.sum(x * x)
    assert abs(e - np.sum(np.abs(F) ** 2) / x.size) <= 1e-9 * max(e, 1e-300) + 1e-15
    y = x[::-1, ::-1].copy()
    assert np.max(np.abs(dft(2 * x - 3 * y) - (2 * dft(x) - 3 * dft(y)))) < 1e-9


def test_zero_and_grating_inverse():
    assert np.all(idft(np.zeros((4, 4))) == 0)
    g = grating(16, 3, 2, 0.4)
    assert np.max(np.abs(idft(dft(g)) - g)) < 1e-9


def test_non_hermitian_rejected():
    F = np.zeros((4, 4), complex)
    F[1, 0] = 1.0
    with pytest.raises(NonHermitianSpectrum, match="non-Hermitian"):
        idft(F)


def test_hermitian_check_scales_with_magnitude():
    x = 500.0 * SplitMix64(8).normal((32, 32))
    np.testing.assert_allclose(mix_bands(x, x[::-1]) + mix_bands(x[::-1], x), x + x[::-1], atol=1e-9)
    F = dft(x)
    F[1, 0] += 1e-3 * np.abs(F).max()
    with pytest.raises(NonHermitianSpectrum):
        idft(F)


def test_mask_partition_and_limits():
    for c in (0, 1, 2.5, 5, 30):
        hi, lo = make_mask(9, 12, "high", c), make_mask(9, 12, "low", c)
        assert np.all(hi.weights + lo.weights == 1)
    z = make_mask(8, 8, "high", 0).weights
    assert z[0, 0] == 0 and z.sum() == 63
    assert np.all(make_mask(8, 8, "low", max_radius(8, 8)).weights == 1)
    with pytest.raises(ValueError):
        make_mask(4, 4, "high", -1)


def test_lowpass_count_is_lattice_count():
    assert make_mask(64, 64, "low", 5).weights.sum() == lattice_points(5, 64) == 81


@settings(max_examples=30, deadline=None)
@given(small, st.floats(0, 8))
def test_band_partition_identity(x, c):
    hi = extract_band(x, make_mask(*x.shape, "high", c))
    lo = extract_band(x, make_mask(*x.shape, "low", c))
    assert np.max(np.abs(hi + lo - x)) < 1e-9


def test_extract_band_examples():
    x = rand(2, (16, 16))
    assert np.max(np.abs(extract_band(x, make_mask(16, 16, "low", 100)) - x)) < 1e-9
    assert np.max(np.abs(extract_band(np.full((8, 8), 0.7), make_mask(8, 8, "high", 0)))) < 1e-9
    with pytest.raises(ValueError):
        extract_band(x, make_mask(8, 8, "high", 1))


def test_mix_bands():
    x = rand(3, (16, 16))
    assert np.max(np.abs(mix_bands(x, x, 5) - x)) < 1e-9
    g = grating(32, 8, 0) + 0.5
    d = smooth_disk(32, 16, 16, 8, 2)
    m = mix_bands(g, d, 5)
    hi = make_mask(32, 32, "high", 5).weights > 0
    assert np.max(np.abs(np.abs(dft(m)[hi]) ** 2 - np.abs(dft(g)[hi]) ** 2)) < 1e-9
    # the high mask is empty past the largest radius, so only the low source survives
    assert np.max(np.abs(mix_bands(g, d, max_radius(32, 32)) - d)) < 1e-9
    with pytest.raises(ValueError):
        mix_bands(x, rand(4, (8, 8)))


def test_psd_examples():
    p = radial_psd(np.full((8, 8), 0.4), 6)
    assert p[0] == pytest.approx(1.0) and np.all(p[1:] == 0)
    with pytest.raises(DegenerateSpectrum):
        radial_psd(np.zeros((4, 4)), 3)
    p = radial_psd(grating(64, 8, 0), 32)
    e = bin_edges(64, 64, 32)
    k = int(np.argmax(p))
    assert e[k] <= 8 < e[k + 1]
    assert radial_psd(rand(5, (10, 10)), 7).sum() == pytest.approx(1.0)


def test_psd_bins_match_loop_oracle():
    x = rand(6, (12, 10))
    P = np.abs(direct_dft(x)) ** 2
    rmax = np.hypot(6, 5)
    ref = np.zeros(5)
    for u in range(12):
        for v in range(10):
            cu = u if u < 6 else u - 12
            cv = v if v < 5 else v - 10
            b = min(int(np.floor(np.hypot(cu, cv) / (rmax / 5))), 4)
            ref[b] += P[u, v]
    assert np.max(np.abs(radial_psd(x, 5) - ref / ref.sum())) < 1e-12


def test_white_noise_psd_density_flat():
    # energy per lattice cell is flat for white noise: divide bin energy by cell count
    draws = [radial_psd(SplitMix64(100 + i).normal((64, 64)), 16) for i in range(32)]
    mean = np.mean(draws, axis=0)
    from hipa.spectral import radius_grid
    r = radius_grid(64, 64)
    idx = np.minimum(np.floor(r * 16 / max_radius(64, 64)).astype(int), 15)
    counts = np.bincount(idx.ravel(), minlength=16)
    density = mean / counts
    inner = density[1:11]  # bins fully inside the inscribed circle
    assert (inner.max() - inner.min()) / inner.mean() < 0.10


def test_high_band_ratio():
    assert high_band_energy_ratio(grating(32, 8, 0) + 0.2, 5) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DegenerateSpectrum):
        high_band_energy_ratio(np.full((8, 8), 0.5))
    smooth = extract_band(smooth_disk(32, 16, 16, 9, 2), make_mask(32, 32, "low", 5))
    assert high_band_energy_ratio(smooth, 5) < 1e-9
    x = rand(7, (16, 16))
    assert 0.0 <= high_band_energy_ratio(x) <= 1.0


def test_psd_csv(tmp_path):
    psds = [radial_psd(rand(8, (8, 8)), 4), radial_psd(rand(9, (8, 8)), 4)]
    write_psd_csv(tmp_path / "p.csv", psds, (8, 8), ["a", "b"])
    header, rows = read_csv(tmp_path / "p.csv")
    assert header == ["image", "bin_index", "radius_lo", "radius_hi", "normalized_energy"]
    assert len(rows) == 8 and rows[4][0] == "b"
    assert float(rows[3][3]) == pytest.approx(max_radius(8, 8))
