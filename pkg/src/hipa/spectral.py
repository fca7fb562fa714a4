"""2-D DFT analysis: transforms, radial masks, band split/mix and radial PSD.

Spectra are complex arrays with DC at index (0, 0) (unshifted layout). Mask
radii are measured on the centered grid, i.e. with signed frequencies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hipa.grid import as_image, check_same_shape, write_csv

HERMITIAN_TOL = 1e-6
DEFAULT_CUTOFF = 5.0


class DegenerateSpectrum(ValueError):
    pass


class NonHermitianSpectrum(ValueError):
    pass


def dft(image) -> np.ndarray:
    return np.fft.fft2(as_image(image))


def idft(spectrum) -> np.ndarray:
    F = np.asarray(spectrum, dtype=np.complex128)
    if F.ndim != 2 or F.size == 0:
        raise ValueError(f"spectrum must be a non-empty 2-D grid, got {F.shape}")
    x = np.fft.ifft2(F)
    resid = np.max(np.abs(x.imag))
    # rounding residue grows with magnitude; unit-scale images get the plain bound
    if resid > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(x.real)))):
        raise NonHermitianSpectrum(f"non-Hermitian spectrum: imaginary residue {resid:.3g}")
    return x.real.copy()


def radius_grid(height: int, width: int) -> np.ndarray:
    """Centered radius sqrt(cu^2 + cv^2) per bin, in the unshifted layout."""
    cu = np.fft.fftfreq(height) * height
    cv = np.fft.fftfreq(width) * width
    return np.hypot(cu[:, None], cv[None, :])


@dataclass(frozen=True)
class FrequencyMask:
    weights: np.ndarray
    kind: str
    cutoff: float

    @property
    def shape(self):
        return self.weights.shape


def make_mask(height: int, width: int, kind: str, cutoff: float) -> FrequencyMask:
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    r = radius_grid(height, width)
    if kind == "high":
        w = (r > cutoff).astype(np.float64)
    elif kind == "low":
        w = (r <= cutoff).astype(np.float64)
    else:
        raise ValueError(f"mask kind must be 'high' or 'low', got {kind!r}")
    w.flags.writeable = False
    return FrequencyMask(w, kind, float(cutoff))


def apply_mask(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Batched real filtering over the last two axes. The radial mask is even
    under (u, v) -> (-u, -v), so the result is real and the operator is
    self-adjoint."""
    return np.fft.ifft2(np.fft.fft2(x, axes=(-2, -1)) * weights, axes=(-2, -1)).real


def extract_band(image, mask: FrequencyMask) -> np.ndarray:
    img = as_image(image)
    if img.shape != mask.shape:
        raise ValueError(f"dimension mismatch: image {img.shape} vs mask {mask.shape}")
    return idft(dft(img) * mask.weights)


def mix_bands(high_source, low_source, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """High band of one image recombined with the low band of another."""
    hi, lo = as_image(high_source, "high_source"), as_image(low_source, "low_source")
    check_same_shape(hi, lo)
    mh = make_mask(*hi.shape, "high", cutoff)
    ml = make_mask(*hi.shape, "low", cutoff)
    return idft(dft(hi) * mh.weights + dft(lo) * ml.weights)


def max_radius(height: int, width: int) -> float:
    return float(np.hypot(height / 2.0, width / 2.0))


def bin_edges(height: int, width: int, n_bins: int) -> np.ndarray:
    return np.linspace(0.0, max_radius(height, width), n_bins + 1)


def radial_psd(image, n_bins: int) -> np.ndarray:
    """Energy |F|^2 summed in concentric radius bins, normalized to sum 1."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    img = as_image(image)
    power = np.abs(dft(img)) ** 2
    total = power.sum()
    if not total > 0:
        raise DegenerateSpectrum("degenerate spectrum: zero total energy")
    r = radius_grid(*img.shape)
    rmax = max_radius(*img.shape)
    idx = np.minimum(np.floor(r * n_bins / rmax).astype(np.int64), n_bins - 1)
    return np.bincount(idx.ravel(), weights=power.ravel(), minlength=n_bins) / total


def high_band_energy_ratio(image, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Fraction of non-DC spectral energy beyond ``cutoff``."""
    img = as_image(image)
    power = np.abs(dft(img)) ** 2
    r = radius_grid(*img.shape)
    ac = power[r > 0].sum()
    if not ac > 0:
        raise DegenerateSpectrum("degenerate spectrum: no energy outside DC")
    return float(power[r > cutoff].sum() / ac)


def write_psd_csv(path, psds, shape, labels=None) -> None:
    """One row group per image: image, bin_index, radius_lo, radius_hi,
    normalized_energy."""
    edges = bin_edges(shape[0], shape[1], len(psds[0]))
    rows = []
    for k, psd in enumerate(psds):
        name = labels[k] if labels else str(k)
        for b, e in enumerate(psd):
            rows.append([name, b, float(edges[b]), float(edges[b + 1]), float(e)])
    write_csv(path, ["image", "bin_index", "radius_lo", "radius_hi", "normalized_energy"], rows)
