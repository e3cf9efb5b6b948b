"""Wavelet and Fourier transforms along the last (time) axis.

The level-1 DWT uses the Mallat filter bank with periodic extension::

    A(n) = sum_k H(k) x((2n + 1 - k) mod W)
    D(n) = sum_k G(k) x((2n + 1 - k) mod W)
    x(n) = sum_k h(n - 2k - 1) A(k) + g(n - 2k - 1) D(k)

The one-sample advance makes the Haar pair act on (x(2n), x(2n+1)), so no
coefficient straddles the end and the start of a window. Synthesis taps are
stored anti-causally: ``rec_lo[j]`` is h(-j). With that convention an
orthonormal filter pair has ``rec_lo == dec_lo`` and ``rec_hi == dec_hi``.

Both transforms are evaluated as dense matrix products. The operator
matrices are cached per (filter, length) and are exposed so the model can
apply the same linear maps inside the autodiff graph.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import IO

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "WaveletFilterPair", "HAAR", "DB2", "FILTERS", "get_filters",
    "DecomposedSeries", "ComplexSpectrum",
    "analysis_matrices", "synthesis_matrices", "moving_average_matrix",
    "dwt_level1", "idwt_level1", "wavedec", "waverec",
    "dft_matrices", "dft", "idft", "spectrum_report", "top_k_energy_fraction",
]


@dataclass(frozen=True)
class WaveletFilterPair:
    name: str
    dec_lo: tuple[float, ...]
    dec_hi: tuple[float, ...]
    rec_lo: tuple[float, ...]
    rec_hi: tuple[float, ...]

    @classmethod
    def orthonormal(cls, name: str, lowpass) -> "WaveletFilterPair":
        """Build the quadrature-mirror pair G(k) = (-1)^k H(K-1-k)."""
        h = tuple(float(v) for v in lowpass)
        n = len(h)
        g = tuple((-1) ** k * h[n - 1 - k] for k in range(n))
        return cls(name, h, g, h, g)


_S2 = np.sqrt(2.0)
_S3 = np.sqrt(3.0)
HAAR = WaveletFilterPair("haar", (1 / _S2, 1 / _S2), (1 / _S2, -1 / _S2),
                         (1 / _S2, 1 / _S2), (1 / _S2, -1 / _S2))
DB2 = WaveletFilterPair.orthonormal(
    "db2", np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * _S2))
FILTERS = {"haar": HAAR, "db2": DB2}


def get_filters(name: str | WaveletFilterPair) -> WaveletFilterPair:
    if isinstance(name, WaveletFilterPair):
        return name
    try:
        return FILTERS[name]
    except KeyError:
        raise ConfigError(f"unknown wavelet {name!r}; choose from {sorted(FILTERS)}") from None


@dataclass(frozen=True)
class DecomposedSeries:
    trend: np.ndarray
    seasonal: np.ndarray
    original_length: int


@dataclass(frozen=True)
class ComplexSpectrum:
    amplitudes: np.ndarray
    source_length: int

    @property
    def modulus(self) -> np.ndarray:
        return np.abs(self.amplitudes)


def _check_even(w: int) -> None:
    if w < 2 or w % 2:
        raise DimensionError(
            f"window length must be even and >= 2 for a level-1 DWT, got {w}; "
            "pad or trim the series to an even length")


@lru_cache(maxsize=64)
def _analysis(filters: WaveletFilterPair, w: int) -> tuple[np.ndarray, np.ndarray]:
    half = w // 2
    lo = np.zeros((w, half))
    hi = np.zeros((w, half))
    for n in range(half):
        for j, c in enumerate(filters.dec_lo):
            lo[(2 * n + 1 - j) % w, n] += c
        for j, c in enumerate(filters.dec_hi):
            hi[(2 * n + 1 - j) % w, n] += c
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


@lru_cache(maxsize=64)
def _synthesis(filters: WaveletFilterPair, w: int) -> tuple[np.ndarray, np.ndarray]:
    half = w // 2
    lo = np.zeros((half, w))
    hi = np.zeros((half, w))
    for k in range(half):
        for j, c in enumerate(filters.rec_lo):
            lo[k, (2 * k + 1 - j) % w] += c
        for j, c in enumerate(filters.rec_hi):
            hi[k, (2 * k + 1 - j) % w] += c
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def analysis_matrices(w: int, filters=HAAR) -> tuple[np.ndarray, np.ndarray]:
    """(W, W/2) matrices so that ``x @ lo`` is A and ``x @ hi`` is D."""
    _check_even(w)
    return _analysis(get_filters(filters), w)


def synthesis_matrices(w: int, filters=HAAR) -> tuple[np.ndarray, np.ndarray]:
    """(W/2, W) matrices so that ``A @ lo + D @ hi`` reconstructs x."""
    _check_even(w)
    return _synthesis(get_filters(filters), w)


@lru_cache(maxsize=32)
def moving_average_matrix(w: int, window: int = 25) -> np.ndarray:
    """(W, W) centred moving average with edge replication: ``trend = x @ M``."""
    if window < 1:
        raise ConfigError(f"moving-average window must be >= 1, got {window}")
    m = np.zeros((w, w))
    lo = -(window // 2)
    for t in range(w):
        for j in range(lo, lo + window):
            m[min(max(t + j, 0), w - 1), t] += 1.0 / window
    m.setflags(write=False)
    return m


def dwt_level1(x, filters=HAAR) -> DecomposedSeries:
    x = np.asarray(x, dtype=np.float64)
    w = x.shape[-1]
    lo, hi = analysis_matrices(w, filters)
    return DecomposedSeries(x @ lo, x @ hi, w)


def idwt_level1(d: DecomposedSeries, filters=HAAR) -> np.ndarray:
    a = np.asarray(d.trend, dtype=np.float64)
    dd = np.asarray(d.seasonal, dtype=np.float64)
    if a.shape != dd.shape:
        raise DimensionError(f"trend/seasonal shapes differ: {a.shape} vs {dd.shape}")
    w = 2 * a.shape[-1]
    if d.original_length != w:
        raise DimensionError(
            f"components of length {a.shape[-1]} cannot rebuild length {d.original_length}")
    lo, hi = synthesis_matrices(w, filters)
    return a @ lo + dd @ hi


def wavedec(x, filters=HAAR, level: int = 1) -> list[np.ndarray]:
    """Multi-level decomposition: ``[A_level, D_level, ..., D_1]``."""
    if level < 1:
        raise ConfigError(f"level must be >= 1, got {level}")
    details = []
    a = np.asarray(x, dtype=np.float64)
    for _ in range(level):
        d = dwt_level1(a, filters)
        details.append(d.seasonal)
        a = d.trend
    return [a] + details[::-1]


def waverec(coeffs: list[np.ndarray], filters=HAAR) -> np.ndarray:
    a = coeffs[0]
    for d in coeffs[1:]:
        a = idwt_level1(DecomposedSeries(a, d, 2 * a.shape[-1]), filters)
    return a


@lru_cache(maxsize=64)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric (cos, sin) matrices with entries cos/sin(2*pi*k*m/n).

    ``X = x @ C - 1j * (x @ S)`` is the forward DFT along the last axis.
    The phase index k*m is reduced mod n before scaling to keep the
    angles small.
    """
    if n < 1:
        raise DimensionError(f"transform length must be >= 1, got {n}")
    k = np.arange(n)
    angle = 2.0 * np.pi * ((np.outer(k, k) % n) / n)
    c, s = np.cos(angle), np.sin(angle)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def dft(x) -> ComplexSpectrum:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"dft needs a non-empty last axis, got shape {x.shape}")
    c, s = dft_matrices(x.shape[-1])
    return ComplexSpectrum(x @ c - 1j * (x @ s), x.shape[-1])


def idft(spec: ComplexSpectrum, *, return_residue: bool = False):
    """Inverse DFT; the imaginary part is dropped.

    With ``return_residue`` the largest absolute imaginary value is returned
    as a second element, a correctness signal for real-valued spectra.
    """
    z = np.asarray(spec.amplitudes, dtype=np.complex128)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise DimensionError(f"idft needs a non-empty last axis, got shape {z.shape}")
    n = z.shape[-1]
    c, s = dft_matrices(n)
    re = (z.real @ c - z.imag @ s) / n
    if not return_residue:
        return re
    im = (z.real @ s + z.imag @ c) / n
    return re, float(np.max(np.abs(im))) if im.size else 0.0


def spectrum_report(x, out: IO[str] | None = None) -> list[tuple[int, float]]:
    """Amplitude spectrum of a 1-D series, optionally written as CSV."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise DimensionError("spectrum_report needs a non-empty series")
    amp = dft(x).modulus
    rows = [(k, float(a)) for k, a in enumerate(amp)]
    if out is not None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["freq_index", "amplitude"])
        for k, a in rows:
            writer.writerow([k, f"{a:.12f}"])
    return rows


def top_k_energy_fraction(x, k: int = 3, bins=None) -> float:
    """Share of spectral energy held by the ``k`` strongest bins.

    If ``bins`` is given, the share held by exactly those bins is returned.
    """
    energy = dft(x).modulus ** 2
    total = energy.sum()
    if total == 0:
        return 0.0
    if bins is None:
        bins = np.argsort(energy)[::-1][:k]
    return float(energy[np.asarray(bins)].sum() / total)
