"""Frequency-domain diversity analysis of conv output channels.

Covers per-channel amplitude spectra with low/high band energies, a Monte
Carlo check that the density of a sum of independent terms is the
convolution of their densities, and the product-of-ratios suppression curve.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from calpa import tensor as T
from calpa.harness.data import to_input
from calpa.harness.pgm import write_pgm

DEFAULT_CUTOFF = 0.25


@dataclass(frozen=True)
class SpectrumMap:
    """DC-centered amplitude grid of one channel plus its band energies."""

    layer_id: str
    channel: int
    amplitude: np.ndarray
    low: float
    high: float

    @property
    def total(self) -> float:
        return self.low + self.high

    @property
    def low_fraction(self) -> float:
        return self.low / self.total if self.total > 0 else 0.0


def radial_frequency(shape: tuple[int, int]) -> np.ndarray:
    """Radial frequency (cycles per sample) of each bin in fftshift layout."""
    h, w = shape
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    return np.hypot(fy[:, None], fx[None, :])


def band_energies(amplitude: np.ndarray, cutoff: float = DEFAULT_CUTOFF) -> tuple[float, float]:
    """Energy below and at/above ``cutoff`` times the Nyquist frequency."""
    if not 0 < cutoff <= np.sqrt(2):
        raise ValueError(f"cutoff must lie in (0, sqrt 2], got {cutoff}")
    energy = np.asarray(amplitude, dtype=np.float64) ** 2
    low_mask = radial_frequency(energy.shape) < cutoff * 0.5
    return float(energy[low_mask].sum()), float(energy[~low_mask].sum())


def _spectrum(layer_id: str, channel: int, values: np.ndarray, cutoff: float) -> SpectrumMap:
    amp = T.fft2d_amplitude(values)
    low, high = band_energies(amp, cutoff)
    return SpectrumMap(layer_id, channel, amp, low, high)


def _prepare_image(model, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return to_input(image.reshape((1,) + image.shape[-2:]), model.dtype)
    return image.reshape((1, 1) + image.shape[-2:]).astype(model.dtype)


def _check_conv(model, layer_id: str):
    if layer_id not in model.graph or model.graph.layer(layer_id).kind not in ("conv", "fixed_preproc"):
        raise ValueError(f"{layer_id!r} is not a conv layer of this model")
    return model.graph.layer(layer_id)


def channel_spectra(model, image: np.ndarray, layer_id: str, cutoff: float = DEFAULT_CUTOFF) -> list[SpectrumMap]:
    """Amplitude spectrum of every output channel of conv ``layer_id`` for one image.

    ``image`` is a uint8 ``(H, W)`` picture or an already-normalized input.
    """
    _check_conv(model, layer_id)
    out = model.activations(_prepare_image(model, image), [layer_id])[layer_id][0]
    return [_spectrum(layer_id, k, out[k], cutoff) for k in range(out.shape[0])]


def presummation_spectra(model, image: np.ndarray, layer_id: str, k: int,
                         cutoff: float = DEFAULT_CUTOFF) -> list[SpectrumMap]:
    """Spectra of the per-input-channel terms ``Z_j * W_jk`` summed into output ``k``."""
    layer = _check_conv(model, layer_id)
    src = layer.inputs[0]
    x = model.activations(_prepare_image(model, image), [src])[src][0]
    store = model.params if f"{layer_id}.weight" in model.params else model.buffers
    w = store[f"{layer_id}.weight"]
    maps = []
    for j in range(w.shape[0]):
        term = T.conv2d(x[j:j + 1], w[j:j + 1, k:k + 1], layer.stride, layer.padding)[0]
        maps.append(_spectrum(f"{layer_id}[k={k}]", j, term, cutoff))
    return maps


def amplitude_ratio(amplitude: np.ndarray, omega1: tuple[int, int], omega2: tuple[int, int]) -> float:
    """``|A(omega1)| / |A(omega2)|`` at explicit (row, col) bins of a centered grid."""
    num, den = float(amplitude[omega1]), float(amplitude[omega2])
    if den == 0:
        raise ZeroDivisionError(f"zero amplitude at {omega2}")
    return num / den


@dataclass(frozen=True)
class SuppressionCurve:
    j: np.ndarray
    log_ratio: np.ndarray
    omega1: object = None
    omega2: object = None

    @property
    def ratio(self) -> np.ndarray:
        return np.exp(self.log_ratio)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["J", "ratio", "log_ratio"])
        for j, lr in zip(self.j, self.log_ratio):
            w.writerow([int(j), repr(float(np.exp(lr))), repr(float(lr))])
        return buf.getvalue()


def suppression_curve(ratios, omega1=None, omega2=None) -> SuppressionCurve:
    """Running product of per-term amplitude ratios, accumulated as log sums."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("expected a non-empty 1-D sequence of ratios")
    if np.any(~(r > 0)) or not np.all(np.isfinite(r)):
        raise ValueError("ratios must be positive and finite")
    return SuppressionCurve(np.arange(1, r.size + 1), np.cumsum(np.log(r)), omega1, omega2)


@dataclass(frozen=True)
class Histogram:
    """Piecewise-constant density: ``mass[i]`` spread over ``[edges[i], edges[i+1])``."""

    edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        if len(self.edges) != len(self.mass) + 1 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("histogram edges must increase and number one more than the bins")
        if np.any(self.mass < 0) or not np.isclose(self.mass.sum(), 1.0, atol=1e-9):
            raise ValueError(f"histogram mass must be non-negative and sum to 1, got {self.mass.sum()}")

    @classmethod
    def from_density(cls, edges, density) -> "Histogram":
        edges = np.asarray(edges, dtype=np.float64)
        mass = np.asarray(density, dtype=np.float64) * np.diff(edges)
        return cls(edges, mass)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        cum = np.concatenate([[0.0], np.cumsum(self.mass)])
        return np.interp(x, self.edges, cum)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        bins = rng.choice(len(self.mass), size=size, p=self.mass / self.mass.sum())
        return self.edges[bins] + rng.random(size) * np.diff(self.edges)[bins]


def convolve_histograms(hists, cells_per_bin: int = 32) -> tuple[float, float, np.ndarray]:
    """Density of the sum of independent histogram variables on a fine grid.

    Returns ``(start, step, mass)``: ``mass[n]`` is the probability of the
    fine cell ``[start + n*step, start + (n+1)*step)``.
    """
    step = min(np.diff(h.edges).min() for h in hists) / cells_per_bin
    total, start = np.array([1.0]), 0.0
    for h in hists:
        n = int(np.ceil((h.edges[-1] - h.edges[0]) / step - 1e-9))
        grid = h.edges[0] + step * np.arange(n + 1)
        cells = np.diff(h.cdf(grid))
        total = np.convolve(total, cells)
        start += h.edges[0]
    # a sum of cell-uniform terms is approximated by cells shifted half a step per extra term
    start += 0.5 * step * (len(hists) - 1)
    return start, step, total


def rebin(start: float, step: float, mass: np.ndarray, edges: np.ndarray) -> np.ndarray:
    grid = start + step * np.arange(len(mass) + 1)
    cum = np.concatenate([[0.0], np.cumsum(mass)])
    return np.diff(np.interp(edges, grid, cum, left=0.0, right=1.0))


def pdf_convolution_check(hists, samples: int = 100_000, seed: int = 0, bins: int = 64) -> float:
    """L1 distance between the Monte Carlo density of the sum and the convolved density."""
    hists = list(hists)
    if len(hists) < 2:
        raise ValueError("need at least two histograms")
    rng = np.random.default_rng(seed)
    sums = np.zeros(samples)
    for h in hists:
        sums += h.sample(rng, samples)
    lo = sum(h.edges[0] for h in hists)
    hi = sum(h.edges[-1] for h in hists)
    edges = np.linspace(lo, hi, bins + 1)
    mc, _ = np.histogram(sums, bins=edges)
    mc = mc / samples
    conv = rebin(*convolve_histograms(hists), edges)
    return float(np.abs(mc - conv).sum())


def heatmap(amplitude: np.ndarray) -> np.ndarray:
    """``log(1 + A)`` scaled per map to 8-bit gray levels."""
    v = np.log1p(np.asarray(amplitude, dtype=np.float64))
    span = v.max() - v.min()
    scaled = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    return np.round(scaled * 255).astype(np.uint8)


def export_spectra(maps: list[SpectrumMap], directory, prefix: str = "spectrum") -> Path:
    """Write one PGM heat map per channel and a CSV of band energies."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_id", "channel", "low", "high", "low_fraction"])
    for m in maps:
        write_pgm(directory / f"{prefix}_{m.channel:03d}.pgm", heatmap(m.amplitude))
        w.writerow([m.layer_id, m.channel, repr(m.low), repr(m.high), f"{m.low_fraction:.6f}"])
    (directory / f"{prefix}_bands.csv").write_text(buf.getvalue(), encoding="utf-8")
    return directory
