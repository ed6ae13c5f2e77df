"""Differentiable short-time Fourier transform and the L1 spectral loss.

Frames are [k*hop, k*hop + window_length) with no center padding; a trailing
partial frame is dropped. The transform is evaluated as two explicit
real-valued DFT matrix products (cosine and sine banks) so the same numeric
path serves plain evaluation and graph recording, and the adjoint is just
the transposed product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ShortSignalError
from .signal_core import Waveform


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    window_length: int = 512
    hop: int = 128

    def __post_init__(self):
        if self.window_length > self.n_fft:
            raise DimensionError(
                f"window_length {self.window_length} exceeds n_fft {self.n_fft}"
            )
        if self.hop < 1:
            raise DimensionError(f"hop must be >= 1, got {self.hop}")

    @property
    def frequency_bins(self) -> int:
        return self.n_fft // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            raise ShortSignalError(
                f"signal of {n_samples} samples shorter than one window "
                f"({self.window_length})"
            )
        return (n_samples - self.window_length) // self.hop + 1


def hann_window(length: int) -> np.ndarray:
    """Periodic raised cosine: w[n] = 0.5 - 0.5 cos(2 pi n / N), so the
    midpoint of an even-length window is exactly 1."""
    n = np.arange(length, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


@lru_cache(maxsize=4)
def _dft_banks(n_fft: int, window_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Real/imag one-sided DFT banks of shape (window_length, bins).

    X_k = sum_n x_n exp(-2i pi k n / n_fft) for k = 0 .. n_fft/2.
    """
    bins = n_fft // 2 + 1
    n = np.arange(window_length, dtype=np.float64)[:, None]
    k = np.arange(bins, dtype=np.float64)[None, :]
    angle = 2.0 * np.pi * n * k / n_fft
    return np.cos(angle), -np.sin(angle)


@dataclass(frozen=True)
class Spectrogram:
    """One-sided complex STFT values, frames x bins."""

    values: np.ndarray  # complex128, shape (frames, bins)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.values)


def stft_graph(x: ad.Tensor, cfg: StftConfig) -> tuple[ad.Tensor, ad.Tensor]:
    """Record the STFT of a 1-D signal tensor; returns (real, imag) parts,
    each of shape (frames, bins)."""
    if x.data.shape[0] < cfg.window_length:
        raise ShortSignalError(
            f"signal of {x.data.shape[0]} samples shorter than one window "
            f"({cfg.window_length})"
        )
    cos_bank, sin_bank = _dft_banks(cfg.n_fft, cfg.window_length)
    window = hann_window(cfg.window_length)
    frames = ad.frame_signal(x, cfg.window_length, cfg.hop)
    windowed = ad.multiply(frames, ad.Tensor(window))
    re = ad.matmul(windowed, ad.Tensor(cos_bank))
    im = ad.matmul(windowed, ad.Tensor(sin_bank))
    return re, im


def stft(x: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Plain (non-recorded) STFT; numerically identical to stft_graph."""
    re, im = stft_graph(ad.Tensor(x.samples), cfg)
    return Spectrogram(re.data + 1j * im.data)


def spectral_l1_graph(
    x_tilde: ad.Tensor,
    ref_re: np.ndarray,
    ref_im: np.ndarray,
    cfg: StftConfig,
) -> ad.Tensor:
    """L1 spectral distance of a signal tensor against a fixed reference
    spectrum: sum over frames and bins of |F(x_tilde) - F_ref|."""
    re, im = stft_graph(x_tilde, cfg)
    diff_mod = ad.complex_modulus(
        ad.subtract(re, ad.Tensor(ref_re)), ad.subtract(im, ad.Tensor(ref_im))
    )
    return ad.reduce_sum(diff_mod)


def spectral_l1(x_tilde: Waveform, x: Waveform, cfg: StftConfig = StftConfig()) -> float:
    """Sum of complex moduli of the STFT difference between two signals."""
    if len(x_tilde) != len(x):
        raise DimensionError(
            f"signals differ in length: {len(x_tilde)} vs {len(x)}"
        )
    ref = stft(x, cfg)
    loss = spectral_l1_graph(
        ad.Tensor(x_tilde.samples), ref.values.real, ref.values.imag, cfg
    )
    return float(loss.data)


def dump_magnitudes_csv(spec: Spectrogram, path) -> None:
    """Magnitude matrix as CSV, frames as rows, 6 significant digits."""
    np.savetxt(path, spec.magnitudes(), fmt="%.6g", delimiter=",")
