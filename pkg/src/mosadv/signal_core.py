"""Waveform container, WAV I/O, loudness metric, bounded perturbations.

Audio is mono float64 in [-1, 1]. The WAV reader is a minimal RIFF parser
(PCM 16-bit int or IEEE 32-bit float only) so that rejects can name the
offending chunk or field; the writer emits 16-bit PCM. No resampling
anywhere: everything runs at the file's native rate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChannelCountError,
    DimensionError,
    EmptySignalError,
    FormatError,
)

PCM16_SCALE = 32768  # one quantization step is 1/32768


@dataclass(frozen=True)
class Waveform:
    """Mono sample sequence with its sample rate. Immutable."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.flags.writeable:
            samples = samples.copy()
            samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise DimensionError(f"waveform must be 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise EmptySignalError("waveform has no samples")
        if not np.all(np.isfinite(samples)):
            raise FormatError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples)))


@dataclass(frozen=True)
class Perturbation:
    """Latent vector z with amplitude A; materializes to A * tanh(z).

    tanh keeps every materialized sample strictly inside (-A, A), so the
    loudness budget is enforced by construction rather than by projection.
    """

    latent: np.ndarray
    amplitude: float

    def __post_init__(self):
        latent = np.asarray(self.latent, dtype=np.float64)
        if latent.flags.writeable:
            latent = latent.copy()
            latent.setflags(write=False)
        object.__setattr__(self, "latent", latent)
        if latent.ndim != 1:
            raise DimensionError(f"latent must be 1-D, got shape {latent.shape}")
        if not self.amplitude > 0:
            raise FormatError(f"amplitude must be positive, got {self.amplitude}")
        if not np.all(np.isfinite(latent)):
            raise FormatError("latent contains non-finite entries")


def materialize(p: Perturbation) -> np.ndarray:
    """delta_t = A * tanh(z_t); |delta_t| < A strictly."""
    return p.amplitude * np.tanh(p.latent)


def apply(x: Waveform, delta: np.ndarray) -> Waveform:
    """Samplewise x + delta. Deliberately unclamped; clamping happens only
    at WAV export so in-loop gradients stay exact."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.samples.shape:
        raise DimensionError(
            f"perturbation length {delta.shape} does not match signal {x.samples.shape}"
        )
    return Waveform(x.samples + delta, x.sample_rate_hz)


def peak_normalize(x: Waveform) -> Waveform:
    """Divide by the peak magnitude so max |x_t| is exactly 1."""
    peak = x.peak
    if peak == 0.0:
        raise EmptySignalError("cannot normalize an all-zero signal")
    return Waveform(x.samples / peak, x.sample_rate_hz)


def db_distortion(x: Waveform, delta: np.ndarray) -> float:
    """Relative loudness of a perturbation in dB:
    20 log10(max|delta| / max|x|). All-zero delta returns -inf."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.samples.shape:
        raise DimensionError(
            f"perturbation length {delta.shape} does not match signal {x.samples.shape}"
        )
    peak_x = x.peak
    if peak_x == 0.0:
        raise EmptySignalError("dB distortion undefined for an all-zero signal")
    peak_d = float(np.max(np.abs(delta)))
    if peak_d == 0.0:
        return float("-inf")
    return 20.0 * np.log10(peak_d / peak_x)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

_FMT_PCM = 1
_FMT_IEEE_FLOAT = 3


def load_wav(path) -> Waveform:
    """Read a mono RIFF/WAVE file (16-bit PCM or 32-bit float).

    Rejections name the offending chunk or field.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < 12:
        raise FormatError(f"{path}: file too short for a RIFF header")
    if blob[0:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF magic in header")
    if blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: RIFF form type is not WAVE")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + chunk_size]
        if len(body) < chunk_size:
            raise FormatError(
                f"{path}: chunk {chunk_id!r} declares {chunk_size} bytes but file is truncated"
            )
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise FormatError(f"{path}: fmt chunk too short ({chunk_size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size % 2)

    if fmt is None:
        raise FormatError(f"{path}: no fmt chunk found")
    if data is None:
        raise FormatError(f"{path}: no data chunk found")

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise ChannelCountError(f"{path}: fmt.channels is {channels}, expected mono")

    if audio_format == _FMT_PCM and bits == 16:
        if len(data) % 2 != 0:
            raise FormatError(f"{path}: data chunk size {len(data)} not a multiple of 2")
        raw = np.frombuffer(data, dtype="<i2")
        samples = raw.astype(np.float64) / PCM16_SCALE
    elif audio_format == _FMT_IEEE_FLOAT and bits == 32:
        if len(data) % 4 != 0:
            raise FormatError(f"{path}: data chunk size {len(data)} not a multiple of 4")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise FormatError(
            f"{path}: unsupported encoding fmt.audio_format={audio_format}, "
            f"fmt.bits_per_sample={bits} (need PCM/16 or IEEE float/32)"
        )

    if samples.size == 0:
        raise EmptySignalError(f"{path}: data chunk holds no samples")
    return Waveform(samples, int(sample_rate))


def save_wav(x: Waveform, path) -> None:
    """Write mono 16-bit PCM; samples are hard-clamped to the representable
    range [-1, 1 - 1/32768] only at this boundary."""
    clamped = np.clip(x.samples, -1.0, 1.0 - 1.0 / PCM16_SCALE)
    pcm = np.round(clamped * PCM16_SCALE).astype("<i2")
    payload = pcm.tobytes()

    fmt_chunk = b"fmt " + struct.pack(
        "<IHHIIHH",
        16,
        _FMT_PCM,
        1,
        x.sample_rate_hz,
        x.sample_rate_hz * 2,
        2,
        16,
    )
    data_chunk = b"data" + struct.pack("<I", len(payload)) + payload
    riff_body = b"WAVE" + fmt_chunk + data_chunk
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(riff_body)) + riff_body)
