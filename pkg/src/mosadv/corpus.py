"""Synthetic desk-scale corpora and external WAV directory ingestion.

Synthetic clips mix a speech-like harmonic carrier against a white/pink
noise bed at an exactly-achieved RMS SNR, then peak-normalize for storage.
Each clip derives its own RNG from (corpus seed, clip index), so synthesis
is deterministic and clips are independent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MosadvError
from .predictor import QualityScore, surrogate_label
from .signal_core import Waveform, load_wav, peak_normalize, save_wav

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: str  # relative to the manifest file
    split: str  # "train" or "test"
    snr_db: float | None = None
    label: QualityScore | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")

    def to_json(self) -> dict:
        d = {"clip_id": self.clip_id, "path": self.path, "split": self.split}
        if self.snr_db is not None:
            d["snr_db"] = self.snr_db
        if self.label is not None:
            d["label"] = [self.label.sig, self.label.bak, self.label.ovrl]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        label = d.get("label")
        return cls(
            clip_id=d["clip_id"],
            path=d["path"],
            split=d["split"],
            snr_db=d.get("snr_db"),
            label=QualityScore(*label) if label is not None else None,
        )


@dataclass
class Manifest:
    corpus_id: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory of the manifest file, set on load

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise DataError("manifest clip_ids are not unique")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / entry.path

    def load_waveform(self, entry: ManifestEntry) -> Waveform:
        return load_wav(self.resolve(entry))


def save_manifest(manifest: Manifest, path) -> None:
    """JSON-lines: a header object, then one entry per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"corpus_id": manifest.corpus_id, "seed": manifest.seed}))
        fh.write("\n")
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_json()))
            fh.write("\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: manifest is empty")
    try:
        header = json.loads(lines[0])
        entries = [ManifestEntry.from_json(json.loads(ln)) for ln in lines[1:]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from None
    return Manifest(
        corpus_id=header.get("corpus_id", "unknown"),
        seed=int(header.get("seed", 0)),
        entries=entries,
        root=path.parent,
    )


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_train: int
    n_test: int
    clip_seconds: float = 2.0
    sample_rate_hz: int = 16000
    snr_range_db: tuple[float, float] = (0.0, 40.0)
    seed: int = 0
    corpus_id: str = "synth"

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise DataError("n_train and n_test must be >= 1")
        lo, hi = self.snr_range_db
        if not hi > lo:
            raise DataError(f"snr range {self.snr_range_db} is degenerate")


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """1/f-shaped noise via spectral weighting of white noise."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    weights = 1.0 / np.sqrt(np.maximum(freqs, freqs[1]))
    return np.fft.irfft(spec * weights, n=n)


def _carrier(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Harmonic stack with slow pitch drift and a syllabic envelope."""
    t = np.arange(n) / sr
    f0 = rng.uniform(100.0, 220.0)
    drift_rate = rng.uniform(0.2, 0.8)
    drift_phase = rng.uniform(0.0, 2.0 * np.pi)
    inst_freq = f0 * (1.0 + 0.03 * np.sin(2.0 * np.pi * drift_rate * t + drift_phase))
    phase = 2.0 * np.pi * np.cumsum(inst_freq) / sr
    n_harmonics = int(min(10, (0.45 * sr) // f0))
    tone = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        tone += np.sin(k * phase + rng.uniform(0.0, 2.0 * np.pi)) / k
    env_rate = rng.uniform(2.0, 4.0)
    env = 0.55 + 0.45 * np.sin(2.0 * np.pi * env_rate * t + rng.uniform(0.0, 2.0 * np.pi))
    return tone * env


def synth_clip(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Deterministic (clean, scaled_noise, snr_db) for one clip index.

    rms(clean) / rms(scaled_noise) equals 10^(snr/20) exactly, before any
    normalization of the mix.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))
    n = int(round(spec.clip_seconds * spec.sample_rate_hz))
    clean = _carrier(rng, n, spec.sample_rate_hz)
    white = rng.standard_normal(n)
    pink = _pink_noise(rng, n)
    mix_ratio = rng.uniform(0.3, 0.7)
    noise = mix_ratio * white / _rms(white) + (1.0 - mix_ratio) * pink / _rms(pink)
    snr_db = rng.uniform(*spec.snr_range_db)
    noise = noise * (_rms(clean) / _rms(noise)) / 10.0 ** (snr_db / 20.0)
    return clean, noise, snr_db


def synth_corpus(spec: SynthSpec, out_dir) -> Manifest:
    """Write the corpus under <out_dir>/<corpus_id>/{train,test}/ and return
    its manifest (also written alongside as manifest.jsonl)."""
    base = Path(out_dir) / spec.corpus_id
    entries: list[ManifestEntry] = []
    splits = [("train", spec.n_train, 0), ("test", spec.n_test, spec.n_train)]
    for split_name, count, offset in splits:
        (base / split_name).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            index = offset + i
            clean, noise, snr_db = synth_clip(spec, index)
            mix = peak_normalize(Waveform(clean + noise, spec.sample_rate_hz))
            clip_id = f"{split_name}_{i:04d}"
            rel = f"{split_name}/{clip_id}.wav"
            save_wav(mix, base / rel)
            entries.append(
                ManifestEntry(
                    clip_id=clip_id,
                    path=rel,
                    split=split_name,
                    snr_db=snr_db,
                    label=surrogate_label(snr_db, clean_is_speechlike=True),
                )
            )
    manifest = Manifest(spec.corpus_id, spec.seed, entries, root=base)
    save_manifest(manifest, base / "manifest.jsonl")
    return manifest


def ingest_directory(path, split: str = "train", corpus_id: str | None = None) -> Manifest:
    """Build a manifest from an existing directory of WAV files.

    Ordering is lexicographic by filename; unreadable files are logged and
    skipped. Labels are absent (a teacher model supplies them downstream).
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{path} is not a directory")
    entries: list[ManifestEntry] = []
    names = sorted(p.name for p in root.iterdir() if p.suffix.lower() == ".wav")
    for name in names:
        try:
            load_wav(root / name)
        except MosadvError as exc:
            log.warning("skipping %s: %s", name, exc)
            continue
        entries.append(ManifestEntry(clip_id=Path(name).stem, path=name, split=split))
    if not entries:
        log.warning("no readable WAV files found in %s", path)
    return Manifest(corpus_id or root.name, seed=0, entries=entries, root=root)
