"""Trainable differentiable speech-quality predictor.

Maps a waveform to three MOS-scale subscores (SIG, BAK, OVRL) through a
log-magnitude spectrogram and a small convnet. The same class plays both
the attacked model f and the hardened model g; the output head is affine
and deliberately unclamped, so scores can leave [1, 5].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    BundleError,
    DataError,
    FingerprintError,
    ShortSignalError,
    TrainingError,
    VersionError,
)
from .signal_core import Waveform
from .spectral import StftConfig, stft_graph

LOG_EPSILON = 1e-8

# Parameter layout is the architecture fingerprint: order and shapes are
# fixed and serialized with the weights.
PARAM_SPECS: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("conv1_w", (16, 1, 3, 3)),
    ("conv1_b", (16,)),
    ("conv2_w", (32, 16, 3, 3)),
    ("conv2_b", (32,)),
    ("fc_w", (32, 32)),
    ("fc_b", (32,)),
    ("head_w", (3, 32)),
    ("head_b", (3,)),
)

# Two valid 3x3 convs with a 2x2 pool between and after need at least this
# many STFT frames; with hop 128 that is 512 + 9*128 input samples.
MIN_FRAMES = 10


@dataclass(frozen=True)
class QualityScore:
    """(SIG, BAK, OVRL) triple; nominal range [1, 5], not clamped."""

    sig: float
    bak: float
    ovrl: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sig, self.bak, self.ovrl], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "QualityScore":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (3,):
            raise DataError(f"quality score needs exactly 3 values, got shape {a.shape}")
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def l1_distance(self, other: "QualityScore") -> float:
        return float(np.abs(self.as_array() - other.as_array()).sum())


def surrogate_label(snr_db: float, clean_is_speechlike: bool = True) -> QualityScore:
    """Deterministic label oracle for synthetic mixtures.

    BAK maps the mixing SNR affinely from [0, 40] dB onto [1, 5] and is
    clamped outside; SIG is 5 for an unprocessed speech-like carrier
    (3 otherwise); OVRL is their midpoint.
    """
    bak = float(np.clip(1.0 + 4.0 * (snr_db - 0.0) / 40.0, 1.0, 5.0))
    sig = 5.0 if clean_is_speechlike else 3.0
    return QualityScore(sig, bak, (sig + bak) / 2.0)


class PredictorModel:
    """Convolutional three-score predictor over log-magnitude spectrograms."""

    def __init__(self, params: dict[str, np.ndarray], stft_config: StftConfig = StftConfig(),
                 metadata: dict | None = None):
        for name, shape in PARAM_SPECS:
            if name not in params:
                raise FingerprintError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise FingerprintError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.stft_config = stft_config
        self.metadata = dict(metadata or {})

    # -- construction -------------------------------------------------

    @classmethod
    def initialize(cls, seed: int, stft_config: StftConfig = StftConfig()) -> "PredictorModel":
        """He-scaled random init; head bias starts at mid-scale 3 so early
        predictions sit in the score range."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in PARAM_SPECS:
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params["head_b"] = np.full((3,), 3.0)
        return cls(params, stft_config, metadata={"seed": seed})

    def copy(self) -> "PredictorModel":
        return PredictorModel(
            {k: v.copy() for k, v in self.params.items()},
            self.stft_config,
            dict(self.metadata),
        )

    @property
    def min_samples(self) -> int:
        cfg = self.stft_config
        return cfg.window_length + (MIN_FRAMES - 1) * cfg.hop

    # -- forward ------------------------------------------------------

    def features_graph(self, x: ad.Tensor) -> ad.Tensor:
        """log(eps + |STFT|) feature matrix, recorded on the graph."""
        re, im = stft_graph(x, self.stft_config)
        return self._features_from_spectrum(re, im)

    def _features_from_spectrum(self, re: ad.Tensor, im: ad.Tensor) -> ad.Tensor:
        mag = ad.complex_modulus(re, im)
        return ad.log(ad.add(mag, ad.Tensor(LOG_EPSILON)))

    def features(self, x: Waveform) -> np.ndarray:
        """Plain feature matrix (frames x bins) for training-time caching."""
        return self.features_graph(ad.Tensor(x.samples)).data

    def scores_graph(self, feats: ad.Tensor, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        """Forward pass from a feature matrix to the 3-score head."""
        if feats.data.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.data.shape}")
        if feats.data.shape[0] < MIN_FRAMES:
            raise ShortSignalError(
                f"{feats.data.shape[0]} frames < minimum {MIN_FRAMES} "
                f"({self.min_samples} samples at this STFT geometry)"
            )
        p = params if params is not None else {k: ad.Tensor(v) for k, v in self.params.items()}
        h = ad.reshape(feats, (1,) + feats.data.shape)
        h = ad.relu(ad.add(ad.conv2d(h, p["conv1_w"]), ad.reshape(p["conv1_b"], (16, 1, 1))))
        h = ad.avg_pool2d(h, 2)
        h = ad.relu(ad.add(ad.conv2d(h, p["conv2_w"]), ad.reshape(p["conv2_b"], (32, 1, 1))))
        h = ad.avg_pool2d(h, 2)
        h = ad.reduce_mean(h, axes=(1, 2))
        h = ad.relu(ad.add(ad.matmul(p["fc_w"], h), p["fc_b"]))
        return ad.add(ad.matmul(p["head_w"], h), p["head_b"])

    def forward_graph(self, x: ad.Tensor) -> ad.Tensor:
        return self.scores_graph(self.features_graph(x))

    def predict(self, x: Waveform) -> QualityScore:
        return QualityScore.from_array(self.forward_graph(ad.Tensor(x.samples)).data)

    def predict_features(self, feats: np.ndarray) -> QualityScore:
        return QualityScore.from_array(self.scores_graph(ad.Tensor(feats)).data)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0


@dataclass
class TrainResult:
    model: PredictorModel
    loss_trace: list[float] = field(default_factory=list)


def train_predictor(corpus: list[tuple[Waveform, QualityScore]], cfg: TrainConfig) -> TrainResult:
    """Fit the three-score head by mean squared error over a labeled corpus.

    Features are cached per clip up front, so each step only runs the
    convolutional stack. Deterministic given the seed.
    """
    if not corpus:
        raise TrainingError("training corpus is empty")
    model = PredictorModel.initialize(cfg.seed)
    feats = [model.features(x) for x, _ in corpus]
    labels = [y.as_array() for _, y in corpus]
    trace = fit_scores(model, feats, labels, cfg.epochs, cfg.learning_rate,
                       cfg.batch_size, cfg.seed)
    model.metadata.update({"epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
                           "batch_size": cfg.batch_size, "seed": cfg.seed})
    return TrainResult(model, trace)


def fit_scores(model: PredictorModel, feats: list[np.ndarray], labels: list[np.ndarray],
               epochs: int, learning_rate: float, batch_size: int, seed: int,
               epoch_callback=None) -> list[float]:
    """Adam mini-batch loop shared by teacher training and retraining.

    Mutates `model.params` in place. Per-item loss is the mean squared
    error over the three subscores; the returned trace holds one batch-mean
    loss per step. `epoch_callback(model, epoch)` is invoked once before
    training (epoch 0) and after each completed epoch.
    """
    rng = np.random.default_rng(seed)
    optim = ad.Adam(model.params, learning_rate)
    order = np.arange(len(feats))
    trace: list[float] = []
    if epoch_callback is not None:
        epoch_callback(model, 0)
    for epoch in range(1, epochs + 1):
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            params = {k: ad.Tensor(v) for k, v in model.params.items()}
            losses = []
            for i in batch:
                pred = model.scores_graph(ad.Tensor(feats[i]), params)
                diff = ad.subtract(pred, ad.Tensor(labels[i]))
                losses.append(ad.scale(ad.l2_norm_sq(diff), 1.0 / 3.0))
            total = losses[0]
            for extra in losses[1:]:
                total = ad.add(total, extra)
            total = ad.scale(total, 1.0 / len(batch))
            loss_value = float(total.data)
            if not np.isfinite(loss_value):
                raise TrainingError(f"training loss became non-finite: {loss_value}")
            trace.append(loss_value)
            ad.backward(total)
            optim.step({k: params[k].grad for k in model.params})
        if epoch_callback is not None:
            epoch_callback(model, epoch)
    return trace


# ---------------------------------------------------------------------------
# Weight bundle I/O
# ---------------------------------------------------------------------------

BUNDLE_MAGIC = b"AQPM"
BUNDLE_VERSION = 1


def save_model(model: PredictorModel, path) -> None:
    """Binary bundle: magic, version, shape fingerprint, raw float64 payload.
    A sibling .json carries the training metadata."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", BUNDLE_VERSION))
        fh.write(struct.pack("<I", len(PARAM_SPECS)))
        for name, shape in PARAM_SPECS:
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for name, _ in PARAM_SPECS:
            fh.write(model.params[name].astype("<f8").tobytes())
    meta = {
        "format_version": BUNDLE_VERSION,
        "stft": {
            "n_fft": model.stft_config.n_fft,
            "window_length": model.stft_config.window_length,
            "hop": model.stft_config.hop,
        },
        "log_epsilon": LOG_EPSILON,
        "layers": [{"name": n, "shape": list(s)} for n, s in PARAM_SPECS],
    }
    meta.update(model.metadata)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> PredictorModel:
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != BUNDLE_MAGIC:
        raise BundleError(f"{path}: not a weight bundle (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != BUNDLE_VERSION:
        raise VersionError(f"{path}: unsupported bundle version {version}")
    (n_layers,) = struct.unpack_from("<I", blob, 8)
    if n_layers != len(PARAM_SPECS):
        raise FingerprintError(
            f"{path}: bundle has {n_layers} layers, architecture has {len(PARAM_SPECS)}"
        )
    pos = 12
    shapes: list[tuple[int, ...]] = []
    try:
        for _ in range(n_layers):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            shapes.append(tuple(shape))
    except struct.error as exc:
        raise BundleError(f"{path}: truncated fingerprint block ({exc})") from None
    for (name, expected), found in zip(PARAM_SPECS, shapes):
        if expected != found:
            raise FingerprintError(
                f"{path}: layer {name} stored with shape {found}, architecture expects {expected}"
            )
    params: dict[str, np.ndarray] = {}
    for name, shape in PARAM_SPECS:
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(blob):
            raise BundleError(f"{path}: payload truncated at layer {name}")
        params[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end
    metadata = {}
    try:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        pass
    return PredictorModel(params, StftConfig(), metadata=metadata)
