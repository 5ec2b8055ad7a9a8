"""scikit-learn compatible wrapper around the attention summarizer.

A "sample" is one video. ``X`` is a sequence whose items are either
:class:`~msva.data.FeatureBundle` objects or mappings from stream name to a
``(T, d)`` feature matrix. Targets default to each bundle's ``gtscore``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .exceptions import BundleError, ConfigurationError, DimensionError
from .model import STREAMS, ModelConfig, canonical_streams, forward
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_videos


def _streams_of(item) -> Mapping:
    return item.streams if hasattr(item, "streams") and hasattr(item, "gtscore") else item


def check_streams(streams) -> tuple:
    if isinstance(streams, str):
        streams = [s for s in streams.split(",") if s]
    streams = canonical_streams(streams)
    if not streams:
        raise ConfigurationError("select at least one feature stream")
    return streams


def check_videos(X, streams: Sequence[str], dims: Mapping[str, int] | None = None) -> list[dict]:
    """Validate a batch of videos; returns one ``{stream: float64 (T, d)}`` dict per video."""
    if isinstance(X, Mapping) or hasattr(X, "streams"):
        raise ConfigurationError("X must be a sequence of videos, not a single video")
    videos = []
    for k, item in enumerate(X):
        feats = _streams_of(item)
        name = getattr(item, "video_id", f"X[{k}]")
        missing = [s for s in streams if s not in feats]
        if missing:
            raise BundleError(f"{name}: missing streams {missing}")
        out = {}
        for s in streams:
            arr = np.asarray(feats[s], dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise DimensionError(f"{name}: stream {s!r} must be a non-empty (T, d) matrix, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise BundleError(f"{name}: stream {s!r} contains NaN or inf")
            if dims is not None and arr.shape[1] != dims[s]:
                raise DimensionError(f"{name}: stream {s!r} has width {arr.shape[1]}, model expects {dims[s]}")
            out[s] = arr
        lengths = {a.shape[0] for a in out.values()}
        if len(lengths) != 1:
            raise BundleError(f"{name}: streams disagree on the number of frames")
        videos.append(out)
    if not videos:
        raise ConfigurationError("X is empty")
    if dims is None:
        widths = {s: {v[s].shape[1] for v in videos} for s in streams}
        bad = {s: sorted(w) for s, w in widths.items() if len(w) > 1}
        if bad:
            raise DimensionError(f"feature widths vary across videos: {bad}")
    return videos


def check_targets(X, y, videos) -> list[np.ndarray]:
    if y is None:
        if not all(hasattr(item, "gtscore") for item in X):
            raise ConfigurationError("y is required when X holds raw feature mappings")
        y = [item.gtscore for item in X]
    if len(y) != len(videos):
        raise DimensionError(f"{len(y)} targets for {len(videos)} videos")
    targets = []
    for k, (t, v) in enumerate(zip(y, videos)):
        t = np.asarray(t, dtype=np.float64)
        T = next(iter(v.values())).shape[0]
        if t.shape != (T,):
            raise DimensionError(f"y[{k}] has shape {t.shape}, expected ({T},)")
        if not np.all((t >= 0) & (t <= 1)):
            raise ConfigurationError(f"y[{k}] must lie in [0, 1]")
        targets.append(t)
    return targets


class MSVARegressor(RegressorMixin, BaseEstimator):
    """Per-frame importance regressor built from parallel stream attention.

    Parameters mirror :class:`~msva.model.ModelConfig` and
    :class:`~msva.training.TrainConfig`; ``random_state`` seeds both the
    initialisation and the training shuffle/dropout stream.
    """

    def __init__(
        self,
        streams=STREAMS,
        fusion="intermediate",
        aperture=250,
        scale=None,
        dropout_rate=0.5,
        learning_rate=5e-5,
        max_epochs=300,
        stall_patience=50,
        stall_tolerance=1e-6,
        weight_decay=1e-5,
        f1_mode="avg",
        random_state=0,
    ):
        self.streams = streams
        self.fusion = fusion
        self.aperture = aperture
        self.scale = scale
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.stall_patience = stall_patience
        self.stall_tolerance = stall_tolerance
        self.weight_decay = weight_decay
        self.f1_mode = f1_mode
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            stall_patience=self.stall_patience,
            stall_tolerance=self.stall_tolerance,
            l2_weight_decay=self.weight_decay,
            seed=seed,
        )

    def fit(self, X, y=None):
        streams = check_streams(self.streams)
        videos = check_videos(X, streams)
        targets = check_targets(X, y, videos)
        dims = {s: videos[0][s].shape[1] for s in streams}
        model_cfg = ModelConfig(dims, self.fusion, self.aperture, self.scale, self.dropout_rate)
        ckpt = train_videos(list(zip(videos, targets)), model_cfg, self._train_config())
        self._set_checkpoint(ckpt)
        return self

    def _set_checkpoint(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.model_ = ckpt.model("best")
        self.streams_ = ckpt.model_config.streams
        self.dims_ = dict(ckpt.model_config.dims)
        self.epoch_log_ = ckpt.log
        self.best_epoch_ = ckpt.log.best_epoch

    def predict_one(self, video) -> np.ndarray:
        check_is_fitted(self, "model_")
        feats = check_videos([video], self.streams_, self.dims_)[0]
        return forward(self.model_, {s: ad.Tensor(a) for s, a in feats.items()}, training=False).data.copy()

    def predict(self, X) -> list[np.ndarray]:
        """Importance scores in (0, 1), one array of length T per video."""
        check_is_fitted(self, "model_")
        videos = check_videos(X, self.streams_, self.dims_)
        return [forward(self.model_, v, training=False).data.copy() for v in videos]

    def score(self, X, y=None, sample_weight=None):
        """Mean per-video F1 of knapsack summaries against the users' summaries."""
        from .evaluation import evaluate_video

        if not all(hasattr(b, "user_summaries") for b in X):
            raise ConfigurationError("score needs FeatureBundle inputs with user summaries")
        preds = self.predict(X)
        f1 = [evaluate_video(b, p, self.f1_mode)["f1"] for b, p in zip(X, preds)]
        return float(np.average(f1, weights=sample_weight))

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, ckpt, **overrides) -> "MSVARegressor":
        """Rebuild a fitted estimator from a checkpoint object or directory."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        mc, tc = ckpt.model_config, ckpt.train_config
        params = dict(
            streams=mc.streams,
            fusion=mc.fusion,
            aperture=mc.aperture,
            scale=mc.scale,
            dropout_rate=mc.dropout_rate,
            learning_rate=tc.learning_rate,
            max_epochs=tc.max_epochs,
            stall_patience=tc.stall_patience,
            stall_tolerance=tc.stall_tolerance,
            weight_decay=tc.l2_weight_decay,
            random_state=tc.seed,
        )
        params.update(overrides)
        est = cls(**params)
        est._set_checkpoint(ckpt)
        return est
