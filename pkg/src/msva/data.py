"""Feature bundles on disk, integrity checks, fold splits and synthetic data.

A bundle directory holds one video::

    bundle.json          text manifest (ids, sizes, picks, change points)
    stream_<name>.f32    row-major little-endian float32, T x dim
    gtscore.f32          little-endian float32, T
    user_summaries.u8    uint8, n_users x n_frames

Features are stored as float32 and handed out as float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, FormatError, ValidationError
from .model import STREAMS, canonical_streams

BUNDLE_VERSION = 1
MANIFEST_VERSION = 1
SPLITS_VERSION = 1
_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


@dataclass
class FeatureBundle:
    video_id: str
    n_frames: int
    picks: np.ndarray
    streams: dict
    gtscore: np.ndarray
    change_points: np.ndarray
    user_summaries: np.ndarray
    fps: float | None = None

    def __post_init__(self):
        self.n_frames = int(self.n_frames)
        self.picks = np.asarray(self.picks, dtype=np.int64)
        self.streams = {s: np.asarray(self.streams[s], dtype=np.float64) for s in canonical_streams(self.streams)}
        self.gtscore = np.asarray(self.gtscore, dtype=np.float64)
        self.change_points = np.asarray(self.change_points, dtype=np.int64).reshape(-1, 2)
        self.user_summaries = np.asarray(self.user_summaries)
        if self.user_summaries.ndim == 1:
            self.user_summaries = self.user_summaries[None, :]

    @property
    def T(self) -> int:
        return len(self.picks)

    @property
    def dims(self) -> dict:
        return {s: int(a.shape[1]) if a.ndim == 2 else 0 for s, a in self.streams.items()}

    def features(self, streams: Sequence[str] | None = None) -> dict:
        names = self.streams if streams is None else streams
        return {s: self.streams[s] for s in names}


def validate_bundle(bundle: FeatureBundle) -> list[str]:
    """Every violated bundle invariant as a message; an empty list means valid."""
    v = []
    T = len(bundle.picks)
    n = bundle.n_frames
    if n < 1:
        v.append("n_frames must be positive")
    if T < 1:
        v.append("picks is empty")
    picks = bundle.picks
    if T > 1 and np.any(np.diff(picks) <= 0):
        v.append("picks not strictly increasing")
    if T and (picks.min() < 0 or picks.max() >= n):
        v.append("picks out of range [0, n_frames)")
    if not bundle.streams:
        v.append("no feature streams")
    for s, a in bundle.streams.items():
        if a.ndim != 2:
            v.append(f"stream {s} is not a matrix")
        elif a.shape[0] != T:
            v.append(f"stream {s} rows/T mismatch ({a.shape[0]} != {T})")
        elif not np.all(np.isfinite(a)):
            v.append(f"stream {s} has non-finite values")
    g = bundle.gtscore
    if g.ndim != 1 or g.shape[0] != T:
        v.append(f"gtscore/T mismatch ({g.shape} vs {T})")
    elif not (np.all(np.isfinite(g)) and g.min(initial=0.0) >= 0.0 and g.max(initial=0.0) <= 1.0):
        v.append("gtscore outside [0, 1]")
    cp = bundle.change_points
    if cp.shape[0] == 0:
        v.append("segments do not cover: no change points")
    else:
        if np.any(cp[:, 1] < cp[:, 0]):
            v.append("segment with end before start")
        contiguous = cp[0, 0] == 0 and cp[-1, 1] == n - 1 and np.all(cp[1:, 0] == cp[:-1, 1] + 1)
        if not contiguous:
            v.append("segments do not cover [0, n_frames - 1] contiguously")
    us = bundle.user_summaries
    if us.ndim != 2 or us.shape[0] < 1:
        v.append("user_summaries must be a non-empty matrix")
    else:
        if us.shape[1] != n:
            v.append(f"user summary length {us.shape[1]} != n_frames {n}")
        if not np.all((us == 0) | (us == 1)):
            v.append("non-binary summary")
    return v


def check_bundle(bundle: FeatureBundle) -> FeatureBundle:
    violations = validate_bundle(bundle)
    if violations:
        raise ValidationError(violations, where=bundle.video_id)
    return bundle


# ------------------------------------------------------------------ file I/O


def _write_raw(path: Path, arr: np.ndarray, dtype: np.dtype) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_raw(path: Path, dtype: np.dtype, shape: tuple, field: str) -> np.ndarray:
    if not path.is_file():
        raise FormatError(field, f"missing array file {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(field, f"{path.name} holds {len(raw)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def write_bundle(bundle: FeatureBundle, path) -> Path:
    """Validate and write one bundle directory."""
    check_bundle(bundle)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": BUNDLE_VERSION,
        "video_id": bundle.video_id,
        "n_frames": bundle.n_frames,
        "T": bundle.T,
        "dims": bundle.dims,
        "n_users": int(bundle.user_summaries.shape[0]),
        "fps": bundle.fps,
        "picks": bundle.picks.tolist(),
        "change_points": bundle.change_points.tolist(),
    }
    (path / "bundle.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for s, arr in bundle.streams.items():
        _write_raw(path / f"stream_{s}.f32", arr, _F32)
    _write_raw(path / "gtscore.f32", bundle.gtscore, _F32)
    _write_raw(path / "user_summaries.u8", bundle.user_summaries, _U8)
    return path


def _meta_field(meta, key, kind):
    if key not in meta:
        raise FormatError(key, "missing from bundle.json")
    val = meta[key]
    if kind is int and (not isinstance(val, int) or isinstance(val, bool)):
        raise FormatError(key, f"expected an integer, got {val!r}")
    if kind is list and not isinstance(val, list):
        raise FormatError(key, f"expected a list, got {type(val).__name__}")
    if kind is dict and not isinstance(val, dict):
        raise FormatError(key, f"expected an object, got {type(val).__name__}")
    return val


def load_bundle(path, streams: Sequence[str] | None = None, validate: bool = True) -> FeatureBundle:
    """Read a bundle directory; ``streams`` restricts which feature files are loaded."""
    path = Path(path)
    try:
        meta = json.loads((path / "bundle.json").read_text())
    except FileNotFoundError:
        raise FormatError("bundle.json", f"not found in {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError("bundle.json", f"not valid JSON ({exc})") from None
    version = _meta_field(meta, "version", int)
    if version != BUNDLE_VERSION:
        raise FormatError("version", f"bundle format {version} is not supported (expected {BUNDLE_VERSION})")
    T = _meta_field(meta, "T", int)
    n_frames = _meta_field(meta, "n_frames", int)
    n_users = _meta_field(meta, "n_users", int)
    dims = _meta_field(meta, "dims", dict)
    names = list(dims) if streams is None else list(streams)
    for s in names:
        if s not in dims:
            raise FormatError("dims", f"stream {s!r} not present in bundle {meta.get('video_id')}")
    feats = {s: _read_raw(path / f"stream_{s}.f32", _F32, (T, int(dims[s])), f"stream_{s}").astype(np.float64) for s in names}
    bundle = FeatureBundle(
        video_id=str(_meta_field(meta, "video_id", str)),
        n_frames=n_frames,
        picks=_meta_field(meta, "picks", list),
        streams=feats,
        gtscore=_read_raw(path / "gtscore.f32", _F32, (T,), "gtscore").astype(np.float64),
        change_points=_meta_field(meta, "change_points", list),
        user_summaries=_read_raw(path / "user_summaries.u8", _U8, (n_users, n_frames), "user_summaries").copy(),
        fps=meta.get("fps"),
    )
    if validate:
        check_bundle(bundle)
    return bundle


@dataclass
class DatasetManifest:
    name: str
    videos: dict
    dims: dict
    root: Path = field(default_factory=Path)

    @property
    def video_ids(self) -> list:
        return list(self.videos)

    def bundle_path(self, video_id: str) -> Path:
        return self.root / self.videos[video_id]

    def load(self, streams: Sequence[str] | None = None) -> dict:
        return {vid: load_bundle(self.bundle_path(vid), streams) for vid in self.videos}


def write_manifest(path, name: str, bundle_paths: Mapping[str, str], dims: Mapping[str, int]) -> Path:
    path = Path(path)
    doc = {
        "version": MANIFEST_VERSION,
        "name": name,
        "dims": dict(dims),
        "videos": [{"video_id": vid, "path": str(p)} for vid, p in bundle_paths.items()],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(str(path), f"not valid JSON ({exc})") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError("version", f"manifest format {doc.get('version')} is not supported")
    videos = {}
    for entry in doc.get("videos", []):
        vid = entry["video_id"]
        if vid in videos:
            raise ValidationError([f"duplicate video id {vid!r}"], where=str(path))
        videos[vid] = entry["path"]
    return DatasetManifest(doc.get("name", path.stem), videos, dict(doc.get("dims", {})), path.parent)


# -------------------------------------------------------------------- splits


@dataclass
class FoldSplit:
    folds: list
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"version": SPLITS_VERSION, "k": self.k, "seed": self.seed, "folds": self.folds}

    @classmethod
    def from_dict(cls, doc) -> "FoldSplit":
        if doc.get("version") != SPLITS_VERSION:
            raise FormatError("version", f"split format {doc.get('version')} is not supported")
        return cls([{"test_ids": list(f["test_ids"]), "train_ids": list(f["train_ids"])} for f in doc["folds"]], doc.get("seed"))


def make_splits(video_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldSplit:
    """Non-overlapping k-fold split: every id lands in exactly one test fold.

    Ids are shuffled with ``seed`` and dealt round-robin, so fold sizes differ
    by at most one.
    """
    ids = list(video_ids)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ConfigurationError(f"duplicate video ids: {dup}")
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if len(ids) < k:
        raise ConfigurationError(f"cannot split {len(ids)} videos into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    tests = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        tests[pos % k].append(ids[idx])
    folds = []
    for test in tests:
        held = set(test)
        folds.append({"test_ids": test, "train_ids": [i for i in ids if i not in held]})
    return FoldSplit(folds, seed)


def write_splits(split: FoldSplit, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def load_splits(path) -> FoldSplit:
    try:
        return FoldSplit.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ConfigurationError(f"split file {path} not found") from None


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    n_videos: int = 10
    t_range: tuple = (32, 64)
    dims: int = 16
    n_users: int = 5
    seed: int = 0
    streams: tuple = STREAMS
    stride: int = 15
    noise: float = 0.3
    summary_fraction: float = 0.15

    def __post_init__(self):
        lo, hi = self.t_range
        if self.n_videos < 1:
            raise ConfigurationError("n_videos must be positive")
        if not 2 <= lo <= hi:
            raise ConfigurationError(f"invalid T range {self.t_range}")
        if self.dims < 2:
            raise ConfigurationError("dims must be at least 2")
        if self.n_users < 1:
            raise ConfigurationError("n_users must be at least 1")
        if self.stride < 1:
            raise ConfigurationError("stride must be positive")
        if not self.streams:
            raise ConfigurationError("at least one stream is required")


def _smooth_signal(rng, T):
    """Sum of a few Gaussian bumps on a low baseline, scaled into [0.05, 0.95]."""
    t = np.arange(T, dtype=np.float64)
    sig = 0.1 * rng.random()
    for _ in range(rng.integers(2, 5)):
        centre = rng.uniform(0, T)
        width = rng.uniform(T / 16, T / 6)
        sig = sig + rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((t - centre) / width) ** 2)
    sig = (sig - sig.min()) / max(np.ptp(sig), 1e-12)
    return 0.05 + 0.9 * sig


def _partition(rng, n_frames, mean_len):
    """Random contiguous segmentation of [0, n_frames - 1]."""
    cuts = [0]
    while True:
        step = int(rng.integers(max(1, mean_len // 2), mean_len + mean_len // 2 + 1))
        if cuts[-1] + step >= n_frames:
            break
        cuts.append(cuts[-1] + step)
    bounds = cuts + [n_frames]
    return np.array([[a, b - 1] for a, b in zip(bounds[:-1], bounds[1:])], dtype=np.int64)


def synth_dataset(spec: SynthSpec | None = None, **kwargs) -> list[FeatureBundle]:
    """Seeded toy dataset whose features carry a learnable importance signal.

    Every stream is ``gtscore[t] * direction + offset + noise`` with a
    direction and offset fixed per stream for the whole dataset.
    """
    spec = SynthSpec(**kwargs) if spec is None else spec
    rng = np.random.default_rng(spec.seed)
    streams = canonical_streams(spec.streams)
    directions = {s: 1.0 + 0.5 * rng.standard_normal(spec.dims) for s in streams}
    offsets = {s: 0.5 * rng.standard_normal(spec.dims) for s in streams}
    bundles = []
    width = max(3, len(str(spec.n_videos)))
    for v in range(spec.n_videos):
        T = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        n_frames = T * spec.stride - int(rng.integers(0, spec.stride))
        picks = np.arange(T, dtype=np.int64) * spec.stride
        g = _smooth_signal(rng, T).astype(np.float32)
        feats = {}
        for s in streams:
            x = g[:, None] * directions[s][None, :] + offsets[s][None, :]
            x = x + spec.noise * rng.standard_normal((T, spec.dims))
            feats[s] = x.astype(np.float32).astype(np.float64)
        # per-frame ground truth, step-held between picks
        held = g[np.clip(np.searchsorted(picks, np.arange(n_frames), side="right") - 1, 0, T - 1)]
        users = np.zeros((spec.n_users, n_frames), dtype=np.uint8)
        for u in range(spec.n_users):
            pert = held + 0.1 * np.repeat(rng.standard_normal(T), spec.stride)[:n_frames]
            thr = np.quantile(pert, 1.0 - spec.summary_fraction)
            users[u] = pert >= thr
        bundles.append(
            FeatureBundle(
                video_id=f"video_{v + 1:0{width}d}",
                n_frames=n_frames,
                picks=picks,
                streams=feats,
                gtscore=g.astype(np.float64),
                change_points=_partition(rng, n_frames, mean_len=2 * spec.stride),
                user_summaries=users,
                fps=30.0 / spec.stride,
            )
        )
    for b in bundles:
        check_bundle(b)
    return bundles


def write_dataset(bundles: Sequence[FeatureBundle], out_dir, name: str = "synthetic") -> Path:
    """Write bundles under ``out_dir/<video_id>/`` plus ``out_dir/manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigurationError(f"{out_dir} is not writable")
    paths = {}
    for b in bundles:
        write_bundle(b, out_dir / b.video_id)
        paths[b.video_id] = b.video_id
    dims = bundles[0].dims if bundles else {}
    return write_manifest(out_dir / "manifest.json", name, paths, dims)
