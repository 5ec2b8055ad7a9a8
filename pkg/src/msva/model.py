"""Multi-source attention summarizer network.

Each feature stream goes through its own windowed self-attention branch
(attention -> two affine layers -> layer norm). The branch outputs are fused
and scored by a small head that ends in a sigmoid, one score per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import BundleError, ConfigurationError, DimensionError

STREAMS = ("object", "rgb", "flow")
FUSIONS = ("early", "intermediate", "late")
UNBOUNDED = "unbounded"


def canonical_streams(streams) -> tuple:
    """Order stream names (object, rgb, flow) first, then any extras alphabetically."""
    names = list(dict.fromkeys(streams))
    known = [s for s in STREAMS if s in names]
    return tuple(known + sorted(s for s in names if s not in STREAMS))


def parse_aperture(value):
    """Accept an int, a numeric string or ``"unbounded"``/``None``."""
    if value is None or value == UNBOUNDED:
        return UNBOUNDED
    if isinstance(value, str):
        value = value.strip().lower()
        if value in ("unbounded", "inf", "none"):
            return UNBOUNDED
        try:
            value = int(value)
        except ValueError:
            raise ConfigurationError(f"aperture must be an integer or 'unbounded', got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 0:
        raise ConfigurationError(f"aperture must be a non-negative integer or 'unbounded', got {value!r}")
    return int(value)


@dataclass(frozen=True)
class AttentionConfig:
    d: int
    aperture: object = 250
    scale: float | None = None

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError(f"feature dimension must be positive, got {self.d}")
        object.__setattr__(self, "aperture", parse_aperture(self.aperture))
        if self.scale is not None and not 0.0 <= self.scale <= 1.0:
            raise ConfigurationError(f"attention scale must lie in [0, 1], got {self.scale}")

    @property
    def scale_s(self) -> float:
        return 1.0 / math.sqrt(self.d) if self.scale is None else float(self.scale)


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build a network, independent of its weights.

    ``dims`` maps each stream to its feature width. Under early fusion the
    streams are concatenated, so the single branch has width ``sum(dims)``.
    """

    dims: Mapping[str, int]
    fusion: str = "intermediate"
    aperture: object = 250
    scale: float | None = None
    dropout_rate: float = 0.5
    norm_eps: float = 1e-5

    def __post_init__(self):
        if not self.dims:
            raise ConfigurationError("at least one stream is required")
        dims = {s: int(self.dims[s]) for s in canonical_streams(self.dims)}
        if any(v < 1 for v in dims.values()):
            raise ConfigurationError(f"stream dims must be positive, got {dims}")
        object.__setattr__(self, "dims", dims)
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        object.__setattr__(self, "aperture", parse_aperture(self.aperture))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.norm_eps <= 0:
            raise ConfigurationError("norm_eps must be positive")
        if self.fusion != "early" and len(set(dims.values())) > 1:
            raise ConfigurationError(f"{self.fusion} fusion adds branch outputs and needs equal stream dims, got {dims}")

    @property
    def streams(self) -> tuple:
        return tuple(self.dims)

    @property
    def branch_names(self) -> tuple:
        if self.fusion == "early":
            return ("+".join(self.streams),)
        return self.streams

    def branch_dim(self, name: str) -> int:
        if self.fusion == "early":
            return sum(self.dims.values())
        return self.dims[name]

    @property
    def head_dim(self) -> int:
        return self.branch_dim(self.branch_names[0])

    def attention(self, name: str) -> AttentionConfig:
        return AttentionConfig(self.branch_dim(name), self.aperture, self.scale)

    def to_dict(self) -> dict:
        return {
            "dims": dict(self.dims),
            "fusion": self.fusion,
            "aperture": self.aperture,
            "scale": self.scale,
            "dropout_rate": self.dropout_rate,
            "norm_eps": self.norm_eps,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


@dataclass
class Affine:
    weight: Tensor
    bias: Tensor

    def __call__(self, x):
        return ad.affine(x, self.weight, self.bias)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


@dataclass
class AttentionHead:
    U: Tensor
    V: Tensor
    config: AttentionConfig

    def __post_init__(self):
        d = self.config.d
        if self.U.shape != (d, d) or self.V.shape != (d, d):
            raise DimensionError(f"U {self.U.shape} and V {self.V.shape} must both be {d}x{d}")


@dataclass
class StreamBranch:
    head: AttentionHead
    l1: Affine
    l2: Affine
    norm: LayerNormParams


@dataclass
class FusionHead:
    """L3 -> ReLU -> dropout -> norm; one per stream under late fusion."""

    l3: Affine
    norm: LayerNormParams


@dataclass
class MSVAModel:
    config: ModelConfig
    branches: dict
    heads: dict
    l4: Affine

    def parameters(self) -> dict:
        """Name -> parameter tensor, in a fixed order."""
        out = {}
        for name, br in self.branches.items():
            p = f"branch.{name}"
            out[f"{p}.U"] = br.head.U
            out[f"{p}.V"] = br.head.V
            out[f"{p}.L1.weight"] = br.l1.weight
            out[f"{p}.L1.bias"] = br.l1.bias
            out[f"{p}.L2.weight"] = br.l2.weight
            out[f"{p}.L2.bias"] = br.l2.bias
            out[f"{p}.norm.gain"] = br.norm.gain
            out[f"{p}.norm.bias"] = br.norm.bias
        for name, hd in self.heads.items():
            p = f"head.{name}"
            out[f"{p}.L3.weight"] = hd.l3.weight
            out[f"{p}.L3.bias"] = hd.l3.bias
            out[f"{p}.norm.gain"] = hd.norm.gain
            out[f"{p}.norm.bias"] = hd.norm.bias
        out["head.L4.weight"] = self.l4.weight
        out["head.L4.bias"] = self.l4.bias
        return out

    def get_state(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def set_state(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigurationError(f"state does not match model: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=np.float64, order="C")

    def clone(self) -> "MSVAModel":
        twin = build_model(self.config)
        twin.set_state(self.get_state())
        return twin


# ------------------------------------------------------------------ building


def _glorot(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _affine(rng, d_in, d_out):
    return Affine(_glorot(rng, d_in, d_out, (d_in, d_out)), Tensor(np.zeros(d_out), requires_grad=True))


def _norm(d, eps):
    return LayerNormParams(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True), eps)


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> MSVAModel:
    """Allocate every parameter; weights are Glorot-uniform when ``rng`` is given, zero otherwise."""
    if rng is None:
        rng = np.random.default_rng(0)
    branches = {}
    for name in config.branch_names:
        d = config.branch_dim(name)
        att = config.attention(name)
        head = AttentionHead(_glorot(rng, d, d, (d, d)), _glorot(rng, d, d, (d, d)), att)
        branches[name] = StreamBranch(head, _affine(rng, d, d), _affine(rng, d, d), _norm(d, config.norm_eps))
    d = config.head_dim
    head_names = config.streams if config.fusion == "late" else ("fused",)
    heads = {name: FusionHead(_affine(rng, d, d), _norm(d, config.norm_eps)) for name in head_names}
    return MSVAModel(config, branches, heads, _affine(rng, d, 1))


def init_model(config: ModelConfig, seed: int) -> MSVAModel:
    """Deterministic initialisation: Glorot-uniform weights, zero biases, unit norm gains."""
    if not isinstance(config, ModelConfig):
        raise ConfigurationError(f"expected a ModelConfig, got {type(config).__name__}")
    return build_model(config, np.random.default_rng(seed))


# ------------------------------------------------------------------- forward


def aperture_mask(T: int, p) -> np.ndarray:
    """Boolean T×T band: frame t may attend to frame i iff |t - i| <= p."""
    p = parse_aperture(p)
    if T < 1:
        raise ConfigurationError(f"sequence length must be positive, got {T}")
    if p == UNBOUNDED:
        return np.ones((T, T), dtype=bool)
    idx = np.arange(T)
    return np.abs(idx[:, None] - idx[None, :]) <= p


def attention_scores(head: AttentionHead, X: Tensor) -> Tensor:
    """E[t, i] = s * (U x_i) . (V x_t)."""
    X = ad.as_tensor(X)
    if X.data.ndim != 2 or X.shape[1] != head.config.d:
        raise DimensionError(f"features {X.shape} do not match attention width {head.config.d}")
    keys = ad.matmul(X, ad.transpose(head.U))
    queries = ad.matmul(X, ad.transpose(head.V))
    return ad.scale(ad.matmul(queries, ad.transpose(keys)), head.config.scale_s)


def attention_weights(E: Tensor, mask) -> Tensor:
    return ad.masked_softmax(E, mask)


def branch_forward(branch: StreamBranch, X: Tensor, mask=None) -> Tensor:
    """Latent representation of one stream: norm(L2(L1(alpha @ X)))."""
    X = ad.as_tensor(X)
    if mask is None:
        mask = aperture_mask(X.shape[0], branch.head.config.aperture)
    alpha = attention_weights(attention_scores(branch.head, X), mask)
    context = ad.matmul(alpha, X)
    return branch.norm(branch.l2(branch.l1(context)))


def _head_stack(hd: FusionHead, x: Tensor, rate: float, training: bool, rng) -> Tensor:
    return hd.norm(ad.dropout(ad.relu(hd.l3(x)), rate, rng, training))


def fuse_and_score(model: MSVAModel, Z_set: Mapping[str, Tensor], training: bool = False, rng=None) -> Tensor:
    """Fuse branch latents and map them to per-frame scores in (0, 1)."""
    cfg = model.config
    expected = set(cfg.branch_names)
    if set(Z_set) != expected:
        raise ConfigurationError(f"latents for {sorted(Z_set)} do not match branches {sorted(expected)}")
    order = [n for n in cfg.branch_names]
    rate = cfg.dropout_rate
    if cfg.fusion == "late":
        parts = [_head_stack(model.heads[n], Z_set[n], rate, training, rng) for n in order]
        pre = ad.add_n(parts)
    else:
        fused = ad.add_n([Z_set[n] for n in order])
        pre = _head_stack(model.heads["fused"], fused, rate, training, rng)
    h = model.l4(pre)
    return ad.sigmoid(ad.reshape(h, (h.shape[0],)))


def forward(model: MSVAModel, streams: Mapping[str, object], training: bool = False, rng=None) -> Tensor:
    """Per-frame importance scores for one video."""
    cfg = model.config
    missing = [s for s in cfg.streams if s not in streams]
    if missing:
        raise BundleError(f"missing feature streams {missing}")
    X = {s: ad.as_tensor(streams[s]) for s in cfg.streams}
    lengths = {s: x.shape[0] for s, x in X.items()}
    if len(set(lengths.values())) != 1:
        raise BundleError(f"streams disagree on the number of frames: {lengths}")
    for s, x in X.items():
        if x.data.ndim != 2 or x.shape[1] != cfg.dims[s]:
            raise DimensionError(f"stream {s!r} has shape {x.shape}, expected (T, {cfg.dims[s]})")
    T = next(iter(lengths.values()))
    mask = aperture_mask(T, cfg.aperture)
    if cfg.fusion == "early":
        name = cfg.branch_names[0]
        joined = ad.concat_columns([X[s] for s in cfg.streams]) if len(X) > 1 else X[cfg.streams[0]]
        Z = {name: branch_forward(model.branches[name], joined, mask)}
    else:
        Z = {s: branch_forward(model.branches[s], X[s], mask) for s in cfg.streams}
    return fuse_and_score(model, Z, training, rng)
