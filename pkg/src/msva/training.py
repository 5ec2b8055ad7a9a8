"""Per-fold training with Adam, early stopping and checkpoint files.

A checkpoint is a directory::

    manifest.json               configs, epoch log, rng state, array index
    best__<param>.f64           parameters of the lowest-loss epoch
    final__<param>.f64          parameters after the last epoch
    adam_m__<param>.f64, adam_v__<param>.f64

Arrays are raw little-endian float64 in row-major order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .exceptions import BundleError, ConfigurationError, ContractError, FormatError
from .model import ModelConfig, MSVAModel, build_model, forward, init_model

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_F64 = np.dtype("<f8")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 300
    stall_patience: int = 50
    stall_tolerance: float = 1e-6
    l2_weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be at least 1")
        if self.stall_patience < 1:
            raise ConfigurationError("stall_patience must be at least 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, ad.Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: Mapping[str, ad.Tensor], grads: Mapping[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"{k}: gradient {g.shape} / moments {state.m[k].shape} do not match parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.l2_weight_decay:
            p.data -= cfg.learning_rate * cfg.l2_weight_decay * p.data
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass
class EpochLog:
    train_loss: list = field(default_factory=list)
    eval_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.eval_loss)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,eval_loss"]
        lines += [f"{i},{a!r},{b!r}" for i, (a, b) in enumerate(zip(self.train_loss, self.eval_loss))]
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    best_state: dict
    final_state: dict
    adam: AdamState
    log: EpochLog
    rng_state: dict
    stall_count: int = 0

    def model(self, which: str = "best") -> MSVAModel:
        net = build_model(self.model_config)
        net.set_state(self.best_state if which == "best" else self.final_state)
        return net


# ------------------------------------------------------------------ training


def _video_inputs(bundles, streams):
    out = []
    for b in bundles:
        missing = [s for s in streams if s not in b.streams]
        if missing:
            raise BundleError(f"video {b.video_id}: missing streams {missing}")
        out.append(({s: ad.Tensor(b.streams[s]) for s in streams}, np.asarray(b.gtscore, dtype=np.float64)))
    return out


def mean_loss(model: MSVAModel, videos) -> float:
    """Dropout-free mean MSE over (streams, target) pairs."""
    return float(np.mean([float(ad.mse_loss(forward(model, x, training=False), y).data) for x, y in videos]))


def train_fold(
    train_bundles: Sequence,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Train one model on the bundles of a fold's training set."""
    if not train_bundles:
        raise ConfigurationError("empty training set")
    return train_videos(_video_inputs(train_bundles, model_cfg.streams), model_cfg, train_cfg, resume)


def train_videos(
    videos: Sequence,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Train on ``(streams, target)`` pairs, one video per step, until
    ``max_epochs`` or ``stall_patience`` epochs without loss improvement.

    The loss that drives best-epoch selection and stall detection is the
    dropout-free training-set MSE after each epoch.
    """
    if not videos:
        raise ConfigurationError("empty training set")
    rng = np.random.default_rng(train_cfg.seed)
    if resume is None:
        model = init_model(model_cfg, train_cfg.seed)
        params = model.parameters()
        state = AdamState.for_params(params)
        log = EpochLog()
        best_state = model.get_state()
        stall = 0
    else:
        if resume.model_config != model_cfg:
            raise ConfigurationError("resume checkpoint was trained with a different model config")
        model = resume.model("final")
        params = model.parameters()
        state = AdamState({k: a.copy() for k, a in resume.adam.m.items()}, {k: a.copy() for k, a in resume.adam.v.items()}, resume.adam.t)
        log = EpochLog(list(resume.log.train_loss), list(resume.log.eval_loss), resume.log.best_epoch)
        best_state = {k: a.copy() for k, a in resume.best_state.items()}
        stall = resume.stall_count
        rng.bit_generator.state = resume.rng_state

    while len(log) < train_cfg.max_epochs and stall < train_cfg.stall_patience:
        step_losses = []
        for idx in rng.permutation(len(videos)):
            x, y = videos[idx]
            ad.zero_grad(params.values())
            loss = ad.mse_loss(forward(model, x, training=True, rng=rng), y)
            ad.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, train_cfg)
            step_losses.append(float(loss.data))
        epoch_loss = mean_loss(model, videos)
        if log.eval_loss:
            prev = log.eval_loss[-1]
            rel = (prev - epoch_loss) / max(abs(prev), 1e-300)
            stall = stall + 1 if rel < train_cfg.stall_tolerance else 0
        log.train_loss.append(float(np.mean(step_losses)))
        log.eval_loss.append(epoch_loss)
        if log.best_epoch < 0 or epoch_loss < log.eval_loss[log.best_epoch]:
            log.best_epoch = len(log) - 1
            best_state = model.get_state()
        if len(log) % 25 == 0:
            logger.debug("epoch %d loss %.6g", len(log), epoch_loss)

    return Checkpoint(model_cfg, train_cfg, best_state, model.get_state(), state, log, rng.bit_generator.state, stall)


# --------------------------------------------------------------- persistence


def _array_entry(prefix, name, arr):
    return {"name": name, "file": f"{prefix}__{name}.f64", "shape": list(arr.shape)}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups = {"best": ckpt.best_state, "final": ckpt.final_state, "adam_m": ckpt.adam.m, "adam_v": ckpt.adam.v}
    arrays = {}
    for prefix, state in groups.items():
        arrays[prefix] = []
        for name, arr in state.items():
            entry = _array_entry(prefix, name, arr)
            arrays[prefix].append(entry)
            (path / entry["file"]).write_bytes(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "adam_t": ckpt.adam.t,
        "stall_count": ckpt.stall_count,
        "rng_state": ckpt.rng_state,
        "log": {"train_loss": ckpt.log.train_loss, "eval_loss": ckpt.log.eval_loss, "best_epoch": ckpt.log.best_epoch},
        "arrays": arrays,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _need(doc, key):
    if key not in doc:
        raise FormatError(key, "missing from checkpoint manifest")
    return doc[key]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError("manifest.json", f"not found in {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError("manifest.json", f"not valid JSON ({exc})") from None
    version = _need(doc, "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError("version", f"checkpoint format {version} is incompatible with this reader ({CHECKPOINT_VERSION})")
    try:
        model_cfg = ModelConfig.from_dict(_need(doc, "model_config"))
        train_cfg = TrainConfig(**_need(doc, "train_config"))
    except (TypeError, ConfigurationError) as exc:
        raise FormatError("config", str(exc)) from None
    states = {}
    for prefix, entries in _need(doc, "arrays").items():
        state = {}
        for e in entries:
            f = path / e["file"]
            shape = tuple(e["shape"])
            if not f.is_file():
                raise FormatError(e["name"], f"array file {e['file']} is missing")
            raw = f.read_bytes()
            want = int(np.prod(shape)) * _F64.itemsize
            if len(raw) != want:
                raise FormatError(e["name"], f"{e['file']} holds {len(raw)} bytes, expected {want}")
            state[e["name"]] = np.frombuffer(raw, dtype=_F64).reshape(shape).copy()
        states[prefix] = state
    for prefix in ("best", "final", "adam_m", "adam_v"):
        if prefix not in states:
            raise FormatError(f"arrays.{prefix}", "missing from checkpoint manifest")
    log_doc = _need(doc, "log")
    log = EpochLog([float(x) for x in log_doc["train_loss"]], [float(x) for x in log_doc["eval_loss"]], int(log_doc["best_epoch"]))
    ckpt = Checkpoint(
        model_cfg,
        train_cfg,
        states["best"],
        states["final"],
        AdamState(states["adam_m"], states["adam_v"], int(_need(doc, "adam_t"))),
        log,
        _need(doc, "rng_state"),
        int(doc.get("stall_count", 0)),
    )
    # surfaces shape/name mismatches against the config as a format problem
    try:
        ckpt.model("best")
        ckpt.model("final")
    except Exception as exc:
        raise FormatError("arrays", str(exc)) from None
    return ckpt
