"""Command-line front end: ``msva {synth,splits,train,eval,ablate,validate}``.

Exit codes: 0 success, 1 validation failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import SynthSpec, load_manifest, load_splits, make_splits, synth_dataset, write_dataset, write_splits
from .estimator import MSVARegressor, check_streams
from .evaluation import BUDGET_FRACTION, evaluate_split, fmt_float, upsample_scores
from .exceptions import BundleError, ConfigurationError, FormatError
from .model import STREAMS, parse_aperture
from .training import load_checkpoint

logger = logging.getLogger("msva")

EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunConfig:
    manifest: str | None = None
    splits: str | None = None
    streams: tuple = STREAMS
    fusion: str = "intermediate"
    aperture: object = 250
    dropout: float = 0.5
    epochs: int = 300
    patience: int = 50
    lr: float = 5e-5
    weight_decay: float = 1e-5
    f1_mode: str = "avg"
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.streams = check_streams(self.streams)
        self.aperture = parse_aperture(self.aperture)
        if self.f1_mode not in ("max", "avg"):
            raise ConfigurationError(f"--f1-mode must be max or avg, got {self.f1_mode!r}")

    def estimator(self, seed=None) -> MSVARegressor:
        return MSVARegressor(
            streams=self.streams,
            fusion=self.fusion,
            aperture=self.aperture,
            dropout_rate=self.dropout,
            learning_rate=self.lr,
            max_epochs=self.epochs,
            stall_patience=self.patience,
            weight_decay=self.weight_decay,
            f1_mode=self.f1_mode,
            random_state=self.seed if seed is None else seed,
        )

    def to_dict(self):
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d


def resolve_run_config(args) -> RunConfig:
    """Defaults, then the ``--config`` JSON file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for name in known:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values)


# ----------------------------------------------------------------- helpers


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_dataset(cfg: RunConfig):
    if not cfg.manifest:
        raise ConfigurationError("--manifest is required")
    manifest = load_manifest(cfg.manifest)
    return manifest, manifest.load(cfg.streams)


def _load_folds(cfg: RunConfig, bundles):
    if not cfg.splits:
        raise ConfigurationError("--splits is required")
    split = load_splits(cfg.splits)
    for k, fold in enumerate(split.folds):
        unknown = [v for v in fold["test_ids"] + fold["train_ids"] if v not in bundles]
        if unknown:
            raise ConfigurationError(f"fold {k} references videos missing from the manifest: {unknown}")
    return split


def train_folds(cfg: RunConfig, bundles, split, seed=None) -> list[MSVARegressor]:
    models = []
    for k, fold in enumerate(split.folds):
        logger.info("fold %d: training on %d videos", k, len(fold["train_ids"]))
        models.append(cfg.estimator(seed).fit([bundles[v] for v in fold["train_ids"]]))
    return models


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_videos=args.n_videos,
        t_range=(args.t_min, args.t_max),
        dims=args.dims,
        n_users=args.n_users,
        seed=args.seed if args.seed is not None else 0,
        streams=check_streams(args.streams or ",".join(STREAMS)),
    )
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create {out}: {exc}") from None
    manifest = write_dataset(synth_dataset(spec), out, name=args.name)
    load_manifest(manifest).load()  # re-read and validate what was written
    print(manifest)
    return EXIT_OK


def cmd_splits(args) -> int:
    manifest = load_manifest(args.manifest)
    split = make_splits(manifest.video_ids, args.k, args.seed if args.seed is not None else 0)
    path = write_splits(split, args.out)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    _, bundles = _load_dataset(cfg)
    split = _load_folds(cfg, bundles)
    out = Path(cfg.out)
    _write_text(out / "run_config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    for k, est in enumerate(train_folds(cfg, bundles, split)):
        fold_dir = out / f"fold_{k}"
        est.save(fold_dir / "checkpoint")
        _write_text(fold_dir / "epochs.csv", est.epoch_log_.to_csv())
    print(out)
    return EXIT_OK


def _checkpoint_dirs(root: Path) -> list[Path]:
    dirs = sorted(root.glob("fold_*/checkpoint"), key=lambda p: int(p.parent.name.split("_")[1]))
    return [d for d in dirs if (d / "manifest.json").is_file()]


def write_eval_outputs(report, models, split, bundles, out: Path) -> None:
    _write_text(out / "report.csv", report.to_csv())
    _write_text(out / "report_summary.json", json.dumps(report.summary(), indent=1, sort_keys=True, allow_nan=False) + "\n")
    bars = io.StringIO()
    w = csv.writer(bars, lineterminator="\n")
    w.writerow(["video_id", "fold", "f1"])
    for r in sorted(report.records, key=lambda r: r["video_id"]):
        w.writerow([r["video_id"], r["fold"], fmt_float(r["f1"])])
    _write_text(out / "f1_per_video.csv", bars.getvalue())
    for model, fold in zip(models, split.folds):
        for vid in fold["test_ids"]:
            b = bundles[vid]
            pred = upsample_scores(b.picks, model.predict_one(b), b.n_frames)
            gt = upsample_scores(b.picks, b.gtscore, b.n_frames)
            buf = io.StringIO()
            cw = csv.writer(buf, lineterminator="\n")
            cw.writerow(["frame", "predicted", "gtscore"])
            for f in range(b.n_frames):
                cw.writerow([f, fmt_float(pred[f]), fmt_float(gt[f])])
            _write_text(out / "curves" / f"{vid}.csv", buf.getvalue())


def cmd_eval(args) -> int:
    cfg = resolve_run_config(args)
    _, bundles = _load_dataset(cfg)
    split = _load_folds(cfg, bundles)
    root = Path(args.checkpoints or cfg.out)
    dirs = _checkpoint_dirs(root)
    if len(dirs) != split.k:
        raise ConfigurationError(f"found {len(dirs)} checkpoints under {root} for {split.k} folds")
    models = [MSVARegressor.from_checkpoint(load_checkpoint(d)) for d in dirs]
    report = evaluate_split(models, split, bundles, cfg.f1_mode)
    out = Path(cfg.out)
    write_eval_outputs(report, models, split, bundles, out)
    o = report.overall()
    print(f"F1 {o['f1']:.4f}  tau {o['tau']:.4f}  rho {o['rho']:.4f}  ({len(report.records)} videos)")
    return EXIT_OK


def _ablation_cell(cell):
    cfg, fusion, streams, aperture = cell
    cell_cfg = replace(cfg, fusion=fusion, streams=streams, aperture=aperture)
    manifest, bundles = _load_dataset(cell_cfg)
    split = _load_folds(cell_cfg, bundles)
    models = train_folds(cell_cfg, bundles, split)
    report = evaluate_split(models, split, bundles, cell_cfg.f1_mode)
    return [manifest.name, fusion, "+".join(cell_cfg.streams), str(cell_cfg.aperture), fmt_float(report.overall()["f1"])]


def cmd_ablate(args) -> int:
    cfg = resolve_run_config(args)
    fusions = [f for f in args.fusions.split(",") if f]
    stream_sets = [check_streams(s) for s in args.stream_sets.split(";") if s]
    apertures = [parse_aperture(a) for a in args.apertures.split(",") if a]
    for f in fusions:
        if f not in ("early", "intermediate", "late"):
            raise ConfigurationError(f"unknown fusion {f!r}")
    cells = [(cfg, f, s, a) for f, s, a in itertools.product(fusions, stream_sets, apertures)]
    workers = max(1, int(os.environ.get("MSVA_THREADS", "1")))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            rows = list(pool.map(_ablation_cell, cells))
    else:
        rows = [_ablation_cell(c) for c in cells]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "fusion", "features", "aperture", "f1"])
    w.writerows(rows)
    path = Path(cfg.out) / "ablation.csv"
    _write_text(path, buf.getvalue())
    print(path)
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    manifest.load()
    print(f"{len(manifest.videos)} bundles valid")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _run_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="JSON file with RunConfig values (flags override it)")
    p.add_argument("--manifest")
    p.add_argument("--splits")
    p.add_argument("--streams", help="comma-separated subset of object,rgb,flow")
    p.add_argument("--fusion", choices=["early", "intermediate", "late"])
    p.add_argument("--aperture", help="half-window in sampled frames, or 'unbounded'")
    p.add_argument("--f1-mode", dest="f1_mode", choices=["max", "avg"])
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msva", description="Multi-source attention video summarization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-videos", dest="n_videos", type=int, default=10)
    p.add_argument("--t-min", dest="t_min", type=int, default=32)
    p.add_argument("--t-max", dest="t_max", type=int, default=64)
    p.add_argument("--dims", type=int, default=16)
    p.add_argument("--n-users", dest="n_users", type=int, default=5)
    p.add_argument("--streams")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("splits", help="write non-overlapping k-fold splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_splits)

    p = sub.add_parser("train", help="train one model per fold")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints on their test videos")
    _run_flags(p, training=False)
    p.add_argument("--checkpoints", help="directory holding fold_*/checkpoint (default: --out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a fusion x streams x aperture grid")
    _run_flags(p)
    p.add_argument("--fusions", default="intermediate")
    p.add_argument("--stream-sets", dest="stream_sets", default="object,rgb,flow", help="';'-separated stream lists")
    p.add_argument("--apertures", default="250")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("validate", help="check every bundle of a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BundleError, FormatError) as exc:
        print(f"msva: validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigurationError as exc:
        print(f"msva: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
