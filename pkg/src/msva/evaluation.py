"""Benchmark protocol: knapsack summaries, F1 against users, rank correlations."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, DimensionError

BUDGET_FRACTION = 0.15
F1_MODES = ("max", "avg")


# ------------------------------------------------------------ summarisation


def upsample_scores(picks, scores, n_frames: int) -> np.ndarray:
    """Hold each pick's score until the next pick; frames before the first pick take the first score."""
    picks = np.asarray(picks, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if picks.shape != scores.shape:
        raise DimensionError(f"{len(scores)} scores for {len(picks)} picks")
    idx = np.searchsorted(picks, np.arange(n_frames), side="right") - 1
    return scores[np.clip(idx, 0, len(picks) - 1)]


def segment_scores(full_scores, change_points) -> tuple[np.ndarray, np.ndarray]:
    """Mean score and frame count of every segment."""
    full_scores = np.asarray(full_scores, dtype=np.float64)
    cps = np.asarray(change_points, dtype=np.int64).reshape(-1, 2)
    lengths = cps[:, 1] - cps[:, 0] + 1
    values = np.array([full_scores[a : b + 1].mean() for a, b in cps])
    return values, lengths


def knapsack_select(values, lengths, budget: int) -> list[int]:
    """Exact 0/1 knapsack over integer lengths.

    Among optimal sets the lexicographically smallest sorted index list is
    returned.
    """
    values = np.asarray(values, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    budget = int(budget)
    n = len(values)
    if budget <= 0 or n == 0:
        return []
    if np.any(lengths <= 0):
        raise ConfigurationError("segment lengths must be positive")
    # best[i, w]: optimum over items i..n-1 with capacity w
    best = np.zeros((n + 1, budget + 1))
    for i in range(n - 1, -1, -1):
        row = best[i + 1].copy()
        li = lengths[i]
        if li <= budget:
            take = values[i] + best[i + 1, : budget + 1 - li]
            row[li:] = np.maximum(row[li:], take)
        best[i] = row
    chosen = []
    w = budget
    for i in range(n):
        if best[i, w] == 0.0:
            # nothing left to gain; stopping here keeps the index list shortest
            break
        li = lengths[i]
        if li <= w and values[i] + best[i + 1, w - li] == best[i, w]:
            chosen.append(i)
            w -= li
    return chosen


@dataclass
class MachineSummary:
    selected_segments: list
    frame_mask: np.ndarray
    budget_frames: int


def build_summary(bundle, predicted_scores, budget_fraction: float = BUDGET_FRACTION) -> MachineSummary:
    """Upsample, score segments, knapsack under ``floor(fraction * n_frames)`` frames."""
    if not 0.0 <= budget_fraction <= 1.0:
        raise ConfigurationError(f"budget fraction must lie in [0, 1], got {budget_fraction}")
    n = bundle.n_frames
    full = upsample_scores(bundle.picks, predicted_scores, n)
    values, lengths = segment_scores(full, bundle.change_points)
    budget = int(math.floor(budget_fraction * n))
    chosen = knapsack_select(values, lengths, budget)
    mask = np.zeros(n, dtype=np.uint8)
    for j in chosen:
        a, b = bundle.change_points[j]
        mask[a : b + 1] = 1
    return MachineSummary(chosen, mask, budget)


def f1_against_users(summary, user_summaries, mode: str = "avg") -> float:
    """F1 of a machine summary against each user summary, reduced by max or mean."""
    if mode not in F1_MODES:
        raise ConfigurationError(f"f1 mode must be one of {F1_MODES}, got {mode!r}")
    machine = np.asarray(getattr(summary, "frame_mask", summary)).astype(bool)
    users = np.atleast_2d(np.asarray(user_summaries)).astype(bool)
    if users.size == 0 or users.shape[0] == 0:
        raise ConfigurationError("no user summaries to compare against")
    if users.shape[1] != machine.shape[0]:
        raise DimensionError(f"machine summary has {machine.shape[0]} frames, users have {users.shape[1]}")
    scores = []
    n_machine = machine.sum()
    for user in users:
        overlap = np.logical_and(machine, user).sum()
        p = overlap / n_machine if n_machine else 0.0
        r = overlap / user.sum() if user.sum() else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(max(scores) if mode == "max" else np.mean(scores))


# ------------------------------------------------------------- correlations


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"correlation inputs differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ConfigurationError("correlation needs at least two observations")
    return a, b


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau-b; NaN when either side is constant."""
    a, b = _check_pair(a, b)
    iu = np.triu_indices(a.size, k=1)
    da = np.sign(a[:, None] - a[None, :])[iu]
    db = np.sign(b[:, None] - b[None, :])[iu]
    n0 = da.size
    ties_a = np.count_nonzero(da == 0)
    ties_b = np.count_nonzero(db == 0)
    denom = (n0 - ties_a) * (n0 - ties_b)
    if denom == 0:
        return math.nan
    s = float(np.sum(da * db))
    return s / math.sqrt(float(denom))


def midranks(x) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    for end in range(1, x.size + 1):
        if end == x.size or sx[end] != sx[start]:
            ranks[order[start:end]] = 0.5 * (start + end - 1) + 1.0
            start = end
    return ranks


def spearman_rho(a, b) -> float:
    """Pearson correlation of mid-ranks; NaN when either side is constant."""
    a, b = _check_pair(a, b)
    ra, rb = midranks(a), midranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        return math.nan
    return float(ra @ rb) / denom


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


# --------------------------------------------------------------- reporting


def evaluate_video(bundle, predicted_scores, f1_mode: str = "avg", budget_fraction: float = BUDGET_FRACTION) -> dict:
    """F1 plus annotator-averaged tau and rho for one video."""
    scores = np.asarray(predicted_scores, dtype=np.float64)
    summary = build_summary(bundle, scores, budget_fraction)
    f1 = f1_against_users(summary, bundle.user_summaries, f1_mode)
    at_picks = np.asarray(bundle.user_summaries)[:, bundle.picks].astype(np.float64)
    taus = [kendall_tau(scores, u) for u in at_picks]
    rhos = [spearman_rho(scores, u) for u in at_picks]
    return {"f1": f1, "tau": _nanmean(taus), "rho": _nanmean(rhos)}


@dataclass
class EvalReport:
    records: list = field(default_factory=list)

    def add(self, video_id, fold, f1, tau, rho):
        self.records.append({"video_id": video_id, "fold": int(fold), "f1": float(f1), "tau": float(tau), "rho": float(rho)})

    def _mean(self, key, fold=None):
        return _nanmean([r[key] for r in self.records if fold is None or r["fold"] == fold])

    @property
    def folds(self) -> list:
        return sorted({r["fold"] for r in self.records})

    def fold_means(self) -> dict:
        return {f: {k: self._mean(k, f) for k in ("f1", "tau", "rho")} for f in self.folds}

    def overall(self) -> dict:
        return {k: self._mean(k) for k in ("f1", "tau", "rho")}

    def missing(self) -> dict:
        return {k: sum(math.isnan(r[k]) for r in self.records) for k in ("tau", "rho")}

    def summary(self) -> dict:
        """Aggregates for the JSON side file; undefined means become ``None``."""
        return _nan_to_none({
            "n_videos": len(self.records),
            "overall": self.overall(),
            "mean_of_fold_means_f1": _nanmean([m["f1"] for m in self.fold_means().values()]),
            "folds": {str(k): v for k, v in self.fold_means().items()},
            "missing": self.missing(),
        })

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video_id", "fold", "f1", "tau", "rho"])
        for r in self.records:
            w.writerow([r["video_id"], r["fold"], fmt_float(r["f1"]), fmt_float(r["tau"]), fmt_float(r["rho"])])
        o = self.overall()
        w.writerow(["MEAN", "", fmt_float(o["f1"]), fmt_float(o["tau"]), fmt_float(o["rho"])])
        return buf.getvalue()


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def fmt_float(x: float) -> str:
    """Round-trippable float text; NaN is written as an empty cell."""
    return "" if math.isnan(x) else repr(float(x))


def evaluate_split(
    models: Sequence,
    folds,
    bundles: Mapping[str, object],
    f1_mode: str = "avg",
    budget_fraction: float = BUDGET_FRACTION,
) -> EvalReport:
    """Score every video with the model of the fold that holds it out.

    ``models`` are fitted estimators (anything with ``predict_one``) or
    callables mapping a bundle to its predicted scores.
    """
    fold_list = getattr(folds, "folds", folds)
    if len(models) != len(fold_list):
        raise ConfigurationError(f"{len(models)} models for {len(fold_list)} folds")
    report = EvalReport()
    seen = set()
    for k, (model, fold) in enumerate(zip(models, fold_list)):
        predict = model.predict_one if hasattr(model, "predict_one") else model
        for vid in fold["test_ids"]:
            if vid in seen:
                raise ConfigurationError(f"video {vid!r} appears in more than one test fold")
            seen.add(vid)
            bundle = bundles[vid]
            m = evaluate_video(bundle, predict(bundle), f1_mode, budget_fraction)
            report.add(vid, k, m["f1"], m["tau"], m["rho"])
    return report


def random_baseline_f1(bundles: Sequence, f1_mode: str = "avg", seeds=(0, 1, 2, 3, 4), budget_fraction: float = BUDGET_FRACTION) -> float:
    """Mean F1 of uniform-random frame scores over several seeds."""
    per_seed = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        per_seed.append(np.mean([evaluate_video(b, rng.random(b.T), f1_mode, budget_fraction)["f1"] for b in bundles]))
    return float(np.mean(per_seed))
