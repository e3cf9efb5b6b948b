"""Classification metrics, ROC AUC, reliability resampling and robustness sweeps.

Cells are the unit of evaluation: every (window, node, modality, t) entry of a
score grid is one sample, and anomalies are the positive class.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from .data import LabeledWindowSet, inject_anomalies
from .errors import ConfigError, DimensionError, UndefinedMetricError

__all__ = [
    "ConfusionCounts", "MetricsReport", "ResampleSummary", "confusion",
    "precision_recall_f1", "auc", "roc_curve", "evaluate", "reliability_resample",
    "robustness_sweep", "write_sweep_csv",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    auc: float | None
    counts: ConfusionCounts
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ConfigError(f"{name} must contain only 0/1 labels")
    return arr.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _binary(pred, "pred"), _binary(truth, "truth")
    if p.shape != t.shape:
        raise DimensionError(f"pred {p.shape} and truth {t.shape} differ in shape")
    return ConfusionCounts(
        tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)))


def precision_recall_f1(c: ConfusionCounts) -> tuple[float, float, float, list[str]]:
    """Precision, recall, F1 and the names of metrics whose denominator was zero.

    A zero denominator yields 0 rather than NaN so reports stay numeric.
    """
    flags = []
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 0.0
        flags.append("precision")
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall = 0.0
        flags.append("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append("f1")
    return precision, recall, f1, flags


def _auc_inputs(scores, truth) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64).ravel()
    t = _binary(truth, "truth").ravel()
    if s.shape != t.shape:
        raise DimensionError(f"{s.size} scores for {t.size} labels")
    if np.isnan(s).any():
        raise ConfigError("scores contain NaN")
    if t.all() or not t.any():
        raise UndefinedMetricError("AUC is undefined when truth contains a single class")
    return s, t


def _roc_counts(s: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (FP, TP) counts as the threshold sweeps down through each distinct score."""
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tp = np.cumsum(t, dtype=np.int64)
    fp = np.cumsum(~t, dtype=np.int64)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    return np.r_[0, fp[last]], np.r_[0, tp[last]]


def roc_curve(scores, truth) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) points from the strictest threshold to the loosest."""
    s, t = _auc_inputs(scores, truth)
    fp, tp = _roc_counts(s, t)
    return fp / fp[-1], tp / tp[-1]


def auc(scores, truth) -> float:
    """Trapezoidal area under the ROC curve.

    The sum is accumulated in integers, twice the area times P*N, so the
    result equals the pairwise ranking probability (ties worth one half)
    exactly.
    """
    s, t = _auc_inputs(scores, truth)
    fp, tp = _roc_counts(s, t)
    doubled = sum(int(df) * int(ts) for df, ts in zip(np.diff(fp), tp[1:] + tp[:-1]))
    return doubled / (2 * int(tp[-1]) * int(fp[-1]))


def evaluate(pred, truth, scores=None) -> MetricsReport:
    counts = confusion(pred, truth)
    p, r, f1, flags = precision_recall_f1(counts)
    area = None
    if scores is not None:
        try:
            area = auc(scores, truth)
        except UndefinedMetricError:
            flags.append("auc")
    return MetricsReport(p, r, f1, area, counts, flags)


@dataclass
class ResampleSummary:
    trials: list[MetricsReport]
    mean: dict[str, float]
    var: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {"trials": [t.to_dict() for t in self.trials],
                "mean": self.mean, "var": self.var, "std": self.std}


_SUMMARY_METRICS = ("precision", "recall", "f1", "auc")


def reliability_resample(scores, truth, threshold: float, segments: int = 9, pick: int = 7,
                         trials: int = 10, seed: int = 0) -> ResampleSummary:
    """Repeatedly evaluate on ``pick`` of ``segments`` contiguous blocks of windows.

    ``scores`` and ``truth`` are window-major arrays (first axis = window).
    Trial seeds are spawned from ``seed`` so trials are independent of order.
    Statistics use the sample variance (ddof=1); a single trial has variance 0.
    Trials whose AUC is undefined are left out of the AUC statistics.
    """
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    t = np.asarray(truth)
    if s.shape != t.shape:
        raise DimensionError(f"scores {s.shape} and truth {t.shape} differ in shape")
    if not segments >= pick >= 1:
        raise ConfigError(f"need segments >= pick >= 1, got segments={segments}, pick={pick}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if len(s) < segments:
        raise ConfigError(f"{len(s)} windows cannot form {segments} segments")
    blocks = np.array_split(np.arange(len(s)), segments)
    reports = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        chosen = np.sort(rng.choice(segments, size=pick, replace=False))
        idx = np.concatenate([blocks[i] for i in chosen])
        reports.append(evaluate((s[idx] > threshold).astype(np.int8), t[idx], s[idx]))
    mean, var, std = {}, {}, {}
    for name in _SUMMARY_METRICS:
        vals = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None])
        if vals.size == 0:
            mean[name] = var[name] = std[name] = None
            continue
        mean[name] = float(vals.mean())
        var[name] = float(vals.var(ddof=1)) if vals.size > 1 else 0.0
        std[name] = float(np.sqrt(var[name]))
    return ResampleSummary(reports, mean, var, std)


def robustness_sweep(params: mdl.ModelParams, clean: LabeledWindowSet, alphas: Sequence[float],
                     rate: float, seed: int) -> list[tuple[float, MetricsReport]]:
    """Inject point anomalies at each amplitude and evaluate the detector."""
    alphas = list(alphas)
    if not alphas:
        raise ConfigError("robustness sweep needs at least one alpha")
    if any(a == 0 for a in alphas):
        raise ConfigError("alpha = 0 leaves the data unchanged; remove it from the sweep")
    tail = params.config.detect_tail
    rows = []
    for a in alphas:
        ws = inject_anomalies(clean, a, rate, seed, tail=tail)
        grid = mdl.score(ws.windows(), params)
        truth = ws.window_labels()[..., -tail:]
        rows.append((float(a), evaluate(mdl.classify(grid), truth, grid)))
    return rows


def write_sweep_csv(rows, path, key: str = "alpha") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key, "precision", "recall", "f1", "auc", "tp", "tn", "fp", "fn"])
        for k, r in rows:
            c = r.counts
            w.writerow([repr(k), repr(r.precision), repr(r.recall), repr(r.f1),
                        "" if r.auc is None else repr(r.auc), c.tp, c.tn, c.fp, c.fn])
