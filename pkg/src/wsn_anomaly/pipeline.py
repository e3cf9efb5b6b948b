"""End-to-end wiring shared by the command line and the experiment harness.

The timeline is split once: the first ``train_fraction`` of the samples train
the model and calibrate the threshold; the rest is scored. Test windows start
``window - detect_tail`` samples before the split so that the scored tails
tile the test region exactly when ``detect_tail == step``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph
from . import model as mdl
from .data import CleanDataset, LabeledWindowSet, inject_correlation_anomaly, make_windows, synth_generate
from .errors import ConfigError
from .eval import MetricsReport, evaluate

__all__ = [
    "split_index", "train_windows", "test_windows", "adjacency_for", "fit",
    "tail_timeline", "DeskExperiment", "desk_experiment", "correlation_spans",
    "correlation_recall",
]


def split_index(ds: CleanDataset, train_fraction: float) -> int:
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    return int(ds.values.shape[-1] * train_fraction)


def train_windows(ds: CleanDataset, cfg: mdl.ModelConfig, train_fraction: float) -> LabeledWindowSet:
    return make_windows(ds, cfg.window, cfg.step, 0, split_index(ds, train_fraction))


def test_windows(ds: CleanDataset, cfg: mdl.ModelConfig, train_fraction: float) -> LabeledWindowSet:
    start = max(split_index(ds, train_fraction) - (cfg.window - cfg.detect_tail), 0)
    return make_windows(ds, cfg.window, cfg.step, start, None)


def adjacency_for(ds: CleanDataset, k: int = 4) -> graph.AdjacencyMatrix:
    if ds.positions is None:
        raise ConfigError("dataset has no node positions; pass a positions file")
    return graph.build_adjacency(ds.positions, k=min(k, len(ds.node_ids) - 1), node_ids=ds.node_ids)


def fit(ds: CleanDataset, cfg: mdl.ModelConfig, train_fraction: float = 0.6,
        k: int = 4) -> tuple[mdl.ModelParams, mdl.TrainLog]:
    """Train on the leading share of the timeline and set tau to the largest training score."""
    ws = train_windows(ds, cfg, train_fraction)
    adj = adjacency_for(ds, k)
    params, log = mdl.train(ws.windows(), cfg, adj.weights, ds.node_ids)
    params.threshold = mdl.calibrate_threshold([mdl.score(ws.windows(), params)])
    return params, log


def tail_timeline(ws: LabeledWindowSet, grid: np.ndarray, tail: int) -> tuple[np.ndarray, np.ndarray]:
    """Fold per-window tail scores back onto the timeline.

    Returns ``(times, scores)`` where ``scores`` is (N, M, len(times)). Where
    tails overlap, the larger score is kept.
    """
    out = np.full(ws.data.shape, -np.inf)
    for w, s in enumerate(ws.starts):
        lo = s + ws.window - tail
        out[..., lo:lo + tail] = np.maximum(out[..., lo:lo + tail], grid[w])
    covered = np.flatnonzero(np.isfinite(out[0, 0]))
    return covered + ws.offset, out[..., covered]


@dataclass
class DeskExperiment:
    """A trained detector on synthetic data plus its clean test windows."""

    dataset: CleanDataset
    params: mdl.ModelParams
    log: mdl.TrainLog
    train: LabeledWindowSet
    test: LabeledWindowSet

    def evaluate(self, ws: LabeledWindowSet) -> MetricsReport:
        tail = self.params.config.detect_tail
        grid = mdl.score(ws.windows(), self.params)
        return evaluate(mdl.classify(grid), ws.window_labels()[..., -tail:], grid)


def desk_experiment(seed: int = 0, n_nodes: int = 8, n_modalities: int = 3, length: int = 3000,
                    window: int = 64, step: int = 32, epochs: int = 200,
                    train_fraction: float = 0.6, data_seed: int = 0, **model_kw) -> DeskExperiment:
    """Train the full model on clean synthetic data at laptop scale."""
    ds, _ = synth_generate(n_nodes, n_modalities, length, seed=data_seed)
    cfg = mdl.ModelConfig(window=window, step=step, detect_tail=step, epochs=epochs,
                          seed=seed, **model_kw).validate()
    params, log = fit(ds, cfg, train_fraction)
    return DeskExperiment(ds, params, log, train_windows(ds, cfg, train_fraction),
                          test_windows(ds, cfg, train_fraction))


def correlation_spans(ws: LabeledWindowSet, n_nodes: int, length: int = 64,
                      gap: int = 40, lead: int = 100) -> list[tuple[int, int]]:
    """One span per node inside the scored region, staggered so they do not coincide."""
    lo, hi = ws.tail_range()
    spans = [(lo + lead + gap * i, lo + lead + gap * i + length) for i in range(n_nodes)]
    if spans and spans[-1][1] > hi:
        raise ConfigError("test region too short for the requested correlation spans")
    return spans


def correlation_recall(exp: DeskExperiment, length: int = 64) -> list[float]:
    """Per-node recall on cross-modal correlation anomalies (modality 0 against 1)."""
    recalls = []
    for node, span in enumerate(correlation_spans(exp.test, exp.test.data.shape[0], length)):
        ws = inject_correlation_anomaly(exp.test, node, span, seed=node)
        recalls.append(exp.evaluate(ws).recall)
    return recalls
