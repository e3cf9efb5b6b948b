"""Sensor-log ingestion, cleaning, windowing, synthetic data and anomaly injection.

Datasets are aligned arrays of shape ``(N, M, T)``: nodes, modalities, time.
"""
from __future__ import annotations

import csv
import json
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from itertools import count
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError

_LOGGER = logging.getLogger(__name__)

IBRL_FIELDS = ("temperature", "humidity", "light", "voltage")
DEFAULT_MODALITIES = ("humidity", "temperature", "voltage")
DEFAULT_EXCLUDED = (5, 15)
IBRL_NODES = tuple(range(1, 55))
SAMPLE_PERIOD = 31.0
MAX_TEMPERATURE = 120.0
MIN_HUMIDITY = 0.0
SIGMA_FLOOR = 1e-12

# provenance codes stored per cell
NORMAL, GIVEN, INJECTED_POINT, INJECTED_CORRELATION = 0, 1, 2, 3

_SPLIT = re.compile(r"[,\s]+")


@dataclass
class RawReadingLog:
    timestamp: np.ndarray
    epoch: np.ndarray
    node: np.ndarray
    readings: dict[str, np.ndarray]
    skipped: int = 0
    skipped_lines: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.timestamp)


@dataclass
class CleanDataset:
    values: np.ndarray
    node_ids: tuple
    modalities: tuple
    mean: np.ndarray
    std: np.ndarray
    start_time: float = 0.0
    period: float = SAMPLE_PERIOD
    positions: np.ndarray | None = None
    report: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def denormalize(self, values: np.ndarray | None = None) -> np.ndarray:
        v = self.values if values is None else values
        return v * self.std[..., None] + self.mean[..., None]


@dataclass
class LabeledWindowSet:
    """Windows over a contiguous stretch of a dataset, with per-cell labels.

    Windows are views into ``data``; labels and provenance live on the same
    timeline so overlapping windows always agree.
    """

    data: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    alpha: np.ndarray
    starts: np.ndarray
    window: int
    step: int
    series_min: np.ndarray
    series_max: np.ndarray
    offset: int = 0

    def windows(self) -> np.ndarray:
        return np.stack([self.data[..., s:s + self.window] for s in self.starts])

    def window_labels(self) -> np.ndarray:
        return np.stack([self.labels[..., s:s + self.window] for s in self.starts])

    def tail_range(self, tail: int | None = None) -> tuple[int, int]:
        """Timeline span covered by the last ``tail`` steps of the windows."""
        tail = self.step if tail is None else tail
        return int(self.starts[0]) + self.window - tail, int(self.starts[-1]) + self.window

    def copy(self) -> "LabeledWindowSet":
        return replace(self, data=self.data.copy(), labels=self.labels.copy(),
                       provenance=self.provenance.copy(), alpha=self.alpha.copy())


# -- ingestion ----------------------------------------------------------------

def _parse_time(date: str, clock: str) -> float:
    day = datetime.strptime(date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    hh, mm, ss = clock.split(":")
    return day.timestamp() + int(hh) * 3600 + int(mm) * 60 + float(ss)


def ingest_ibrl(source) -> RawReadingLog:
    """Parse IBRL ``labdata`` rows: date time epoch moteid temp humidity light voltage."""
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return ingest_ibrl(fh)
    ts, ep, node = [], [], []
    cols = {k: [] for k in IBRL_FIELDS}
    skipped, bad_lines = 0, []
    for lineno, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        parts = _SPLIT.split(line)
        try:
            if len(parts) != 8:
                raise ValueError("field count")
            t = _parse_time(parts[0], parts[1])
            e, n = int(parts[2]), int(parts[3])
            vals = [float(v) for v in parts[4:]]
        except ValueError:
            skipped += 1
            if len(bad_lines) < 20:
                bad_lines.append(lineno)
            continue
        ts.append(t)
        ep.append(e)
        node.append(n)
        for k, v in zip(IBRL_FIELDS, vals):
            cols[k].append(v)
    if not ts:
        raise FormatError(f"no valid readings ({skipped} malformed rows)")
    if skipped:
        _LOGGER.warning("skipped %d malformed rows (first lines: %s)", skipped, bad_lines[:5])
    ts = np.array(ts)
    node = np.array(node, dtype=np.int64)
    order = np.lexsort((node, ts))
    return RawReadingLog(
        timestamp=ts[order],
        epoch=np.array(ep, dtype=np.int64)[order],
        node=node[order],
        readings={k: np.array(v)[order] for k, v in cols.items()},
        skipped=skipped,
        skipped_lines=bad_lines,
    )


def write_ibrl(log: RawReadingLog, out: IO[str]) -> None:
    for i in range(len(log)):
        stamp = datetime.fromtimestamp(log.timestamp[i], tz=timezone.utc)
        vals = " ".join(repr(float(log.readings[k][i])) for k in IBRL_FIELDS)
        out.write(f"{stamp:%Y-%m-%d} {stamp:%H:%M:%S.%f} {log.epoch[i]} {log.node[i]} {vals}\n")


# -- cleaning -----------------------------------------------------------------

def _fill_short_gaps(series: np.ndarray, max_gap: int) -> np.ndarray:
    out = series.copy()
    missing = np.isnan(out)
    if not missing.any():
        return out
    idx = np.flatnonzero(missing)
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    for run in runs:
        lo, hi = run[0] - 1, run[-1] + 1
        if lo < 0 or hi >= len(out) or len(run) > max_gap:
            continue
        frac = (run - lo) / (hi - lo)
        out[run] = out[lo] + frac * (out[hi] - out[lo])
    return out


def _longest_complete_run(ok: np.ndarray) -> tuple[int, int]:
    best, start = (0, 0), None
    for i, good in enumerate(np.append(ok, False)):
        if good and start is None:
            start = i
        elif not good and start is not None:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return best


def zscore(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Per-series z-score along the last axis; near-constant series map to zeros."""
    mu = raw.mean(axis=-1)
    sigma = raw.std(axis=-1)
    degenerate = sigma < SIGMA_FLOOR
    safe = np.where(degenerate, 1.0, sigma)
    z = np.where(degenerate[..., None], 0.0, (raw - mu[..., None]) / safe[..., None])
    return z, mu, sigma, [tuple(int(v) for v in ix) for ix in np.argwhere(degenerate)]


def clean_and_align(log: RawReadingLog, *, modalities: Sequence[str] = DEFAULT_MODALITIES,
                    exclude_nodes: Iterable[int] = DEFAULT_EXCLUDED,
                    declared_nodes: Iterable[int] = IBRL_NODES,
                    period: float = SAMPLE_PERIOD, max_gap: int = 10,
                    missing_limit: float = 0.5) -> CleanDataset:
    """Drop excluded nodes and implausible readings, align to a grid, normalise.

    Readings are binned to the nearest slot of a uniform ``period`` grid
    (duplicates averaged). Gaps of at most ``max_gap`` slots are linearly
    interpolated; the longest stretch in which every kept series is complete
    becomes the dataset. Nodes missing more than ``missing_limit`` of their
    slots are dropped first.
    """
    if len(log) == 0:
        raise FormatError("empty reading log")
    for m in modalities:
        if m not in log.readings:
            raise ConfigError(f"unknown modality {m!r}")
    exclude = set(int(n) for n in exclude_nodes)
    declared = set(int(n) for n in declared_nodes)
    report = {"input_rows": len(log), "malformed_rows": log.skipped,
              "excluded_nodes": sorted(exclude), "modalities": list(modalities)}

    keep = np.isin(log.node, sorted(declared))
    report["unknown_node_rows"] = int((~keep).sum())
    excl = np.isin(log.node, sorted(exclude)) & keep
    report["excluded_node_rows"] = int(excl.sum())
    keep &= ~excl

    temp = log.readings["temperature"]
    hum = log.readings["humidity"]
    bad_range = (temp > MAX_TEMPERATURE) | (hum < MIN_HUMIDITY)
    finite = np.all([np.isfinite(log.readings[m]) for m in modalities], axis=0)
    report["out_of_range_rows"] = int((keep & bad_range).sum())
    report["non_finite_rows"] = int((keep & ~bad_range & ~finite).sum())
    keep &= ~bad_range & finite
    if not keep.any():
        raise FormatError("no readings survive cleaning")

    ts, nodes = log.timestamp[keep], log.node[keep]
    t0 = float(ts.min())
    slot = np.rint((ts - t0) / period).astype(np.int64)
    n_slots = int(slot.max()) + 1
    node_ids = sorted(set(int(n) for n in nodes))
    row = {n: i for i, n in enumerate(node_ids)}
    node_ix = np.array([row[int(n)] for n in nodes])

    grid = np.full((len(node_ids), len(modalities), n_slots), np.nan)
    counts = np.zeros((len(node_ids), n_slots))
    np.add.at(counts, (node_ix, slot), 1.0)
    for j, m in enumerate(modalities):
        acc = np.zeros((len(node_ids), n_slots))
        np.add.at(acc, (node_ix, slot), log.readings[m][keep])
        with np.errstate(invalid="ignore", divide="ignore"):
            grid[:, j, :] = np.where(counts > 0, acc / np.where(counts > 0, counts, 1), np.nan)

    missing = 1.0 - (counts > 0).mean(axis=1)
    sparse = [node_ids[i] for i in np.flatnonzero(missing > missing_limit)]
    report["sparse_nodes"] = sparse
    if sparse:
        _LOGGER.warning("excluding nodes with > %.0f%% missing slots: %s", 100 * missing_limit, sparse)
    kept = [i for i, n in enumerate(node_ids) if n not in sparse]
    if not kept:
        raise FormatError("every node exceeds the missing-data limit")
    grid = grid[kept]
    node_ids = [node_ids[i] for i in kept]

    filled = np.stack([[_fill_short_gaps(s, max_gap) for s in node] for node in grid])
    report["interpolated_cells"] = int(np.isnan(grid).sum() - np.isnan(filled).sum())
    lo, hi = _longest_complete_run(np.all(np.isfinite(filled), axis=(0, 1)))
    if hi - lo < 2:
        raise FormatError("no stretch of time in which every kept series is complete")
    report["usable_slots"] = [int(lo), int(hi)]
    report["grid_slots"] = n_slots

    raw = filled[:, :, lo:hi]
    z, mu, sigma, degenerate = zscore(raw)
    report["degenerate_series"] = [[node_ids[i], modalities[j]] for i, j in degenerate]
    report["dropped_rows"] = (report["unknown_node_rows"] + report["excluded_node_rows"]
                              + report["out_of_range_rows"] + report["non_finite_rows"]
                              + report["malformed_rows"])
    return CleanDataset(z, tuple(node_ids), tuple(modalities), mu, sigma,
                        start_time=t0 + lo * period, period=period, report=report)


def dataset_to_log(ds: CleanDataset, start_epoch: int = 0) -> RawReadingLog:
    """Express a dataset as the raw reading log it could have come from."""
    raw = ds.denormalize()
    n, m, t = raw.shape
    ts = ds.start_time + ds.period * np.arange(t)
    readings = {k: np.zeros(n * t) for k in IBRL_FIELDS}
    for j, name in enumerate(ds.modalities):
        if name in readings:
            readings[name] = raw[:, j, :].T.ravel()
    return RawReadingLog(
        timestamp=np.repeat(ts, n),
        epoch=np.repeat(np.arange(start_epoch, start_epoch + t), n),
        node=np.tile(np.array(ds.node_ids, dtype=np.int64), t),
        readings=readings,
    )


# -- archives -----------------------------------------------------------------

def save_archive(ds: CleanDataset, directory) -> Path:
    """CSV per modality (rows = time, columns = node ids) plus ``dataset.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for j, name in enumerate(ds.modalities):
        with open(d / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *ds.node_ids])
            for t in range(ds.values.shape[2]):
                w.writerow([t, *(repr(float(v)) for v in ds.values[:, j, t])])
    meta = {
        "node_ids": list(ds.node_ids),
        "modalities": list(ds.modalities),
        "mean": ds.mean.tolist(),
        "std": ds.std.tolist(),
        "start_time": ds.start_time,
        "period": ds.period,
        "positions": None if ds.positions is None else np.asarray(ds.positions).tolist(),
        "report": ds.report,
    }
    (d / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_archive(directory) -> CleanDataset:
    d = Path(directory)
    meta_path = d / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: {exc}") from None
    node_ids = tuple(meta["node_ids"])
    series = []
    for name in meta["modalities"]:
        with open(d / f"{name}.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        header = [int(v) for v in rows[0][1:]]
        if tuple(header) != node_ids:
            raise FormatError(f"{name}.csv columns {header} differ from node ids {node_ids}")
        series.append(np.array([[float(v) for v in r[1:]] for r in rows[1:]]).T)
    pos = meta.get("positions")
    return CleanDataset(
        values=np.stack(series, axis=1),
        node_ids=node_ids,
        modalities=tuple(meta["modalities"]),
        mean=np.array(meta["mean"]),
        std=np.array(meta["std"]),
        start_time=meta["start_time"],
        period=meta["period"],
        positions=None if pos is None else np.array(pos),
        report=meta.get("report", {}),
    )


def save_labels(ws: LabeledWindowSet, node_ids, modalities, path) -> None:
    """Label sidecar: one row per labelled cell, timeline coordinates."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "modality", "t", "label", "alpha", "kind"])
        for i, j, t in np.argwhere(ws.labels > 0):
            a = ws.alpha[i, j, t]
            w.writerow([node_ids[i], modalities[j], int(t) + ws.offset, int(ws.labels[i, j, t]),
                        "" if np.isnan(a) else repr(float(a)), int(ws.provenance[i, j, t])])


# -- windows ------------------------------------------------------------------

def make_windows(ds: CleanDataset | np.ndarray, W: int, L: int, start: int = 0,
                 stop: int | None = None, extrema_from: np.ndarray | None = None) -> LabeledWindowSet:
    """Windows of length W every L steps over ``[start, stop)`` of the timeline.

    Per-series extrema used by the injectors come from ``extrema_from``
    (default: the whole dataset).
    """
    values = ds.values if isinstance(ds, CleanDataset) else np.asarray(ds, dtype=np.float64)
    stop = values.shape[-1] if stop is None else stop
    if W < 1 or L < 1:
        raise ConfigError(f"window and step must be positive, got W={W}, L={L}")
    seg = values[..., start:stop]
    total = seg.shape[-1]
    if total < W:
        raise ConfigError(f"series of length {total} is shorter than the window {W}")
    n_win = (total - W) // L + 1
    ref = values if extrema_from is None else extrema_from
    return LabeledWindowSet(
        data=seg.copy(),
        labels=np.zeros(seg.shape, dtype=np.int8),
        provenance=np.zeros(seg.shape, dtype=np.int8),
        alpha=np.full(seg.shape, np.nan),
        starts=np.arange(n_win) * L,
        window=W,
        step=L,
        series_min=ref.min(axis=-1),
        series_max=ref.max(axis=-1),
        offset=start,
    )


# -- injection ----------------------------------------------------------------

def inject_anomalies(ws: LabeledWindowSet, alpha: float, rate: float, seed: int,
                     tail: int | None = None) -> LabeledWindowSet:
    """Shift randomly chosen cells by ``alpha * (max - min)`` of their own series.

    Cells are drawn without replacement among unlabelled cells inside the
    scored tail region of the windows.
    """
    if alpha == 0:
        raise ConfigError("alpha must be non-zero")
    if not 0 < rate < 1:
        raise ConfigError(f"rate must lie in (0, 1), got {rate}")
    out = ws.copy()
    lo, hi = ws.tail_range(tail)
    region = np.zeros(ws.labels.shape, dtype=bool)
    region[..., lo:hi] = True
    candidates = np.argwhere(region & (ws.labels == 0))
    n_pick = int(round(rate * region.sum()))
    if n_pick == 0:
        warnings.warn(f"rate {rate} selects no cells out of {int(region.sum())}", stacklevel=2)
        return out
    rng = np.random.default_rng(seed)
    picks = candidates[np.sort(rng.choice(len(candidates), size=n_pick, replace=False))]
    i, j, t = picks.T
    span = ws.series_max[i, j] - ws.series_min[i, j]
    out.data[i, j, t] = ws.data[i, j, t] + alpha * span
    out.labels[i, j, t] = 1
    out.provenance[i, j, t] = INJECTED_POINT
    out.alpha[i, j, t] = alpha
    return out


def inject_correlation_anomaly(ws: LabeledWindowSet, node: int, span: tuple[int, int], seed: int,
                               modality: int = 0, partner: int = 1,
                               noise: float = 0.05) -> LabeledWindowSet:
    """Regenerate one modality over ``span`` so it co-moves the wrong way with ``partner``.

    The new values follow the partner's deviations with the opposite sign of
    the clean correlation, rescaled to the modality's own spread and clipped
    to its clean range, so no single value is out of range.
    """
    start, stop = span
    length = ws.data.shape[-1]
    if not 0 <= start <= stop <= length:
        raise ConfigError(f"span {span} outside the timeline [0, {length})")
    if modality == partner:
        raise ConfigError("modality and partner must differ")
    out = ws.copy()
    if stop == start:
        return out
    clean_m, clean_p = ws.data[node, modality], ws.data[node, partner]
    sign = -np.sign(np.corrcoef(clean_m, clean_p)[0, 1]) or 1.0
    seg_m = ws.data[node, modality, start:stop]
    seg_p = ws.data[node, partner, start:stop]
    dev = seg_p - seg_p.mean()
    ratio = seg_m.std() / seg_p.std() if seg_p.std() > 0 else 1.0
    # keep the regenerated segment centred where the clean one was
    rng = np.random.default_rng(seed)
    new = seg_m.mean() + sign * ratio * dev + noise * rng.standard_normal(stop - start)
    new = np.clip(new, ws.series_min[node, modality], ws.series_max[node, modality])
    out.data[node, modality, start:stop] = new
    out.labels[node, modality, start:stop] = 1
    out.provenance[node, modality, start:stop] = INJECTED_CORRELATION
    return out


# -- synthetic data -----------------------------------------------------------

@dataclass
class SynthTruth:
    positions: np.ndarray
    raw: np.ndarray
    phase: np.ndarray


def synthetic_node_ids(n: int) -> tuple[int, ...]:
    """IBRL-style ids starting at 1 that skip the excluded nodes."""
    ids = (i for i in count(1) if i not in DEFAULT_EXCLUDED)
    return tuple(next(ids) for _ in range(n))


def synthetic_modalities(m: int) -> tuple[str, ...]:
    if m == 1:
        return ("temperature",)
    names = list(DEFAULT_MODALITIES[:m])
    return tuple(names + [f"m{k}" for k in range(len(names), m)])


_PHYSICAL = {"humidity": (40.0, 6.0), "temperature": (22.0, 3.0), "voltage": (2.6, 0.05)}


def synth_generate(n_nodes: int = 8, n_modalities: int = 3, T: int = 3000, seed: int = 0,
                   periods: tuple[float, float] = (200.0, 50.0), noise: float = 0.05,
                   spatial_strength: float = 0.3) -> tuple[CleanDataset, SynthTruth]:
    """Periodic multinode, multimodal series with spatial and cross-modal structure.

    Each node sees two shared sinusoidal bases shifted by a phase that grows
    with its x/y position, plus a smooth spatial field mixed by distance.
    Humidity mirrors temperature with the opposite sign.
    """
    if min(n_nodes, n_modalities, T) < 1:
        raise ConfigError("all extents must be >= 1")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    phase = 25.0 * pos[:, 0] + 15.0 * pos[:, 1]
    t = np.arange(T)[None, :] + phase[:, None]
    base = np.sin(2 * np.pi * t / periods[0]) + 0.4 * np.sin(2 * np.pi * t / periods[1])

    n_fields = 3
    centres = rng.uniform(0.0, 1.0, size=(n_fields, 2))
    white = rng.standard_normal((n_fields, T + 100))
    kernel = np.hanning(61)
    smooth = np.array([np.convolve(w, kernel, mode="same")[50:50 + T] for w in white])
    smooth = (smooth - smooth.mean(1, keepdims=True)) / smooth.std(1, keepdims=True)
    d2 = ((pos[:, None, :] - centres[None, :, :]) ** 2).sum(-1)
    mix = np.exp(-d2 / 0.1)
    mix /= mix.sum(1, keepdims=True)
    spatial = mix @ smooth

    names = synthetic_modalities(n_modalities)
    raw = np.empty((n_nodes, n_modalities, T))
    temp_signal = base + spatial_strength * spatial
    for j, name in enumerate(names):
        if name == "temperature":
            sig = temp_signal
        elif name == "humidity":
            sig = -0.9 * temp_signal
        elif name == "voltage":
            sig = 0.6 * np.sin(2 * np.pi * t / periods[0] + np.pi / 3) + 0.2 * spatial
        else:
            sig = np.sin(2 * np.pi * t / periods[0] + j) + 0.2 * spatial
        sig = sig + noise * rng.standard_normal(sig.shape)
        mu, scale = _PHYSICAL.get(name, (0.0, 1.0))
        raw[:, j, :] = mu + scale * sig
    z, mu, sigma, degenerate = zscore(raw)
    ids = synthetic_node_ids(n_nodes)
    report = {"synthetic": True, "seed": seed, "degenerate_series": degenerate}
    ds = CleanDataset(z, ids, names, mu, sigma, start_time=1077926400.0,
                      period=SAMPLE_PERIOD, positions=pos, report=report)
    return ds, SynthTruth(pos, raw, phase)
