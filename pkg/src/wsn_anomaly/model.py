"""Wavelet-decomposed graph autoencoder for multinode, multimodal windows.

Input windows have shape ``(..., N, M, W)``. The forward pass is

    trend, seasonal = DWT(x)                       # each (..., N, M, W/2)
    z_tre = GraphBlock(MLP(trend))                 # MLP along time
    z_sea = GraphBlock(FDAM(seasonal))             # attention over frequency bins
    x_hat = Linear(IDWT(z_tre, z_sea))             # linear map along time

FDAM treats, for each node, the T frequency bins as tokens and the M
modalities as token features. Queries, keys and values are real-parameter
maps applied to the real and imaginary parts of the spectrum; the softmax
consumes the modulus of the complex logits.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import signal as sig
from . import tensor as tt
from .errors import ConfigError, ContractError, DimensionError, FormatError, TrainingError
from .graph import FusionParams, graph_block
from .tensor import ComplexTensor, Tape, Tensor

_LOGGER = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wsn-anomaly-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    window: int = 300
    step: int = 100
    detect_tail: int = 100
    hidden: int = 64
    attn_dim: int = 32
    fusion_dim: int = 32
    gcn_depth: int = 1
    lr: float = 0.001
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    decomposition: str = "dwt"            # dwt | moving_average
    seasonal_attention: str = "frequency"  # frequency | time
    graph: str = "mfdgcn"                  # mfdgcn | static_gcn
    wavelet: str = "haar"
    ma_window: int = 25
    fusion_reading: str = "formula"        # formula | prose
    per_instant_correlation: bool = False

    def validate(self) -> "ModelConfig":
        if self.window < 2 or self.window % 2:
            raise ConfigError(f"window must be even and >= 2, got {self.window}")
        if not 0 < self.detect_tail <= self.window:
            raise ConfigError(f"detect_tail must be in (0, window], got {self.detect_tail}")
        if not 0 < self.step <= self.window:
            raise ConfigError(f"step must be in (0, window], got {self.step}")
        for name in ("hidden", "attn_dim", "fusion_dim", "gcn_depth", "epochs", "batch_size",
                     "ma_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        choices = {
            "decomposition": ("dwt", "moving_average"),
            "seasonal_attention": ("frequency", "time"),
            "graph": ("mfdgcn", "static_gcn"),
            "fusion_reading": ("formula", "prose"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        sig.get_filters(self.wavelet)
        return self

    @property
    def component_length(self) -> int:
        """Length of the trend/seasonal series entering the encoders."""
        return self.window // 2 if self.decomposition == "dwt" else self.window

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ModelParams:
    config: ModelConfig
    n_modalities: int
    adjacency: np.ndarray
    values: dict[str, np.ndarray]
    node_ids: tuple = ()
    trained: bool = False
    threshold: float | None = None

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))


@dataclass
class AnomalyScoreGrid:
    scores: np.ndarray
    threshold: float | None = None


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0


def init_params(cfg: ModelConfig, n_modalities: int, adjacency, node_ids=()) -> ModelParams:
    """Seeded uniform init; the draw order does not depend on ablation switches."""
    cfg.validate()
    if n_modalities < 1:
        raise ConfigError(f"need at least one modality, got {n_modalities}")
    adjacency = np.asarray(getattr(adjacency, "weights", adjacency), dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise DimensionError(f"adjacency must be square, got {adjacency.shape}")
    rng = np.random.default_rng(cfg.seed)
    t, w, m = cfg.component_length, cfg.window, n_modalities
    spec: list[tuple[str, tuple[int, ...], int]] = [
        ("trend.mlp.w1", (t, cfg.hidden), t),
        ("trend.mlp.b1", (cfg.hidden,), t),
        ("trend.mlp.w2", (cfg.hidden, t), cfg.hidden),
        ("trend.mlp.b2", (t,), cfg.hidden),
        ("seasonal.fdam.wq", (m, cfg.attn_dim), m),
        ("seasonal.fdam.wk", (m, cfg.attn_dim), m),
        ("seasonal.fdam.wv", (m, m), m),
    ]
    for side in ("trend", "seasonal"):
        for i in range(m):
            spec += [
                (f"{side}.fusion.wo.{i}", (t, cfg.fusion_dim), t),
                (f"{side}.fusion.wk.{i}", (t, cfg.fusion_dim), t),
                (f"{side}.fusion.wv.{i}", (t, t), t),
            ]
        spec += [(f"{side}.graph.layer.{l}", (t, t), t) for l in range(cfg.gcn_depth)]
    spec += [("decoder.w", (w, w), w), ("decoder.b", (w,), w)]
    values = {name: tt.init_uniform(rng, fan_in, shape) for name, shape, fan_in in spec}
    ids = tuple(node_ids) if node_ids else tuple(range(adjacency.shape[0]))
    return ModelParams(cfg, m, adjacency, values, ids)


def bind(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.values.items()}


def _fusion(p: dict[str, Tensor], side: str, m: int, depth: int) -> FusionParams:
    return FusionParams(
        w_o=[p[f"{side}.fusion.wo.{i}"] for i in range(m)],
        w_k=[p[f"{side}.fusion.wk.{i}"] for i in range(m)],
        w_v=[p[f"{side}.fusion.wv.{i}"] for i in range(m)],
        layers=[p[f"{side}.graph.layer.{l}"] for l in range(depth)],
    )


def decompose(x, cfg: ModelConfig) -> sig.DecomposedSeries:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.window:
        raise DimensionError(f"window length {x.shape[-1]} differs from configured {cfg.window}")
    if cfg.decomposition == "dwt":
        return sig.dwt_level1(x, cfg.wavelet)
    trend = x @ sig.moving_average_matrix(cfg.window, cfg.ma_window)
    return sig.DecomposedSeries(trend, x - trend, cfg.window)


def _decompose(x: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    if cfg.decomposition == "dwt":
        lo, hi = sig.analysis_matrices(cfg.window, cfg.wavelet)
        return x @ Tensor(lo), x @ Tensor(hi)
    trend = x @ Tensor(sig.moving_average_matrix(cfg.window, cfg.ma_window))
    return trend, x - trend


def trend_encode(x_tre, p: dict[str, Tensor], adjacency, cfg: ModelConfig,
                 capture: dict | None = None) -> Tensor:
    x_tre = tt._as_tensor(x_tre)
    if x_tre.shape[-1] != cfg.component_length:
        raise DimensionError(
            f"trend length {x_tre.shape[-1]} differs from expected {cfg.component_length}")
    h = tt.relu(x_tre @ p["trend.mlp.w1"] + p["trend.mlp.b1"])
    h = h @ p["trend.mlp.w2"] + p["trend.mlp.b2"]
    if capture is not None:
        capture["trend_mlp"] = h.data
    m = x_tre.shape[-2]
    return graph_block(h, np.asarray(adjacency), _fusion(p, "trend", m, cfg.gcn_depth),
                       cfg.graph, cfg.fusion_reading, cfg.per_instant_correlation, capture)


def fdam(x_sea, p: dict[str, Tensor], cfg: ModelConfig, capture: dict | None = None) -> Tensor:
    """Attention over DFT bins; ``seasonal_attention="time"`` drops the transforms."""
    x_sea = tt._as_tensor(x_sea)
    n_bins = x_sea.shape[-1]
    if n_bins < 1:
        raise DimensionError("seasonal component is empty")
    xt = tt.swapaxes(x_sea, -1, -2)  # (..., N, bins, M)
    frequency = cfg.seasonal_attention == "frequency"
    if frequency:
        c, s = sig.dft_matrices(n_bins)
        c, s = Tensor(c), Tensor(s)
        spec = ComplexTensor(c @ xt, -(s @ xt))
    else:
        spec = ComplexTensor(xt, Tensor(np.zeros(xt.shape)))
    q = spec.map_real(p["seasonal.fdam.wq"])
    k = spec.map_real(p["seasonal.fdam.wk"])
    v = spec.map_real(p["seasonal.fdam.wv"])
    logits = q @ k.swapaxes(-1, -2)
    att = tt.softmax_rows(logits.abs() / np.sqrt(p["seasonal.fdam.wq"].shape[-1]))
    out_re, out_im = att @ v.re, att @ v.im
    if frequency:
        y = (c @ out_re - s @ out_im) / n_bins
        residue = (s.data @ out_re.data + c.data @ out_im.data) / n_bins
    else:
        y, residue = out_re, out_im.data
    if capture is not None:
        capture["attention"] = att.data
        capture["fdam_residue"] = float(np.max(np.abs(residue))) if residue.size else 0.0
    out = tt.swapaxes(y, -1, -2)
    if capture is not None:
        capture["fdam_out"] = out.data
    return out


def seasonal_encode(x_sea, p: dict[str, Tensor], adjacency, cfg: ModelConfig,
                    capture: dict | None = None) -> Tensor:
    x_sea = tt._as_tensor(x_sea)
    if x_sea.shape[-1] != cfg.component_length:
        raise DimensionError(
            f"seasonal length {x_sea.shape[-1]} differs from expected {cfg.component_length}")
    h = fdam(x_sea, p, cfg, capture)
    m = x_sea.shape[-2]
    sub = {} if capture is not None else None
    out = graph_block(h, np.asarray(adjacency), _fusion(p, "seasonal", m, cfg.gcn_depth),
                      cfg.graph, cfg.fusion_reading, cfg.per_instant_correlation, sub)
    if capture is not None:
        capture.update({f"seasonal_{k}": v for k, v in sub.items()})
    return out


def decode(z_tre, z_sea, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    z_tre, z_sea = tt._as_tensor(z_tre), tt._as_tensor(z_sea)
    if z_tre.shape != z_sea.shape:
        raise DimensionError(f"encoded components differ in shape: {z_tre.shape} vs {z_sea.shape}")
    if z_tre.shape[-1] != cfg.component_length:
        raise DimensionError(
            f"encoded length {z_tre.shape[-1]} differs from expected {cfg.component_length}")
    if cfg.decomposition == "dwt":
        lo, hi = sig.synthesis_matrices(cfg.window, cfg.wavelet)
        rec = z_tre @ Tensor(lo) + z_sea @ Tensor(hi)
    else:
        rec = z_tre + z_sea
    return rec @ p["decoder.w"] + p["decoder.b"]


def reconstruct(x, params: ModelParams, p: dict[str, Tensor] | None = None,
                capture: dict | None = None) -> Tensor:
    cfg = params.config
    x = tt._as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"expected (..., N, M, W) windows, got {x.shape}")
    n, m, w = x.shape[-3:]
    if w != cfg.window:
        raise DimensionError(f"window length {w} differs from configured {cfg.window}")
    if m != params.n_modalities:
        raise DimensionError(f"{m} modalities, model was built for {params.n_modalities}")
    if n != params.adjacency.shape[0]:
        raise DimensionError(f"{n} nodes, adjacency covers {params.adjacency.shape[0]}")
    p = bind(params) if p is None else p
    x_tre, x_sea = _decompose(x, cfg)
    if capture is not None:
        capture["x_tre"], capture["x_sea"] = x_tre.data, x_sea.data
    z_tre = trend_encode(x_tre, p, params.adjacency, cfg, capture)
    z_sea = seasonal_encode(x_sea, p, params.adjacency, cfg, capture)
    if capture is not None:
        capture["z_tre"], capture["z_sea"] = z_tre.data, z_sea.data
    x_hat = decode(z_tre, z_sea, p, cfg)
    if capture is not None:
        capture["reconstruction"] = x_hat.data
    return x_hat


def loss_mse(x, x_hat) -> Tensor:
    x, x_hat = tt._as_tensor(x), tt._as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"loss_mse: shapes differ: {x.shape} vs {x_hat.shape}")
    return tt.mean(tt.square(x - x_hat))


def _as_batch(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        arr = windows if windows.ndim == 4 else windows[None]
    else:
        windows = list(windows)
        if not windows:
            raise ContractError("training needs at least one window")
        arr = np.stack([np.asarray(w, dtype=np.float64) for w in windows])
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ContractError(f"expected a batch of (N, M, W) windows, got {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def train(windows, cfg: ModelConfig, adjacency, node_ids=(),
          params: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    """Adam on the reconstruction MSE, mini-batched over windows."""
    cfg.validate()
    batch = _as_batch(windows)
    if params is None:
        params = init_params(cfg, batch.shape[2], adjacency, node_ids)
    rng = np.random.default_rng(cfg.seed + 1)
    state = tt.AdamState(lr=cfg.lr)
    log = TrainLog()
    values = dict(params.values)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(batch))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            xb = batch[order[start:start + cfg.batch_size]]
            params.values = values
            bound = bind(params, requires_grad=True)
            with Tape() as tape:
                loss = loss_mse(xb, reconstruct(xb, params, bound))
            lv = float(loss.data)
            if not np.isfinite(lv):
                bad = sorted(k for k, v in values.items() if not np.all(np.isfinite(v)))
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; non-finite parameters: {bad or 'none'}")
            grads = tt.backward(loss, tape, wrt=list(bound.values()))
            values, state = tt.adam_step(values, {t.name: g for t, g in grads.items()}, state)
            total += lv * len(xb)
            log.steps += 1
        log.epoch_loss.append(total / len(batch))
        if epoch == 1 or epoch % 50 == 0 or epoch == cfg.epochs:
            _LOGGER.info("epoch %d loss %.6g", epoch, log.epoch_loss[-1])
    params.values = values
    params.trained = True
    return params, log


def score(x, params: ModelParams, cfg: ModelConfig | None = None) -> AnomalyScoreGrid:
    """Squared reconstruction residual over the last ``detect_tail`` steps."""
    if not params.trained:
        raise ContractError("score needs trained parameters")
    cfg = cfg or params.config
    x = np.asarray(x, dtype=np.float64)
    x_hat = reconstruct(x, params).data
    resid = (x - x_hat)[..., -cfg.detect_tail:]
    return AnomalyScoreGrid(resid * resid, params.threshold)


def calibrate_threshold(training_scores: Sequence[AnomalyScoreGrid]) -> float:
    """Largest score seen on (normal-only) training windows."""
    grids = list(training_scores)
    if not grids:
        raise ContractError("threshold calibration needs at least one score grid")
    return float(max(np.max(g.scores) for g in grids))


def classify(grid: AnomalyScoreGrid, threshold: float | None = None) -> np.ndarray:
    tau = grid.threshold if threshold is None else threshold
    if tau is None:
        raise ContractError("classify needs a threshold")
    return (np.asarray(grid.scores) > tau).astype(np.int8)


# -- checkpoints --------------------------------------------------------------

def _hex(a: np.ndarray) -> list[str]:
    return [float(v).hex() for v in np.asarray(a, dtype=np.float64).ravel()]


def _unhex(values: list[str], shape) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64).reshape(shape)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write a JSON checkpoint; floats are stored as hex so reloads are bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "seed": params.config.seed,
        "n_modalities": params.n_modalities,
        "node_ids": list(params.node_ids),
        "trained": params.trained,
        "threshold": None if params.threshold is None else float(params.threshold).hex(),
        "adjacency": {"shape": list(params.adjacency.shape), "values": _hex(params.adjacency)},
        "tensors": [
            {"name": k, "shape": list(v.shape), "values": _hex(v)}
            for k, v in sorted(params.values.items())
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig.from_dict(doc["config"])
    adj = doc["adjacency"]
    values = {t["name"]: _unhex(t["values"], t["shape"]) for t in doc["tensors"]}
    thr = doc["threshold"]
    return ModelParams(
        config=cfg,
        n_modalities=doc["n_modalities"],
        adjacency=_unhex(adj["values"], adj["shape"]),
        values=values,
        node_ids=tuple(doc["node_ids"]),
        trained=doc["trained"],
        threshold=None if thr is None else float.fromhex(thr),
    )
