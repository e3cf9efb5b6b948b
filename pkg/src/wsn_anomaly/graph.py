"""Sensor topology and the multimodal-fusion dynamic graph convolution.

Feature tensors are laid out as ``(..., N, M, T)``: nodes, modalities,
time/feature. Leading axes are batch axes and broadcast through every
operation.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

__all__ = [
    "AdjacencyMatrix", "FusionParams", "build_adjacency", "read_positions",
    "write_adjacency", "spatial_correlation", "adjust_adjacency", "modal_fusion",
    "mfdgcn_layer", "graph_block",
]


@dataclass(frozen=True)
class AdjacencyMatrix:
    weights: np.ndarray
    node_ids: tuple

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass
class FusionParams:
    """Per-modality query/key/value projections plus per-layer graph weights."""

    w_o: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    layers: list[Tensor]


def build_adjacency(positions, k: int = 4, node_ids: Sequence | None = None) -> AdjacencyMatrix:
    """Symmetrised k-nearest-neighbour graph with unit weights and self-loops."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise DimensionError(f"positions must be N x 2, got {pos.shape}")
    n = pos.shape[0]
    if n < 2:
        raise ConfigError(f"need at least 2 nodes, got {n}")
    if not 1 <= k < n:
        raise ConfigError(f"neighbour count k={k} must satisfy 1 <= k < N={n}")
    if len(np.unique(pos, axis=0)) < n:
        warnings.warn("duplicate node coordinates; neighbour ties broken by node index",
                      stacklevel=2)
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    a = np.eye(n)
    for i in range(n):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i]
        for j in order[:k]:
            a[i, j] = a[j, i] = 1.0
    ids = tuple(node_ids) if node_ids is not None else tuple(range(n))
    if len(ids) != n:
        raise DimensionError(f"{len(ids)} node ids for {n} positions")
    a.setflags(write=False)
    return AdjacencyMatrix(a, ids)


def read_positions(path) -> tuple[list[int], np.ndarray]:
    """Read a ``node_id,x,y`` CSV."""
    ids, xy = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"node_id", "x", "y"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: expected header node_id,x,y")
        for row in reader:
            ids.append(int(row["node_id"]))
            xy.append((float(row["x"]), float(row["y"])))
    if not ids:
        raise FormatError(f"{path}: no positions")
    return ids, np.array(xy)


def write_positions(path, node_ids, positions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "x", "y"])
        for nid, (x, y) in zip(node_ids, np.asarray(positions)):
            w.writerow([nid, repr(float(x)), repr(float(y))])


def write_adjacency(adj: AdjacencyMatrix, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", *adj.node_ids])
        for nid, row in zip(adj.node_ids, adj.weights):
            w.writerow([nid, *(repr(float(v)) for v in row)])


def spatial_correlation(z: Tensor) -> Tensor:
    """Row-softmax of the scaled Gram matrix ``z z^T / sqrt(d)``."""
    z = tt._as_tensor(z)
    if z.ndim < 2 or z.shape[-1] < 1:
        raise DimensionError(f"node representations must be (..., N, d>=1), got {z.shape}")
    gram = tt.matmul(z, tt.swapaxes(z, -1, -2))
    return tt.softmax_rows(gram / np.sqrt(z.shape[-1]))


def adjust_adjacency(s: Tensor, a) -> Tensor:
    """Mask spatial weights with the topology (Hadamard product)."""
    s = tt._as_tensor(s)
    a = tt._as_tensor(a.weights if isinstance(a, AdjacencyMatrix) else a)
    if s.shape[-2:] != a.shape[-2:]:
        raise DimensionError(f"adjust_adjacency: shapes differ: {s.shape} vs {a.shape}")
    if s.shape == a.shape:
        return tt.hadamard(s, a)
    return tt.mul(s, a)


def _modality(x: Tensor, i: int) -> Tensor:
    return x[(..., slice(None), i, slice(None))]


def modal_fusion(x: Tensor, fp: FusionParams, reading: str = "formula") -> Tensor:
    """Cross-attention fusion over modalities, concatenated on the modality axis.

    ``reading="formula"``: fusion_i = sum_{j != i} softmax(X_j Wo (X_i Wk)^T / sqrt(d)) X_i Wv.
    ``reading="prose"``: query from X_i, key and value from X_j.
    The attention matrices are N x N, so information moves between nodes.
    """
    x = tt._as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"modal_fusion expects (..., N, M, T), got {x.shape}")
    m = x.shape[-2]
    if m == 0:
        raise ConfigError("modal_fusion needs at least one modality")
    if len(fp.w_o) != m or len(fp.w_k) != m or len(fp.w_v) != m:
        raise DimensionError(f"fusion parameters cover {len(fp.w_v)} modalities, input has {m}")
    if reading not in ("formula", "prose"):
        raise ConfigError(f"unknown fusion reading {reading!r}")
    xs = [_modality(x, i) for i in range(m)]
    if m == 1:
        return tt.stack([xs[0] @ fp.w_v[0]], axis=-2)

    d = fp.w_k[0].shape[-1]
    fused = []
    for i in range(m):
        total = None
        for j in range(m):
            if j == i:
                continue
            if reading == "formula":
                q, kk, v = xs[j] @ fp.w_o[j], xs[i] @ fp.w_k[i], xs[i] @ fp.w_v[i]
            else:
                q, kk, v = xs[i] @ fp.w_o[i], xs[j] @ fp.w_k[j], xs[j] @ fp.w_v[j]
            att = tt.softmax_rows(tt.matmul(q, tt.swapaxes(kk, -1, -2)) / np.sqrt(d))
            term = att @ v
            total = term if total is None else total + term
        fused.append(total)
    return tt.stack(fused, axis=-2)


def _mix_nodes(a_tilde: Tensor, f: Tensor, per_instant: bool) -> Tensor:
    if per_instant:
        # a_tilde: (..., T, N, N); f: (..., N, M, T)
        ft = tt.transpose(f, tuple(range(f.ndim - 3)) + (f.ndim - 1, f.ndim - 3, f.ndim - 2))
        mixed = a_tilde @ ft
        return tt.transpose(mixed, tuple(range(f.ndim - 3)) + (f.ndim - 2, f.ndim - 1, f.ndim - 3))
    n, m, t = f.shape[-3:]
    flat = tt.reshape(f, f.shape[:-3] + (n, m * t))
    return tt.reshape(a_tilde @ flat, f.shape[:-3] + (n, m, t))


def mfdgcn_layer(h: Tensor, a_tilde, w: Tensor, fusion: FusionParams | None = None,
                 reading: str = "formula", per_instant: bool = False) -> Tensor:
    """relu(A_tilde . ModalFusion(H) . W); ``fusion=None`` bypasses the fusion."""
    h = tt._as_tensor(h)
    a_tilde = tt._as_tensor(a_tilde)
    n = h.shape[-3]
    if a_tilde.shape[-2:] != (n, n):
        raise DimensionError(f"adjacency {a_tilde.shape} does not match {n} nodes of {h.shape}")
    f = h if fusion is None else modal_fusion(h, fusion, reading)
    if f.shape[-1] != w.shape[0]:
        raise DimensionError(f"layer weight {w.shape} does not chain with features {f.shape}")
    return tt.relu(_mix_nodes(a_tilde, f, per_instant) @ w)


def graph_block(h: Tensor, adjacency: np.ndarray, fp: FusionParams, mode: str = "mfdgcn",
                reading: str = "formula", per_instant: bool = False,
                capture: dict | None = None) -> Tensor:
    """Stack of graph layers as used by both encoders.

    ``mode="mfdgcn"`` reweights the adjacency from the current features on
    every layer; ``mode="static_gcn"`` uses the plain adjacency and no fusion,
    so each layer is relu(A H W).
    """
    a = Tensor(adjacency)
    for depth, w in enumerate(fp.layers):
        if mode == "static_gcn":
            h = mfdgcn_layer(h, a, w)
        elif mode == "mfdgcn":
            if per_instant:
                z = tt.transpose(h, tuple(range(h.ndim - 3)) + (h.ndim - 1, h.ndim - 3, h.ndim - 2))
            else:
                z = tt.mean(h, axis=-1)
            s = spatial_correlation(z)
            a_tilde = adjust_adjacency(s, a)
            if capture is not None:
                capture[f"spatial_weights_{depth}"] = s.data
            h = mfdgcn_layer(h, a_tilde, w, fp, reading, per_instant)
        else:
            raise ConfigError(f"unknown graph mode {mode!r}")
    return h
