"""Acceptance gate: one verdict line per criterion, printed in the pytest summary.

Every tolerance and runtime limit is pinned below. The two detection criteria
that the implementation does not reach are marked ``xfail(strict=True)``: the
check runs unchanged and its FAIL line is printed, and a future pass shows up
as an unexpected success instead of going unnoticed.
"""
from __future__ import annotations

import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from wsn_anomaly import cli, data, graph, model, pipeline
from wsn_anomaly import eval as ev
from wsn_anomaly import signal as sig
from wsn_anomaly.model import ModelConfig
from wsn_anomaly.tensor import Tensor

from conftest import record
from oracles import (confusion_loops, dft_direct, graph_layer_loops, mann_whitney_auc,
                     masked_adjacency_loops, modal_fusion_loops, spatial_weights_loops)
from test_model import loss_gradient_error
from test_tensor import PRIMITIVES, primitive_gradient_error

# pinned tolerances and limits
PR_TOL, ENERGY_TOL = 1e-10, 1e-9
DFT_ROUND_TRIP, PARSEVAL, LINEARITY, CONJ_SYM, DFT_ORACLE = 1e-9, 1e-9, 1e-9, 1e-10, 1e-9
GRAD_TOL, GRAD_SEEDS = 1e-4, range(20)
EQ_TOL = 1e-10
F1_FLOOR, AUC_FLOOR = 0.8, 0.9
CORR_RECALL_FLOOR = 0.5
F1_REPORTED, F1_TOL = 0.9349, 0.0005
LIMIT_TRANSFORMS_S, LIMIT_GRADIENTS_S, LIMIT_DESK_S = 10.0, 120.0, 600.0
SIGNALS_PER_LENGTH = 50
DESK = dict(seed=0, data_seed=0, n_nodes=8, n_modalities=3, window=64, step=32, epochs=200)
INJECT_SEED, RATE = 0, 0.01


def test_criterion_1_perfect_reconstruction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_pr = worst_energy = 0.0
    for w in range(2, 513, 2):
        x = rng.standard_normal((SIGNALS_PER_LENGTH, w)) * rng.uniform(0.1, 100)
        scale = np.abs(x).max()
        for wavelet in ("haar", "db2"):
            d = sig.dwt_level1(x, wavelet)
            worst_pr = max(worst_pr, np.abs(sig.idwt_level1(d, wavelet) - x).max() / scale)
            if wavelet == "haar":
                e = (x * x).sum(-1)
                got = (d.trend ** 2).sum(-1) + (d.seasonal ** 2).sum(-1)
                worst_energy = max(worst_energy, (np.abs(got - e) / e).max())
    elapsed = time.perf_counter() - t0
    ok = worst_pr < PR_TOL and worst_energy < ENERGY_TOL and elapsed < LIMIT_TRANSFORMS_S
    record(1, ok, f"max PR err {worst_pr:.1e} (<{PR_TOL}), max Haar energy err {worst_energy:.1e} "
                  f"(<{ENERGY_TOL}), {SIGNALS_PER_LENGTH} signals x 256 lengths, {elapsed:.1f}s")
    assert ok


def test_criterion_2_dft():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = dict(round_trip=0.0, parseval=0.0, linearity=0.0, conj=0.0, oracle=0.0)
    for n in range(1, 257):
        x, y = rng.standard_normal((2, 20, n))
        a, b = rng.standard_normal(2)
        X = sig.dft(x).amplitudes
        worst["round_trip"] = max(worst["round_trip"], np.abs(sig.idft(sig.ComplexSpectrum(X, n)) - x).max())
        e = (x * x).sum(-1)
        worst["parseval"] = max(worst["parseval"], (np.abs(e - (np.abs(X) ** 2).sum(-1) / n) / e).max())
        lin = sig.dft(a * x + b * y).amplitudes - (a * X + b * sig.dft(y).amplitudes)
        worst["linearity"] = max(worst["linearity"], np.abs(lin).max() / max(1.0, np.abs(X).max()))
        mirror = X[..., (-np.arange(n)) % n]
        worst["conj"] = max(worst["conj"], np.abs(X - np.conj(mirror)).max() / max(1.0, np.abs(X).max()))
        if n <= 64:
            worst["oracle"] = max(worst["oracle"], np.abs(X[0] - dft_direct(x[0])).max())
    elapsed = time.perf_counter() - t0
    ok = (worst["round_trip"] < DFT_ROUND_TRIP and worst["parseval"] < PARSEVAL
          and worst["linearity"] < LINEARITY and worst["conj"] < CONJ_SYM
          and worst["oracle"] < DFT_ORACLE and elapsed < LIMIT_TRANSFORMS_S)
    record(2, ok, "max errs " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                  + f"; lengths 1..256, oracle on L<=64, {elapsed:.1f}s")
    assert ok


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    prim = max(primitive_gradient_error(name, s) for name in PRIMITIVES for s in GRAD_SEEDS)
    e2e = max(loss_gradient_error(s) for s in GRAD_SEEDS)
    elapsed = time.perf_counter() - t0
    ok = prim < GRAD_TOL and e2e < GRAD_TOL and elapsed < LIMIT_GRADIENTS_S
    record(3, ok, f"{len(PRIMITIVES)} primitives max rel err {prim:.1e}, end-to-end loss "
                  f"(4 nodes, 2 modalities, W=16) max rel err {e2e:.1e}, "
                  f"{len(GRAD_SEEDS)} seeds, {elapsed:.1f}s")
    assert ok


def test_criterion_4_equation_oracles():
    rng = np.random.default_rng(4)
    errs = {}
    n, m, t = 6, 3, 7
    x = rng.standard_normal((n, m, t))
    z = x.mean(-1)
    s = graph.spatial_correlation(Tensor(z)).data
    errs["spatial weights"] = np.abs(s - spatial_weights_loops(z)).max()
    adj = graph.build_adjacency(rng.uniform(size=(n, 2)), k=2).weights
    a_tilde = graph.adjust_adjacency(Tensor(s), adj).data
    errs["masked adjacency"] = np.abs(a_tilde - masked_adjacency_loops(s.tolist(), adj.tolist())).max()
    fp = graph.FusionParams([Tensor(rng.standard_normal((t, 4))) for _ in range(m)],
                            [Tensor(rng.standard_normal((t, 4))) for _ in range(m)],
                            [Tensor(rng.standard_normal((t, t)) * 0.3) for _ in range(m)],
                            [Tensor(rng.standard_normal((t, t)) * 0.3)])
    fused = modal_fusion_loops(x, [w.data for w in fp.w_o], [w.data for w in fp.w_k],
                               [w.data for w in fp.w_v])
    errs["modal fusion"] = np.abs(graph.modal_fusion(Tensor(x), fp).data - fused).max()
    layer = graph.graph_block(Tensor(x), adj, fp).data
    errs["graph layer"] = np.abs(layer - graph_layer_loops(x, a_tilde, fp.layers[0].data, fused)).max()

    cfg = ModelConfig(window=16, step=8, detect_tail=8, hidden=4, attn_dim=3, fusion_dim=3)
    params = model.init_params(cfg, 2, graph.build_adjacency(rng.uniform(size=(4, 2)), k=2))
    params.trained = True
    xw = rng.standard_normal((2, 4, 2, 16))
    x_hat = model.reconstruct(xw, params).data
    grid = model.score(xw, params)
    score_ref = np.array([[[[(xw[b, i, j, 8 + k] - x_hat[b, i, j, 8 + k]) ** 2 for k in range(8)]
                            for j in range(2)] for i in range(4)] for b in range(2)])
    errs["anomaly score"] = np.abs(grid.scores - score_ref).max()
    tau = float(np.median(grid.scores))
    labels = model.classify(grid, tau)
    errs["threshold rule"] = float(sum(int(l) != int(sc > tau) for l, sc in
                                       zip(labels.ravel(), grid.scores.ravel())))

    pred, truth = rng.integers(0, 2, 200), rng.integers(0, 2, 200)
    tp, tn, fp_, fn = confusion_loops(pred.tolist(), truth.tolist())
    p, r, f1, _ = ev.precision_recall_f1(ev.confusion(pred, truth))
    p_ref, r_ref = tp / (tp + fp_), tp / (tp + fn)
    errs["precision/recall/F1"] = max(abs(p - p_ref), abs(r - r_ref),
                                      abs(f1 - 2 * p_ref * r_ref / (p_ref + r_ref)))

    ds, _ = data.synth_generate(3, 2, 120, seed=4)
    ws = data.make_windows(ds, 20, 10, 20)
    inj = data.inject_anomalies(ws, -1.0, 0.05, seed=4)
    worst = 0.0
    for i, j, k in np.argwhere(inj.labels == 1):
        expected = ws.data[i, j, k] + -1.0 * (ws.series_max[i, j] - ws.series_min[i, j])
        worst = max(worst, abs(inj.data[i, j, k] - expected))
    errs["injection"] = worst
    ok = all(v <= EQ_TOL for v in errs.values())
    record(4, ok, "max |lib - loop oracle|: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    exp = pipeline.desk_experiment(**DESK)
    return exp, time.perf_counter() - t0


def _point_report(exp, alpha):
    ws = data.inject_anomalies(exp.test, alpha, RATE, INJECT_SEED, tail=exp.params.config.detect_tail)
    return exp.evaluate(ws)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="precision at |alpha|=1 stays below the F1 floor; "
                                       "see the failure analysis in the project notes")
def test_criterion_5_desk_detection(desk):
    exp, train_s = desk
    t0 = time.perf_counter()
    reports = {a: _point_report(exp, a) for a in (1.0, -1.0)}
    elapsed = train_s + time.perf_counter() - t0
    f1 = min(r.f1 for r in reports.values())
    area = min(r.auc for r in reports.values())
    ok = f1 >= F1_FLOOR and area >= AUC_FLOOR and elapsed < LIMIT_DESK_S
    detail = "; ".join(f"alpha {a:+g}: P {r.precision:.3f} R {r.recall:.3f} F1 {r.f1:.3f} "
                       f"AUC {r.auc:.4f}" for a, r in reports.items())
    record(5, ok, f"{detail}; floors F1>={F1_FLOOR}, AUC>={AUC_FLOOR}; {elapsed:.0f}s")
    assert ok


def _ordered(r1, r05, r01):
    ties = (r1 == r05) + (r05 == r01)
    return r1 >= r05 >= r01 and ties <= 1


@pytest.mark.slow
def test_criterion_6_robustness_direction(desk):
    exp, _ = desk
    recall = {a: _point_report(exp, a).recall for a in (1.0, 0.5, 0.1, -1.0, -0.5, -0.1)}
    ok = _ordered(recall[1.0], recall[0.5], recall[0.1]) and \
        _ordered(recall[-1.0], recall[-0.5], recall[-0.1])
    record(6, ok, "recall " + ", ".join(f"alpha {a:+g}: {r:.3f}" for a, r in recall.items()))
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="cross-modal correlation anomalies are mostly "
                                       "reconstructed; see the failure analysis in the project notes")
def test_criterion_7_correlation_anomalies(desk):
    exp, _ = desk
    dyn = float(np.mean(pipeline.correlation_recall(exp)))
    static = pipeline.desk_experiment(**DESK, graph="static_gcn")
    stat = float(np.mean(pipeline.correlation_recall(static)))
    ok = dyn >= CORR_RECALL_FLOOR and stat < dyn
    record(7, ok, f"mean recall mfdgcn {dyn:.3f} (floor {CORR_RECALL_FLOOR}), static_gcn {stat:.3f} "
                  f"({'lower' if stat < dyn else 'not lower'})")
    assert ok


def test_criterion_8_component_lengths():
    adj = np.eye(3)
    shapes = {}
    for mode in ("dwt", "moving_average"):
        cfg = ModelConfig(window=64, step=32, detect_tail=32, decomposition=mode)
        params = model.init_params(cfg, 2, adj)
        cap = {}
        model.reconstruct(np.zeros((3, 2, 64)), params, capture=cap)
        shapes[mode] = (cfg.component_length, cap["x_tre"].shape[-1], cap["x_sea"].shape[-1],
                        cap["trend_mlp"].shape[-1], params.values["trend.mlp.w1"].shape[0],
                        params.values["seasonal.graph.layer.0"].shape[0])
    ok = all(d * 2 == m for d, m in zip(shapes["dwt"], shapes["moving_average"]))
    record(8, ok, f"encoder input widths dwt {shapes['dwt'][0]} vs moving_average "
                  f"{shapes['moving_average'][0]} (W=64); captured trend/seasonal/MLP widths agree")
    assert ok


def test_criterion_9_metrics_cross_check():
    p, r = 0.947, 0.923
    c = ev.ConfusionCounts(tp=947 * 923, tn=0, fp=53 * 923, fn=947 * 77)
    pp, rr, f1, _ = ev.precision_recall_f1(c)
    rng = np.random.default_rng(9)
    fixtures = [([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), ([0.3] * 6, [0, 1] * 3),
                ([1, 2, 2, 3, 3, 3], [0, 1, 0, 1, 0, 1])]
    for _ in range(50):
        n = int(rng.integers(2, 200))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        fixtures.append((np.round(rng.standard_normal(n), 1).tolist(), y.tolist()))
    mismatches = sum(ev.auc(s, y) != mann_whitney_auc(s, y) for s, y in fixtures)
    ok = abs(pp - p) < 1e-12 and abs(rr - r) < 1e-12 and abs(f1 - F1_REPORTED) <= F1_TOL \
        and mismatches == 0
    record(9, ok, f"F1(0.947, 0.923) = {f1:.5f} (target {F1_REPORTED} +- {F1_TOL}); "
                  f"AUC == pairwise oracle exactly on {len(fixtures) - mismatches}/{len(fixtures)} fixtures")
    assert ok


def _run_all(root: Path, ds: Path) -> dict[str, bytes]:
    tiny = ["--set", "window=32", "--set", "step=16", "--set", "detect_tail=16", "--set", "epochs=5"]
    steps = [
        ["train", "--data", str(ds), "--out", str(root / "run"), *tiny],
        ["inject", "--data", str(ds), "--out", str(root / "inj"), "--seed", "2", *tiny],
        ["detect", "--data", str(root / "inj"), "--checkpoint", str(root / "run" / "checkpoint.json"),
         "--out", str(root / "det")],
        ["evaluate", "--scores", str(root / "det" / "scores.csv"), "--labels",
         str(root / "inj" / "labels.csv"), "--out", str(root / "ev")],
        ["spectrum", "--data", str(ds), "--out", str(root / "sp"), "--series", "1:temperature"],
        ["sweep", "--data", str(ds), "--checkpoint", str(root / "run" / "checkpoint.json"),
         "--out", str(root / "sw"), "--alphas", "1", "-0.5"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    ds = tmp_path / "ds"
    assert cli.main(["synth", "--out", str(ds), "--nodes", "5", "--length", "400"]) == 0
    # same locations both times: manifests record input paths alongside digests
    a = _run_all(tmp_path / "out", ds)
    shutil.rmtree(tmp_path / "out")
    b = _run_all(tmp_path / "out", ds)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and "run/checkpoint.json" in a and "det/scores.csv" in a
    record(10, ok, f"{len(a)} output files from train/inject/detect/evaluate/spectrum/sweep "
                   f"byte-identical across two runs" if ok else f"differing outputs: {differing}")
    assert ok
