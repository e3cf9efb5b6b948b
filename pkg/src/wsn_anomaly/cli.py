"""Command-line entry point: ``wsn-anomaly <command> ...``.

Every command writes into an output directory and leaves a ``run.json``
there holding the resolved configuration and SHA-256 digests of its inputs.
Exit codes: 0 success, 2 configuration, 3 I/O, 4 input format,
5 dimension/contract, 6 training failure, 7 undefined metric.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, data, graph, pipeline, signal
from . import eval as ev
from . import model as mdl
from .errors import ConfigError, ContractError, FormatError, UndefinedMetricError, WSNError

_LOGGER = logging.getLogger("wsn_anomaly")

EXIT_IO = 3


@dataclass
class RunConfig:
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)
    train_fraction: float = 0.6
    neighbours: int = 4

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train_fraction": self.train_fraction,
                "neighbours": self.neighbours}


_RUN_KEYS = {"train_fraction", "neighbours"}


def _coerce(template, text: str):
    if isinstance(template, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    try:
        return type(template)(text)
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {type(template).__name__}") from None


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Read a JSON config (``{"model": {...}, "train_fraction": ...}``) and apply overrides.

    Overrides are ``key=value``; model keys may be given bare or as ``model.key``.
    """
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise FormatError(f"{path}: config must be a JSON object")
    unknown = set(doc) - _RUN_KEYS - {"model"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_doc = dict(mdl.ModelConfig().to_dict(), **doc.get("model", {}))
    run_doc = {k: doc[k] for k in _RUN_KEYS if k in doc}
    defaults = RunConfig()
    model_names = {f.name for f in fields(mdl.ModelConfig)}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        key = key.removeprefix("model.")
        if key in model_names:
            model_doc[key] = _coerce(getattr(mdl.ModelConfig(), key), value)
        elif key in _RUN_KEYS:
            run_doc[key] = _coerce(getattr(defaults, key), value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
        _LOGGER.info("override %s = %s", key, value)
    cfg = RunConfig(mdl.ModelConfig.from_dict(model_doc), **run_doc)
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {cfg.train_fraction}")
    return cfg


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in paths:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, config: dict, inputs: dict[str, str | None]) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": _digest(Path(v))}
                   for k, v in sorted(inputs.items()) if v is not None},
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_positions(path: str) -> tuple[list[int], np.ndarray]:
    """``node_id,x,y`` CSV, or the whitespace-separated ``id x y`` IBRL layout."""
    text = Path(path).read_text()
    if text.lstrip().startswith("node_id"):
        return graph.read_positions(path)
    ids, xy = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise FormatError(f"{path}: expected 'id x y' rows, got {line!r}")
        ids.append(int(parts[0]))
        xy.append((float(parts[1]), float(parts[2])))
    if not ids:
        raise FormatError(f"{path}: no positions")
    return ids, np.array(xy)


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _outdir(args.out)
    ds, _ = data.synth_generate(args.nodes, args.modalities, args.length, seed=args.seed)
    data.save_archive(ds, out)
    graph.write_positions(out / "positions.csv", ds.node_ids, ds.positions)
    print(f"synthetic dataset {ds.values.shape} written to {out}")
    return 0


def cmd_preprocess(args) -> int:
    out = _outdir(args.out)
    log = data.ingest_ibrl(args.input)
    ds = data.clean_and_align(log, max_gap=args.max_gap)
    if args.positions:
        ids, xy = _read_positions(args.positions)
        lookup = dict(zip(ids, xy))
        missing = [n for n in ds.node_ids if n not in lookup]
        if missing:
            raise FormatError(f"no positions for nodes {missing}")
        ds.positions = np.array([lookup[n] for n in ds.node_ids])
    data.save_archive(ds, out)
    (out / "cleaning_report.json").write_text(json.dumps(ds.report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "preprocess", {"max_gap": args.max_gap},
                    {"input": args.input, "positions": args.positions})
    print(f"kept {len(ds.node_ids)} nodes x {ds.values.shape[2]} steps; "
          f"excluded nodes {ds.report.get('excluded_nodes')}; "
          f"dropped rows {ds.report.get('dropped_rows')}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = _outdir(args.out)
    ds = data.load_archive(args.data)
    params, log = pipeline.fit(ds, cfg.model, cfg.train_fraction, cfg.neighbours)
    mdl.save_checkpoint(params, out / "checkpoint.json")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(log.epoch_loss, 1):
            w.writerow([i, repr(v)])
    _write_manifest(out, "train", cfg.to_dict(), {"data": args.data})
    print(f"trained {params.count()} parameters; final loss {log.epoch_loss[-1]:.6g}; "
          f"threshold {params.threshold:.6g}; checkpoint sha256 {_digest(out / 'checkpoint.json')}")
    return 0


def _load_params(path: str) -> mdl.ModelParams:
    if not Path(path).exists():
        raise ContractError(f"checkpoint {path} not found")
    params = mdl.load_checkpoint(path)
    if not params.trained or params.threshold is None:
        raise ContractError(f"{path} holds no trained, calibrated model")
    return params


def cmd_detect(args) -> int:
    params = _load_params(args.checkpoint)
    out = _outdir(args.out)
    ds = data.load_archive(args.data)
    if tuple(ds.node_ids) != tuple(params.node_ids) or len(ds.modalities) != params.n_modalities:
        raise ContractError("dataset nodes/modalities do not match the checkpoint")
    cfg = params.config
    ws = (data.make_windows(ds, cfg.window, cfg.step) if args.all
          else pipeline.test_windows(ds, cfg, args.train_fraction))
    grid = mdl.score(ws.windows(), params)
    times, scores = pipeline.tail_timeline(ws, grid.scores, cfg.detect_tail)
    labels = (scores > params.threshold).astype(np.int8)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "modality", "t", "score", "label"])
        for i, node in enumerate(ds.node_ids):
            for j, mod in enumerate(ds.modalities):
                for k, t in enumerate(times):
                    w.writerow([node, mod, int(t), repr(float(scores[i, j, k])), int(labels[i, j, k])])
    (out / "threshold.json").write_text(json.dumps({"threshold": params.threshold}) + "\n")
    _write_manifest(out, "detect", {"model": cfg.to_dict(), "all": args.all,
                                    "train_fraction": args.train_fraction},
                    {"data": args.data, "checkpoint": args.checkpoint})
    print(f"{int(labels.sum())} of {labels.size} cells above threshold {params.threshold:.6g}")
    return 0


def _read_scores(path: str) -> tuple[list[tuple], np.ndarray, np.ndarray]:
    keys, score, pred = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["node", "modality", "t", "score", "label"]:
            raise FormatError(f"{path}: expected header node,modality,t,score,label")
        for row in reader:
            keys.append((int(row["node"]), row["modality"], int(row["t"])))
            score.append(float(row["score"]))
            pred.append(int(row["label"]))
    return keys, np.array(score), np.array(pred, dtype=np.int8)


def _read_truth(path: str) -> set[tuple]:
    positive = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"node", "modality", "t", "label"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: expected columns node,modality,t,label")
        for row in reader:
            if int(row["label"]):
                positive.add((int(row["node"]), row["modality"], int(row["t"])))
    return positive


def cmd_evaluate(args) -> int:
    out = _outdir(args.out)
    keys, score, pred = _read_scores(args.scores)
    positive = _read_truth(args.labels) if args.labels else set()
    truth = np.array([k in positive for k in keys], dtype=np.int8)
    report = ev.evaluate(pred, truth, score)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    _write_manifest(out, "evaluate", {}, {"scores": args.scores, "labels": args.labels})
    print(report.to_json())
    if report.auc is None:
        raise UndefinedMetricError("AUC undefined: truth labels contain a single class")
    return 0


def cmd_inject(args) -> int:
    cfg = load_run_config(args.config, args.set)
    ds = data.load_archive(args.data)
    ws = pipeline.test_windows(ds, cfg.model, cfg.train_fraction)
    if args.mode == "point":
        ws = data.inject_anomalies(ws, args.alpha, args.rate, args.seed, tail=cfg.model.detect_tail)
    else:
        try:
            node = ds.node_ids.index(args.node)
            mod = ds.modalities.index(args.modality)
            partner = ds.modalities.index(args.partner)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        lo = args.span[0] - ws.offset
        ws = data.inject_correlation_anomaly(ws, node, (lo, lo + args.span[1]), args.seed,
                                             modality=mod, partner=partner)
    values = ds.values.copy()
    values[..., ws.offset:] = ws.data
    ds.values = values
    ds.report = dict(ds.report, injected={"mode": args.mode, "alpha": args.alpha,
                                          "rate": args.rate, "seed": args.seed})
    out = _outdir(args.out)
    data.save_archive(ds, out)
    data.save_labels(ws, ds.node_ids, ds.modalities, out / "labels.csv")
    _write_manifest(out, "inject", dict(cfg.to_dict(), **{k: v for k, v in vars(args).items()
                                                          if k in ("mode", "alpha", "rate", "seed")}),
                    {"data": args.data})
    print(f"labelled {int(ws.labels.sum())} cells")
    return 0


def cmd_spectrum(args) -> int:
    out = _outdir(args.out)
    ds = data.load_archive(args.data)
    pairs = args.series or [f"{n}:{m}" for n in ds.node_ids for m in ds.modalities]
    for item in pairs:
        node_s, _, mod = item.partition(":")
        try:
            i = ds.node_ids.index(int(node_s))
            j = ds.modalities.index(mod)
        except ValueError:
            raise ConfigError(f"unknown series {item!r}; use node:modality") from None
        x = ds.values[i, j, args.start:args.stop]
        with open(out / f"spectrum_{node_s}_{mod}.csv", "w", newline="") as fh:
            signal.spectrum_report(x, fh)
    _write_manifest(out, "spectrum", {"series": pairs, "start": args.start, "stop": args.stop},
                    {"data": args.data})
    print(f"wrote {len(pairs)} spectra to {out}")
    return 0


def cmd_sweep(args) -> int:
    params = _load_params(args.checkpoint)
    out = _outdir(args.out)
    ds = data.load_archive(args.data)
    ws = pipeline.test_windows(ds, params.config, args.train_fraction)
    rows = ev.robustness_sweep(params, ws, args.alphas, args.rate, args.seed)
    ev.write_sweep_csv(rows, out / "robustness.csv")
    _write_manifest(out, "sweep", {"alphas": args.alphas, "rate": args.rate, "seed": args.seed,
                                   "train_fraction": args.train_fraction},
                    {"data": args.data, "checkpoint": args.checkpoint})
    for a, r in rows:
        print(f"alpha {a:+g}: precision {r.precision:.3f} recall {r.recall:.3f} f1 {r.f1:.3f}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsn-anomaly", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset archive")
    sp.add_argument("--out", required=True)
    sp.add_argument("--nodes", type=int, default=8)
    sp.add_argument("--modalities", type=int, default=3)
    sp.add_argument("--length", type=int, default=3000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="clean an IBRL log into a dataset archive")
    sp.add_argument("--input", required=True)
    sp.add_argument("--positions", help="node positions (node_id,x,y CSV or 'id x y' rows)")
    sp.add_argument("--max-gap", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a detector and calibrate its threshold")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("detect", help="score a dataset with a trained checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-fraction", type=float, default=0.6)
    sp.add_argument("--all", action="store_true", help="score the whole timeline, not just the test split")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("evaluate", help="metrics from scores.csv and a label sidecar")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--labels", help="labels.csv; cells absent from it are normal")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("inject", help="inject labelled anomalies into the test split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("point", "correlation"), default="point")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--rate", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--node", type=int, help="node id (correlation mode)")
    sp.add_argument("--modality", default="humidity")
    sp.add_argument("--partner", default="temperature")
    sp.add_argument("--span", type=int, nargs=2, metavar=("START", "LENGTH"), default=(0, 0),
                    help="timeline start and length (correlation mode)")
    with_config(sp)
    sp.set_defaults(func=cmd_inject)

    sp = sub.add_parser("spectrum", help="amplitude spectra per series as CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--series", action="append", metavar="NODE:MODALITY")
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--stop", type=int)
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("sweep", help="robustness sweep over injection amplitudes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--alphas", type=float, nargs="+", default=[-1, -0.5, -0.1, 0.1, 0.5, 1])
    sp.add_argument("--rate", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train-fraction", type=float, default=0.6)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WSNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
