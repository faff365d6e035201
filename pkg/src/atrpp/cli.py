"""Command-line driver: ``atrpp {simulate,train,eval,baselines,infectivity}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (fit_ctmc, fit_hawkes_mle, fit_logistic, fit_markov, fit_poisson,
                        fit_self_correcting, iter_steps, model_to_dict)
from .config import ConfigError, RunConfig, load_config
from .data import DataError, NumericalError, load_dataset, save_dataset
from .hawkes import generate_synthetic
from .metrics import PredictionSet, permutation_null, rank_corr, rel_err, report
from .model import extract_infectivity, forward, load_checkpoint, save_checkpoint
from .training import EpochLog, RMSpropState, train, write_log

log = logging.getLogger("atrpp")

MANIFEST_FORMAT = "atrpp-manifest/1"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- small writers

def write_matrix(path, M) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(x)) for x in row])


def read_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh) if row])


def write_vector(path, v) -> None:
    Path(path).write_text("\n".join(repr(float(x)) for x in v) + "\n")


def read_vector(path) -> np.ndarray:
    return np.array([float(x) for x in Path(path).read_text().split()])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def to_dot(matrix, floor: float = 0.0, labels=None) -> str:
    """Directed graph with an edge i -> j for every entry above ``floor``."""
    M = np.asarray(matrix, dtype=float)
    Z = M.shape[0]
    labels = labels or [str(k) for k in range(Z)]
    top = max(float(M.max()), 1e-300)
    lines = ["digraph infectivity {"]
    for k in range(Z):
        lines.append(f'  n{k} [label="{labels[k]}"];')
    for i in range(Z):
        for j in range(Z):
            if M[i, j] > floor:
                lines.append(f'  n{i} -> n{j} [weight={float(M[i, j])!r}, penwidth={1 + 4 * M[i, j] / top:.4f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_manifest(out: Path, command: str, config: RunConfig, outputs, **info) -> None:
    obj = {"format": MANIFEST_FORMAT, "command": command, "version": __version__,
           "seed": config.seed, "config": config.to_dict(), "outputs": sorted(outputs)}
    obj.update(info)
    write_json(out / "manifest.json", obj)


def _need(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} configured (set [paths] or pass a flag)")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _ground_truth(data_dir: Path):
    A_path = data_dir / "A.csv"
    return read_matrix(A_path) if A_path.exists() else None


# ---------------------------------------------------------------- commands

def cmd_simulate(config: RunConfig, out: Path) -> dict:
    dataset, truth = generate_synthetic(config.simulate, threads=config.threads)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    write_vector(out / "mu.csv", truth.params.mu)
    write_matrix(out / "A.csv", truth.params.A)
    counts = {name: len(dataset.part(name)) for name in ("train", "validation", "test")}
    info = {"scale_factor": truth.scale_factor, "branching_ratio_before": truth.branching_ratio_before,
            "branching_ratio": truth.params.branching_ratio(), "split_sizes": counts,
            "num_events": int(sum(len(r.sequence) for r in dataset.records))}
    write_manifest(out, "simulate", config, ["events.jsonl", "series.csv", "split.json", "mu.csv", "A.csv"],
                   **info)
    return info


def cmd_train(config: RunConfig, out: Path) -> dict:
    dataset = load_dataset(_need(config.paths.data, "data directory"))
    tc = config.train
    kwargs = {}
    if config.paths.resume:
        params, att, extra = load_checkpoint(_need(config.paths.resume, "resume checkpoint"))
        history = [EpochLog(e["epoch"], e["train_loss"], e["val_loss"], e.get("seconds", 0.0))
                   for e in extra.get("log", [])]
        opt = RMSpropState(tc.lr, tc.rmsprop_decay, tc.rmsprop_eps,
                           {k: np.array(v["data"]).reshape(v["shape"])
                            for k, v in extra.get("optimizer", {}).items()})
        kwargs = dict(init=params, optimizer=opt, start_epoch=extra.get("epochs_completed", 0),
                      history=history)
        tc = replace(tc, attention=att)
    result = train(dataset, tc, **kwargs)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "epochs_completed": result.log[-1].epoch if result.log else 0,
        "best_epoch": result.best_epoch,
        "class_weights": [float(x) for x in result.class_weights],
        "log": [{"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss} for e in result.log],
        "optimizer": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
                      for k, v in result.optimizer.mean_square.items()},
    }
    save_checkpoint(out / "checkpoint.json", result.params, tc.attention, extra)
    write_log(result.log, out / "train_log.csv")
    info = {"variant": result.params.arch.variant, "best_epoch": result.best_epoch,
            "epochs_completed": extra["epochs_completed"], "num_parameters": result.params.num_parameters}
    write_manifest(out, "train", config, ["checkpoint.json", "train_log.csv"], **info)
    return info


def evaluate_model(params, att, records, num_dims, ks) -> dict:
    preds = PredictionSet()
    for r in records:
        tr = forward(r, params, att)
        for j, d, g in iter_steps(r):
            preds.add(d, g, int(tr.pred_dims[j]), np.argsort(-tr.probs[j], kind="stable"),
                      float(tr.pred_gaps[j]))
    return report(preds, num_dims, ks)


def evaluate_baseline(model, records, num_dims, ks) -> dict:
    preds = PredictionSet()
    for r in records:
        for (j, d, g), p in zip(iter_steps(r), model.predict_record(r)):
            preds.add(d, g, p.dim, p.ranking, p.gap)
    return report(preds, num_dims, ks)


def _recovery(A_true, A_est, cfg, seed) -> dict:
    rc = rank_corr(A_true, A_est)
    null = permutation_null(A_true, A_est, cfg.null_permutations, seed)
    return {"rank_corr": rc, "rel_err": rel_err(A_true, A_est, cfg.normalize),
            "rank_corr_null_mean": float(null.mean()), "rank_corr_null_std": float(null.std())}


def _load_model_and_data(config: RunConfig):
    data_dir = _need(config.paths.data, "data directory")
    params, att, _ = load_checkpoint(_need(config.paths.checkpoint, "checkpoint"))
    dataset = load_dataset(data_dir)
    if dataset.num_dims != params.arch.Z:
        raise DataError(f"checkpoint expects Z={params.arch.Z}, data has Z={dataset.num_dims}")
    if params.arch.has_series and dataset.num_features != params.arch.F:
        raise DataError(f"checkpoint expects F={params.arch.F}, data has F={dataset.num_features}")
    return data_dir, dataset, params, att


def cmd_eval(config: RunConfig, out: Path) -> dict:
    data_dir, dataset, params, att = _load_model_and_data(config)
    test = dataset.test
    if not test:
        raise DataError("test split is empty")
    rep = evaluate_model(params, att, test, dataset.num_dims, config.eval.ks)
    rep["model"] = params.arch.variant
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["metrics.json", "metrics.csv", "confusion.csv"]
    A_true = _ground_truth(data_dir)
    if A_true is not None:
        est = extract_infectivity(params, att, test)
        rep.update(_recovery(A_true, est.matrix, config.eval, config.seed))
        write_matrix(out / "infectivity.csv", est.matrix)
        outputs.append("infectivity.csv")
    write_matrix(out / "confusion.csv", np.array(rep["confusion"]))
    flat = {k: v for k, v in rep.items() if k != "confusion"}
    write_json(out / "metrics.json", rep)
    _write_table(out / "metrics.csv", [flat])
    write_manifest(out, "eval", config, outputs)
    return rep


TABLE_COLUMNS = ["model", "status", "steps", "accuracy", "precision", "recall", "f1"]


def _write_table(path, rows) -> None:
    cols = list(TABLE_COLUMNS)
    for r in rows:
        cols += [k for k in r if k not in cols and k != "confusion"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])


def fit_baselines(config: RunConfig, dataset):
    """Yield ``(name, fitted model or exception)`` for every enabled baseline."""
    bc = config.baselines
    Z = dataset.num_dims
    train_recs, val = dataset.train, dataset.validation
    fitters = {
        "poisson": lambda: fit_poisson(train_recs),
        "self_correcting": lambda: fit_self_correcting(train_recs),
        "markov": lambda: fit_markov(train_recs, Z, bc.markov_max_order, val),
        "ctmc": lambda: fit_ctmc(train_recs, Z),
        "hawkes": lambda: fit_hawkes_mle(train_recs, Z, w=bc.hawkes_w, l1=bc.hawkes_l1, validation=val,
                                         seed=config.seed, rollouts=bc.hawkes_rollouts),
        "logistic": lambda: fit_logistic(train_recs, Z, window=bc.logistic_window, seed=config.seed),
    }
    for name, fit in fitters.items():
        if not getattr(bc, name):
            continue
        try:
            yield name, fit()
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.warning("baseline %s failed: %s", name, exc)
            yield name, exc


def cmd_baselines(config: RunConfig, out: Path) -> list[dict]:
    data_dir = _need(config.paths.data, "data directory")
    dataset = load_dataset(data_dir)
    test = dataset.test
    if not test:
        raise DataError("test split is empty")
    A_true = _ground_truth(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    rows = []
    outputs = ["baselines.csv"]
    for name, model in fit_baselines(config, dataset):
        if isinstance(model, Exception):
            rows.append({"model": name, "status": f"error: {model}"})
            continue
        try:
            rep = evaluate_baseline(model, test, dataset.num_dims, config.eval.ks)
        except (ValueError, ArithmeticError) as exc:
            rows.append({"model": name, "status": f"error: {exc}"})
            continue
        rep = {"model": name, "status": "ok", **rep}
        if name == "hawkes" and A_true is not None:
            rep.update(_recovery(A_true, model.params.A, config.eval, config.seed))
        rows.append(rep)
        write_json(out / "models" / f"{name}.json", model_to_dict(model))
        outputs.append(f"models/{name}.json")
    if config.paths.checkpoint:
        _, _, params, att = _load_model_and_data(config)
        rep = evaluate_model(params, att, test, dataset.num_dims, config.eval.ks)
        rep = {"model": params.arch.variant.lower(), "status": "ok", **rep}
        if A_true is not None:
            est = extract_infectivity(params, att, test)
            rep.update(_recovery(A_true, est.matrix, config.eval, config.seed))
        rows.append(rep)
    _write_table(out / "baselines.csv", rows)
    write_manifest(out, "baselines", config, outputs)
    return rows


def cmd_infectivity(config: RunConfig, out: Path) -> np.ndarray:
    _, dataset, params, att = _load_model_and_data(config)
    records = dataset.test or list(dataset.records)
    est = extract_infectivity(params, att, records)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "infectivity.csv", est.matrix)
    write_matrix(out / "infectivity_counts.csv", est.counts)
    (out / "infectivity.dot").write_text(to_dot(est.matrix, config.eval.edge_floor))
    write_manifest(out, "infectivity", config,
                   ["infectivity.csv", "infectivity_counts.csv", "infectivity.dot"])
    return est.matrix


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "baselines": cmd_baselines, "infectivity": cmd_infectivity}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atrpp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config or a manifest.json from an earlier run")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("--threads", type=int, help="worker processes for cascade simulation")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--data", help="overrides [paths] data")
        p.add_argument("--checkpoint", help="overrides [paths] checkpoint")
        p.add_argument("--resume", help="checkpoint to continue training from")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve(args) -> RunConfig:
    config = load_config(args.config, args.seed, args.threads)
    paths = {k: v for k, v in (("data", args.data), ("checkpoint", args.checkpoint),
                               ("resume", args.resume)) if v}
    if paths:
        config = replace(config, paths=replace(config.paths, **paths))
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve(args)
        t0 = time.perf_counter()
        COMMANDS[args.command](config, Path(args.out))
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except (ConfigError, UsageError) as exc:
        print(f"atrpp: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"atrpp: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"atrpp: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
