"""Class-weighted likelihood training with RMSprop and early stopping."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, NumericalError, Record
from .model import (AttentionConfig, Architecture, LossConfig, ModelParams, forward,
                    gradients, init_params, loss_terms)

log = logging.getLogger(__name__)


def class_counts(records, num_dims: int) -> np.ndarray:
    """How often each dimension appears as a prediction target (events 2..N)."""
    counts = np.zeros(num_dims, dtype=np.int64)
    for r in records:
        d = r.sequence.dims[1:]
        counts += np.bincount(d, minlength=num_dims)
    return counts


def class_weights(records, num_dims: int) -> np.ndarray:
    """``b_z = N_total / (Z * max(N_z, 1))``."""
    counts = class_counts(records, num_dims)
    return weights_from_counts(counts)


def weights_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    return counts.sum() / (counts.size * np.maximum(counts, 1.0))


@dataclass
class RMSpropState:
    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    mean_square: dict = field(default_factory=dict)

    def copy(self) -> "RMSpropState":
        return RMSpropState(self.lr, self.decay, self.eps,
                            {k: v.copy() for k, v in self.mean_square.items()})


def rmsprop_step(params: dict, grads: dict, state: RMSpropState) -> tuple[dict, RMSpropState]:
    """``s <- rho s + (1 - rho) g^2``; ``theta <- theta - lr g / (sqrt(s) + eps)``."""
    new_params, new_ms = {}, {}
    for k, theta in params.items():
        g = grads[k]
        s = state.mean_square.get(k)
        if s is None:
            s = np.zeros_like(theta, dtype=float)
        s = state.decay * s + (1.0 - state.decay) * g * g
        new_ms[k] = s
        new_params[k] = theta - state.lr * g / (np.sqrt(s) + state.eps)
    return new_params, RMSpropState(state.lr, state.decay, state.eps, new_ms)


def clip_global_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    patience: int = 5
    lr: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    clip_norm: float | None = 5.0
    seed: int = 0
    init_scale: float = 0.1
    forget_bias: float = 1.0
    E: int = 16
    H_event: int = 32
    H_series: int = 32
    H_syn: int = 32
    use_series: bool = True
    class_weighting: bool = True
    attention: AttentionConfig = AttentionConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be at least 1")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    best_epoch: int
    optimizer: RMSpropState
    class_weights: np.ndarray
    last_params: ModelParams | None = None


def mean_gap(records) -> float:
    gaps = [np.diff(r.sequence.times) for r in records if len(r.sequence) > 1]
    if not gaps:
        return 1.0
    g = np.concatenate(gaps)
    m = float(g.mean())
    return m if m > 0 else 1.0


def series_stats(records, F: int) -> tuple[np.ndarray, np.ndarray]:
    blocks = [r.series.samples for r in records if r.series is not None]
    if not blocks or F == 0:
        return np.zeros(F), np.ones(F)
    Y = np.concatenate(blocks)
    std = Y.std(axis=0)
    return Y.mean(axis=0), np.where(std > 1e-12, std, 1.0)


def new_model(dataset: Dataset, config: TrainConfig) -> ModelParams:
    train = dataset.train
    F = dataset.num_features
    arch = Architecture(Z=dataset.num_dims, F=F if config.use_series else 0, E=config.E,
                        H_event=config.H_event, H_series=config.H_series, H_syn=config.H_syn,
                        use_series=config.use_series)
    rng = np.random.default_rng([config.seed, 0x1417])
    params = init_params(arch, rng, config.init_scale, config.forget_bias)
    params.time_scale = mean_gap(train)
    if arch.has_series:
        params.series_mean, params.series_std = series_stats(train, F)
    return params


def evaluate_loss(params: ModelParams, records, b, config: TrainConfig) -> float:
    """Mean per-target loss over ``records``."""
    total, steps = 0.0, 0
    for r in records:
        if len(r.sequence) < 2:
            continue
        t = loss_terms(forward(r, params, config.attention), b, config.loss)
        total += t["total"]
        steps += t["steps"]
    return total / steps if steps else math.nan


def record_gradient(record: Record, params: ModelParams, b, config: TrainConfig):
    tr = forward(record, params, config.attention)
    terms = loss_terms(tr, b, config.loss)
    if not math.isfinite(terms["total"]):
        bad = _first_bad_step(tr, b, config)
        raise NumericalError(f"non-finite loss on record {record.id!r} at step {bad}")
    if terms["clamped"]:
        log.debug("record %s: %d probabilities clamped", record.id, terms["clamped"])
    return gradients(tr, b, config.loss, params), terms


def total_gradient(records, params: ModelParams, b, config: TrainConfig) -> dict[str, np.ndarray]:
    """Gradient of the summed loss over ``records``: the sum of per-record gradients."""
    total = {k: np.zeros_like(v, dtype=float) for k, v in params.tensors.items()}
    for r in records:
        g, _ = record_gradient(r, params, b, config)
        for k in total:
            total[k] += g[k]
    return total


def _first_bad_step(trace, b, config) -> int:
    bad = np.flatnonzero(~np.isfinite(trace.gap_raw) | ~np.all(np.isfinite(trace.probs), axis=1))
    return int(bad[0]) + 1 if bad.size else -1


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), init: ModelParams | None = None,
          optimizer: RMSpropState | None = None, start_epoch: int = 0,
          history: list[EpochLog] | None = None) -> TrainResult:
    """Per-record RMSprop over shuffled epochs, keeping the best-validation params.

    ``init``/``optimizer``/``start_epoch`` resume an earlier run; ``history``
    carries its epoch log so early stopping sees the full record.
    """
    train_records = [r for r in dataset.train if len(r.sequence) >= 2]
    val_records = [r for r in dataset.validation if len(r.sequence) >= 2]
    if not train_records or not val_records:
        raise ValueError("train and validation splits must contain sequences with >= 2 events")
    Z = dataset.num_dims
    b = class_weights(train_records, Z) if config.class_weighting else np.ones(Z)
    params = init if init is not None else new_model(dataset, config)
    opt = optimizer or RMSpropState(config.lr, config.rmsprop_decay, config.rmsprop_eps)
    epochs = list(history or [])
    rng = np.random.default_rng([config.seed, 0x5eed, start_epoch])

    best = params.copy()
    best_val = min((e.val_loss for e in epochs), default=math.inf)
    best_epoch = min(epochs, key=lambda e: e.val_loss).epoch if epochs else 0
    stale = 0
    for epoch in range(start_epoch + 1, start_epoch + config.max_epochs + 1):
        t0 = time.perf_counter()
        total, steps = 0.0, 0
        for k in rng.permutation(len(train_records)):
            g, terms = record_gradient(train_records[k], params, b, config)
            g, _ = clip_global_norm(g, config.clip_norm)
            tensors, opt = rmsprop_step(params.tensors, g, opt)
            params = params.replace(tensors)
            total += terms["total"]
            steps += terms["steps"]
        val = evaluate_loss(params, val_records, b, config)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss after epoch {epoch}")
        epochs.append(EpochLog(epoch, total / steps, val, time.perf_counter() - t0))
        log.info("epoch %d train %.5f val %.5f", epoch, total / steps, val)
        if val < best_val:
            best_val, best, best_epoch, stale = val, params.copy(), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, epochs, best_epoch, opt, b, params)


def write_log(entries, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,seconds\n")
        for e in entries:
            fh.write(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.seconds:.3f}\n")


def read_log(path) -> list[EpochLog]:
    out = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            if line.strip():
                ep, tl, vl, sec = line.strip().split(",")
                out.append(EpochLog(int(ep), float(tl), float(vl), float(sec)))
    return out
