"""Attentional twin-LSTM point-process model.

An event LSTM reads (embedding, inter-event gap) pairs and a series LSTM reads
the standardized time series. For every candidate dimension ``z`` the event
hidden states are pooled with thresholded attention weights
``|tanh(h_i . v_z)|`` into a context ``c_j^z``; a sigmoid synergic layer fuses
it with the aligned series state, a shared vector ``w_u`` scores each
dimension, and a linear head on the winning dimension's representation
predicts the next gap.

All tensors live in a flat ``dict`` so optimizers and gradient checks can
treat them uniformly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import lstm
from .data import DataError, Record, align_series_to_time

CHECKPOINT_FORMAT = "atrpp-checkpoint/1"
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Architecture:
    Z: int
    F: int = 0
    E: int = 16
    H_event: int = 32
    H_series: int = 32
    H_syn: int = 32
    use_series: bool = True

    @property
    def variant(self) -> str:
        return "ATRPP" if self.has_series else "AERPP"

    @property
    def has_series(self) -> bool:
        return self.use_series and self.F > 0


@dataclass(frozen=True)
class AttentionConfig:
    epsilon: float = 0.01
    window: int | None = None  # None attends to the whole history

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be a positive integer or None")


@dataclass(frozen=True)
class LossConfig:
    sigma: float = 1.0
    time_loss_weight: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.time_loss_weight < 0:
            raise ValueError("time_loss_weight must be nonnegative")


def tensor_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    shapes = {"W_em": (arch.E, arch.Z)}
    for k, s in lstm.param_shapes(arch.E + 1, arch.H_event).items():
        shapes["event." + k] = s
    if arch.has_series:
        for k, s in lstm.param_shapes(arch.F, arch.H_series).items():
            shapes["series." + k] = s
    shapes.update({
        "v": (arch.Z, arch.H_event),
        "W_f": (arch.H_syn, arch.H_series + arch.H_event),
        "b_f": (arch.H_syn,),
        "w_u": (arch.H_syn,),
        "w_s": (arch.H_syn,),
        "b_s": (),
    })
    return shapes


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]
    time_scale: float = 1.0
    series_mean: np.ndarray | None = None
    series_std: np.ndarray | None = None

    def __post_init__(self):
        expected = tensor_shapes(self.arch)
        if set(expected) != set(self.tensors):
            missing = set(expected) ^ set(self.tensors)
            raise ValueError(f"tensor set mismatch: {sorted(missing)}")
        for k, shape in expected.items():
            if np.shape(self.tensors[k]) != shape:
                raise ValueError(f"{k}: shape {np.shape(self.tensors[k])}, expected {shape}")
        if self.series_mean is None:
            self.series_mean = np.zeros(self.arch.F)
        if self.series_std is None:
            self.series_std = np.ones(self.arch.F)

    def __getitem__(self, name):
        return self.tensors[name]

    def sub(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def replace(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.arch, tensors, self.time_scale, self.series_mean, self.series_std)

    def copy(self) -> "ModelParams":
        return self.replace({k: np.array(v, copy=True) for k, v in self.tensors.items()})

    @property
    def num_parameters(self) -> int:
        return int(sum(np.size(v) for v in self.tensors.values()))


def init_params(arch: Architecture, rng: np.random.Generator, scale: float = 0.1,
                forget_bias: float = 1.0) -> ModelParams:
    """Weights ~ U(-scale, scale), biases zero, forget-gate biases ``forget_bias``."""
    tensors = {}
    for name, shape in tensor_shapes(arch).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b_"):
            value = forget_bias if leaf == "b_f" and "." in name else 0.0
            tensors[name] = np.full(shape, value, dtype=float)
        else:
            tensors[name] = rng.uniform(-scale, scale, size=shape)
    return ModelParams(arch, tensors)


# ---------------------------------------------------------------- primitives

def embed(z: int, W_em: np.ndarray) -> np.ndarray:
    if not 0 <= z < W_em.shape[1]:
        raise IndexError(f"dimension {z} out of range for Z={W_em.shape[1]}")
    return W_em[:, z].copy()


def attention_score(h: np.ndarray, v_z: np.ndarray, epsilon: float = 0.01) -> float:
    """``|tanh(h . v_z)|``, or 0 when that falls below ``epsilon``."""
    h, v_z = np.asarray(h, dtype=float), np.asarray(v_z, dtype=float)
    if h.shape != v_z.shape:
        raise ValueError(f"shape mismatch: {h.shape} vs {v_z.shape}")
    a = abs(math.tanh(float(h @ v_z)))
    return a if a >= epsilon else 0.0


def context_vector(hidden: np.ndarray, weights: np.ndarray, window: int | None = None) -> np.ndarray:
    """Unnormalized sum of the most recent ``window`` hidden states."""
    hidden = np.atleast_2d(np.asarray(hidden, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if window is not None:
        hidden, weights = hidden[-window:], weights[-window:]
    return weights @ hidden


def softmax(r: np.ndarray) -> np.ndarray:
    e = np.exp(r - r.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _windowed_cumsum(x: np.ndarray, window: int | None) -> np.ndarray:
    out = np.cumsum(x, axis=0)
    if window is not None and window < x.shape[0]:
        out[window:] = out[window:] - np.cumsum(x, axis=0)[:-window]
    return out


def _windowed_revcumsum(x: np.ndarray, window: int | None) -> np.ndarray:
    rc = np.cumsum(x[::-1], axis=0)[::-1]
    if window is not None and window < x.shape[0]:
        rc = rc.copy()
        rc[:-window] = rc[:-window] - rc[window:]
    return rc


# ---------------------------------------------------------------- forward

@dataclass
class ForwardTrace:
    """Everything one forward pass produced, row ``j`` predicting event ``j+1``
    from events ``0..j`` (zero-based)."""

    dims: np.ndarray
    times: np.ndarray
    h_event: np.ndarray       # J x H_event
    h_series: np.ndarray      # J x H_series (zeros for the event-only variant)
    alpha: np.ndarray         # J x Z, weight of history event i for target z
    contexts: np.ndarray      # J x Z x H_event
    synergic: np.ndarray      # J x Z x H_syn
    probs: np.ndarray         # J x Z
    pred_dims: np.ndarray     # J
    gap_raw: np.ndarray       # J, normalized, unclamped
    time_scale: float
    epsilon: float
    window: int | None
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_steps(self) -> int:
        return self.probs.shape[0]

    @property
    def pred_gaps(self) -> np.ndarray:
        """Predicted gaps in data time units, clamped at zero."""
        return np.maximum(self.gap_raw, 0.0) * self.time_scale

    @property
    def pred_times(self) -> np.ndarray:
        return self.times[: self.num_steps] + self.pred_gaps


def _run(dims, times, series, params: ModelParams, att: AttentionConfig, J: int) -> ForwardTrace:
    arch = params.arch
    p = params.tensors
    dims = np.asarray(dims, dtype=np.int64)
    times = np.asarray(times, dtype=float)
    if J > len(dims):
        raise ValueError("more steps requested than events available")
    if len(dims) and (dims.min() < 0 or dims.max() >= arch.Z):
        raise DataError(f"event dimension out of range for Z={arch.Z}")
    Hy = arch.H_series

    tau = np.diff(times, prepend=times[:1]) / params.time_scale if len(times) else times
    X = np.concatenate([p["W_em"][:, dims[:J]].T, tau[:J, None]], axis=1)
    ev = params.sub("event")
    He, ev_cache = lstm.lstm_forward(X, ev)

    idx = None
    sr_cache = None
    if arch.has_series and series is not None and J > 0:
        if series.num_features != arch.F:
            raise DataError(f"series width {series.num_features} does not match model F={arch.F}")
        idx = np.array([align_series_to_time(series, t) for t in times[:J]], dtype=np.int64)
        Y = (series.samples[: idx.max() + 1] - params.series_mean) / params.series_std
        Hy_all, sr_cache = lstm.lstm_forward(Y, params.sub("series"))
        hy = Hy_all[idx]
    else:
        hy = np.zeros((J, Hy))

    P = He @ p["v"].T
    q = np.tanh(P)
    a = np.abs(q)
    mask = a >= att.epsilon
    alpha = np.where(mask, a, 0.0)
    C = _windowed_cumsum(alpha[:, :, None] * He[:, None, :], att.window)

    W_fy, W_fc = p["W_f"][:, :Hy], p["W_f"][:, Hy:]
    pre = (hy @ W_fy.T)[:, None, :] + C @ W_fc.T + p["b_f"]
    S = lstm.sigmoid(pre)
    r = S @ p["w_u"]
    probs = softmax(r) if J else np.zeros((0, arch.Z))
    zstar = np.argmax(probs, axis=1) if J else np.zeros(0, dtype=np.int64)
    gap_raw = S[np.arange(J), zstar] @ p["w_s"] + p["b_s"]

    cache = {"ev": ev_cache, "sr": sr_cache, "idx": idx, "q": q, "mask": mask}
    return ForwardTrace(dims, times, He, hy, alpha, C, S, probs, zstar, np.asarray(gap_raw, dtype=float),
                        params.time_scale, att.epsilon, att.window, cache)


def forward(record: Record, params: ModelParams, att: AttentionConfig = AttentionConfig()) -> ForwardTrace:
    """Run the model over a record, producing one prediction per target event."""
    seq = record.sequence
    if seq.num_dims != params.arch.Z:
        raise DataError(f"record {record.id!r} has Z={seq.num_dims}, model expects {params.arch.Z}")
    J = max(len(seq) - 1, 0)
    return _run(seq.dims, seq.times, record.series, params, att, J)


class Prediction(NamedTuple):
    dim: int
    time: float
    gap: float
    probs: np.ndarray


def predict_next(prefix: Record, params: ModelParams, att: AttentionConfig = AttentionConfig()) -> Prediction:
    """Most probable next dimension (lowest index on ties) and its event time."""
    seq = prefix.sequence
    n = len(seq)
    if n < 1:
        raise ValueError("prefix must contain at least one event")
    tr = _run(seq.dims, seq.times, prefix.series, params, att, n)
    return Prediction(int(tr.pred_dims[-1]), float(tr.pred_times[-1]), float(tr.pred_gaps[-1]),
                      tr.probs[-1].copy())


# ---------------------------------------------------------------- loss and gradients

def _targets(trace: ForwardTrace):
    J = trace.num_steps
    tgt = trace.dims[1:J + 1]
    gaps = (trace.times[1:J + 1] - trace.times[:J]) / trace.time_scale
    return tgt, gaps


def loss_terms(trace: ForwardTrace, class_weights, loss: LossConfig = LossConfig()) -> dict:
    """Negative log-likelihood split into its class and time parts."""
    tgt, gaps = _targets(trace)
    b = np.asarray(class_weights, dtype=float)
    u = trace.probs[np.arange(trace.num_steps), tgt]
    clamped = u < PROB_FLOOR
    class_term = float(-(b[tgt] * np.log(np.maximum(u, PROB_FLOOR))).sum())
    s2 = loss.sigma ** 2
    nll_time = 0.5 * math.log(2 * math.pi * s2) + (gaps - trace.gap_raw) ** 2 / (2 * s2)
    time_term = float(loss.time_loss_weight * nll_time.sum())
    return {"class": class_term, "time": time_term, "total": class_term + time_term,
            "steps": trace.num_steps, "clamped": int(clamped.sum())}


def sequence_loss(trace: ForwardTrace, class_weights, loss: LossConfig = LossConfig()) -> float:
    return loss_terms(trace, class_weights, loss)["total"]


def gradients(trace: ForwardTrace, class_weights, loss: LossConfig, params: ModelParams) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`sequence_loss` with respect to every tensor."""
    arch = params.arch
    p = params.tensors
    grads = {k: np.zeros_like(v, dtype=float) for k, v in p.items()}
    J = trace.num_steps
    if J == 0:
        return grads
    Hy = arch.H_series
    b = np.asarray(class_weights, dtype=float)
    tgt, gaps = _targets(trace)
    rows = np.arange(J)
    S, C, He, hy = trace.synergic, trace.contexts, trace.h_event, trace.h_series

    u = trace.probs[rows, tgt]
    dr = trace.probs.copy()
    dr[rows, tgt] -= 1.0
    dr *= b[tgt][:, None]
    dr[u < PROB_FLOOR] = 0.0
    dgap = loss.time_loss_weight * (trace.gap_raw - gaps) / loss.sigma ** 2

    S_star = S[rows, trace.pred_dims]
    grads["w_u"] = np.einsum("jz,jzh->h", dr, S)
    grads["w_s"] = dgap @ S_star
    grads["b_s"] = np.asarray(dgap.sum())

    dS = dr[:, :, None] * p["w_u"]
    dS[rows, trace.pred_dims] += dgap[:, None] * p["w_s"]
    dpre = dS * S * (1.0 - S)
    grads["b_f"] = dpre.sum(axis=(0, 1))
    W_fy, W_fc = p["W_f"][:, :Hy], p["W_f"][:, Hy:]
    dpre_z = dpre.sum(axis=1)
    grads["W_f"] = np.concatenate([dpre_z.T @ hy, np.einsum("jzs,jzh->sh", dpre, C)], axis=1)
    dhy = dpre_z @ W_fy
    dC = dpre @ W_fc

    R = _windowed_revcumsum(dC, trace.window)
    dalpha = np.einsum("izh,ih->iz", R, He)
    dHe = np.einsum("iz,izh->ih", trace.alpha, R)
    q = trace.cache["q"]
    dP = dalpha * trace.cache["mask"] * np.sign(q) * (1.0 - q * q)
    grads["v"] = dP.T @ He
    dHe += dP @ p["v"]

    g_ev, dX = lstm.lstm_backward(dHe, trace.cache["ev"], params.sub("event"))
    for k, g in g_ev.items():
        grads["event." + k] = g
    E = arch.E
    np.add.at(grads["W_em"].T, trace.dims[:J], dX[:, :E])

    if trace.cache["sr"] is not None:
        idx = trace.cache["idx"]
        dHy = np.zeros((idx.max() + 1, Hy))
        np.add.at(dHy, idx, dhy)
        g_sr, _ = lstm.lstm_backward(dHy, trace.cache["sr"], params.sub("series"))
        for k, g in g_sr.items():
            grads["series." + k] = g
    return grads


# ---------------------------------------------------------------- infectivity

@dataclass
class InfectivityEstimate:
    matrix: np.ndarray   # Z x Z, row = source dimension, column = target
    counts: np.ndarray   # number of attention weights averaged into each cell
    epsilon: float
    window: int | None
    num_records: int


def extract_infectivity(params: ModelParams, att: AttentionConfig, records) -> InfectivityEstimate:
    """Average attention weight from history events of dimension i when
    scoring target dimension z, pooled over every record and step."""
    records = list(records)
    if not records:
        raise ValueError("at least one record is needed")
    Z = params.arch.Z
    total = np.zeros((Z, Z))
    counts = np.zeros((Z, Z))
    for rec in records:
        tr = forward(rec, params, att)
        J = tr.num_steps
        if J == 0:
            continue
        # history event i is attended at steps i..J-1, limited by the window
        mult = J - np.arange(J)
        if att.window is not None:
            mult = np.minimum(mult, att.window)
        np.add.at(total, tr.dims[:J], mult[:, None] * tr.alpha)
        np.add.at(counts, tr.dims[:J], np.broadcast_to(mult[:, None], (J, Z)))
    matrix = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    return InfectivityEstimate(matrix, counts, att.epsilon, att.window, len(records))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, att: AttentionConfig, extra: dict | None = None) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "variant": params.arch.variant,
        "architecture": asdict(params.arch),
        "attention": asdict(att),
        "schema": {"Z": params.arch.Z, "F": params.arch.F},
        "normalization": {"time_scale": params.time_scale,
                          "series_mean": [float(x) for x in params.series_mean],
                          "series_std": [float(x) for x in params.series_std]},
        "tensors": {k: {"shape": list(np.shape(v)), "data": [float(x) for x in np.ravel(v)]}
                    for k, v in params.tensors.items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(obj) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, AttentionConfig, dict]:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format {obj.get('format')!r}")
    arch = Architecture(**obj["architecture"])
    att = AttentionConfig(**obj["attention"])
    tensors = {k: np.array(t["data"], dtype=float).reshape(t["shape"]) for k, t in obj["tensors"].items()}
    norm = obj["normalization"]
    params = ModelParams(arch, tensors, norm["time_scale"],
                         np.array(norm["series_mean"], dtype=float), np.array(norm["series_std"], dtype=float))
    return params, att, obj.get("extra", {})
