"""Classical comparison models for next-event prediction.

Each fitted model exposes ``predict_record(record)`` returning one
:class:`StepPrediction` per target event (event ``j+1`` predicted from events
``0..j``). Fields a model cannot produce are ``None``.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import NumericalError, Record, align_series_to_time
from .hawkes import HawkesParams, spectral_radius
from .training import RMSpropState, rmsprop_step

GOLDEN = (math.sqrt(5) - 1) / 2


class StepPrediction(NamedTuple):
    dim: int | None
    ranking: list | None
    gap: float | None


def _observed_span(seq) -> float:
    if seq.horizon is not None:
        return seq.horizon
    return float(seq.times[-1]) if len(seq) else 0.0


def _ranking(scores) -> list[int]:
    # stable sort keeps the lowest index first among ties
    return [int(k) for k in np.argsort(-np.asarray(scores), kind="stable")]


def iter_steps(record: Record):
    """Yield ``(j, true_dim, true_gap)`` for every target of a record."""
    dims, times = record.sequence.dims, record.sequence.times
    for j in range(len(dims) - 1):
        yield j, int(dims[j + 1]), float(times[j + 1] - times[j])


# ---------------------------------------------------------------- Poisson

@dataclass
class PoissonModel:
    rate: float
    name: str = "poisson"

    def predict_gap(self) -> float:
        return 1.0 / self.rate

    def predict_record(self, record):
        return [StepPrediction(None, None, self.predict_gap()) for _ in iter_steps(record)]


def fit_poisson(records) -> PoissonModel:
    """Pooled constant rate: total events over total observed time."""
    events = sum(len(r.sequence) for r in records)
    span = sum(_observed_span(r.sequence) for r in records)
    if events < 1:
        raise ValueError("no events to fit")
    if span <= 0:
        raise ValueError("zero observed time")
    return PoissonModel(events / span)


# ---------------------------------------------------------------- self-correcting

def self_correcting_loglik(mu: float, alpha: float, sequences) -> float:
    """Log-likelihood of ``lambda(t) = exp(mu t - alpha N(t-))`` summed over
    ``sequences`` of ``(times, horizon)``."""
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for times, horizon in sequences:
            n = times.size
            k = np.arange(n)
            total += float(np.sum(mu * times - alpha * k))
            starts = np.concatenate([[0.0], times])
            ends = np.concatenate([times, [horizon]])
            counts = np.arange(n + 1)
            # e^{-alpha k} (e^{mu b} - e^{mu a}) / mu without forming e^{mu a} alone
            pieces = np.exp(mu * ends - alpha * counts) * -np.expm1(-mu * (ends - starts)) / mu
            total -= float(np.sum(pieces))
    return total if math.isfinite(total) else -math.inf


def _golden_max(f, lo, hi, tol=1e-10, max_iter=200):
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * (1 + abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def adaptive_simpson(f, a, b, tol=1e-6, max_depth=50):
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6 * (fa + 4 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = (a + b) / 2
        lm, rm = (a + m) / 2, (m + b) / 2
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f((a + b) / 2)
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


@dataclass
class SelfCorrectingModel:
    mu: float
    alpha: float
    time_unit: float
    loglik: float
    converged: bool = True
    name: str = "self_correcting"

    def expected_gap(self, t_now: float, n_events: int) -> float:
        """Mean waiting time after ``n_events`` events, the last at ``t_now``."""
        mu, alpha = self.mu, self.alpha
        with np.errstate(over="ignore"):
            K = math.exp(min(mu * t_now / self.time_unit - alpha * n_events, 700.0)) / mu
        # survival exp(-K (e^{mu s} - 1)) in normalized time s
        s_max = math.log1p(40.0 / K) / mu
        surv = lambda s: math.exp(-K * math.expm1(mu * s))
        return adaptive_simpson(surv, 0.0, s_max, tol=1e-6) * self.time_unit

    def predict_record(self, record):
        times = record.sequence.times
        return [StepPrediction(None, None, self.expected_gap(float(times[j]), j + 1))
                for j, _, _ in iter_steps(record)]


def _newton_refine(f, x, lo, hi, max_iter, h=1e-4):
    """Damped Newton ascent on a smooth 2-d objective using central-difference
    derivatives, clamped to the box [lo, hi]^2.  Falls back to a golden-section
    line search along the gradient when the Hessian is not negative definite."""
    x = np.array(x, dtype=float)
    val = f(*x)
    E = np.eye(2) * h
    for _ in range(max_iter):
        g = np.array([(f(*(x + e)) - f(*(x - e))) / (2 * h) for e in E])
        H = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                H[i, j] = (f(*(x + E[i] + E[j])) - f(*(x + E[i] - E[j]))
                           - f(*(x - E[i] + E[j])) + f(*(x - E[i] - E[j]))) / (4 * h * h)
        if np.all(np.linalg.eigvalsh(H) < 0):
            step = -np.linalg.solve(H, g)
        else:
            step = g / max(np.linalg.norm(g), 1e-300)
        t, best = 1.0, None
        for _ in range(30):
            cand = np.clip(x + t * step, lo, hi)
            fc = f(*cand)
            if fc >= val:
                best = (cand, fc)
                break
            t /= 2
        if best is None:
            t, fc = _golden_max(lambda s: f(*np.clip(x + s * step, lo, hi)), 0.0, 1.0)
            if fc < val:
                return x, val, True
            best = (np.clip(x + t * step, lo, hi), fc)
        moved = np.linalg.norm(best[0] - x)
        gain = best[1] - val
        x, val = best
        if moved <= 1e-9 or gain <= 1e-12 * (1 + abs(val)):
            return x, val, True
    return x, val, False


def fit_self_correcting(records, bounds=(1e-4, 1e2), grid_size=41, max_rounds=100) -> SelfCorrectingModel:
    """Maximize the likelihood by a log-spaced grid search followed by a
    damped Newton refinement in log space.

    Times are measured in units of the mean inter-event gap of ``records``.
    """
    gaps = [np.diff(r.sequence.times) for r in records if len(r.sequence) > 1]
    unit = float(np.concatenate(gaps).mean()) if gaps else 1.0
    unit = unit if unit > 0 else 1.0
    seqs = [(r.sequence.times / unit, _observed_span(r.sequence) / unit)
            for r in records if len(r.sequence)]
    if not seqs:
        raise ValueError("no events to fit")
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    f = lambda lm, la: self_correcting_loglik(math.exp(lm), math.exp(la), seqs)

    grid = np.linspace(lo, hi, grid_size)
    best = (-math.inf, lo, lo)
    for lm in grid:
        for la in grid:
            val = f(lm, la)
            if val > best[0]:
                best = (val, lm, la)
    val, lm, la = best
    (lm, la), val, converged = _newton_refine(f, (lm, la), lo, hi, max_rounds)
    return SelfCorrectingModel(math.exp(lm), math.exp(la), unit, val, converged)


# ---------------------------------------------------------------- Markov chain

@dataclass
class MarkovModel:
    order: int
    num_dims: int
    counts: dict  # context tuple -> next-dimension counts
    marginal: np.ndarray
    name: str = "markov"

    def distribution(self, context) -> np.ndarray | None:
        context = tuple(int(d) for d in context)
        if len(context) < self.order:
            return None
        c = self.counts.get(context[-self.order:])
        if c is None:
            return None
        return (c + 1.0) / (c.sum() + self.num_dims)

    def predict(self, context) -> tuple[int, list[int]]:
        p = self.distribution(context)
        if p is None:
            p = self.marginal
        ranking = _ranking(p)
        return ranking[0], ranking

    def predict_record(self, record):
        dims = record.sequence.dims
        out = []
        for j, _, _ in iter_steps(record):
            d, ranking = self.predict(dims[: j + 1])
            out.append(StepPrediction(d, ranking, None))
        return out


def _markov_counts(records, order: int, Z: int) -> dict:
    counts: dict = {}
    for r in records:
        dims = [int(d) for d in r.sequence.dims]
        for j in range(order, len(dims)):
            ctx = tuple(dims[j - order:j])
            if ctx not in counts:
                counts[ctx] = np.zeros(Z)
            counts[ctx][dims[j]] += 1
    return counts


def fit_markov(train, num_dims: int, max_order: int = 3, validation=None) -> MarkovModel:
    """Add-one smoothed order-k chains; k chosen by validation accuracy
    (smallest k on ties)."""
    marg = np.zeros(num_dims)
    for r in train:
        marg += np.bincount(r.sequence.dims, minlength=num_dims)
    marginal = (marg + 1.0) / (marg.sum() + num_dims)
    if not validation:
        if max_order != 1:
            raise ValueError("a validation split is needed to choose the order")
        return MarkovModel(1, num_dims, _markov_counts(train, 1, num_dims), marginal)
    best, best_acc = None, -1.0
    for k in range(1, max_order + 1):
        model = MarkovModel(k, num_dims, _markov_counts(train, k, num_dims), marginal)
        hits = total = 0
        for r in validation:
            for (j, truth, _), p in zip(iter_steps(r), model.predict_record(r)):
                hits += p.dim == truth
                total += 1
        acc = hits / total if total else 0.0
        if acc > best_acc:
            best, best_acc = model, acc
    return best


# ---------------------------------------------------------------- CTMC

@dataclass
class CTMCModel:
    """Jump rates between dimensions; the diagonal holds repeat-dimension rates."""

    Q: np.ndarray
    name: str = "ctmc"

    def predict(self, current: int) -> tuple[int, float, list[int]]:
        row = self.Q[current]
        ranking = _ranking(row)
        total = row.sum()
        return ranking[0], (1.0 / total if total > 0 else math.inf), ranking

    def predict_record(self, record):
        dims = record.sequence.dims
        out = []
        for j, _, _ in iter_steps(record):
            d, gap, ranking = self.predict(int(dims[j]))
            out.append(StepPrediction(d, ranking, gap))
        return out


def fit_ctmc(records, num_dims: int) -> CTMCModel:
    """``q_ij = transitions(i -> j) / total sojourn time in i``."""
    counts = np.zeros((num_dims, num_dims))
    sojourn = np.zeros(num_dims)
    for r in records:
        dims, times = r.sequence.dims, r.sequence.times
        if len(dims) < 2:
            continue
        np.add.at(counts, (dims[:-1], dims[1:]), 1.0)
        np.add.at(sojourn, dims[:-1], np.diff(times))
    if sojourn.sum() <= 0:
        raise ValueError("no transitions with positive sojourn time")
    Q = np.zeros_like(counts)
    seen = sojourn > 0
    Q[seen] = counts[seen] / sojourn[seen, None]
    Q[~seen] = counts.sum(axis=0) / sojourn.sum()
    return CTMCModel(Q)


# ---------------------------------------------------------------- Hawkes MLE

class HawkesStats:
    """Sufficient statistics of the exponential-kernel likelihood for one decay."""

    def __init__(self, records, num_dims: int, w: float):
        self.w, self.Z = float(w), num_dims
        R_blocks, z_blocks = [], []
        G = np.zeros(num_dims)
        T_total = 0.0
        for r in records:
            dims, times = r.sequence.dims, r.sequence.times
            T = _observed_span(r.sequence)
            T_total += T
            n = len(dims)
            if n == 0:
                continue
            R = np.zeros((n, num_dims))
            state = np.zeros(num_dims)
            for i in range(1, n):
                state = (state + np.eye(1, num_dims, dims[i - 1]).ravel()) * math.exp(-w * (times[i] - times[i - 1]))
                R[i] = state
            R_blocks.append(R)
            z_blocks.append(dims)
            np.add.at(G, dims, -np.expm1(-w * (T - times)) / w)
        self.R = np.concatenate(R_blocks) if R_blocks else np.zeros((0, num_dims))
        self.z = np.concatenate(z_blocks) if z_blocks else np.zeros(0, dtype=np.int64)
        self.G = G
        self.T_total = T_total
        self.onehot = np.eye(num_dims)[self.z]

    def rates(self, mu, A):
        return mu[self.z] + np.einsum("mc,cm->m", self.R, A[:, self.z])

    def loglik(self, mu, A) -> float:
        lam = self.rates(mu, A)
        if np.any(lam <= 0):
            return -math.inf
        return float(np.sum(np.log(lam)) - mu.sum() * self.T_total - self.G @ A.sum(axis=1))

    def grad(self, mu, A):
        inv = 1.0 / self.rates(mu, A)
        g_mu = np.bincount(self.z, weights=inv, minlength=self.Z) - self.T_total
        g_A = (self.R * inv[:, None]).T @ self.onehot - self.G[:, None]
        return g_mu, g_A


@dataclass
class HawkesFit:
    params: HawkesParams
    l1: float
    loglik: float
    iterations: int
    converged: bool
    seed: int = 0
    rollouts: int = 100
    w_scores: dict = field(default_factory=dict)
    name: str = "hawkes"

    @property
    def branching_ratio(self) -> float:
        return spectral_radius(self.params.A / self.params.w)

    def intensities_after(self, dims, times) -> np.ndarray:
        """Per-dimension intensity just after the last event of the history."""
        p = self.params
        t = times[-1]
        kern = np.exp(-p.w * (t - times))
        return p.mu + kern @ p.A[dims]

    def first_arrival(self, dims, times, rng) -> float:
        """Mean first-arrival time over thinning rollouts from the history."""
        p = self.params
        m = p.mu.sum()
        K = float((np.exp(-p.w * (times[-1] - times)) @ p.A[dims]).sum())
        n = self.rollouts
        s = np.zeros(n)
        done = np.zeros(n, dtype=bool)
        for _ in range(100000):
            live = ~done
            if not live.any():
                break
            bound = m + K * np.exp(-p.w * s[live])
            s_new = s[live] + rng.exponential(1.0, live.sum()) / bound
            lam = m + K * np.exp(-p.w * s_new)
            acc = rng.uniform(size=live.sum()) * bound <= lam
            s[live] = s_new
            idx = np.flatnonzero(live)
            done[idx[acc]] = True
        return float(s.mean())

    def predict_record(self, record):
        dims, times = record.sequence.dims, record.sequence.times
        out = []
        base = zlib.crc32(record.id.encode())
        for j, _, _ in iter_steps(record):
            lam = self.intensities_after(dims[: j + 1], times[: j + 1])
            ranking = _ranking(lam)
            rng = np.random.default_rng([self.seed, base, j])
            gap = self.first_arrival(dims[: j + 1], times[: j + 1], rng)
            out.append(StepPrediction(ranking[0], ranking, gap))
        return out


def _hawkes_ascent(stats: HawkesStats, l1: float, max_iter: int, tol: float):
    Z = stats.Z
    counts = np.bincount(stats.z, minlength=Z).astype(float)
    mu = np.maximum(counts / max(stats.T_total, 1e-12) * 0.5, 1e-6)
    A = np.full((Z, Z), 0.1 * stats.w / Z)
    floor = 1e-12

    def objective(mu, A):
        return stats.loglik(mu, A) - l1 * A.sum()

    F = objective(mu, A)
    if not math.isfinite(F):
        raise NumericalError("Hawkes log-likelihood is not finite at the initial point")
    g_mu, g_A = stats.grad(mu, A)
    step = 1e-6
    history = [F]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for _ in range(60):
            mu_new = np.maximum(mu + step * g_mu, floor)
            A_new = np.maximum(A + step * (g_A - l1), 0.0)
            F_new = objective(mu_new, A_new)
            if F_new >= F:
                break
            step *= 0.5
        else:
            converged = True
            break
        g_mu_new, g_A_new = stats.grad(mu_new, A_new)
        # Barzilai-Borwein step for the ascent direction
        s = np.concatenate([(mu_new - mu), (A_new - A).ravel()])
        y = np.concatenate([(g_mu_new - g_mu), (g_A_new - g_A).ravel()])
        sy = float(s @ y)
        step = float(s @ s) / -sy if sy < 0 else step * 2.0
        step = min(max(step, 1e-12), 1e6)
        change = F_new - F
        mu, A, F, g_mu, g_A = mu_new, A_new, F_new, g_mu_new, g_A_new
        history.append(F)
        if change <= tol * (1 + abs(F)):
            converged = True
            break
    return mu, A, F, it, converged, history


def fit_hawkes_mle(train, num_dims: int, w=None, l1: float = 0.0, validation=None,
                   w_grid=(0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0), max_iter: int = 3000,
                   tol: float = 1e-10, seed: int = 0, rollouts: int = 100) -> HawkesFit:
    """Projected-gradient maximum likelihood for ``mu >= 0``, ``A >= 0`` with an
    optional L1 penalty on ``A``. When ``w`` is None it is chosen from
    ``w_grid`` by validation log-likelihood."""
    scores = {}
    if w is None:
        if not validation:
            raise ValueError("choosing w requires a validation split")
        best = None
        for cand in w_grid:
            mu, A, F, it, conv, _ = _hawkes_ascent(HawkesStats(train, num_dims, cand), l1, max_iter, tol)
            val = HawkesStats(validation, num_dims, cand).loglik(mu, A)
            scores[float(cand)] = val
            if best is None or val > best[0]:
                best = (val, cand, mu, A, F, it, conv)
        _, w, mu, A, F, it, conv = best
    else:
        mu, A, F, it, conv, _ = _hawkes_ascent(HawkesStats(train, num_dims, w), l1, max_iter, tol)
    if not math.isfinite(F):
        raise NumericalError("Hawkes log-likelihood became non-finite")
    return HawkesFit(HawkesParams(mu, A, w), l1, F, it, conv, seed, rollouts, scores)


# ---------------------------------------------------------------- logistic

def fit_linear_gap(X, y, ridge: float = 1e-6) -> np.ndarray:
    """Ridge least squares via the normal equations."""
    X = np.asarray(X, dtype=float)
    return np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ np.asarray(y, dtype=float))


def fit_softmax(X, y, num_classes: int, epochs: int = 500, lr: float = 0.05, seed: int = 0) -> np.ndarray:
    """Multinomial logistic regression trained full-batch with RMSprop."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    W = {"W": rng.uniform(-0.01, 0.01, size=(X.shape[1], num_classes))}
    state = RMSpropState(lr=lr)
    onehot = np.eye(num_classes)[y]
    n = max(len(y), 1)
    for _ in range(epochs):
        logits = X @ W["W"]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        W, state = rmsprop_step(W, {"W": X.T @ (p - onehot) / n}, state)
    return W["W"]


@dataclass
class LogisticModel:
    """Softmax classifier and linear gap regressor on hand-built features:
    the last ``window`` standardized series samples, a one-hot of the last
    dimension, the last gap and a bias."""

    coef: np.ndarray        # features x Z
    gap_coef: np.ndarray    # features
    num_dims: int
    window: int
    time_unit: float
    series_mean: np.ndarray
    series_std: np.ndarray
    name: str = "logistic"

    def features(self, record: Record) -> np.ndarray:
        return logistic_features(record, self.num_dims, self.window, self.time_unit,
                                 self.series_mean, self.series_std)

    def predict_features(self, X):
        scores = X @ self.coef
        dims = np.argmax(scores, axis=1)
        gaps = np.maximum(X @ self.gap_coef, 0.0) * self.time_unit
        return dims, scores, gaps

    def predict_record(self, record):
        X = self.features(record)
        if X.shape[0] == 0:
            return []
        dims, scores, gaps = self.predict_features(X)
        return [StepPrediction(int(d), _ranking(s), float(g)) for d, s, g in zip(dims, scores, gaps)]


def logistic_features(record: Record, Z: int, window: int, time_unit: float, mean, std) -> np.ndarray:
    dims, times = record.sequence.dims, record.sequence.times
    rows = []
    prev_gap = np.diff(times, prepend=times[:1]) / time_unit if len(times) else times
    for j in range(len(dims) - 1):
        parts = []
        if record.series is not None and mean.size:
            k = align_series_to_time(record.series, float(times[j]))
            ks = np.clip(np.arange(k - window + 1, k + 1), 0, None)
            parts.append(((record.series.samples[ks] - mean) / std).ravel())
        parts.append(np.eye(Z)[dims[j]])
        parts.append([prev_gap[j], 1.0])
        rows.append(np.concatenate(parts))
    width = (window * mean.size if (record.series is not None and mean.size) else 0) + Z + 2
    return np.array(rows).reshape(len(rows), width)


def fit_logistic(train, num_dims: int, window: int = 3, epochs: int = 500, lr: float = 0.05,
                 seed: int = 0) -> LogisticModel:
    gaps = [np.diff(r.sequence.times) for r in train if len(r.sequence) > 1]
    unit = float(np.concatenate(gaps).mean()) if gaps else 1.0
    unit = unit if unit > 0 else 1.0
    blocks = [r.series.samples for r in train if r.series is not None]
    if blocks:
        Y = np.concatenate(blocks)
        mean, std = Y.mean(axis=0), Y.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
    else:
        mean = std = np.zeros(0)
    Xs, ys, gs = [], [], []
    for r in train:
        X = logistic_features(r, num_dims, window, unit, mean, std)
        if X.shape[0]:
            Xs.append(X)
            ys.append(r.sequence.dims[1:])
            gs.append(np.diff(r.sequence.times) / unit)
    X, y, g = np.concatenate(Xs), np.concatenate(ys), np.concatenate(gs)
    coef = fit_softmax(X, y, num_dims, epochs, lr, seed)
    return LogisticModel(coef, fit_linear_gap(X, g), num_dims, window, unit, mean, std)


# ---------------------------------------------------------------- serialization

def model_to_dict(model) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, HawkesParams):
            return {"mu": v.mu.tolist(), "A": v.A.tolist(), "w": v.w}
        if isinstance(v, dict):
            return {str(k) if not isinstance(k, tuple) else ",".join(map(str, k)): conv(x)
                    for k, x in v.items()}
        return v
    if isinstance(model, HawkesFit):
        d = {k: conv(getattr(model, k)) for k in model.__dataclass_fields__}
        d["branching_ratio"] = model.branching_ratio
        return d
    return {k: conv(getattr(model, k)) for k in model.__dataclass_fields__}
