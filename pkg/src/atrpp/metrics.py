"""Evaluation metrics for next-event prediction and infectivity recovery."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PredictionSet:
    """Per test step: true and predicted dimension, ranked dimensions, true and
    predicted gap. Time-only models leave the dimension fields empty;
    dimension-only models leave ``pred_gaps`` empty."""

    true_dims: list = field(default_factory=list)
    pred_dims: list = field(default_factory=list)
    ranked: list = field(default_factory=list)
    true_gaps: list = field(default_factory=list)
    pred_gaps: list = field(default_factory=list)

    def add(self, true_dim, true_gap, pred_dim=None, ranking=None, pred_gap=None):
        self.true_dims.append(int(true_dim))
        self.true_gaps.append(float(true_gap))
        if pred_dim is not None:
            self.pred_dims.append(int(pred_dim))
        if ranking is not None:
            ranking = [int(d) for d in ranking]
            if len(set(ranking)) != len(ranking):
                raise ValueError("ranked list repeats a dimension")
            self.ranked.append(ranking)
        if pred_gap is not None:
            self.pred_gaps.append(float(pred_gap))

    def __len__(self):
        return len(self.true_dims)


def confusion_matrix(true_dims, pred_dims, num_dims: int) -> np.ndarray:
    """Counts with rows = true dimension, columns = predicted dimension."""
    true_dims = np.asarray(true_dims, dtype=np.int64)
    pred_dims = np.asarray(pred_dims, dtype=np.int64)
    if true_dims.size == 0 or true_dims.shape != pred_dims.shape:
        raise ValueError("need one prediction per truth and at least one prediction")
    cm = np.zeros((num_dims, num_dims), dtype=np.int64)
    np.add.at(cm, (true_dims, pred_dims), 1)
    return cm


def precision_recall_f1(confusion) -> dict:
    """Per-class precision, recall and F1 plus their macro averages over
    classes with at least one true instance."""
    cm = np.asarray(confusion, dtype=float)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = actual > 0
    return {
        "precision": precision, "recall": recall, "f1": f1,
        "macro_precision": float(precision[present].mean()),
        "macro_recall": float(recall[present].mean()),
        "macro_f1": float(f1[present].mean()),
    }


def mae(true_gaps, pred_gaps) -> float:
    a = np.asarray(true_gaps, dtype=float)
    b = np.asarray(pred_gaps, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("mae needs two nonempty vectors of equal length")
    return float(np.mean(np.abs(a - b)))


def accuracy_at_k(ranked, truths, k: int) -> float:
    """Fraction of steps whose truth is among the first ``k`` ranked dimensions."""
    if len(ranked) != len(truths) or not truths:
        raise ValueError("need one ranking per truth")
    hits = sum(int(t) in list(r[:k]) for r, t in zip(ranked, truths))
    return hits / len(truths)


def kendall_tau(x, y) -> float:
    """Tie-corrected Kendall tau-b; 0 when either vector is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n != y.size:
        raise ValueError("kendall_tau needs vectors of equal length")
    if n < 2:
        raise ValueError("kendall_tau needs at least 2 observations")
    iu = np.triu_indices(n, 1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = n * (n - 1) / 2
    tx = np.count_nonzero(dx == 0)
    ty = np.count_nonzero(dy == 0)
    if tx == n0 or ty == n0:
        return 0.0
    s = float(np.sum(dx * dy))
    return s / math.sqrt((n0 - tx) * (n0 - ty))


def rank_corr(A_true, A_est) -> float:
    """Row-averaged Kendall tau-b between true and estimated infectivity."""
    A_true = np.asarray(A_true, dtype=float)
    A_est = np.asarray(A_est, dtype=float)
    if A_true.shape != A_est.shape or A_true.ndim != 2 or A_true.shape[1] < 2:
        raise ValueError("rank_corr needs two matrices of equal shape with >= 2 columns")
    return float(np.mean([kendall_tau(a, b) for a, b in zip(A_true, A_est)]))


def rel_err(A_true, A_est, normalize: bool = False) -> float:
    """Mean ``|a* - a| / a`` over entries with positive ground truth.

    With ``normalize`` both matrices are first divided by their own maximum.
    """
    A_true = np.asarray(A_true, dtype=float)
    A_est = np.asarray(A_est, dtype=float)
    if A_true.shape != A_est.shape:
        raise ValueError("rel_err needs matrices of equal shape")
    pos = A_true > 0
    if not np.any(pos):
        raise ValueError("no positive ground-truth entries")
    if normalize:
        A_true = A_true / A_true.max()
        m = A_est.max()
        A_est = A_est / m if m > 0 else A_est
    return float(np.mean(np.abs(A_est[pos] - A_true[pos]) / A_true[pos]))


def permutation_null(A_true, A_est, num_perm: int = 100, seed: int = 0) -> np.ndarray:
    """RankCorr of ``A_est`` with its entries randomly permuted, ``num_perm`` times."""
    rng = np.random.default_rng(seed)
    A_est = np.asarray(A_est, dtype=float)
    flat = A_est.ravel()
    return np.array([rank_corr(A_true, rng.permutation(flat).reshape(A_est.shape))
                     for _ in range(num_perm)])


def report(preds: PredictionSet, num_dims: int, ks=(1, 3, 5)) -> dict:
    """Flat metric dictionary; fields a model cannot produce are ``None``."""
    out: dict = {"steps": len(preds)}
    if preds.pred_dims:
        cm = confusion_matrix(preds.true_dims, preds.pred_dims, num_dims)
        prf = precision_recall_f1(cm)
        out.update(accuracy=float(np.trace(cm) / cm.sum()), precision=prf["macro_precision"],
                   recall=prf["macro_recall"], f1=prf["macro_f1"], confusion=cm.tolist())
    else:
        out.update(accuracy=None, precision=None, recall=None, f1=None, confusion=None)
    for k in ks:
        out[f"acc@{k}"] = accuracy_at_k(preds.ranked, preds.true_dims, k) if preds.ranked else None
    out["mae"] = mae(preds.true_gaps, preds.pred_gaps) if preds.pred_gaps else None
    return out
