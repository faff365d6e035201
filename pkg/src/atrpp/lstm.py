"""Peephole LSTM with hand-written backpropagation through time.

Gate equations (sigma = logistic):

    i = sigma(W_i x + U_i h_prev + V_i * c_prev + b_i)
    f = sigma(W_f x + U_f h_prev + V_f * c_prev + b_f)
    c = f * c_prev + i * tanh(W_c x + U_c h_prev + b_c)
    o = sigma(W_o x + U_o h_prev + V_o * c + b_o)
    h = o * tanh(c)

Peepholes ``V_*`` are diagonal and stored as vectors.
"""
from __future__ import annotations

import numpy as np

GATES = ("i", "f", "o")
PARAM_NAMES = ("W_i", "U_i", "V_i", "b_i",
               "W_f", "U_f", "V_f", "b_f",
               "W_c", "U_c", "b_c",
               "W_o", "U_o", "V_o", "b_o")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def param_shapes(D: int, H: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for g in ("i", "f", "c", "o"):
        shapes[f"W_{g}"] = (H, D)
        shapes[f"U_{g}"] = (H, H)
        if g != "c":
            shapes[f"V_{g}"] = (H,)
        shapes[f"b_{g}"] = (H,)
    return {k: shapes[k] for k in PARAM_NAMES}


def init_params(D: int, H: int, rng: np.random.Generator, scale: float = 0.1,
                forget_bias: float = 1.0) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in param_shapes(D, H).items():
        if name.startswith("b_"):
            out[name] = np.full(shape, forget_bias if name == "b_f" else 0.0)
        else:
            out[name] = rng.uniform(-scale, scale, size=shape)
    return out


def _check(x, h_prev, c_prev, p):
    H, D = p["W_i"].shape
    if x.shape != (D,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ValueError(f"shape mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}; "
                         f"expected ({D},), ({H},), ({H},)")
    for name, shape in param_shapes(D, H).items():
        if p[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {p[name].shape}, expected {shape}")


def lstm_step(x, h_prev, c_prev, p):
    """One LSTM step; returns ``(h, c)``."""
    x, h_prev, c_prev = (np.asarray(a, dtype=float) for a in (x, h_prev, c_prev))
    _check(x, h_prev, c_prev, p)
    h, c, _ = _step(x, h_prev, c_prev, p)
    return h, c


def _step(x, h_prev, c_prev, p):
    i = sigmoid(p["W_i"] @ x + p["U_i"] @ h_prev + p["V_i"] * c_prev + p["b_i"])
    f = sigmoid(p["W_f"] @ x + p["U_f"] @ h_prev + p["V_f"] * c_prev + p["b_f"])
    g = np.tanh(p["W_c"] @ x + p["U_c"] @ h_prev + p["b_c"])
    c = f * c_prev + i * g
    o = sigmoid(p["W_o"] @ x + p["U_o"] @ h_prev + p["V_o"] * c + p["b_o"])
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, g, o, tc)


def _stack(p):
    W = np.concatenate([p["W_i"], p["W_f"], p["W_c"], p["W_o"]])
    U = np.concatenate([p["U_i"], p["U_f"], p["U_c"], p["U_o"]])
    b = np.concatenate([p["b_i"], p["b_f"], p["b_c"], p["b_o"]])
    return W, U, b


def lstm_forward(X: np.ndarray, p, h0=None, c0=None):
    """Run over the rows of ``X`` (T x D). Returns hidden states (T x H) and a
    cache for :func:`lstm_backward`."""
    X = np.asarray(X, dtype=float)
    H = p["b_i"].shape[0]
    T = X.shape[0]
    h = np.zeros(H) if h0 is None else h0
    c = np.zeros(H) if c0 is None else c0
    if T:
        _check(X[0], h, c, p)
    W, U, b = _stack(p)
    XW = X @ W.T + b
    V_i, V_f, V_o = p["V_i"], p["V_f"], p["V_o"]
    hs = np.empty((T, H))
    cs = np.empty((T + 1, H))
    gates = np.empty((T, 5, H))
    h_prev = np.empty((T, H))
    cs[0] = c
    for t in range(T):
        h_prev[t] = h
        a = XW[t] + U @ h
        i = sigmoid(a[:H] + V_i * c)
        f = sigmoid(a[H:2 * H] + V_f * c)
        g = np.tanh(a[2 * H:3 * H])
        c = f * c + i * g
        o = sigmoid(a[3 * H:] + V_o * c)
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        cs[t + 1] = c
        gates[t, 0], gates[t, 1], gates[t, 2], gates[t, 3], gates[t, 4] = i, f, g, o, tc
    return hs, (X, h_prev, cs, gates)


def lstm_backward(dH: np.ndarray, cache, p):
    """Backpropagate ``dL/dh_t`` for every step. Returns ``(grads, dX)``."""
    X, h_prev, cs, gates = cache
    T, H = dH.shape
    W, U, _ = _stack(p)
    UT = U.T
    V_i, V_f, V_o = p["V_i"], p["V_f"], p["V_o"]
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    da = np.zeros((T, 4 * H))  # pre-activation gradients, gate order i, f, c, o
    for t in range(T - 1, -1, -1):
        i, f, g, o, tc = gates[t]
        dh = dH[t] + dh_next
        da_o = dh * tc * o * (1.0 - o)
        dc = dc_next + dh * o * (1.0 - tc * tc) + da_o * V_o
        da_f = dc * cs[t] * f * (1.0 - f)
        da_i = dc * g * i * (1.0 - i)
        da_g = dc * i * (1.0 - g * g)
        row = da[t]
        row[:H], row[H:2 * H], row[2 * H:3 * H], row[3 * H:] = da_i, da_f, da_g, da_o
        dc_next = dc * f + da_i * V_i + da_f * V_f
        dh_next = UT @ row
    dW = da.T @ X
    dU = da.T @ h_prev
    db = da.sum(axis=0)
    grads = {}
    for k, g in enumerate(("i", "f", "c", "o")):
        sl = slice(k * H, (k + 1) * H)
        grads[f"W_{g}"] = dW[sl]
        grads[f"U_{g}"] = dU[sl]
        grads[f"b_{g}"] = db[sl]
    grads["V_i"] = (da[:, :H] * cs[:-1]).sum(axis=0)
    grads["V_f"] = (da[:, H:2 * H] * cs[:-1]).sum(axis=0)
    grads["V_o"] = (da[:, 3 * H:] * cs[1:]).sum(axis=0)
    return {k: grads[k] for k in PARAM_NAMES}, da @ W
