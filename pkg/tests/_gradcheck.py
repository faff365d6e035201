"""Central finite-difference checker shared by the model tests and the
acceptance suite."""
import numpy as np

from atrpp.data import EventSequence, Record, TimeSeries
from atrpp.model import (Architecture, AttentionConfig, LossConfig, forward, gradients, init_params,
                         sequence_loss)

STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def random_instance(rng, Z, H, N, with_series=True):
    F = 2 if with_series else 0
    arch = Architecture(Z=Z, F=F, E=3, H_event=H, H_series=H, H_syn=H)
    params = init_params(arch, rng, scale=0.5)
    params.tensors["b_s"] = np.asarray(rng.normal())
    times = np.cumsum(rng.exponential(1.0, N))
    dims = rng.integers(0, Z, N)
    series = None
    if with_series:
        step = 0.7
        series = TimeSeries(0.0, step, rng.normal(size=(int(times[-1] / step) + 2, F)))
    rec = Record("g", EventSequence.from_arrays(dims, times, Z), series)
    att = AttentionConfig(float(rng.choice([0.0, 0.05, 0.2])), None if rng.uniform() < 0.5 else 2)
    b = rng.uniform(0.5, 2.0, Z)
    loss = LossConfig(float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.2, 1.5)))
    return params, rec, att, b, loss


def _kinks(trace):
    return trace.cache["mask"].tobytes() + trace.pred_dims.tobytes()


def check(params, rec, att, b, loss, floor=ABS_FLOOR):
    """Compare every analytic gradient entry with central differences.

    Returns ``(worst relative error, number of entries checked, crossed)``.
    Entries whose absolute difference is within the floor count as exact.
    ``crossed`` is True when a
    perturbation moved a threshold or argmax kink, making the instance
    unsuitable for a derivative check.
    """
    tr = forward(rec, params, att)
    grads = gradients(tr, b, loss, params)
    ref = _kinks(tr)
    worst = 0.0
    n = 0
    for name, value in params.tensors.items():
        flat = value.reshape(-1) if value.ndim else None
        for k in range(value.size):
            if flat is None:
                old = float(value)
                params.tensors[name] = np.asarray(old + STEP)
                tp = forward(rec, params, att)
                params.tensors[name] = np.asarray(old - STEP)
                tm = forward(rec, params, att)
                params.tensors[name] = np.asarray(old)
                an = float(grads[name])
            else:
                old = flat[k]
                flat[k] = old + STEP
                tp = forward(rec, params, att)
                flat[k] = old - STEP
                tm = forward(rec, params, att)
                flat[k] = old
                an = float(grads[name].reshape(-1)[k])
            if _kinks(tp) != ref or _kinks(tm) != ref:
                return worst, n, True
            fd = (sequence_loss(tp, b, loss) - sequence_loss(tm, b, loss)) / (2 * STEP)
            n += 1
            diff = abs(fd - an)
            if diff > floor:
                worst = max(worst, diff / max(abs(fd), abs(an)))
    return worst, n, False


def checked_instance(rng, Z, H, N, with_series=True):
    """Draw instances until one has no kink within the finite-difference step."""
    while True:
        inst = random_instance(rng, Z, H, N, with_series)
        worst, n, crossed = check(*inst)
        if not crossed:
            return worst, n, inst
