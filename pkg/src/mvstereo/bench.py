"""Runtime scaling benchmark: factored linear attention vs quadratic softmax."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .matcher import linear_attention, softmax_attention

__all__ = ["run_attention_benchmark", "fit_loglog_slope"]


def fit_loglog_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(length)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def _time_best(fn, trials: int) -> float:
    best = np.inf
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_attention_benchmark(lengths=(256, 1024, 4096, 16384), channels: int = 16,
                            n_heads: int = 1, trials: int = 3, seed: int = 0
                            ) -> dict:
    """Measure both attention paths at each length (32-bit buffers).

    Returns rows [(kind, length, seconds)] plus the fitted log-log slopes.
    The quadratic baseline is row-chunked so the score matrix never holds
    more than a slab at a time.
    """
    rng = np.random.default_rng(seed)
    rows = []
    lin_times = []
    soft_times = []
    with ad.precision("float32"), ad.no_grad():
        for length in lengths:
            q = rng.standard_normal((length, channels)).astype(np.float32)
            k = rng.standard_normal((length, channels)).astype(np.float32)
            v = rng.standard_normal((length, channels)).astype(np.float32)
            qt, kt, vt = (ad.tensor(a) for a in (q, k, v))
            t_lin = _time_best(
                lambda: linear_attention(qt, kt, vt, n_heads=n_heads), trials)
            t_soft = _time_best(lambda: softmax_attention(q, k, v), trials)
            rows.append(("linear", length, t_lin))
            rows.append(("softmax", length, t_soft))
            lin_times.append(t_lin)
            soft_times.append(t_soft)
    return {
        "rows": rows,
        "linear_slope": fit_loglog_slope(lengths, lin_times),
        "softmax_slope": fit_loglog_slope(lengths, soft_times),
        "lengths": tuple(lengths),
    }
