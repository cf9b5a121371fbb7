"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["gradcheck", "max_relative_error"]


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       atol: float = 1e-7) -> float:
    """Worst-case |analytic - numeric| / max(|analytic|, |numeric|, atol-floor)."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max((diff - atol).clip(min=0.0) / scale))


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
              h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7,
              max_entries: int | None = 24, rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    ``fn`` must return a scalar tensor. Each requires-grad input is probed
    either exhaustively or at ``max_entries`` randomly chosen coordinates.
    Returns the worst relative error seen and raises AssertionError if it
    exceeds ``rtol``. Run under 64-bit precision; 32-bit inputs have too
    little headroom for h = 1e-5.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    if loss.size != 1:
        raise ValueError("gradcheck target must be scalar")
    loss.backward()

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "requires-grad input received no gradient"
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is None or n <= max_entries:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_entries, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(*inputs).item()
            flat[i] = orig - h
            f_minus = fn(*inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(t.grad.reshape(-1)[i])
            err = max_relative_error(np.asarray(analytic), np.asarray(numeric), atol=atol)
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch at flat index {i} of tensor shape {t.shape}: "
                    f"analytic={analytic:.8g} numeric={numeric:.8g} rel_err={err:.3g}")
    return worst
