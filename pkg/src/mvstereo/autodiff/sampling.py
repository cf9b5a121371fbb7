"""Bilinear grid sampling and 2x linear upsampling.

grid_sample_2d is the workhorse behind homography warping and deformable
convolution: it is differentiable w.r.t. both the sampled image and the
sampling coordinates. Out-of-bounds samples contribute exact zeros and are
reported through a validity mask instead of being clamped, so border
pixels cannot fake matches downstream.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_op

__all__ = ["grid_sample_2d", "upsample_bilinear_2x", "upsample_trilinear_2x"]


def grid_sample_2d(input, grid) -> tuple[Tensor, np.ndarray]:
    """Sample ``input`` [C, H, W] at continuous pixel coordinates.

    ``grid`` has shape [..., H', W', 2] with (x, y) in pixel units of the
    input; arbitrary leading batch dimensions are allowed. Returns the
    sampled tensor of shape [..., C, H', W'] plus a boolean validity mask
    of shape [..., H', W']. Coordinates outside [0, W-1] x [0, H-1] yield
    zeros with mask False.
    """
    x_t = as_tensor(input)
    g_t = as_tensor(grid)
    if x_t.ndim != 3:
        raise DimensionError(f"grid_sample_2d input must be [C,H,W], got {x_t.shape}")
    if g_t.ndim < 3 or g_t.shape[-1] != 2:
        raise DimensionError(f"grid must be [...,H',W',2], got {g_t.shape}")
    c, h, w = x_t.shape
    if h < 2 or w < 2:
        raise DimensionError("grid_sample_2d input must be at least 2x2")

    gx = g_t.data[..., 0]
    gy = g_t.data[..., 1]
    valid = (gx >= 0) & (gx <= w - 1) & (gy >= 0) & (gy <= h - 1)
    vf = valid.astype(x_t.dtype)

    # Keep arithmetic finite for wild coordinates; invalid lanes are zeroed.
    # Non-finite coordinates (e.g. from diverged upstream values) index as
    # out-of-bounds instead of crashing the gather.
    cx = np.where(np.isfinite(gx), np.clip(gx, -1.0, float(w)), -1.0)
    cy = np.where(np.isfinite(gy), np.clip(gy, -1.0, float(h)), -1.0)
    x0 = np.clip(np.floor(cx), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(cy), 0, h - 2).astype(np.int64)
    wx = (cx - x0).astype(x_t.dtype)
    wy = (cy - y0).astype(x_t.dtype)

    flat = x_t.data.reshape(c, h * w)
    i00 = y0 * w + x0
    v00 = flat[:, i00]
    v01 = flat[:, i00 + 1]
    v10 = flat[:, i00 + w]
    v11 = flat[:, i00 + w + 1]

    w00 = (1 - wx) * (1 - wy) * vf
    w01 = wx * (1 - wy) * vf
    w10 = (1 - wx) * wy * vf
    w11 = wx * wy * vf
    raw = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11  # (C, ...batch..., H', W')
    out = np.ascontiguousarray(np.moveaxis(raw, 0, g_t.ndim - 3))

    def backward(g):
        gc = np.moveaxis(g, g_t.ndim - 3, 0)  # (C, ...)
        gx_in = gg = None
        if x_t.requires_grad:
            acc = np.zeros(c * h * w, dtype=x_t.dtype)
            base = (np.arange(c, dtype=np.int64) * (h * w)).reshape(
                (c,) + (1,) * i00.ndim)
            for offset, wgt in ((0, w00), (1, w01), (w, w10), (w + 1, w11)):
                idx = (base + (i00 + offset)).ravel()
                acc += np.bincount(idx, weights=(gc * wgt).ravel(),
                                   minlength=c * h * w).astype(x_t.dtype)
            gx_in = acc.reshape(c, h, w)
        if g_t.requires_grad:
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * vf
            dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * vf
            gg = np.stack([(gc * dx).sum(axis=0), (gc * dy).sum(axis=0)], axis=-1)
        return gx_in, gg

    return make_op("grid_sample_2d", out, (x_t, g_t), backward), valid


def _axis_weights(n: int, dtype):
    """Source indices and blend weights doubling an axis of extent n.

    Output sample i maps to source (i + 0.5)/2 - 0.5; edges replicate.
    """
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    i0 = np.clip(np.floor(src), 0, n - 1).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    wgt = np.clip(src - i0, 0.0, 1.0).astype(dtype)
    return i0, i1, wgt


def _upsample_2x(input, n_spatial: int, op_name: str):
    x = as_tensor(input)
    if x.ndim < n_spatial + 1:
        raise DimensionError(f"{op_name} expects at least {n_spatial + 1} dims, got {x.shape}")
    axes = tuple(range(x.ndim - n_spatial, x.ndim))
    plans = []
    data = x.data
    for axis in axes:
        i0, i1, wgt = _axis_weights(data.shape[axis], x.dtype)
        shape = [1] * data.ndim
        shape[axis] = wgt.size
        wb = wgt.reshape(shape)
        data = np.take(data, i0, axis=axis) * (1 - wb) + np.take(data, i1, axis=axis) * wb
        plans.append((axis, i0, i1, wb))

    def backward(g):
        for axis, i0, i1, wb in reversed(plans):
            n = i0.size // 2
            moved = np.moveaxis(g, axis, 0)
            acc = np.zeros((n,) + moved.shape[1:], dtype=g.dtype)
            wm = np.moveaxis(np.broadcast_to(wb, g.shape), axis, 0)
            np.add.at(acc, i0, moved * (1 - wm))
            np.add.at(acc, i1, moved * wm)
            g = np.moveaxis(acc, 0, axis)
        return (g,)

    return make_op(op_name, data, (x,), backward)


def upsample_bilinear_2x(input):
    """Double the last two (spatial) dimensions, e.g. [C,H,W] -> [C,2H,2W]."""
    return _upsample_2x(input, 2, "upsample_bilinear_2x")


def upsample_trilinear_2x(input):
    """Double the last three dimensions, e.g. [C,D,H,W] -> [C,2D,2H,2W]."""
    return _upsample_2x(input, 3, "upsample_trilinear_2x")
