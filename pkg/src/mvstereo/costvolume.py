"""Plane-sweep correlation volumes.

Source features are warped to the reference view at every depth
hypothesis, correlated channel-wise against the reference feature, and the
per-view volumes are aggregated with pixel-wise saliency weights (each
view's maximum correlation over depth). Out-of-view warps contribute exact
zeros and are excluded from the saliency maximum, so image borders cannot
dominate the aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .cameras import DepthHypotheses, Extrinsics, Intrinsics, build_warp_grid

__all__ = [
    "PairCorrelation", "CorrelationVolume",
    "warp_source_features", "pairwise_correlation", "aggregate_correlation",
]

_MASK_FILL = 1e9  # pushed below every real correlation before the saliency max


@dataclass
class PairCorrelation:
    """One source view's correlation volume (H', W', D) plus validity."""

    volume: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if self.volume.shape != self.mask.shape:
            raise DimensionError(
                f"correlation {self.volume.shape} and mask {self.mask.shape} must match")


@dataclass
class CorrelationVolume:
    """Aggregated single-channel volume of shape (H', W', D)."""

    volume: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.volume.shape


def warp_source_features(src_feat: Tensor, hyps,
                         ref_intr: Intrinsics, ref_extr: Extrinsics,
                         src_intr: Intrinsics, src_extr: Extrinsics
                         ) -> tuple[Tensor, np.ndarray]:
    """Sample a source feature map at every depth hypothesis.

    Returns warped features (D, F, H', W') and a validity mask (D, H', W')
    that is False where the warp leaves the source image or lands behind
    the source camera. ``hyps`` may be DepthHypotheses or a (D, H', W')
    tensor of per-pixel depths (differentiable).
    """
    _, h, w = src_feat.shape  # feature maps share the stage resolution
    if isinstance(hyps, DepthHypotheses):
        height, width = h, w
    else:
        height, width = hyps.shape[1:]
    grid, in_front = build_warp_grid(hyps, ref_intr, ref_extr, src_intr, src_extr,
                                     height, width)
    warped, inside = ad.grid_sample_2d(src_feat, grid)
    return warped, in_front & inside


def pairwise_correlation(ref_feat: Tensor, warped: Tensor,
                         mask: np.ndarray | None = None,
                         normalize_channels: bool = False) -> PairCorrelation:
    """Inner product over channels: c at (p, d) = <F0(p), warped(d, p)>.

    ``ref_feat`` is (F, H', W'); ``warped`` is (D, F, H', W'). Masked
    entries are exact zeros. ``normalize_channels`` divides by F (off by
    default: the plain inner product is the reference behavior).
    """
    if ref_feat.ndim != 3 or warped.ndim != 4 or ref_feat.shape[0] != warped.shape[1]:
        raise DimensionError(
            f"channel mismatch: reference {ref_feat.shape} vs warped {warped.shape}")
    d = warped.shape[0]
    corr = ad.sum_(ad.reshape(ref_feat, (1,) + ref_feat.shape) * warped, axis=1)
    if normalize_channels:
        corr = corr * (1.0 / ref_feat.shape[0])
    corr = ad.transpose(corr, (1, 2, 0))                        # (H', W', D)
    if mask is None:
        mask = np.ones(corr.shape, dtype=bool)
    else:
        mask = np.ascontiguousarray(np.moveaxis(mask, 0, -1))
        corr = corr * ad.tensor(mask.astype(corr.dtype))
    return PairCorrelation(volume=corr, mask=mask)


def aggregate_correlation(pairs: list[PairCorrelation],
                          ) -> CorrelationVolume:
    """Saliency-weighted sum over views.

    Each view's pixel weight is its maximum correlation over the depth
    axis (invalid entries excluded; a fully masked pixel gets weight 0);
    the weight multiplies that view's whole correlation column. The max
    participates in differentiation through its arg element.
    """
    if not pairs:
        raise ContractError("aggregate_correlation needs at least one source view")
    total = None
    for pc in pairs:
        m = pc.mask.astype(pc.volume.dtype)
        masked = pc.volume * m - _MASK_FILL * (1.0 - m)
        w, _ = ad.max_with_argmax(masked, axis=2)               # (H', W')
        any_valid = pc.mask.any(axis=2).astype(pc.volume.dtype)
        w = w * any_valid
        term = ad.reshape(w, w.shape + (1,)) * pc.volume
        total = term if total is None else total + term
    return CorrelationVolume(volume=total)
