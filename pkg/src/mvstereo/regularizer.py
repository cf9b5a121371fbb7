"""Correlation-volume regularization and winner-take-all depth readout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .cameras import DepthHypotheses
from .costvolume import CorrelationVolume
from .nn import Module, kaiming_uniform, parameter

__all__ = [
    "ProbabilityVolume", "DepthEstimate", "VolumeRegularizer",
    "probability_volume", "winner_take_all",
]


@dataclass
class ProbabilityVolume:
    """Per-pixel distribution over depth hypotheses, shape (H', W', D)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionError(f"probability volume must be (H,W,D), got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class DepthEstimate:
    """Winner-take-all depth and confidence maps for one stage."""

    depth: np.ndarray
    confidence: np.ndarray
    stage: int


class Conv3dLayer(Module):
    def __init__(self, rng, c_in: int, c_out: int, act: bool = True):
        super().__init__()
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in, 3, 3, 3), c_in * 27))
        self.bias = parameter(np.zeros(c_out))
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv3d(x, self.weight, stride=1, padding=1)
        y = y + ad.reshape(self.bias, (-1, 1, 1, 1))
        return ad.relu(y) if self.act else y


def _subsample(x: Tensor) -> Tensor:
    return x[:, ::2, ::2, ::2]


def _crop_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return x[:, :shape[1], :shape[2], :shape[3]]


class VolumeRegularizer(Module):
    """Compact 3D U-Net over the (D, H', W') volume (channels 8-16-32).

    Two subsample/upsample levels with additive skips and trilinear
    upsampling. Volumes with fewer than 4 hypotheses cannot survive two
    halvings along depth, so they fall back to a plain three-layer stack.
    """

    def __init__(self, rng: np.random.Generator, depth_count: int):
        super().__init__()
        self.use_unet = depth_count >= 4
        if self.use_unet:
            self.c0 = Conv3dLayer(rng, 1, 8)
            self.c1 = Conv3dLayer(rng, 8, 16)
            self.c2a = Conv3dLayer(rng, 16, 32)
            self.c2b = Conv3dLayer(rng, 32, 32)
            self.u1 = Conv3dLayer(rng, 32, 16, act=False)
            self.u0 = Conv3dLayer(rng, 16, 8, act=False)
            self.out = Conv3dLayer(rng, 8, 1, act=False)
        else:
            self.p0 = Conv3dLayer(rng, 1, 8)
            self.p1 = Conv3dLayer(rng, 8, 8)
            self.out = Conv3dLayer(rng, 8, 1, act=False)

    def __call__(self, volume: CorrelationVolume | Tensor) -> Tensor:
        """Correlation volume (H', W', D) to logits of the same shape."""
        vol = volume.volume if isinstance(volume, CorrelationVolume) else vol_check(volume)
        h, w, d = vol.shape
        # Whiten the raw correlations: their scale grows with feature norms
        # (saliency weighting squares it) and would otherwise saturate the
        # depth softmax at initialization.
        vol = ad.reshape(ad.layer_norm(ad.reshape(vol, (1, h * w * d)), axis=1), (h, w, d))
        x = ad.reshape(ad.transpose(vol, (2, 0, 1)), (1, d, h, w))
        if self.use_unet:
            f0 = self.c0(x)
            f1 = self.c1(_subsample(f0))
            f2 = self.c2b(self.c2a(_subsample(f1)))
            up1 = _crop_to(ad.upsample_trilinear_2x(f2), f1.shape)
            s1 = ad.relu(self.u1(up1) + f1)
            up0 = _crop_to(ad.upsample_trilinear_2x(s1), f0.shape)
            s0 = ad.relu(self.u0(up0) + f0)
            logits = self.out(s0)
        else:
            logits = self.out(self.p1(self.p0(x)))
        return ad.transpose(ad.reshape(logits, (d, h, w)), (1, 2, 0))


def vol_check(t: Tensor) -> Tensor:
    if t.ndim != 3:
        raise DimensionError(f"volume must be (H,W,D), got {t.shape}")
    return t


def probability_volume(logits: Tensor) -> ProbabilityVolume:
    """Softmax over the depth axis of (H', W', D) logits."""
    return ProbabilityVolume(ad.softmax(vol_check(logits), axis=2))


def winner_take_all(prob: ProbabilityVolume | Tensor, hyps: DepthHypotheses,
                    stage: int | None = None) -> DepthEstimate:
    """Depth at the most probable hypothesis; ties go to the smaller index.

    Confidence is the probability mass of the 3-hypothesis window around
    the winner; at the ends of the volume the window shifts inward rather
    than shrinking.
    """
    p = prob.values.data if isinstance(prob, ProbabilityVolume) else np.asarray(
        prob.data if isinstance(prob, Tensor) else prob)
    h, w, d = p.shape
    idx = p.argmax(axis=2)
    if hyps.is_global:
        depth = hyps.values[idx]
    else:
        depth = np.take_along_axis(hyps.values, idx[..., None], axis=2)[..., 0]
    if d <= 3:
        conf = p.sum(axis=2)
    else:
        csum = np.concatenate([np.zeros((h, w, 1), dtype=p.dtype),
                               np.cumsum(p, axis=2)], axis=2)
        start = np.clip(idx - 1, 0, d - 3)
        lo = np.take_along_axis(csum, start[..., None], axis=2)[..., 0]
        hi = np.take_along_axis(csum, (start + 3)[..., None], axis=2)[..., 0]
        conf = hi - lo
    return DepthEstimate(depth=depth, confidence=np.clip(conf, 0.0, 1.0),
                         stage=hyps.stage if stage is None else stage)
