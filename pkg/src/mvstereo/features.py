"""Feature pyramid, deformable receptive-field module, and the
transformed-feature pathway that carries coarse matcher outputs (and their
gradients) to the finer cascade stages."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nn import Conv2dLayer, Module, kaiming_uniform, parameter

__all__ = [
    "FeaturePyramidNet", "DeformableConv2d", "PathwayMerge",
    "deformable_conv2d", "PYRAMID_CHANNELS",
]

# Channel counts at scales 1/4, 1/2, 1.
PYRAMID_CHANNELS = (32, 16, 8)


def _downsample_2x(x: Tensor) -> Tensor:
    """Stride-2 subsampling of the last two axes (keeps extents exact halves)."""
    return x[:, ::2, ::2]


class FeaturePyramidNet(Module):
    """Strided encoder with top-down lateral merges; three output scales.

    Input images must have height and width divisible by 4. Outputs are
    (32, H/4, W/4), (16, H/2, W/2), (8, H, W).
    """

    def __init__(self, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        c4, c2, c1 = PYRAMID_CHANNELS
        self.enc0a = Conv2dLayer(rng, in_channels, c1, norm=True)
        self.enc0b = Conv2dLayer(rng, c1, c1, norm=True)
        self.enc1a = Conv2dLayer(rng, c1, c2, norm=True)   # applied after 2x subsample
        self.enc1b = Conv2dLayer(rng, c2, c2, norm=True)
        self.enc2a = Conv2dLayer(rng, c2, c4, norm=True)
        self.enc2b = Conv2dLayer(rng, c4, c4, norm=True)
        self.head2 = Conv2dLayer(rng, c4, c4, act=False)
        self.proj21 = Conv2dLayer(rng, c4, c2, kernel=1, act=False)
        self.lat1 = Conv2dLayer(rng, c2, c2, kernel=1, act=False)
        self.head1 = Conv2dLayer(rng, c2, c2, act=False)
        self.proj10 = Conv2dLayer(rng, c2, c1, kernel=1, act=False)
        self.lat0 = Conv2dLayer(rng, c1, c1, kernel=1, act=False)
        self.head0 = Conv2dLayer(rng, c1, c1, act=False)

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns features at (1/4, 1/2, 1) resolution, coarse first."""
        _, h, w = image.shape
        if h % 4 or w % 4:
            raise DimensionError(f"image extents must be multiples of 4, got {h}x{w}")
        e0 = self.enc0b(self.enc0a(image))
        e1 = self.enc1b(self.enc1a(_downsample_2x(e0)))
        e2 = self.enc2b(self.enc2a(_downsample_2x(e1)))
        f_quarter = self.head2(e2)
        m1 = self.lat1(e1) + self.proj21(ad.upsample_bilinear_2x(e2))
        f_half = self.head1(m1)
        m0 = self.lat0(e0) + self.proj10(ad.upsample_bilinear_2x(m1))
        f_full = self.head0(m0)
        return f_quarter, f_half, f_full


def deformable_conv2d(feat: Tensor, kernel: Tensor, offsets: Tensor) -> Tensor:
    """3x3 deformable convolution (v1: offsets only, no modulation).

    ``offsets`` has shape (18, H, W): per pixel, (dx, dy) for each of the
    nine taps in row-major tap order. Each tap samples the input
    bilinearly at (tap position + offset); samples falling outside the
    image contribute zero, matching zero padding of a standard conv.
    """
    c_out, c_in, kh, kw = kernel.shape
    if kh != 3 or kw != 3:
        raise DimensionError("deformable_conv2d supports 3x3 kernels")
    if feat.shape[0] != c_in:
        raise DimensionError(f"channel mismatch: {feat.shape[0]} vs kernel {c_in}")
    if offsets.shape[0] != 18:
        raise DimensionError(f"offsets must have 18 channels, got {offsets.shape[0]}")
    _, h, w = feat.shape

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    taps = [(ky - 1, kx - 1) for ky in range(3) for kx in range(3)]
    base = np.stack([np.stack([xs + dx, ys + dy], axis=-1) for dy, dx in taps])
    base_t = ad.tensor(base.astype(feat.dtype))               # (9, H, W, 2)

    off = ad.transpose(ad.reshape(offsets, (9, 2, h, w)), (0, 2, 3, 1))
    grid = base_t + off
    sampled, _ = ad.grid_sample_2d(feat, grid)                # (9, C_in, H, W)
    cols = ad.reshape(sampled, (9 * c_in, h * w))
    w_mat = ad.reshape(ad.transpose(kernel, (0, 2, 3, 1)), (c_out, 9 * c_in))
    return ad.reshape(ad.matmul(w_mat, cols), (c_out, h, w))


class DeformableConv2d(Module):
    """Adaptive receptive field: offsets predicted from the features.

    The offset predictor is initialized to exact zeros, so at construction
    this module equals a standard 3x3 convolution.
    """

    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        fan_in = channels * 9
        self.weight = parameter(kaiming_uniform(rng, (channels, channels, 3, 3), fan_in))
        self.bias = parameter(np.zeros(channels))
        self.offset_weight = parameter(np.zeros((18, channels, 3, 3)))
        self.offset_bias = parameter(np.zeros(18))

    def predict_offsets(self, feat: Tensor) -> Tensor:
        off = ad.conv2d(feat, self.offset_weight, stride=1, padding=1)
        return off + ad.reshape(self.offset_bias, (-1, 1, 1))

    def __call__(self, feat: Tensor) -> Tensor:
        out = deformable_conv2d(feat, self.weight, self.predict_offsets(feat))
        return out + ad.reshape(self.bias, (-1, 1, 1))


class PathwayMerge(Module):
    """Upsample coarse transformed features 2x, project channels, add to finer."""

    def __init__(self, rng: np.random.Generator, coarse_channels: int, fine_channels: int):
        super().__init__()
        self.proj = Conv2dLayer(rng, coarse_channels, fine_channels, kernel=1, act=False)

    def __call__(self, transformed_coarse: Tensor, raw_finer: Tensor) -> Tensor:
        up = ad.upsample_bilinear_2x(transformed_coarse)
        if up.shape[1:] != raw_finer.shape[1:]:
            raise DimensionError(
                f"pathway spatial mismatch: upsampled {up.shape} vs finer {raw_finer.shape}")
        return raw_finer + self.proj(up)
