"""Full network: pyramid, receptive-field adaptation, matching transformer,
pathway, and the coarse-to-fine plane-sweep cascade."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .cameras import (
    CameraView,
    DepthHypotheses,
    refine_hypotheses,
    sample_hypotheses_initial,
    scale_camera,
)
from .costvolume import aggregate_correlation, pairwise_correlation, warp_source_features
from .features import PYRAMID_CHANNELS, DeformableConv2d, FeaturePyramidNet, PathwayMerge
from .matcher import MatchingTransformer
from .nn import Module
from .regularizer import (
    DepthEstimate,
    ProbabilityVolume,
    VolumeRegularizer,
    probability_volume,
    winner_take_all,
)

__all__ = ["CascadeConfig", "ModelConfig", "StageOutput", "StereoModel", "upsample2x_np"]

STAGE_SCALES = (0.25, 0.5, 1.0)


@dataclass(frozen=True)
class CascadeConfig:
    """Per-stage hypothesis counts, interval decays, and loss weights."""

    counts: tuple[int, ...] = (16, 8, 4)
    decays: tuple[float, ...] = (1.0, 0.25, 0.5)
    weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    d_min: float = 1.2
    d_max: float = 3.3

    def __post_init__(self):
        if not (len(self.counts) == len(self.decays) == len(self.weights) == 3):
            raise ContractError("cascade config needs exactly three stages")
        if any(c2 > c1 for c1, c2 in zip(self.counts, self.counts[1:])):
            raise ContractError("hypothesis counts must be non-increasing")
        if any(not (0 < d <= 1) for d in self.decays):
            raise ContractError("interval decays must lie in (0, 1]")
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ContractError(f"bad depth range [{self.d_min}, {self.d_max}]")


@dataclass(frozen=True)
class ModelConfig:
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    n_blocks: int = 4
    n_heads: int = 8
    attention_normalized: bool = True
    use_pathway: bool = True
    normalize_correlation: bool = False


@dataclass
class StageOutput:
    """Everything one cascade stage produces."""

    stage: int
    prob: ProbabilityVolume
    hyps: DepthHypotheses
    estimate: DepthEstimate


def upsample2x_np(arr: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling of a plain (H, W) array (edge replicating)."""
    from .autodiff.sampling import _axis_weights
    out = arr
    for axis in (0, 1):
        i0, i1, wgt = _axis_weights(out.shape[axis], np.float64)
        shape = [1, 1]
        shape[axis] = wgt.size
        wb = wgt.reshape(shape)
        out = (np.take(out, i0, axis=axis) * (1 - wb)
               + np.take(out, i1, axis=axis) * wb)
    return out


class StereoModel(Module):
    """Depth from one reference view and its neighbors, three stages deep."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c4, c2, c1 = PYRAMID_CHANNELS
        self.fpn = FeaturePyramidNet(rng)
        self.deform_quarter = DeformableConv2d(rng, c4)
        self.deform_half = DeformableConv2d(rng, c2)
        self.deform_full = DeformableConv2d(rng, c1)
        self.matcher = MatchingTransformer(
            rng, c4, n_blocks=config.n_blocks, n_heads=config.n_heads,
            normalized=config.attention_normalized)
        self.path_half = PathwayMerge(rng, c4, c2)
        self.path_full = PathwayMerge(rng, c2, c1)
        self.reg1 = VolumeRegularizer(rng, config.cascade.counts[0])
        self.reg2 = VolumeRegularizer(rng, config.cascade.counts[1])
        self.reg3 = VolumeRegularizer(rng, config.cascade.counts[2])

    # -- feature path ---------------------------------------------------------
    def extract_features(self, views: list[CameraView]) -> list[tuple[Tensor, ...]]:
        """Pyramid + receptive-field adaptation for every view."""
        out = []
        for view in views:
            img = ad.tensor(np.asarray(view.image, dtype=ad.get_default_dtype()))
            f4, f2, f1 = self.fpn(img)
            out.append((self.deform_quarter(f4), self.deform_half(f2), self.deform_full(f1)))
        return out

    def _stage_volume(self, feats: list[Tensor], hyps: DepthHypotheses,
                      views: list[CameraView], scale: float,
                      regularizer: VolumeRegularizer) -> ProbabilityVolume:
        ref_view = views[0]
        ref_intr = scale_camera(ref_view.intrinsics, scale)
        pairs = []
        for feat, view in zip(feats[1:], views[1:]):
            warped, mask = warp_source_features(
                feat, hyps, ref_intr, ref_view.extrinsics,
                scale_camera(view.intrinsics, scale), view.extrinsics)
            pairs.append(pairwise_correlation(
                feats[0], warped, mask,
                normalize_channels=self.config.normalize_correlation))
        logits = regularizer(aggregate_correlation(pairs))
        return probability_volume(logits)

    def __call__(self, views: list[CameraView]) -> list[StageOutput]:
        """Run the cascade; views[0] is the reference."""
        if len(views) < 2:
            raise ContractError("cascade needs a reference plus at least one source view")
        cfg = self.config.cascade
        d_min, d_max = cfg.d_min, cfg.d_max

        feats = self.extract_features(views)
        quarter = [f[0] for f in feats]
        transformed = self.matcher(quarter)

        outputs: list[StageOutput] = []

        # Stage 1: global uniform sweep on the transformed quarter-scale features.
        hyps = sample_hypotheses_initial(d_min, d_max, cfg.counts[0], stage=1)
        prob = self._stage_volume(transformed, hyps, views, STAGE_SCALES[0], self.reg1)
        est = winner_take_all(prob, hyps)
        outputs.append(StageOutput(1, prob, hyps, est))

        # Stages 2-3: pathway-merged features, per-pixel refined hypotheses.
        carried = transformed
        finer_feats = [[f[1] for f in feats], [f[2] for f in feats]]
        merges = [self.path_half, self.path_full]
        regs = [self.reg2, self.reg3]
        interval = hyps.interval
        for s in (1, 2):
            if self.config.use_pathway:
                stage_feats = [merges[s - 1](c, r) for c, r in zip(carried, finer_feats[s - 1])]
            else:
                stage_feats = finer_feats[s - 1]
            prev_depth = upsample2x_np(outputs[-1].estimate.depth)
            hyps = refine_hypotheses(prev_depth, cfg.counts[s], cfg.decays[s],
                                     interval, d_min, d_max, stage=s + 1)
            interval = hyps.interval
            prob = self._stage_volume(stage_feats, hyps, views, STAGE_SCALES[s], regs[s - 1])
            est = winner_take_all(prob, hyps)
            outputs.append(StageOutput(s + 1, prob, hyps, est))
            carried = stage_feats
        return outputs
