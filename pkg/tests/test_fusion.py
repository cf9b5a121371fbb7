"""Geometric consistency filtering and point-cloud fusion."""

import numpy as np
import pytest

from mvstereo.cameras import backproject_pixels
from mvstereo.fusion import (
    ConsistencyRecord,
    FusionThresholds,
    PointCloud,
    dynamic_filter,
    fuse_point_cloud,
    geometric_check,
)
from mvstereo.scene import SceneSpec, covisible_mask, render_synthetic_scene


@pytest.fixture(scope="module")
def scene():
    # Moderate baseline keeps depth-interpolation curvature well below the
    # documented error bounds.
    return render_synthetic_scene(SceneSpec(baseline=0.3), seed=17)


@pytest.fixture(scope="module")
def gt_records(scene):
    ref = scene.views[0]
    return [geometric_check(ref.depth, src.depth, ref, src)
            for src in scene.views[1:]]


class TestGeometricCheck:
    def test_gt_depths_near_zero_errors(self, scene, gt_records):
        # Tilted plane: the residual is bilinear interpolation curvature of
        # the source depth field at continuous lookup coordinates.
        for rec in gt_records:
            cov = rec.covisible
            assert cov.mean() > 0.4
            assert rec.pixel_error[cov].max() < 1e-4
            assert rec.relative_error[cov].max() < 1e-5

    def test_gt_depths_exact_when_depth_field_is_linear(self):
        """Constant-depth scene: the round trip is exact to float precision."""
        spec = SceneSpec(plane_tilt=(0.0, 0.0), jitter=0.0, parallel_rig=True,
                         baseline=0.3)
        sc = render_synthetic_scene(spec, seed=2)
        ref = sc.views[0]
        for src in sc.views[1:]:
            rec = geometric_check(ref.depth, src.depth, ref, src)
            cov = rec.covisible
            assert rec.pixel_error[cov].max() < 1e-9
            assert rec.relative_error[cov].max() < 1e-12

    def test_identical_cameras_and_depths_zero_error(self, scene):
        ref = scene.views[0]
        rec = geometric_check(ref.depth, ref.depth, ref, ref)
        assert rec.covisible.all()
        assert rec.pixel_error.max() < 1e-9
        assert rec.relative_error.max() < 1e-12

    def test_scaled_source_depth_gives_matching_relative_error(self):
        """Source depths scaled by 1.2 produce e_rel near 0.2 head-on."""
        spec = SceneSpec(plane_tilt=(0.0, 0.0), jitter=0.0, parallel_rig=True,
                         baseline=0.3)
        sc = render_synthetic_scene(spec, seed=3)
        ref, src = sc.views[0], sc.views[1]
        rec = geometric_check(ref.depth, src.depth * 1.2, ref, src)
        cov = rec.covisible
        center = np.zeros_like(cov)
        center[16:-16, 16:-16] = True
        vals = rec.relative_error[cov & center]
        assert np.median(vals) == pytest.approx(0.2, abs=0.02)

    def test_non_covisible_marked(self, scene):
        ref, src = scene.views[0], scene.views[1]
        rec = geometric_check(ref.depth, src.depth, ref, src)
        assert (~rec.covisible).sum() > 0
        assert np.isinf(rec.pixel_error[~rec.covisible]).all()


class TestDynamicFilter:
    def _record(self, e_pix, e_rel, shape=(2, 2)):
        return ConsistencyRecord(
            pixel_error=np.full(shape, e_pix),
            relative_error=np.full(shape, e_rel),
            covisible=np.ones(shape, bool),
            src_depth=np.ones(shape),
            src_points=np.zeros(shape + (3,)))

    def test_all_views_pass_strictest(self):
        records = [self._record(0.1, 0.001) for _ in range(2)]
        valid, support = dynamic_filter(records, np.ones((2, 2)))
        assert valid.all()
        assert support.all()

    def test_borderline_errors_need_a_third_view(self):
        """Two views at 1.5x the base thresholds fail the 2-view level but
        pass at the 3-view level when a third view also qualifies."""
        t = FusionThresholds()
        two = [self._record(1.5 * t.pixel, 1.5 * t.relative) for _ in range(2)]
        valid, _ = dynamic_filter(two, np.ones((2, 2)), t)
        assert not valid.any()
        three = two + [self._record(1.5 * t.pixel, 1.5 * t.relative)]
        valid3, _ = dynamic_filter(three, np.ones((2, 2)), t)
        assert valid3.all()

    def test_zero_confidence_invalid_regardless(self):
        records = [self._record(0.0, 0.0) for _ in range(3)]
        valid, _ = dynamic_filter(records, np.zeros((2, 2)))
        assert not valid.any()

    def test_no_sources_gives_empty_validity(self):
        valid, support = dynamic_filter([], np.ones((3, 3)))
        assert valid.shape == (3, 3) and not valid.any()
        assert support.shape == (0, 3, 3)


class TestFusion:
    def test_gt_inputs_validate_covisible_confident_pixels(self, scene, gt_records):
        ref = scene.views[0]
        conf = np.ones(ref.depth.shape)
        valid, _ = dynamic_filter(gt_records, conf)
        covis_all = np.logical_and.reduce([r.covisible for r in gt_records])
        assert (valid & covis_all).sum() / covis_all.sum() >= 0.99

    def test_fused_points_lie_on_surface(self, scene, gt_records):
        ref = scene.views[0]
        valid, support = dynamic_filter(gt_records, np.ones(ref.depth.shape))
        cloud = fuse_point_cloud(ref, ref.depth, gt_records, valid, support)
        assert len(cloud) > 0
        assert scene.surface_distance(cloud.points).max() < 1e-4

    def test_point_count_bounded_by_valid_pixels(self, scene, gt_records):
        ref = scene.views[0]
        valid, support = dynamic_filter(gt_records, np.ones(ref.depth.shape))
        cloud = fuse_point_cloud(ref, ref.depth, gt_records, valid, support)
        assert len(cloud) == valid.sum() <= ref.depth.size

    def test_single_view_no_sources_empty(self, scene):
        ref = scene.views[0]
        valid, support = dynamic_filter([], np.ones(ref.depth.shape))
        cloud = fuse_point_cloud(ref, ref.depth, [], valid, support)
        assert len(cloud) == 0

    def test_corrupted_pixels_removed(self, scene):
        """>5% relative corruption on 10% of pixels: >=95% of them rejected."""
        rng = np.random.default_rng(5)
        ref = scene.views[0]
        bad = ref.depth.copy()
        sel = rng.random(bad.shape) < 0.1
        bad[sel] *= 1.0 + np.where(rng.random(bad.shape) < 0.5, 0.06, -0.07)[sel]
        records = [geometric_check(bad, src.depth, ref, src)
                   for src in scene.views[1:]]
        valid, _ = dynamic_filter(records, np.ones(ref.depth.shape))
        removed = (~valid & sel).sum() / sel.sum()
        assert removed >= 0.95

    def test_colors_sampled_from_reference(self, scene, gt_records):
        ref = scene.views[0]
        valid, support = dynamic_filter(gt_records, np.ones(ref.depth.shape))
        cloud = fuse_point_cloud(ref, ref.depth, gt_records, valid, support)
        assert cloud.colors.min() >= 0.0 and cloud.colors.max() <= 1.0
        ref_colors = ref.image.transpose(1, 2, 0)[valid]
        np.testing.assert_array_equal(cloud.colors, ref_colors)

    def test_nonfinite_points_rejected(self):
        with pytest.raises(Exception, match="finite"):
            PointCloud(points=np.array([[np.nan, 0, 0]]))


class TestAveraging:
    def test_supporting_views_average_positions(self):
        spec = SceneSpec(plane_tilt=(0.0, 0.0), jitter=0.0)
        sc = render_synthetic_scene(spec, seed=1)
        ref = sc.views[0]
        records = [geometric_check(ref.depth, src.depth, ref, src)
                   for src in sc.views[1:]]
        valid, support = dynamic_filter(records, np.ones(ref.depth.shape))
        cloud = fuse_point_cloud(ref, ref.depth, records, valid, support)
        # With exact GT all back-projections coincide, so averaging must
        # reproduce the reference back-projection.
        h, w = ref.depth.shape
        ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                             indexing="ij")
        pts = backproject_pixels(ref.intrinsics, ref.extrinsics,
                                 np.stack([xs, ys], -1), ref.depth)
        np.testing.assert_allclose(cloud.points, pts[valid], atol=1e-4)
