import math

import numpy as np
import pytest

from modules.pointcloud import (CH_MASK, CH_RANGE, EMPTY, IGNORE, AugmentConfig, LabelMap, PointCloud,
                                RangeImage, RVSensor, augment_cloud, backproject_labels, normalize_channels,
                                occupancy_report, occupancy_stats, pixel_coords, project_batch, project_to_rv,
                                region_bounds)
from utils.errors import ConfigError, DataError, ShapeError

H, W, UP, DOWN = 4, 8, 0.2, -0.4


def random_cloud(rng, n=300, labeled=True, classes=5):
    xyz = rng.uniform(-20, 20, size=(n, 3))
    xyz[:, 2] = rng.uniform(-6, 2, size=n)
    pts = np.column_stack([xyz, rng.uniform(0, 1, size=n)])
    labels = rng.integers(0, classes, size=n) if labeled else None
    return PointCloud(pts, labels)


def pixel_of(x, y, z, h, w, up, down):
    """Independent scalar evaluation of the projection contract."""
    r = math.sqrt(x * x + y * y + z * z)
    u = math.floor(0.5 * (1 - math.atan2(y, x) / math.pi) * w)
    v = math.floor((1 - (math.asin(z / r) - down) / (up - down)) * h)
    return min(max(v, 0), h - 1), min(max(u, 0), w - 1), r


class TestProjectToRV:
    def test_single_point_lands_on_hand_computed_pixel(self):
        ri, lm = project_to_rv(PointCloud([[10.0, 0.0, 0.0, 0.5]]), H, W, UP, DOWN)
        assert lm is None
        assert ri.mask[1, 4] == 1.0
        assert ri.channels[CH_RANGE, 1, 4] == pytest.approx(10.0)
        assert ri.point_index[1, 4] == 0
        assert ri.mask.sum() == 1

    def test_closest_point_wins_collision(self):
        cloud = PointCloud([[9.0, 0.0, 0.0, 0.1], [5.0, 0.0, 0.0, 0.9]], labels=[1, 2])
        ri, lm = project_to_rv(cloud, H, W, UP, DOWN)
        np.testing.assert_allclose(ri.channels[:3, 1, 4], [5.0, 0.0, 0.0])
        assert ri.point_index[1, 4] == 1
        assert lm.grid[1, 4] == 2

    def test_equal_ranges_resolve_to_lower_id(self):
        cloud = PointCloud([[5.0, 0.0, 0.0, 0.2], [5.0, 0.0, 0.0, 0.7]])
        ri, _ = project_to_rv(cloud, H, W, UP, DOWN)
        assert ri.point_index[1, 4] == 0
        assert ri.channels[3, 1, 4] == pytest.approx(0.2)

    def test_empty_cloud_gives_empty_image(self):
        ri, lm = project_to_rv(PointCloud(np.zeros((0, 4)), labels=np.zeros(0)), H, W, UP, DOWN)
        assert not ri.mask.any()
        assert np.all(ri.point_index == EMPTY)
        assert np.all(lm.grid == IGNORE)

    def test_out_of_fov_points_clamp_to_border_rows(self):
        cloud = PointCloud([[10.0, 0.0, 10.0, 0.5], [10.0, 0.0, -10.0, 0.5]])
        ri, _ = project_to_rv(cloud, H, W, UP, DOWN)
        assert ri.point_index[0, 4] == 0
        assert ri.point_index[H - 1, 4] == 1

    def test_matches_scalar_contract(self, rng):
        cloud = random_cloud(rng)
        v, u, r = pixel_coords(cloud.xyz, 16, 64, UP, DOWN)
        for i in range(len(cloud)):
            assert (v[i], u[i]) == pixel_of(*cloud.xyz[i], 16, 64, UP, DOWN)[:2]
            assert r[i] == pytest.approx(pixel_of(*cloud.xyz[i], 16, 64, UP, DOWN)[2])

    def test_range_channel_and_empty_pixels(self, rng):
        ri, _ = project_to_rv(random_cloud(rng), 16, 64, UP, DOWN)
        occ = ri.mask > 0.5
        norm = np.sqrt((ri.channels[:3] ** 2).sum(axis=0))
        np.testing.assert_allclose(ri.channels[CH_RANGE][occ], norm[occ], rtol=1e-6)
        assert set(np.unique(ri.mask)) <= {0.0, 1.0}
        assert np.all(ri.channels[:, ~occ] == 0)
        assert np.all(ri.point_index[~occ] == EMPTY)

    def test_stored_range_is_collision_minimum(self, rng):
        cloud = random_cloud(rng, n=600)
        ri, _ = project_to_rv(cloud, 8, 16, UP, DOWN)
        best = {}
        for i, (x, y, z) in enumerate(cloud.xyz):
            v, u, r = pixel_of(x, y, z, 8, 16, UP, DOWN)
            best[(v, u)] = min(best.get((v, u), np.inf), r)
        for (v, u), r in best.items():
            assert ri.channels[CH_RANGE, v, u] == pytest.approx(r)

    def test_rejects_bad_inputs(self):
        with pytest.raises(DataError):
            project_to_rv(PointCloud([[np.nan, 0, 0, 0.5]]), H, W, UP, DOWN)
        with pytest.raises(DataError):
            project_to_rv(PointCloud([[0.0, 0.0, 0.0, 0.5]]), H, W, UP, DOWN)
        with pytest.raises(DataError):
            project_to_rv(PointCloud([[1.0, 0.0, 0.0, 1.5]]), H, W, UP, DOWN)
        with pytest.raises(ConfigError):
            project_to_rv(PointCloud([[1.0, 0.0, 0.0, 0.5]]), H, W, DOWN, UP)
        with pytest.raises(ShapeError):
            project_to_rv(PointCloud([[1.0, 0.0, 0.0, 0.5]], labels=[1, 2]), H, W, UP, DOWN)


class TestBackprojectLabels:
    def test_single_point(self):
        cloud = PointCloud([[10.0, 0.0, 0.0, 0.5]])
        ri, _ = project_to_rv(cloud, H, W, UP, DOWN)
        grid = np.full((H, W), IGNORE)
        grid[1, 4] = 3
        assert backproject_labels(LabelMap(grid), ri, cloud).tolist() == [3]

    def test_occluded_points_read_their_pixel(self, rng):
        cloud = random_cloud(rng, n=500)
        ri, _ = project_to_rv(cloud, 8, 16, UP, DOWN)
        grid = rng.integers(-1, 5, size=(8, 16))
        out = backproject_labels(LabelMap(grid), ri, cloud)
        for i, (x, y, z) in enumerate(cloud.xyz):
            v, u, _ = pixel_of(x, y, z, 8, 16, UP, DOWN)
            assert out[i] == grid[v, u]

    def test_ignore_passes_through(self):
        cloud = PointCloud([[10.0, 0.0, 0.0, 0.5]])
        ri, _ = project_to_rv(cloud, H, W, UP, DOWN)
        out = backproject_labels(LabelMap(np.full((H, W), IGNORE)), ri, cloud)
        assert out.tolist() == [IGNORE]

    def test_round_trip_recovers_winner_labels(self, rng):
        cloud = random_cloud(rng)
        ri, lm = project_to_rv(cloud, 16, 64, UP, DOWN)
        out = backproject_labels(lm, ri, cloud)
        occ = ri.point_index[ri.point_index != EMPTY]
        np.testing.assert_array_equal(out[occ], cloud.labels[occ])

    def test_shape_mismatch(self):
        cloud = PointCloud([[10.0, 0.0, 0.0, 0.5]])
        ri, _ = project_to_rv(cloud, H, W, UP, DOWN)
        with pytest.raises(ShapeError):
            backproject_labels(LabelMap(np.zeros((H + 1, W), dtype=int)), ri, cloud)


class TestAugmentCloud:
    def test_identity(self, rng):
        cloud = random_cloud(rng)
        out = augment_cloud(cloud, 5, AugmentConfig.identity())
        np.testing.assert_array_equal(out.points, cloud.points)
        np.testing.assert_array_equal(out.labels, cloud.labels)

    def test_yaw_pi(self):
        params = AugmentConfig(yaw_range=(np.pi, np.pi), jitter_sigma=0.0, flip_x=0.0, flip_y=0.0,
                               scale_range=(1.0, 1.0))
        out = augment_cloud(PointCloud([[1.0, 0.0, 0.0, 0.3]]), 0, params)
        np.testing.assert_allclose(out.xyz[0], [-1.0, 0.0, 0.0], atol=1e-9)

    def test_deterministic_in_seed(self, rng):
        cloud = random_cloud(rng)
        params = AugmentConfig(jitter_sigma=0.01)
        a = augment_cloud(cloud, 42, params)
        b = augment_cloud(cloud, 42, params)
        assert a.points.tobytes() == b.points.tobytes()
        assert not np.array_equal(a.points, augment_cloud(cloud, 43, params).points)

    def test_labels_and_intensity_carried(self, rng):
        cloud = random_cloud(rng)
        out = augment_cloud(cloud, 1, AugmentConfig())
        np.testing.assert_array_equal(out.labels, cloud.labels)
        np.testing.assert_array_equal(out.intensity, cloud.intensity)

    @pytest.mark.parametrize("scale", [(0.0, 1.0), (-1.0, 1.0)])
    def test_non_positive_scale_rejected(self, scale):
        with pytest.raises(ConfigError):
            augment_cloud(PointCloud([[1.0, 0, 0, 0.5]]), 0, AugmentConfig(scale_range=scale))


class TestOccupancy:
    def test_half_empty(self):
        channels = np.zeros((6, 4, 4))
        channels[CH_MASK].flat[:8] = 1.0
        ri = RangeImage(channels, np.full((4, 4), EMPTY), UP, DOWN)
        assert occupancy_stats(ri)["empty_fraction"] == 0.5

    def test_full(self):
        channels = np.zeros((6, 4, 4))
        channels[CH_MASK] = 1.0
        ri = RangeImage(channels, np.zeros((4, 4), dtype=int), UP, DOWN)
        assert occupancy_stats(ri)["empty_fraction"] == 0.0

    def test_region_histogram(self):
        channels = np.zeros((6, 4, 4))
        channels[CH_MASK] = 1.0
        grid = np.array([[0, 0, 1, 1], [0, 0, 1, IGNORE], [2, 2, 2, 2], [2, 2, 2, 2]])
        ri = RangeImage(channels, np.zeros((4, 4), dtype=int), UP, DOWN)
        hist = occupancy_stats(ri, (2, 2), LabelMap(grid), num_classes=3)["histogram"]
        assert hist.shape == (2, 2, 3)
        assert hist[0, 0].tolist() == [4, 0, 0]
        assert hist[0, 1].tolist() == [0, 3, 0]
        assert hist[1, 1].tolist() == [0, 0, 4]

    def test_report_matches_direct_count(self, tiny_pair, tiny_sensor):
        source, _ = tiny_pair
        images, labels = tiny_sensor.project_batch(source.training_clouds())
        df = occupancy_report(images, labels, (2, 4), 5)
        assert len(df) == 8
        rows = region_bounds(tiny_sensor.h, 2)
        cols = region_bounds(tiny_sensor.w, 4)
        for _, row in df.iterrows():
            (r0, r1), (c0, c1) = rows[int(row.row_band)], cols[int(row.col_band)]
            direct = 0
            for b in range(images.shape[0]):
                for v in range(r0, r1):
                    for u in range(c0, c1):
                        direct += images[b, CH_MASK, v, u] == 0
            assert row.empty_fraction == pytest.approx(direct / (images.shape[0] * (r1 - r0) * (c1 - c0)))

    def test_region_bounds_remainder_goes_last(self):
        assert region_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]


class TestBatchEncoding:
    def test_project_batch_shapes(self, tiny_pair, tiny_sensor):
        source, target = tiny_pair
        images, labels = project_batch(source.training_clouds(), tiny_sensor.h, tiny_sensor.w,
                                       tiny_sensor.fov_up, tiny_sensor.fov_down)
        assert images.shape == (4, 6, 8, 32)
        assert labels.shape == (4, 8, 32)
        _, unlabeled = tiny_sensor.project_batch(target.inputs())
        assert unlabeled is None

    def test_normalize_scales_geometry_only(self, rng):
        ri, _ = project_to_rv(random_cloud(rng), 8, 16, UP, DOWN)
        out = normalize_channels(ri.channels[None], 60.0)[0]
        np.testing.assert_allclose(out[[0, 1, 2, CH_RANGE]], ri.channels[[0, 1, 2, CH_RANGE]] / 60.0)
        np.testing.assert_array_equal(out[[3, CH_MASK]], ri.channels[[3, CH_MASK]])

    def test_sensor_encode(self, tiny_pair):
        source, _ = tiny_pair
        images, labels = RVSensor(h=8, w=32).encode(source.training_clouds())
        assert images[:, CH_RANGE].max() <= 1.0
        assert labels is not None
