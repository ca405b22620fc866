import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcqa import projection as pj
from pcqa.pointcloud import PointCloud
from pcqa.projection import (
    EmptyCloud,
    SizeTooLarge,
    ViewImage,
    auto_splat_radius,
    crop_patch,
    crop_window,
    disc_offsets,
    load_view,
    load_viewset,
    parse_ppm,
    ppm_bytes,
    render_views,
    save_view,
    save_viewset,
)
from pcqa.tensorio import BadMagic

BACKENDS = ["numpy"] + (["cython"] if pj.BACKEND == "cython" else [])


def cloud_of(positions, seed=0):
    positions = np.asarray(positions, dtype=np.float64)
    colors = np.random.default_rng(seed).integers(0, 256, (len(positions), 3), dtype=np.uint8)
    return PointCloud(positions, colors)


def brute_force_view(positions, view, size, radius):
    """Point-by-point raster of one axis view: nearest depth wins, ties keep
    the earlier point.  Written independently of the vectorised kernels."""
    axis, negative = divmod(view, 2)
    right, up = {0: (1, 2), 1: (2, 0), 2: (0, 1)}[axis]
    winner = -np.ones((size, size), dtype=np.int64)
    zbuf = np.full((size, size), np.inf)
    for i, p in enumerate(positions):
        u, v, z = p[right], p[up], p[axis]
        if negative:
            u, z = 1.0 - u, 1.0 - z
        col = min(int(np.floor(min(max(u, 0.0), 1.0) * size)), size - 1)
        row = min(int(np.floor(min(max(v, 0.0), 1.0) * size)), size - 1)
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                if dy * dy + dx * dx > radius * radius:
                    continue
                r, c = row + dy, col + dx
                if 0 <= r < size and 0 <= c < size and z < zbuf[r, c]:
                    zbuf[r, c] = z
                    winner[r, c] = i
    return winner, zbuf


class TestRenderExamples:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_single_point_center(self, backend):
        cloud = cloud_of([[0.5, 0.5, 0.5]])
        view = render_views(cloud, 6, 64, 64, 0, backend).views[4]  # +Z
        assert view.mask.sum() == 1
        assert view.mask[32, 32]
        assert view.depth[32, 32] == np.float32(0.5)
        np.testing.assert_array_equal(view.color[32, 32], cloud.colors[0])

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_nearest_point_wins(self, backend):
        cloud = cloud_of([[0.5, 0.5, 0.8], [0.5, 0.5, 0.2]], seed=3)
        view = render_views(cloud, 6, 64, 64, 0, backend).views[4]
        np.testing.assert_array_equal(view.color[32, 32], cloud.colors[1])
        assert view.depth[32, 32] == np.float32(0.2)

    def test_background(self):
        view = render_views(cloud_of([[0.5, 0.5, 0.5]]), 6, 16, 16, 0).views[0]
        assert np.all(view.depth[~view.mask] == 1.0)
        assert np.all(view.color[~view.mask] == 0)

    def test_missing_cloud(self):
        # PointCloud itself rejects zero points, so None is the empty input
        with pytest.raises(EmptyCloud):
            render_views(None)

    @pytest.mark.parametrize("m", [1, 3, 6, 8])
    def test_view_count(self, m):
        views = render_views(cloud_of(np.random.default_rng(0).uniform(size=(50, 3))), m, 16, 16, 1)
        assert views.m_count == m
        assert [v.view_index for v in views.views] == list(range(m))

    def test_depth_in_unit_interval(self):
        views = render_views(cloud_of(np.random.default_rng(1).uniform(size=(300, 3))), 6, 32, 32, 2)
        for v in views.views:
            assert np.all((v.depth >= 0) & (v.depth <= 1))
            assert np.all(v.depth[v.mask] < 1.0)


class TestBruteForceOracle:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_uniform_cube_occupancy(self, backend):
        pts = np.random.default_rng(2024).uniform(size=(10_000, 3))
        view = render_views(cloud_of(pts), 6, 64, 64, 1, backend).views[4]
        winner, _ = brute_force_view(pts, 4, 64, 1)
        assert view.mask.mean() == (winner >= 0).mean()

    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("view_index", range(6))
    @pytest.mark.parametrize("radius", [0, 1, 3])
    def test_depth_and_winner_match(self, backend, view_index, radius):
        # coarse grid positions force ties in pixel and depth
        pts = np.random.default_rng(view_index + 10 * radius).integers(0, 9, (120, 3)) / 8.0
        cloud = cloud_of(pts, seed=5)
        view = render_views(cloud, 6, 24, 24, radius, backend).views[view_index]
        winner, zbuf = brute_force_view(pts, view_index, 24, radius)
        np.testing.assert_array_equal(view.mask, winner >= 0)
        m = view.mask
        np.testing.assert_array_equal(view.depth[m], np.minimum(zbuf[m].astype(np.float32), pj.NEAREST_BELOW_FAR))
        np.testing.assert_array_equal(view.color[m], cloud.colors[winner[m]])

    def test_backends_agree_on_random_cloud(self):
        if len(BACKENDS) < 2:
            pytest.skip("compiled kernel not built")
        pts = np.random.default_rng(9).uniform(size=(3000, 3))
        a = render_views(cloud_of(pts), 6, 64, 64, 2, "numpy")
        b = render_views(cloud_of(pts), 6, 64, 64, 2, "cython")
        assert a.views == b.views


class TestSymmetry:
    def test_cyclic_axis_rotation_permutes_views(self):
        # (x, y, z) -> (y, z, x) is a rotation of the cube; it maps the views
        # of the rotated cloud onto views +Y, -Y, +Z, -Z, +X, -X of the original
        pts = np.array([[0.1, 0.3, 0.7], [0.8, 0.2, 0.4], [0.45, 0.9, 0.15]])
        cloud = cloud_of(pts, seed=11)
        rotated = PointCloud(pts[:, [1, 2, 0]], cloud.colors)
        a = render_views(cloud, 6, 32, 32, 2).views
        b = render_views(rotated, 6, 32, 32, 2).views
        for i, j in enumerate([2, 3, 4, 5, 0, 1]):
            np.testing.assert_array_equal(b[i].color, a[j].color)
            np.testing.assert_array_equal(b[i].depth, a[j].depth)

    def test_opposite_views_mirror_silhouettes(self):
        pts = np.random.default_rng(4).uniform(size=(200, 3))
        views = render_views(cloud_of(pts), 6, 32, 32, 1).views
        for axis in range(3):
            np.testing.assert_array_equal(views[2 * axis].mask, views[2 * axis + 1].mask[:, ::-1])


class TestSplatRadius:
    @pytest.mark.parametrize("n,expected", [(1, 4), (1000, 4), (262_144, 4), (300_000, 4),
                                            (2_097_152, 2), (16_777_216, 1), (10**9, 1)])
    def test_auto_radius(self, n, expected):
        assert auto_splat_radius(n, 256) == expected

    @pytest.mark.parametrize("radius,count", [(0, 1), (1, 5), (2, 13), (3, 29)])
    def test_disc_pixel_count(self, radius, count):
        assert len(disc_offsets(radius)) == count

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(0, 3))
    def test_radius_never_shrinks_coverage(self, seed, n, radius):
        pts = np.random.default_rng(seed).uniform(size=(n, 3))
        small = render_views(cloud_of(pts), 6, 24, 24, radius)
        large = render_views(cloud_of(pts), 6, 24, 24, radius + 1)
        for a, b in zip(small.views, large.views):
            assert b.mask.sum() >= a.mask.sum()
            assert np.all(b.mask[a.mask])


class TestCrop:
    def test_full_size_is_identity(self):
        view = render_views(cloud_of(np.random.default_rng(0).uniform(size=(100, 3))), 6, 32, 32, 1).views[0]
        assert crop_patch(view, 32) == view

    def test_center_offset(self):
        assert crop_window(64, 64, 32) == (16, 16)

    def test_random_is_seeded(self):
        assert crop_window(256, 256, 64, "random", 7) == crop_window(256, 256, 64, "random", 7)

    @settings(max_examples=100)
    @given(st.integers(8, 64), st.integers(8, 64), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_random_window_inside(self, h, w, size, seed):
        top, left = crop_window(h, w, size, "random", seed)
        assert 0 <= top <= h - size and 0 <= left <= w - size

    def test_too_large(self):
        with pytest.raises(SizeTooLarge):
            crop_window(32, 64, 33)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            crop_window(32, 32, 8, "corner")

    def test_crop_is_contiguous_window(self):
        view = render_views(cloud_of(np.random.default_rng(0).uniform(size=(400, 3))), 6, 32, 32, 1).views[2]
        patch = crop_patch(view, 10, "random", 3)
        top, left = crop_window(32, 32, 10, "random", 3)
        np.testing.assert_array_equal(patch.depth, view.depth[top:top + 10, left:left + 10])
        np.testing.assert_array_equal(patch.color, view.color[top:top + 10, left:left + 10])
        np.testing.assert_array_equal(patch.mask, view.mask[top:top + 10, left:left + 10])


class TestStorage:
    def test_ppm_header(self):
        data = ppm_bytes(np.zeros((64, 64, 3), np.uint8))
        assert data.startswith(b"P6\n64 64\n255\n")
        assert len(data) == len(b"P6\n64 64\n255\n") + 64 * 64 * 3

    def test_ppm_with_comment(self, rng):
        img = rng.integers(0, 256, (3, 5, 3), dtype=np.uint8)
        data = b"P6\n# made by hand\n5 3\n255\n" + img.tobytes()
        np.testing.assert_array_equal(parse_ppm(data), img)

    def test_ppm_bad_magic(self):
        with pytest.raises(BadMagic):
            parse_ppm(b"P3\n1 1\n255\n0 0 0")

    def test_view_round_trip(self, tmp_path):
        view = render_views(cloud_of(np.random.default_rng(0).uniform(size=(300, 3))), 6, 32, 32, 1).views[3]
        save_view(view, tmp_path / "c.ppm", tmp_path / "d.pcqt")
        assert load_view(tmp_path / "c.ppm", tmp_path / "d.pcqt", 3) == view

    def test_depth_payload_is_four_bytes_per_pixel(self, tmp_path):
        view = render_views(cloud_of([[0.5, 0.5, 0.5]]), 1, 16, 24, 1).views[0]
        save_view(view, tmp_path / "c.ppm", tmp_path / "d.pcqt")
        data = (tmp_path / "d.pcqt").read_bytes()
        rank = data[6]
        assert struct.unpack_from("<2I", data, 7) == (16, 24)
        assert len(data) - (7 + 4 * rank) == 4 * 16 * 24

    def test_viewset_round_trip(self, tmp_path):
        views = render_views(cloud_of(np.random.default_rng(1).uniform(size=(200, 3))), 6, 16, 16, 1)
        save_viewset(views, tmp_path, 42)
        assert load_viewset(tmp_path, 42, 6).views == views.views

    def test_size_mismatch(self, tmp_path):
        view = render_views(cloud_of([[0.5, 0.5, 0.5]]), 1, 16, 16, 1).views[0]
        other = ViewImage(np.zeros((8, 8, 3), np.uint8), view.depth, view.mask)
        save_view(other, tmp_path / "c.ppm", tmp_path / "ignored.pcqt")
        save_view(view, tmp_path / "ignored.ppm", tmp_path / "d.pcqt")
        with pytest.raises(BadMagic):
            load_view(tmp_path / "c.ppm", tmp_path / "d.pcqt")
