import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carfit3d.car_models import (
    FACET_NL,
    FACET_NONE,
    FACET_NW,
    FACET_PL,
    FACET_PW,
    FACET_ROOF,
    GRID,
    EmptyModelCloud,
    NoProposals,
    ScoreMapFormatError,
    build_default_maps,
    build_score_map,
    dump_score_maps,
    facet_occlusion,
    fit_best_box,
    flip_grid,
    load_score_maps,
    load_score_maps_bytes,
    mask_self_occlusion,
    save_score_maps,
    score_box,
    score_boxes,
    voxelize_to_model_grid,
)
from carfit3d.geometry import Box3, PointCloud, corners
from carfit3d.synth import DEFAULT_PROFILES, SENSOR_HEIGHT, CarCategory, sample_car_surface

ORIGIN = np.zeros(3)
_MAPS = build_default_maps(n_points=20_000)


def car_box(x=14.0, y=1.0, yaw=0.5, dims=(1.7, 4.4, 1.85)):
    h, l, w = dims
    return Box3((x, y, -SENSOR_HEIGHT + h / 2), h, l, w, yaw)


def brute_score(points, box, smap, origin, beta, per_point, flipped):
    occ = voxelize_to_model_grid(points, box).counts
    if flipped:
        occ = flip_grid(occ)
    grid = mask_self_occlusion(smap, box, origin, beta, flipped).grid
    weight = occ if per_point else (occ > 0)
    return float((grid * weight).sum())


class TestBuild:
    def test_toy_distance_transform(self):
        # a single shell voxel at (h, l, w) = (2, 0, 0) on a 4x4x4 grid
        m = build_score_map(np.array([[0.1, 0.1, 0.6]]), CarCategory.SUV, alpha=0.1, grid=(4, 4, 4))
        assert m.grid[2, 0, 0] == 1.0
        assert m.grid[3, 1, 1] == pytest.approx(-0.1)
        assert m.grid[3, 3, 3] == pytest.approx(-0.3)
        for h, l, w in itertools.product(range(1, 4), range(4), range(4)):
            d = max(abs(h - 2), l, w)
            expect = 1.0 if d == 0 else -0.1 * d
            assert m.grid[h, l, w] == pytest.approx(expect, abs=1e-15)
        np.testing.assert_array_equal(m.grid[0], 0.0)

    def test_empty(self):
        with pytest.raises(EmptyModelCloud):
            build_score_map(np.zeros((0, 3)), CarCategory.VAN)

    def test_saturated_box_surface(self, rng):
        n = 20000
        faces = []
        for axis in range(3):
            for v in (0.0, 1.0):
                p = rng.random((n, 3))
                p[:, axis] = v
                faces.append(p)
        m = build_score_map(np.concatenate(faces), CarCategory.SEDAN)
        nh, nl, nw = GRID
        for h, l, w in itertools.product(range(1, nh), range(nl), range(nw)):
            boundary = h == nh - 1 or l in (0, nl - 1) or w in (0, nw - 1)
            if boundary:
                assert m.grid[h, l, w] == 1.0

    def test_shipped_maps(self, maps):
        assert [m.category for m in maps] == list(CarCategory)
        for m in maps:
            assert m.grid.shape == GRID
            np.testing.assert_array_equal(m.grid[0], 0.0)
            assert np.all(m.facets[0] == FACET_NONE)
            assert np.all((m.facets != FACET_NONE) == m.shell & (np.arange(GRID[0]) > 0)[:, None, None])
            assert m.grid.max() == 1.0 and m.grid.min() < 0

    def test_facet_tags_sit_on_faces(self, maps):
        for m in maps:
            assert np.all(m.facets[:, -1, :][m.facets[:, -1, :] != FACET_NONE] != FACET_NL)
            assert np.any(m.facets == FACET_ROOF)
            for code in (FACET_PL, FACET_NL, FACET_PW, FACET_NW):
                assert np.any(m.facets == code)


class TestMasking:
    def test_view_along_plus_l(self):
        b = Box3((0, 0, 0), 1.5, 4, 1.8, 0.0)
        occ = facet_occlusion(b, (20, 0, 0))
        assert not occ[0] and occ[1]
        # the side faces are seen edge-on from the axis and count as facing away
        assert occ[2] and occ[3]

    def test_view_at_45_degrees(self):
        b = Box3((0, 0, 0), 1.5, 4, 1.8, 0.0)
        occ = facet_occlusion(b, (20, 20, 0))
        assert occ.sum() == 2 and occ.tolist() == [False, True, False, True]

    def test_masked_voxels(self, maps):
        m = maps[0]
        b = Box3((0, 0, 0), 1.5, 4, 1.8, 0.0)
        out = mask_self_occlusion(m, b, (20, 20, 0), beta=0.5)
        hidden = (m.facets == FACET_NL) | (m.facets == FACET_NW)
        assert hidden.any()
        assert np.all(out.grid[hidden] == -0.5)
        np.testing.assert_array_equal(out.grid[~hidden], m.grid[~hidden])

    def test_flipped_swaps_facets(self, maps):
        m = maps[2]
        b = Box3((0, 0, 0), 1.5, 4, 1.8, 0.0)
        out = mask_self_occlusion(m, b, (20, 20, 0), beta=0.5, flipped=True)
        hidden = (m.facets == FACET_PL) | (m.facets == FACET_PW)
        assert np.all(out.grid[hidden] == -0.5)
        np.testing.assert_array_equal(out.grid[~hidden], m.grid[~hidden])

    @given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.booleans())
    @settings(max_examples=40)
    def test_roof_untouched_and_only_decreases(self, yaw, az, flipped):
        m = _MAPS[1]
        b = Box3((0, 0, 0), 1.5, 4, 1.8, yaw)
        out = mask_self_occlusion(m, b, (30 * math.cos(az), 30 * math.sin(az), 0), 0.5, flipped)
        roof = m.facets == FACET_ROOF
        np.testing.assert_array_equal(out.grid[roof], m.grid[roof])
        assert np.all(out.grid <= m.grid)


class TestVoxelize:
    def test_min_corner_and_center(self):
        b = car_box()
        c = corners(b)[0]
        assert voxelize_to_model_grid(c[None], b).counts[0, 0, 0] == 1
        assert voxelize_to_model_grid(np.array([b.center]), b).counts[4, 9, 5] == 1

    def test_out_of_box_ignored(self):
        b = car_box()
        assert voxelize_to_model_grid(np.array([[0.0, 0.0, 0.0]]), b).total == 0

    def test_brute_force(self, rng):
        b = car_box(yaw=-1.1)
        local = (rng.random((500, 3)) - 0.5) * np.array([b.l, b.w, b.h])
        pts = b.to_world(local)
        got = voxelize_to_model_grid(pts, b).counts
        expect = np.zeros(GRID, dtype=np.int64)
        for p in b.to_local(pts):
            il = min(int(math.floor((p[0] / b.l + 0.5) * 18)), 17)
            iw = min(int(math.floor((p[1] / b.w + 0.5) * 10)), 9)
            ih = min(int(math.floor((p[2] / b.h + 0.5) * 8)), 7)
            expect[ih, il, iw] += 1
        np.testing.assert_array_equal(got, expect)
        assert got.sum() == 500


class TestScore:
    def test_empty_subset(self, maps):
        s, cat, flipped = score_box(PointCloud(np.zeros((0, 3))), car_box(), maps, ORIGIN)
        assert s == 0.0 and flipped is False

    def test_matches_brute_force(self, maps):
        b = car_box(yaw=2.0)
        pts = sample_car_surface(DEFAULT_PROFILES[CarCategory.SEDAN], b, ORIGIN, 40.0, 3)
        for per_point in (False, True):
            got = score_boxes(pts, [b, b.replace(yaw=0.3)], maps, ORIGIN, 0.5, per_point)
            for i, box in enumerate([b, b.replace(yaw=0.3)]):
                for k, m in enumerate(maps):
                    for f in (0, 1):
                        assert got[i, k, f] == pytest.approx(brute_score(pts, box, m, ORIGIN, 0.5, per_point, f), abs=1e-9)

    @pytest.mark.parametrize("yaw", [-2.5, -1.0, 0.0, 0.5, 1.5, 3.0])
    def test_suv_points_prefer_suv(self, maps, yaw):
        b = car_box(yaw=yaw)
        pts = sample_car_surface(DEFAULT_PROFILES[CarCategory.SUV], b, ORIGIN, 60.0, 0)
        s = score_boxes(pts, [b], maps, ORIGIN)[0].max(axis=1)
        assert s[0] > s[1] and s[0] > s[2]
        assert score_box(pts, b, maps, ORIGIN)[1] == CarCategory.SUV

    def test_center_points_negative(self, maps, rng):
        b = car_box()
        pts = b.to_world(rng.normal(0, 0.05, size=(100, 3)))
        assert score_box(PointCloud(pts), b, maps, ORIGIN)[0] < 0

    def test_flip_involution(self, rng):
        g = rng.random(GRID)
        np.testing.assert_array_equal(flip_grid(flip_grid(g)), g)

    def test_flip_reverses_l_and_w(self):
        g = np.zeros(GRID)
        g[3, 0, 0] = 1
        assert flip_grid(g)[3, 17, 9] == 1


class TestFit:
    def test_single(self, maps):
        b = car_box()
        d = fit_best_box(PointCloud(np.zeros((0, 3))), [b], maps, ORIGIN)
        np.testing.assert_array_equal(d.box.center, b.center)

    def test_empty(self, maps):
        with pytest.raises(NoProposals):
            fit_best_box(PointCloud(np.zeros((0, 3))), [], maps, ORIGIN)

    @pytest.mark.parametrize("cat", list(CarCategory))
    def test_true_box_beats_shift(self, maps, cat):
        b = car_box()
        pts = sample_car_surface(DEFAULT_PROFILES[cat], b, ORIGIN, 40.0, 1)
        shifted = b.replace(center=(b.center[0] + 2.0, b.center[1], b.center[2]))
        d = fit_best_box(pts, [shifted, b], maps, ORIGIN)
        np.testing.assert_array_equal(d.box.center, b.center)

    def test_ties_earliest(self, maps):
        a, b = car_box(x=30), car_box(x=40)
        d = fit_best_box(PointCloud(np.zeros((0, 3))), [a, b], maps, ORIGIN)
        assert d.box.center == a.center


class TestSerialization:
    def test_round_trip(self, maps, tmp_path):
        p = tmp_path / "maps.bin"
        save_score_maps(p, maps)
        back = load_score_maps(p)
        for a, b in zip(maps, back):
            assert a.category == b.category and a.alpha == b.alpha
            np.testing.assert_array_equal(a.grid, b.grid)
            np.testing.assert_array_equal(a.facets, b.facets)
            np.testing.assert_array_equal(a.shell, b.shell)
        assert dump_score_maps(back) == p.read_bytes()

    def test_bad_magic(self):
        with pytest.raises(ScoreMapFormatError):
            load_score_maps_bytes(b"XXXX\x01\x00\x00\x00")

    def test_truncated(self, maps):
        with pytest.raises(ScoreMapFormatError):
            load_score_maps_bytes(dump_score_maps(maps)[:-10])

