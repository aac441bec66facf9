import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aga3d.errors import EmptyRegion, MissingRegion, ShapeError, UnknownLabel
from aga3d.prior import (
    PriorParams,
    RegionMask,
    boundary_voxels,
    build_prior_channel,
    fuse_region_priors,
    gaussian_prior,
    prior_weights,
    signed_distance_transform,
)
from aga3d.volgrid import LabelMap, Volume3D


def brute_force_sdt(mask, spacing=(1.0, 1.0, 1.0)):
    """O(N |boundary|) reference: distance to the nearest 6-boundary voxel."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    edge = np.argwhere(mask & ~interior).astype(float)
    scale = np.asarray(spacing) / min(spacing)
    pts = np.indices(mask.shape).reshape(3, -1).T.astype(float)
    diff = (pts[:, None, :] - edge[None, :, :]) * scale
    d = np.sqrt((diff ** 2).sum(-1)).min(axis=1).reshape(mask.shape)
    return np.where(mask, -d, d)


def _cube(n=5, lo=1, hi=4):
    m = np.zeros((n, n, n), dtype=bool)
    m[lo:hi, lo:hi, lo:hi] = True
    return m


class TestBoundary:
    def test_single_voxel(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        m[1, 1, 1] = True
        assert boundary_voxels(m).sum() == 1

    def test_cube_has_26(self):
        b = boundary_voxels(_cube())
        assert b.sum() == 26 and not b[2, 2, 2]

    def test_full_grid_shell(self):
        b = boundary_voxels(np.ones((4, 4, 4), dtype=bool))
        assert b.sum() == 4 ** 3 - 2 ** 3

    def test_empty(self):
        with pytest.raises(EmptyRegion):
            boundary_voxels(np.zeros((3, 3, 3), dtype=bool))


class TestSdt:
    def test_cube_center(self):
        d = signed_distance_transform(RegionMask(_cube())).d
        assert d[2, 2, 2] == -1.0 and d[1, 1, 1] == 0.0

    def test_diagonal_neighbour(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        m[1, 1, 1] = True
        assert signed_distance_transform(m).d[0, 0, 0] == pytest.approx(math.sqrt(3), abs=1e-12)

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            dims = tuple(int(n) for n in rng.integers(2, 17, 3))
            m = rng.random(dims) < rng.uniform(0.05, 0.8)
            if not m.any():
                m[tuple(int(rng.integers(n)) for n in dims)] = True
            np.testing.assert_allclose(signed_distance_transform(m).d, brute_force_sdt(m), atol=1e-5)

    def test_anisotropic_spacing(self):
        rng = np.random.default_rng(3)
        m = rng.random((7, 6, 5)) < 0.4
        spacing = (1.0, 2.0, 0.5)
        got = signed_distance_transform(RegionMask(m, spacing)).d
        np.testing.assert_allclose(got, brute_force_sdt(m, spacing), atol=1e-5)
        iso = signed_distance_transform(RegionMask(m, spacing), anisotropic=False).d
        np.testing.assert_allclose(iso, brute_force_sdt(m), atol=1e-5)

    def test_sign_convention(self):
        m = _cube(7, 1, 6)
        d = signed_distance_transform(m).d
        edge = boundary_voxels(m)
        assert np.all(d[edge] == 0)
        assert np.all(d[m & ~edge] < 0) and np.all(d[~m] > 0)


class TestWeights:
    def test_sigma_point(self):
        assert prior_weights(2.5, 2.5) == pytest.approx(1 - math.exp(-0.5), abs=1e-9)
        assert prior_weights(6.0, 2.0) == pytest.approx(0.988891, abs=1e-6)

    def test_zero_outside(self):
        df = signed_distance_transform(_cube(9, 1, 8))
        w = gaussian_prior(df, PriorParams(sigma=2.0)).data
        assert np.all(w[df.d >= 0] == 0) and np.all(w[df.d < 0] > 0)
        assert w.max() < 1.0

    def test_law_on_random_regions(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            m = rng.random((12, 12, 12)) < 0.6
            sigma = rng.uniform(0.5, 5)
            df = signed_distance_transform(m)
            w = gaussian_prior(df, PriorParams(sigma=sigma)).data.astype(np.float64)
            assert w.min() >= 0 and w.max() < 1
            np.testing.assert_array_equal(w == 0, df.d >= 0)
            d_in = df.inside_depth()[m]
            wm = w[m]
            order = np.argsort(d_in)
            dd, ww = d_in[order], wm[order]
            deeper = np.diff(dd) > 0
            assert np.all(np.diff(ww)[deeper] > 0)

    def test_sigma_limits(self):
        m = _cube(9, 1, 8)
        df = signed_distance_transform(m)
        tiny = gaussian_prior(df, PriorParams(sigma=1e-3)).data
        np.testing.assert_array_equal(tiny > 0.999, df.d < 0)
        huge = gaussian_prior(df, PriorParams(sigma=1e6)).data
        assert huge.max() < 1e-10

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
    def test_translation_equivariance(self, ox, oy, oz):
        m = np.zeros((16, 16, 16), dtype=bool)
        m[3:9, 4:10, 2:8] = True
        moved = np.roll(m, (ox, oy, oz), axis=(0, 1, 2))
        p = PriorParams(sigma=2.0)
        a = gaussian_prior(signed_distance_transform(m), p).data
        b = gaussian_prior(signed_distance_transform(moved), p).data
        np.testing.assert_array_equal(np.roll(a, (ox, oy, oz), axis=(0, 1, 2)), b)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            PriorParams(sigma=0)


class TestFusion:
    def test_single_and_overlap(self):
        a = Volume3D(np.full((2, 2, 2), 0.4))
        b = Volume3D(np.full((2, 2, 2), 0.7))
        assert np.all(fuse_region_priors([a], PriorParams()).data == a.data)
        assert np.all(fuse_region_priors([a, b], PriorParams()).data == np.float32(0.7))
        assert np.all(fuse_region_priors([a, b], PriorParams(fusion="sum-clamped")).data == 1.0)

    def test_disjoint_sum_equals_max(self):
        x = np.zeros((4, 4, 4))
        y = np.zeros((4, 4, 4))
        x[0] = 0.3
        y[3] = 0.8
        mx = fuse_region_priors([Volume3D(x), Volume3D(y)], PriorParams()).data
        sm = fuse_region_priors([Volume3D(x), Volume3D(y)], PriorParams(fusion="sum-clamped")).data
        np.testing.assert_array_equal(mx, sm)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_region_priors([Volume3D(np.zeros((2, 2, 2))), Volume3D(np.zeros((3, 2, 2)))], PriorParams())


class TestChannel:
    def _labels(self):
        lab = np.zeros((9, 9, 9), dtype=np.uint32)
        lab[1:4, 1:4, 1:4] = 1
        lab[5:9, 5:9, 5:9] = 2
        return LabelMap(lab, registry={1: "a", 2: "b", 3: "absent"})

    def test_empty_selection(self):
        assert not build_prior_channel(self._labels(), []).data.any()

    def test_cube_support_is_strict_interior(self):
        out = build_prior_channel(self._labels(), [1]).data
        expect = np.zeros((9, 9, 9), dtype=bool)
        expect[2, 2, 2] = True
        np.testing.assert_array_equal(out > 0, expect)

    def test_matches_composition(self):
        lm = self._labels()
        p = PriorParams(sigma=1.5)
        direct = build_prior_channel(lm, [1, 2], p).data
        pieces = [gaussian_prior(signed_distance_transform(RegionMask.from_labels(lm, i)), p) for i in (1, 2)]
        np.testing.assert_array_equal(direct, fuse_region_priors(pieces, p).data)

    def test_all_labels_dominate(self):
        lm = self._labels()
        both = build_prior_channel(lm, [1, 2]).data
        assert np.all(both >= build_prior_channel(lm, [2]).data)

    def test_missing_and_unknown(self):
        lm = self._labels()
        with pytest.warns(MissingRegion):
            out = build_prior_channel(lm, [3])
        assert not out.data.any()
        with pytest.raises(UnknownLabel):
            build_prior_channel(lm, [9])
