import numpy as np
import pytest

from patchnf.aggregation import (
    AggregationConfig,
    FeatureStack,
    aggregate_hierarchy,
    build_patch_features,
    fuse_hierarchies,
    fuse_scales,
    neighborhood,
)
from patchnf.errors import DataError


class TestNeighborhood:
    def test_interior_3x3(self):
        pairs = neighborhood(5, 5, 3, 96, 96)
        assert len(pairs) == 9
        assert set(pairs) == {(a, b) for a in (4, 5, 6) for b in (4, 5, 6)}

    def test_corner_replication(self):
        pairs = neighborhood(0, 0, 3, 96, 96)
        assert len(pairs) == 9
        assert pairs.count((0, 0)) == 4

    def test_degenerate_patch(self):
        assert neighborhood(3, 7, 1, 10, 10) == [(3, 7)]

    def test_even_patch_size_rejected(self):
        with pytest.raises(DataError, match="odd"):
            neighborhood(1, 1, 2, 4, 4)


class TestAggregateHierarchy:
    def test_constant_field(self):
        y = np.full((3, 6, 6), 2.5)
        assert np.allclose(aggregate_hierarchy(y, 3), 2.5)

    def test_s1_identity(self):
        y = np.random.default_rng(0).normal(size=(2, 5, 5))
        assert np.array_equal(aggregate_hierarchy(y, 1), y)

    def test_center_mean_of_1_to_9(self):
        y = np.arange(1.0, 10.0).reshape(1, 3, 3)
        assert aggregate_hierarchy(y, 3)[0, 1, 1] == pytest.approx(5.0)

    def test_matches_neighborhood_gather_oracle(self):
        gen = np.random.default_rng(8)
        y = gen.normal(size=(2, 5, 4))
        got = aggregate_hierarchy(y, 3)
        for h in range(5):
            for w in range(4):
                pairs = neighborhood(h, w, 3, 5, 4)
                want = np.mean([y[:, a, b] for a, b in pairs], axis=0)
                assert np.allclose(got[:, h, w], want, atol=1e-12)

    def test_mean_within_neighborhood_bounds(self):
        gen = np.random.default_rng(9)
        y = gen.normal(size=(1, 6, 6))
        got = aggregate_hierarchy(y, 3)
        for h in range(6):
            for w in range(6):
                vals = [y[0, a, b] for a, b in neighborhood(h, w, 3, 6, 6)]
                assert min(vals) - 1e-12 <= got[0, h, w] <= max(vals) + 1e-12

    def test_corner_constant_exact(self):
        y = np.full((1, 4, 4), 7.0)
        assert aggregate_hierarchy(y, 5)[0, 0, 0] == 7.0


class TestFusion:
    def test_fuse_hierarchies_dims(self):
        maps = [np.ones((4, 8, 8)), np.ones((8, 4, 4))]
        out = fuse_hierarchies(maps)
        assert out.shape == (12, 8, 8)

    def test_single_hierarchy_unchanged(self):
        x = np.random.default_rng(1).normal(size=(3, 6, 6))
        assert np.array_equal(fuse_hierarchies([x]), x)

    def test_constant_deeper_map_preserved(self):
        maps = [np.zeros((2, 8, 8)), np.full((3, 4, 4), 1.5)]
        out = fuse_hierarchies(maps)
        assert np.allclose(out[2:], 1.5)
        assert np.allclose(out[:2], 0.0)

    def test_fuse_scales_paper_dimensions(self):
        # three fused 496-channel scale maps on a 96x96 base -> 1488 x 96 x 96
        per_scale = [np.zeros((496, 96, 96), dtype=np.float32) for _ in range(3)]
        out = fuse_scales(per_scale, (96, 96), 3)
        assert out.shape == (1488, 96, 96)

    def test_fuse_scales_single_scale(self):
        x = np.random.default_rng(2).normal(size=(5, 6, 6))
        out = fuse_scales([x], (6, 6), 1)
        assert np.array_equal(out, x)

    def test_fuse_scales_order_preserved(self):
        per_scale = [np.full((2, 4, 4), v) for v in (1.0, 2.0, 3.0)]
        out = fuse_scales(per_scale, (4, 4), 3)
        assert np.allclose(out[0:2], 1.0)
        assert np.allclose(out[2:4], 2.0)
        assert np.allclose(out[4:6], 3.0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            fuse_scales([np.ones((2, 4, 4))], (4, 4), 2)


class TestFullPipeline:
    def test_trivial_config_is_identity(self):
        # s=1, S=1, single hierarchy: nothing should change
        x = np.random.default_rng(3).normal(size=(4, 7, 7))
        stack = FeatureStack(scales=[[x]])
        cfg = AggregationConfig(patch_size=1, scale_count=1)
        out = build_patch_features(stack, cfg)
        assert np.array_equal(out, x)

    def test_channel_count_law(self):
        gen = np.random.default_rng(4)
        for _ in range(5):
            s = int(gen.integers(1, 4))
            n_h = int(gen.integers(1, 4))
            channels = [int(gen.integers(1, 6)) for _ in range(n_h)]
            base = int(gen.integers(4, 9))
            scales = []
            for k in range(s):
                h = max(2, base - 2 * k)
                scales.append(
                    [
                        gen.normal(size=(c, max(1, h // (j + 1)), max(1, h // (j + 1))))
                        for j, c in enumerate(channels)
                    ]
                )
            stack = FeatureStack(scales=scales)
            cfg = AggregationConfig(patch_size=3, scale_count=s, base_size=(base, base))
            out = build_patch_features(stack, cfg)
            assert out.shape[0] == s * sum(channels)
            assert out.shape[1:] == (base, base)

    def test_stack_invariant_rejects_growing_hierarchy(self):
        with pytest.raises(DataError):
            FeatureStack(scales=[[np.ones((2, 4, 4)), np.ones((2, 8, 8))]])
