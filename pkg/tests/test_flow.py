import math

import numpy as np
import pytest

from patchnf.errors import ConfigError, DataError
from patchnf.flow import (
    coupling_forward,
    coupling_inverse,
    flow_forward,
    flow_inverse,
    init_flow,
    randomize_flow,
)
from patchnf.numerics import Rng


def numeric_jacobian(fn, x, h=1e-6):
    """Central-difference Jacobian of a vector map, column by column."""
    n = x.size
    jac = np.zeros((n, n))
    for j in range(n):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (fn(xp) - fn(xm)) / (2 * h)
    return jac


def make_flow(seed, channels, steps=1, bottleneck=16, dtype=np.float64, random=True):
    model = init_flow(Rng(seed), channels, steps, bottleneck, dtype=dtype)
    if random:
        randomize_flow(model, Rng(seed + 1))
    return model


class TestCouplingBlock:
    def test_zero_init_is_identity(self):
        model = make_flow(0, 8, random=False)
        block = model.steps[0].blocks[0]
        g = np.random.default_rng(1).normal(size=8)
        out, logdet = coupling_forward(g, block)
        assert np.array_equal(out, g)
        assert logdet == 0.0

    def test_logdet_is_sum_of_clamped_scales(self):
        # zero weights, final bias crafted so the clamped scales are (0.1, -0.2)
        model = make_flow(2, 4, random=False)
        block = model.steps[0].blocks[0]
        s_max = block.clamp
        block.b3[0] = s_max * math.atanh(0.1 / s_max)
        block.b3[1] = s_max * math.atanh(-0.2 / s_max)
        _, logdet = coupling_forward(np.ones(4), block)
        assert logdet == pytest.approx(-0.1, abs=1e-12)

    def test_logdet_matches_finite_difference_jacobian(self):
        model = make_flow(3, 8)
        block = model.steps[0].blocks[0]
        gen = np.random.default_rng(4)
        for _ in range(5):
            g = gen.normal(size=8)
            _, logdet = coupling_forward(g, block)
            jac = numeric_jacobian(lambda v: coupling_forward(v, block)[0], g)
            _, num_logdet = np.linalg.slogdet(jac)
            assert abs(logdet - num_logdet) / max(abs(num_logdet), 1e-9) < 1e-3

    def test_inverse_roundtrip_f64(self):
        model = make_flow(5, 8)
        block = model.steps[0].blocks[0]
        gen = np.random.default_rng(6)
        for _ in range(20):
            g = gen.normal(size=8)
            y, _ = coupling_forward(g, block)
            back = coupling_inverse(y, block)
            assert np.max(np.abs(back - g)) < 1e-10

    def test_zero_init_inverse_is_identity(self):
        model = make_flow(7, 6, random=False)
        block = model.steps[0].blocks[1]
        y = np.random.default_rng(8).normal(size=6)
        assert np.array_equal(coupling_inverse(y, block), y)

    def test_f32_roundtrip_batch(self):
        model = make_flow(9, 64, bottleneck=128, dtype=np.float32)
        gen = np.random.default_rng(10)
        g = gen.normal(size=(64, 1000)).astype(np.float32)
        block = model.steps[0].blocks[0]
        y, _ = block.forward(g)
        back = block.inverse(y)
        assert np.max(np.abs(back - g)) <= 1e-4

    def test_odd_channels_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            init_flow(Rng(0), 7)

    def test_bounded_scale_for_extreme_subnet_output(self):
        model = make_flow(11, 4, random=False)
        block = model.steps[0].blocks[0]
        block.b3[:] = 1e6  # way past the clamp
        g = np.random.default_rng(12).normal(size=4)
        _, logdet = coupling_forward(g, block)
        # two active channels, each clamped to at most s_max
        assert logdet <= 2 * block.clamp + 1e-9


class TestFlowModel:
    def test_zero_init_model_is_pure_permutation(self):
        model = make_flow(13, 10, steps=2, random=False)
        gen = np.random.default_rng(14)
        g_map = gen.normal(size=(10, 3, 4))
        z_map, logdet_map = flow_forward(g_map, model)
        perm = model.composed_permutation()
        flat = g_map.reshape(10, -1)
        assert np.array_equal(z_map.reshape(10, -1), flat[perm])
        assert np.all(logdet_map == 0.0)

    def test_single_position_matches_vector_pipeline(self):
        model = make_flow(15, 8)
        g = np.random.default_rng(16).normal(size=8)
        z_map, logdet_map = flow_forward(g.reshape(8, 1, 1), model)
        z_flat, ld_flat = model.forward_flat(g[:, None])
        assert np.allclose(z_map[:, 0, 0], z_flat[:, 0])
        assert np.allclose(logdet_map[0, 0], ld_flat[0])

    def test_identical_positions_share_outputs(self):
        model = make_flow(17, 6)
        g = np.random.default_rng(18).normal(size=6)
        g_map = np.repeat(g[:, None], 4, axis=1).reshape(6, 2, 2)
        z_map, logdet_map = flow_forward(g_map, model)
        assert np.allclose(z_map, z_map[:, :1, :1])
        assert np.allclose(logdet_map, logdet_map[0, 0])

    def test_inverse_roundtrip_map_f64(self):
        model = make_flow(19, 12, steps=2)
        gen = np.random.default_rng(20)
        g_map = gen.normal(size=(12, 4, 4))
        z_map, _ = flow_forward(g_map, model)
        back = flow_inverse(z_map, model)
        assert np.max(np.abs(back - g_map)) <= 1e-9

    def test_zero_map_through_zero_init_model(self):
        model = make_flow(21, 6, random=False)
        z_map, logdet_map = flow_forward(np.zeros((6, 2, 2)), model)
        assert np.all(z_map == 0)
        assert np.all(logdet_map == 0)

    def test_channel_mismatch_rejected(self):
        model = make_flow(22, 8)
        with pytest.raises(DataError, match="channels"):
            flow_forward(np.zeros((6, 2, 2)), model)

    def test_composed_permutation_is_bijection(self):
        for steps in (1, 2, 3):
            model = make_flow(23 + steps, 16, steps=steps, random=False)
            perm = model.composed_permutation()
            assert sorted(perm.tolist()) == list(range(16))

    def test_acceptance_scale_invertibility_f32(self):
        model = make_flow(30, 64, bottleneck=128, dtype=np.float32)
        g = np.random.default_rng(31).normal(size=(64, 1000)).astype(np.float32)
        z, _ = model.forward_flat(g)
        back = model.inverse_flat(z)
        assert np.max(np.abs(back - g)) <= 1e-4
