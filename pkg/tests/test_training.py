import numpy as np
import pytest

from patchnf.adapter import init_adapter
from patchnf.config import RunConfig
from patchnf.errors import NumericalError
from patchnf.flow import init_flow, randomize_flow
from patchnf.numerics import Rng
from patchnf.tensor_io import save_checkpoint
from patchnf.training import (
    AdamW,
    finite_difference_grad,
    loss,
    loss_and_grads,
    train_on_features,
)


class TestLoss:
    def test_origin(self):
        assert loss(np.zeros((4, 3)), np.zeros(3)) == 0.0

    def test_single_patch(self):
        z = np.array([[1.0], [1.0]])
        assert loss(z, np.array([0.5])) == pytest.approx(0.5)

    def test_standard_normal_expectation(self):
        gen = np.random.default_rng(0)
        z = gen.normal(size=(64, 10_000))
        per_patch = 0.5 * np.square(z).sum(axis=0)
        stderr = per_patch.std() / np.sqrt(per_patch.size)
        assert abs(loss(z, np.zeros(10_000)) - 32.0) < 3 * stderr

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericalError):
            loss(np.array([[np.inf]]), np.zeros(1))

    def test_column_order_invariance(self):
        gen = np.random.default_rng(1)
        z = gen.normal(size=(8, 500))
        ld = gen.normal(size=500)
        perm = gen.permutation(500)
        assert loss(z, ld) == pytest.approx(loss(z[:, perm], ld[perm]), abs=1e-10)

    def test_image_order_invariance_without_shuffling(self):
        # epoch loss over a fixed parameter state does not depend on the
        # order training images are presented in
        model = init_flow(Rng(6), 4, bottleneck=8, dtype=np.float64)
        randomize_flow(model, Rng(7))
        gen = np.random.default_rng(8)
        images = [gen.normal(size=(4, 9)) for _ in range(5)]
        forward = np.concatenate(images, axis=1)
        backward = np.concatenate(images[::-1], axis=1)
        va, _ = loss_and_grads(model, forward)
        vb, _ = loss_and_grads(model, backward)
        assert va == pytest.approx(vb, abs=1e-9)


class TestGradients:
    def test_dead_network_gradients(self):
        # zero-init model, zero inputs: only the final-layer bias path is live
        model = init_flow(Rng(0), 4, bottleneck=8, dtype=np.float64)
        batch = np.zeros((4, 5))
        _, grads = loss_and_grads(model, batch)
        for name, g in grads.items():
            if name.endswith("fc3.bias"):
                assert np.any(g != 0)
            else:
                assert np.all(g == 0), name

    @pytest.mark.parametrize("adapter_mode", ["frozen-random", "trained-joint"])
    def test_finite_difference_all_parameters(self, adapter_mode):
        rng = Rng(42)
        adapter = init_adapter(rng.child(1), 6, 4, adapter_mode, dtype=np.float64)
        adapter.bias[:] = rng.child(5).normal(4) * 0.1
        model = init_flow(rng.child(2), 4, n_steps=1, bottleneck=8,
                          adapter=adapter, dtype=np.float64)
        randomize_flow(model, rng.child(3))
        gen = np.random.default_rng(7)
        batch = gen.normal(size=(6 if adapter_mode == "trained-joint" else 4, 5))
        _, grads = loss_and_grads(model, batch, ortho_lambda=1e-2)
        for name, arr in model.named_parameters().items():
            it = np.ndindex(*arr.shape)
            for index in it:
                fd = finite_difference_grad(model, batch, name, index, h=1e-6)
                an = float(grads[name][index])
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom <= 1e-4, (name, index, fd, an)

    def test_batch_duplication_leaves_grads_unchanged(self):
        model = init_flow(Rng(3), 4, bottleneck=8, dtype=np.float64)
        randomize_flow(model, Rng(4))
        batch = np.random.default_rng(5).normal(size=(4, 6))
        _, g1 = loss_and_grads(model, batch)
        _, g2 = loss_and_grads(model, np.concatenate([batch, batch], axis=1))
        for name in g1:
            assert np.allclose(g1[name], g2[name], atol=1e-12)


def _checkpoint_bytes(ck):
    import os
    import tempfile

    fd, name = tempfile.mkstemp(suffix=".pfck")
    os.close(fd)
    try:
        save_checkpoint(ck, name)
        with open(name, "rb") as f:
            return f.read()
    finally:
        os.unlink(name)


def _gaussian_maps(seed, count, channels, grid, loc_scale=0.0):
    gen = np.random.default_rng(seed)
    return [
        gen.normal(loc=0.0, scale=1.0, size=(channels, grid, grid))
        for _ in range(count)
    ]


class TestTraining:
    def test_descent_on_easy_target(self):
        maps = _gaussian_maps(0, 12, 8, 6)
        cfg = RunConfig(
            channels_out=8, bottleneck=8, epochs=20, batch_size=4, seed=1,
            scale_count=1, patch_size=1, learning_rate=1e-3, image_size=[12, 12],
        )
        result = train_on_features(maps, cfg)
        assert result.history[-1][1] < result.history[0][1]

    def test_same_seed_byte_identical_checkpoints(self):
        maps = _gaussian_maps(2, 8, 6, 5)
        cfg = RunConfig(
            channels_out=6, bottleneck=8, epochs=3, batch_size=4, seed=7,
            scale_count=1, image_size=[10, 10],
        )
        a = train_on_features([m.copy() for m in maps], cfg)
        b = train_on_features([m.copy() for m in maps], cfg)
        assert _checkpoint_bytes(a.checkpoint) == _checkpoint_bytes(b.checkpoint)

    def test_already_normal_data_stays_near_identity(self):
        # identity-adapter training on N(0, I): optimum is the identity flow
        maps = _gaussian_maps(3, 16, 8, 8)
        cfg = RunConfig(
            channels_out=8, bottleneck=16, epochs=25, batch_size=8, seed=3,
            scale_count=1, learning_rate=1e-3, precision="f64", image_size=[16, 16],
        )
        result = train_on_features(maps, cfg)
        final_loss = result.history[-1][1]
        assert abs(final_loss - 4.0) / 4.0 < 0.05  # C_g/2 = 4

        model = result.model
        flat = np.concatenate([m.reshape(8, -1) for m in maps], axis=1)
        from patchnf.adapter import adapt_flat

        z, logdet = model.forward_flat(adapt_flat(flat, model.adapter))
        assert abs(float(logdet.mean())) < 0.5

    def test_frozen_adapter_unchanged_by_training(self):
        maps = _gaussian_maps(4, 8, 6, 5)
        cfg = RunConfig(
            channels_out=4, bottleneck=8, epochs=4, batch_size=4, seed=11,
            scale_count=1, image_size=[10, 10],
        )
        result = train_on_features(maps, cfg)
        fresh = init_adapter(Rng(11).child(1), 6, 4, "frozen-random", np.float32)
        assert result.model.adapter.weight.tobytes() == fresh.weight.tobytes()
        assert result.model.adapter.bias.tobytes() == fresh.bias.tobytes()

    def test_nonfinite_features_abort(self):
        maps = _gaussian_maps(5, 4, 6, 5)
        maps[2][0, 0, 0] = np.nan
        cfg = RunConfig(
            channels_out=6, bottleneck=8, epochs=2, batch_size=4, seed=0,
            scale_count=1, image_size=[10, 10],
        )
        with pytest.raises(NumericalError):
            train_on_features(maps, cfg)


class TestAdamW:
    def test_moment_shapes_and_progress(self):
        params = {"w": np.ones((3, 3)), "b": np.zeros(3)}
        opt = AdamW(params, lr=0.1, weight_decay=0.0)
        grads = {"w": np.ones((3, 3)), "b": np.ones(3)}
        before = params["w"].copy()
        opt.step(grads)
        assert opt.m["w"].shape == (3, 3)
        assert np.all(params["w"] < before)

    def test_decoupled_weight_decay_shrinks_params(self):
        params = {"w": np.full((2, 2), 10.0)}
        opt = AdamW(params, lr=0.1, weight_decay=0.5)
        opt.step({"w": np.zeros((2, 2))})
        assert np.all(params["w"] < 10.0)
