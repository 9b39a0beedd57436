"""Flow training: exact-likelihood objective, hand-derived reverse-mode
gradients, and an adaptive-moment optimizer with decoupled weight decay.

The objective per patch is ||z||^2 / 2 - logdet (the Gaussian constant is
dropped since it never influences parameter updates); the batch loss is the
mean over all patches of a batch of images. In trained-joint adapter mode a
row-orthonormality penalty discourages feature contraction, and its gradient
is part of the analytic backward pass so finite-difference checks cover it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import adapt_flat, init_adapter
from .config import RunConfig
from .errors import ConfigError, DataError, NumericalError
from .flow import FlowModel, init_flow
from .numerics import Rng
from .tensor_io import Checkpoint

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def loss(z, logdet) -> float:
    """Mean over patches of ||z||^2 / 2 - logdet.

    Accepts latent maps [C, H, W] with logdet [H, W], or columns [C, N] with
    logdet [N].
    """
    z = np.asarray(z)
    logdet = np.asarray(logdet)
    if z.ndim == 3:
        z = z.reshape(z.shape[0], -1)
        logdet = logdet.reshape(-1)
    if z.ndim != 2 or logdet.shape != (z.shape[1],):
        raise DataError(f"shape mismatch: z {z.shape} vs logdet {logdet.shape}")
    if not (np.isfinite(z).all() and np.isfinite(logdet).all()):
        raise NumericalError("non-finite inputs to the loss")
    return float((0.5 * np.square(z).sum(axis=0) - logdet).mean())


def ortho_penalty(weight: np.ndarray, lam: float) -> float:
    """lam * ||W W^T - I||_F^2, the anti-contraction term for a trained adapter."""
    e = weight @ weight.T - np.eye(weight.shape[0], dtype=weight.dtype)
    return float(lam * np.square(e).sum())


def loss_and_grads(model: FlowModel, batch: np.ndarray, ortho_lambda: float = 1e-2):
    """Forward + analytic backward over one batch of feature columns.

    `batch` holds adapted features [C_g, N] when the adapter is frozen (or
    absent), or raw fused features [C_total, N] when the adapter is trainable,
    in which case adapter gradients (including the orthonormality penalty) are
    returned alongside the flow gradients.
    """
    joint = model.adapter is not None and model.adapter.trainable
    if joint:
        f_cols = batch
        x = adapt_flat(f_cols, model.adapter)
    else:
        x = batch
    n = x.shape[1]
    z, logdet, caches = model.forward_flat(x, want_cache=True)
    value = loss(z, logdet)

    gz = z / n
    glogdet = np.full(n, -1.0 / n, dtype=z.dtype)
    gx, grads = model.backward_flat(caches, gz, glogdet)

    if joint:
        w = model.adapter.weight
        e = w @ w.T - np.eye(w.shape[0], dtype=w.dtype)
        value += float(ortho_lambda * np.square(e).sum())
        grads["adapter.weight"] = gx @ f_cols.T + (4.0 * ortho_lambda) * (e @ w)
        grads["adapter.bias"] = gx.sum(axis=1)

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
    return value, grads


class AdamW:
    """Adaptive moments with decoupled weight decay; state keyed by tensor name."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - ADAM_BETA1**t
        bias2 = 1.0 - ADAM_BETA2**t
        for name in sorted(self.params):
            if name not in grads:
                continue
            p = self.params[name]
            g = grads[name].astype(p.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= p.dtype.type(self.lr) * update.astype(p.dtype, copy=False)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, float]]
    best_epoch: int
    threshold: float
    model: FlowModel | None = None


def finite_difference_grad(model: FlowModel, batch: np.ndarray, name: str,
                           index: tuple, h: float = 1e-6,
                           ortho_lambda: float = 1e-2) -> float:
    """Central finite difference of the batch loss wrt one parameter entry."""
    params = model.named_parameters(include_adapter=True)
    if name not in params:
        raise ConfigError(f"unknown parameter {name!r}")
    arr = params[name]
    orig = arr[index]

    def eval_loss():
        joint = model.adapter is not None and model.adapter.trainable
        if joint:
            x = adapt_flat(batch, model.adapter)
        else:
            x = batch
        z, logdet = model.forward_flat(x)
        value = loss(z, logdet)
        if joint:
            value += ortho_penalty(model.adapter.weight, ortho_lambda)
        return value

    arr[index] = orig + h
    plus = eval_loss()
    arr[index] = orig - h
    minus = eval_loss()
    arr[index] = orig
    return (plus - minus) / (2 * h)


def check_gradients(model: FlowModel, batch: np.ndarray, rng: Rng,
                    samples_per_tensor: int = 3, h: float = 1e-6,
                    ortho_lambda: float = 1e-2, rtol: float = 1e-4) -> dict[str, float]:
    """Spot-check analytic vs finite-difference gradients; returns worst
    relative error per tensor and raises on failure."""
    _, grads = loss_and_grads(model, batch, ortho_lambda)
    worst: dict[str, float] = {}
    params = model.named_parameters()
    for name in sorted(params):
        arr = params[name]
        errs = []
        for _ in range(samples_per_tensor):
            index = tuple(int(rng.integers(0, d)) for d in arr.shape)
            fd = finite_difference_grad(model, batch, name, index, h, ortho_lambda)
            an = float(grads[name][index])
            denom = max(abs(fd), abs(an), 1e-8)
            errs.append(abs(fd - an) / denom)
        worst[name] = max(errs)
        if worst[name] > rtol:
            raise NumericalError(
                f"gradient check failed for {name}: rel err {worst[name]:.3e} > {rtol}"
            )
    return worst


def _batched(indices: list[int], batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield indices[i : i + batch_size]


def train_on_features(feature_maps: list[np.ndarray], cfg: RunConfig) -> TrainResult:
    """Optimize a flow (and optionally the adapter) on fused patch features.

    `feature_maps` holds one [C_total, H_g, W_g] map per training image.
    Returns the best-epoch checkpoint; threshold calibration is left to the
    caller, which owns the scoring path.
    """
    cfg.validate()
    if not feature_maps:
        raise DataError("training needs at least one feature map")
    dtype = cfg.dtype
    c_total, h_g, w_g = feature_maps[0].shape
    for i, f in enumerate(feature_maps):
        if f.shape != (c_total, h_g, w_g):
            raise DataError(
                f"feature map {i} shape {f.shape} != first map {(c_total, h_g, w_g)}"
            )
    if cfg.channels_out > c_total:
        raise ConfigError(
            f"channels_out {cfg.channels_out} exceeds fused channels {c_total}"
        )

    rng = Rng(cfg.seed)
    adapter = init_adapter(rng.child(1), c_total, cfg.channels_out, cfg.adapter_mode, dtype)
    model = init_flow(
        rng.child(2), cfg.channels_out, cfg.flow_steps, cfg.bottleneck, cfg.clamp,
        adapter=adapter, dtype=dtype,
    )
    joint = adapter.trainable

    flat = [f.reshape(c_total, h_g * w_g).astype(dtype) for f in feature_maps]
    if not joint:
        flat = [adapt_flat(f, adapter) for f in flat]

    params = model.named_parameters()
    optimizer = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    shuffle_rng = rng.child(3)

    if cfg.grad_check:
        probe = np.concatenate(flat[: min(2, len(flat))], axis=1)
        check_gradients(model, probe[:, : min(64, probe.shape[1])],
                        rng.child(4), ortho_lambda=cfg.ortho_penalty)

    history: list[tuple[int, float]] = []
    best_loss = np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] = {}
    n_images = len(flat)
    for epoch in range(cfg.epochs):
        order = list(range(n_images))
        if cfg.shuffle:
            shuffle_rng.shuffle(order)
        total = 0.0
        count = 0
        for batch_idx in _batched(order, cfg.batch_size):
            batch = np.concatenate([flat[i] for i in batch_idx], axis=1)
            value, grads = loss_and_grads(model, batch, cfg.ortho_penalty)
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, images {batch_idx}"
                )
            optimizer.step(grads)
            total += value * batch.shape[1]
            count += batch.shape[1]
        epoch_loss = total / count
        history.append((epoch, epoch_loss))
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in params.items()}

    for name, value in best_state.items():
        model.set_parameter(name, value)

    snapshot = dict(cfg.to_dict())
    snapshot["c_total"] = int(c_total)
    snapshot["base_size"] = [int(h_g), int(w_g)]
    checkpoint = Checkpoint(config=snapshot, tensors=model.state_tensors(), rng_seed=cfg.seed)
    return TrainResult(
        checkpoint=checkpoint,
        history=history,
        best_epoch=best_epoch,
        threshold=float("nan"),
        model=model,
    )


def save_loss_history(history: list[tuple[int, float]], path) -> None:
    lines = ["epoch,loss"] + [f"{e},{v!r}" for e, v in history]
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
