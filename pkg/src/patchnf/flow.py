"""Bijective per-patch map built from affine coupling blocks with bottlenecked
per-position subnets and fixed seeded channel permutations.

Each coupling block leaves one channel half untouched and transforms the
other with scale/shift computed from the passive half by a three-layer
affine subnet (kernel-size-1 convolutions are exactly shared per-position
affine maps, so the subnet is three matmuls with ReLU in between). The raw
scale is soft-clamped to |s| <= s_max via s_max * tanh(r / s_max), which
keeps exp(s) bounded and the log-determinant exact: logdet = sum(s).

A flow step is two blocks with complementary halves, each preceded by a
fixed seeded permutation, so every channel is transformed once per step.
The final subnet layer is zero-initialized: a fresh model is a pure channel
permutation with logdet identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams
from .errors import ConfigError, DataError, NumericalError
from .numerics import Rng

DEFAULT_BOTTLENECK = 128
DEFAULT_CLAMP = 2.0


def _as_columns(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim == 2:
        return x, False
    raise DataError(f"expected a vector [C] or columns [C, N], got shape {x.shape}")


@dataclass
class CouplingBlock:
    parity: int  # 0: first half passive, 1: second half passive
    w1: np.ndarray  # [hidden, C/2]
    b1: np.ndarray
    w2: np.ndarray  # [hidden, hidden]
    b2: np.ndarray
    w3: np.ndarray  # [C, hidden] -> stacked [s_raw; t]
    b3: np.ndarray
    clamp: float = DEFAULT_CLAMP

    @property
    def channels(self) -> int:
        return self.w3.shape[0]

    @property
    def half(self) -> int:
        return self.channels // 2

    def _split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.half
        if self.parity == 0:
            return x[:h], x[h:]
        return x[h:], x[:h]

    def _join(self, passive: np.ndarray, active: np.ndarray) -> np.ndarray:
        if self.parity == 0:
            return np.concatenate([passive, active], axis=0)
        return np.concatenate([active, passive], axis=0)

    def _subnet(self, passive: np.ndarray):
        h1 = np.maximum(self.w1 @ passive + self.b1[:, None], 0.0)
        h2 = np.maximum(self.w2 @ h1 + self.b2[:, None], 0.0)
        out = self.w3 @ h2 + self.b3[:, None]
        return out[: self.half], out[self.half :], h1, h2

    def forward(self, x: np.ndarray, want_cache: bool = False):
        if x.shape[0] != self.channels:
            raise DataError(f"block expects {self.channels} channels, got {x.shape[0]}")
        if x.shape[0] % 2 != 0:
            raise DataError("coupling needs an even channel count")
        passive, active = self._split(x)
        s_raw, t, h1, h2 = self._subnet(passive)
        if not (np.isfinite(s_raw).all() and np.isfinite(t).all()):
            raise NumericalError("non-finite coupling subnet output")
        s = self.clamp * np.tanh(s_raw / self.clamp)
        es = np.exp(s)
        new_active = active * es + t
        logdet = s.sum(axis=0)
        y = self._join(passive, new_active)
        if not want_cache:
            return y, logdet
        cache = {"passive": passive, "active": active, "h1": h1, "h2": h2, "s": s, "es": es}
        return y, logdet, cache

    def inverse(self, y: np.ndarray) -> np.ndarray:
        if y.shape[0] != self.channels:
            raise DataError(f"block expects {self.channels} channels, got {y.shape[0]}")
        passive, active = self._split(y)
        s_raw, t, _, _ = self._subnet(passive)
        s = self.clamp * np.tanh(s_raw / self.clamp)
        orig_active = (active - t) * np.exp(-s)
        if not np.isfinite(orig_active).all():
            raise NumericalError("non-finite intermediate in coupling inverse")
        return self._join(passive, orig_active)

    def backward(self, cache: dict, gy: np.ndarray, glogdet: np.ndarray):
        """Gradients of (upstream, logdet) wrt input columns and parameters.

        gy is the gradient arriving at this block's output [C, N]; glogdet is
        the per-column gradient at the block's logdet contribution [N].
        """
        g_passive_out, g_active_out = self._split(gy)
        active, s, es = cache["active"], cache["s"], cache["es"]
        h1, h2, passive = cache["h1"], cache["h2"], cache["passive"]

        g_active = g_active_out * es
        g_s = g_active_out * active * es + glogdet[None, :]
        g_t = g_active_out
        # d/dr of clamp*tanh(r/clamp) = 1 - (s/clamp)^2
        g_s_raw = g_s * (1.0 - (s / self.clamp) ** 2)
        g_out = np.concatenate([g_s_raw, g_t], axis=0)

        g_w3 = g_out @ h2.T
        g_b3 = g_out.sum(axis=1)
        g_h2 = self.w3.T @ g_out
        g_h2 *= h2 > 0
        g_w2 = g_h2 @ h1.T
        g_b2 = g_h2.sum(axis=1)
        g_h1 = self.w2.T @ g_h2
        g_h1 *= h1 > 0
        g_w1 = g_h1 @ passive.T
        g_b1 = g_h1.sum(axis=1)
        g_passive = g_passive_out + self.w1.T @ g_h1

        gx = self._join(g_passive, g_active)
        grads = {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}
        return gx, grads


@dataclass
class FlowStep:
    perms: list[np.ndarray]  # two permutations, one before each block
    blocks: list[CouplingBlock]
    inv_perms: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.inv_perms:
            self.inv_perms = [np.argsort(p) for p in self.perms]


@dataclass
class FlowModel:
    steps: list[FlowStep]
    channels: int
    adapter: AdapterParams | None = None
    clamp: float = DEFAULT_CLAMP

    # -- flat [C, N] interface -------------------------------------------

    def forward_flat(self, x: np.ndarray, want_cache: bool = False):
        if x.shape[0] != self.channels:
            raise DataError(f"flow expects {self.channels} channels, got {x.shape[0]}")
        logdet = np.zeros(x.shape[1], dtype=x.dtype)
        caches = [] if want_cache else None
        for step in self.steps:
            for perm, block in zip(step.perms, step.blocks):
                x = x[perm]
                if want_cache:
                    x, ld, cache = block.forward(x, want_cache=True)
                    caches.append(cache)
                else:
                    x, ld = block.forward(x)
                logdet = logdet + ld
        if want_cache:
            return x, logdet, caches
        return x, logdet

    def inverse_flat(self, z: np.ndarray) -> np.ndarray:
        if z.shape[0] != self.channels:
            raise DataError(f"flow expects {self.channels} channels, got {z.shape[0]}")
        for step in reversed(self.steps):
            for inv_perm, block in zip(reversed(step.inv_perms), reversed(step.blocks)):
                z = block.inverse(z)
                z = z[inv_perm]
        return z

    def backward_flat(self, caches: list[dict], gz: np.ndarray, glogdet: np.ndarray):
        """Reverse-mode gradients through every block and permutation.

        Returns (gx, grads) with grads keyed by checkpoint tensor names.
        """
        grads: dict[str, np.ndarray] = {}
        idx = len(caches)
        g = gz
        for si in range(len(self.steps) - 1, -1, -1):
            step = self.steps[si]
            for bi in range(len(step.blocks) - 1, -1, -1):
                idx -= 1
                g, block_grads = step.blocks[bi].backward(caches[idx], g, glogdet)
                for lname, (warr, barr) in zip(
                    ("fc1", "fc2", "fc3"),
                    ((block_grads["w1"], block_grads["b1"]),
                     (block_grads["w2"], block_grads["b2"]),
                     (block_grads["w3"], block_grads["b3"])),
                ):
                    grads[f"flow.step{si}.block{bi}.{lname}.weight"] = warr
                    grads[f"flow.step{si}.block{bi}.{lname}.bias"] = barr
                g = g[step.inv_perms[bi]]
        return g, grads

    # -- spatial map interface ---------------------------------------------

    def forward_map(self, g_map: np.ndarray):
        g_map = np.asarray(g_map)
        if g_map.ndim != 3:
            raise DataError(f"flow_forward expects [C, H, W], got {g_map.shape}")
        c, h, w = g_map.shape
        z, logdet = self.forward_flat(g_map.reshape(c, h * w))
        return z.reshape(c, h, w), logdet.reshape(h, w)

    def inverse_map(self, z_map: np.ndarray):
        z_map = np.asarray(z_map)
        if z_map.ndim != 3:
            raise DataError(f"flow_inverse expects [C, H, W], got {z_map.shape}")
        c, h, w = z_map.shape
        x = self.inverse_flat(z_map.reshape(c, h * w))
        return x.reshape(c, h, w)

    # -- parameter plumbing --------------------------------------------------

    def named_parameters(self, include_adapter: bool | None = None) -> dict[str, np.ndarray]:
        """Trainable tensors by checkpoint name. Adapter tensors are included
        when it exists and is trainable (or when explicitly requested)."""
        params: dict[str, np.ndarray] = {}
        for si, step in enumerate(self.steps):
            for bi, block in enumerate(step.blocks):
                params[f"flow.step{si}.block{bi}.fc1.weight"] = block.w1
                params[f"flow.step{si}.block{bi}.fc1.bias"] = block.b1
                params[f"flow.step{si}.block{bi}.fc2.weight"] = block.w2
                params[f"flow.step{si}.block{bi}.fc2.bias"] = block.b2
                params[f"flow.step{si}.block{bi}.fc3.weight"] = block.w3
                params[f"flow.step{si}.block{bi}.fc3.bias"] = block.b3
        adapter_in = (
            self.adapter is not None and self.adapter.trainable
            if include_adapter is None
            else include_adapter and self.adapter is not None
        )
        if adapter_in:
            params["adapter.weight"] = self.adapter.weight
            params["adapter.bias"] = self.adapter.bias
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        target = self.named_parameters(include_adapter=True).get(name)
        if target is None:
            raise ConfigError(f"unknown parameter {name!r}")
        if target.shape != value.shape:
            raise DataError(f"parameter {name!r} shape {target.shape} != {value.shape}")
        target[...] = value

    def state_tensors(self) -> dict[str, np.ndarray]:
        """All tensors that go into a checkpoint, permutations included."""
        tensors = dict(self.named_parameters(include_adapter=True))
        for si, step in enumerate(self.steps):
            for pi, perm in enumerate(step.perms):
                tensors[f"flow.step{si}.perm{pi}"] = perm.astype(np.float64)
        return tensors

    def composed_permutation(self) -> np.ndarray:
        """The pure-permutation action of a zero-initialized model."""
        idx = np.arange(self.channels)
        for step in self.steps:
            for perm in step.perms:
                idx = idx[perm]
        return idx


def init_flow(
    rng: Rng,
    channels: int,
    n_steps: int = 1,
    bottleneck: int = DEFAULT_BOTTLENECK,
    clamp: float = DEFAULT_CLAMP,
    adapter: AdapterParams | None = None,
    dtype=np.float32,
) -> FlowModel:
    """Random flow with identity-at-init blocks (zero final subnet layers)."""
    if channels % 2 != 0:
        raise ConfigError(f"flow channel count must be even, got {channels}")
    if n_steps < 1:
        raise ConfigError(f"flow needs at least one step, got {n_steps}")
    if bottleneck < 1:
        raise ConfigError(f"bottleneck width must be >= 1, got {bottleneck}")
    half = channels // 2
    steps = []
    for _ in range(n_steps):
        perms = [rng.permutation(channels), rng.permutation(channels)]
        blocks = []
        for parity in (0, 1):
            w1 = (rng.normal((bottleneck, half), dtype=np.float64) / np.sqrt(half)).astype(dtype)
            w2 = (rng.normal((bottleneck, bottleneck), dtype=np.float64) / np.sqrt(bottleneck)).astype(dtype)
            blocks.append(
                CouplingBlock(
                    parity=parity,
                    w1=w1,
                    b1=np.zeros(bottleneck, dtype=dtype),
                    w2=w2,
                    b2=np.zeros(bottleneck, dtype=dtype),
                    w3=np.zeros((channels, bottleneck), dtype=dtype),
                    b3=np.zeros(channels, dtype=dtype),
                    clamp=clamp,
                )
            )
        steps.append(FlowStep(perms=perms, blocks=blocks))
    return FlowModel(steps=steps, channels=channels, adapter=adapter, clamp=clamp)


def randomize_flow(model: FlowModel, rng: Rng, scale: float = 0.5) -> FlowModel:
    """Give the final subnet layers nonzero weights (tests need non-identity flows)."""
    for step in model.steps:
        for block in step.blocks:
            dt = block.w3.dtype
            block.w3[...] = (rng.normal(block.w3.shape, dtype=np.float64)
                            * scale / np.sqrt(block.w3.shape[1])).astype(dt)
            block.b3[...] = (rng.normal(block.b3.shape, dtype=np.float64) * scale * 0.1).astype(dt)
    return model


# Spec-facing single-vector helpers.

def coupling_forward(g: np.ndarray, block: CouplingBlock):
    cols, was_vector = _as_columns(g)
    y, logdet = block.forward(cols.astype(block.w1.dtype, copy=False))
    if was_vector:
        return y[:, 0], float(logdet[0])
    return y, logdet


def coupling_inverse(y: np.ndarray, block: CouplingBlock):
    cols, was_vector = _as_columns(y)
    x = block.inverse(cols.astype(block.w1.dtype, copy=False))
    return x[:, 0] if was_vector else x


def flow_forward(g_map: np.ndarray, model: FlowModel):
    return model.forward_map(np.asarray(g_map, dtype=model.steps[0].blocks[0].w1.dtype))


def flow_inverse(z_map: np.ndarray, model: FlowModel):
    return model.inverse_map(np.asarray(z_map, dtype=model.steps[0].blocks[0].w1.dtype))
