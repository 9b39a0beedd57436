"""Linear feature adaptation: a single per-position affine map reducing the
fused patch-feature channels and bridging the pretrain/target distribution gap.

Default mode keeps the adapter frozen after a random orthonormal init; the
trained-joint mode lets the training loop update it (with an orthonormality
penalty applied there to rule out likelihood inflation by contraction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Rng

MODES = ("frozen-random", "trained-joint")


@dataclass
class AdapterParams:
    weight: np.ndarray  # [C_g, C_total]
    bias: np.ndarray  # [C_g]
    mode: str = "frozen-random"

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def trainable(self) -> bool:
        return self.mode == "trained-joint"


def init_adapter(rng: Rng, c_total: int, c_g: int, mode: str = "frozen-random",
                 dtype=np.float32) -> AdapterParams:
    """Orthonormal-row weight init (QR of a seeded Gaussian), zero bias.

    Rows of the returned weight are orthonormal vectors in R^{c_total}, so in
    frozen mode the adapter is a partial isometry and cannot contract features.
    """
    if mode not in MODES:
        raise ConfigError(f"adapter mode must be one of {MODES}, got {mode!r}")
    if c_g > c_total:
        raise ConfigError(f"adapter output channels {c_g} exceed input channels {c_total}")
    gauss = rng.normal((c_total, c_total), dtype=np.float64)
    q, r = np.linalg.qr(gauss)
    # Fix the QR sign ambiguity so equal seeds give identical weights everywhere.
    q = q * np.sign(np.diag(r))[None, :]
    weight = q[:, :c_g].T.astype(dtype)
    bias = np.zeros(c_g, dtype=dtype)
    return AdapterParams(weight=weight, bias=bias, mode=mode)


def adapt(f: np.ndarray, params: AdapterParams) -> np.ndarray:
    """Apply g = W f + b at every spatial position of a [C_total, H, W] map."""
    f = np.asarray(f)
    if f.ndim != 3:
        raise DataError(f"adapt expects [C, H, W], got {f.shape}")
    c, h, w = f.shape
    if c != params.in_channels:
        raise DataError(
            f"adapter expects {params.in_channels} input channels, map has {c}"
        )
    flat = f.reshape(c, h * w)
    out = params.weight @ flat + params.bias[:, None]
    return out.reshape(params.out_channels, h, w)


def adapt_flat(flat: np.ndarray, params: AdapterParams) -> np.ndarray:
    """Same map on already-flattened columns [C_total, N]."""
    if flat.shape[0] != params.in_channels:
        raise DataError(
            f"adapter expects {params.in_channels} input channels, got {flat.shape[0]}"
        )
    return params.weight @ flat + params.bias[:, None]
