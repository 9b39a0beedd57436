"""Dense-tensor math kernel: matmul, bilinear resize, channel concat, seeded RNG.

All maps are numpy float arrays in channel-first layout [C, H, W]. Every
operation here is pure and deterministic; matmul and concatenation delegate
to numpy, bilinear interpolation is written out so the align_corners
semantics stay under our control.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

FLOAT_DTYPES = (np.float32, np.float64)


class Rng:
    """Counter-based random stream (Philox 4x64) with named substreams.

    Identical (seed, stream) pairs produce identical draws on every platform.
    Substreams let independent consumers (adapter init, flow init, shuffling,
    data synthesis) draw without perturbing each other.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([self.seed, self.stream]))
        )

    def child(self, stream: int) -> "Rng":
        """Independent generator for the same seed under a different stream id."""
        return Rng(self.seed, stream)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, items: list) -> None:
        self._gen.shuffle(items)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DataError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DataError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def _source_coords(out_size: int, in_size: int, align_corners: bool) -> np.ndarray:
    """Fractional source coordinates for each output index along one axis."""
    out_idx = np.arange(out_size, dtype=np.float64)
    if align_corners:
        if out_size == 1:
            return np.zeros(1)
        scale = (in_size - 1) / (out_size - 1)
        return out_idx * scale
    scale = in_size / out_size
    coords = (out_idx + 0.5) * scale - 0.5
    return np.clip(coords, 0.0, in_size - 1)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """Per-channel bilinear interpolation of a [C, H, W] map to [C, out_h, out_w].

    Constant fields map to constant fields; resizing to the input size is the
    identity in both align_corners modes.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise DataError(f"bilinear_resize expects [C, H, W], got shape {x.shape}")
    c, h, w = x.shape
    if h < 1 or w < 1:
        raise DataError(f"bilinear_resize input extents must be >= 1, got {h}x{w}")
    if out_h < 1 or out_w < 1:
        raise DataError(f"bilinear_resize target extents must be >= 1, got {out_h}x{out_w}")
    if out_h == h and out_w == w:
        return x.copy()

    ys = _source_coords(out_h, h, align_corners)
    xs = _source_coords(out_w, w, align_corners)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.minimum(y0, h - 1)
    x0 = np.minimum(x0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(x.dtype if x.dtype in FLOAT_DTYPES else np.float64)
    wx = (xs - x0).astype(wy.dtype)

    # Gather the four corners via broadcasting: rows indexed per output y, cols per output x.
    tl = x[:, y0[:, None], x0[None, :]]
    tr = x[:, y0[:, None], x1[None, :]]
    bl = x[:, y1[:, None], x0[None, :]]
    br = x[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * wx[None, None, :]
    bot = bl + (br - bl) * wx[None, None, :]
    out = top + (bot - top) * wy[None, :, None]
    return out.astype(x.dtype, copy=False)


def concat_channels(maps: list[np.ndarray]) -> np.ndarray:
    """Concatenate [C_i, H, W] maps along channels, preserving input order."""
    if not maps:
        raise DataError("concat_channels needs at least one input map")
    base = maps[0].shape[1:]
    for i, m in enumerate(maps):
        if m.ndim != 3:
            raise DataError(f"concat_channels input {i} is not [C, H, W]: shape {m.shape}")
        if m.shape[1:] != base:
            raise DataError(
                f"concat_channels spatial mismatch: input 0 is {base}, input {i} is {m.shape[1:]}"
            )
    if len(maps) == 1:
        return maps[0].copy()
    return np.concatenate(maps, axis=0)
