"""Neighborhood-aware patch features: per-hierarchy local mean aggregation,
hierarchy fusion to a common grid, and multi-scale concatenation.

A feature stack is the per-image input: for each of S scales, a list of
hierarchy maps [c_j, h_j, w_j] with hierarchy 1 spatially largest. The
output patch feature map has S * sum_j(c_j) channels on the base grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numerics import bilinear_resize, concat_channels


@dataclass
class FeatureStack:
    """Per-image hierarchy maps, one list of [c, h, w] arrays per scale."""

    scales: list[list[np.ndarray]]

    def __post_init__(self):
        if not self.scales or any(not hs for hs in self.scales):
            raise DataError("feature stack needs at least one hierarchy per scale")
        for k, hierarchies in enumerate(self.scales):
            for j, y in enumerate(hierarchies):
                if y.ndim != 3:
                    raise DataError(f"scale {k} hierarchy {j} is not [c, h, w]: {y.shape}")
                if j > 0:
                    prev = hierarchies[j - 1]
                    if y.shape[1] > prev.shape[1] or y.shape[2] > prev.shape[2]:
                        raise DataError(
                            f"scale {k}: hierarchy {j} ({y.shape[1]}x{y.shape[2]}) is larger "
                            f"than hierarchy {j - 1} ({prev.shape[1]}x{prev.shape[2]})"
                        )

    @property
    def scale_count(self) -> int:
        return len(self.scales)

    def channels_per_scale(self) -> int:
        return sum(y.shape[0] for y in self.scales[0])


@dataclass
class AggregationConfig:
    patch_size: int = 3
    scale_count: int = 3
    base_size: tuple[int, int] | None = None  # (H_g, W_g); None -> first hierarchy of scale 0
    align_corners: bool = True
    agg_fn: str = "mean"

    def validate(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if self.scale_count not in (1, 2, 3):
            raise ConfigError(f"scale_count must be in 1..3, got {self.scale_count}")
        if self.agg_fn != "mean":
            raise ConfigError(f"unsupported aggregation function {self.agg_fn!r}")
        return self


def neighborhood(h: int, w: int, s: int, H: int, W: int) -> list[tuple[int, int]]:
    """The s*s index multiset centered at (h, w), clamped to the map bounds.

    Out-of-range rows/columns are replicated onto the border, so corner
    neighborhoods repeat the corner index.
    """
    if s < 1 or s % 2 == 0:
        raise DataError(f"patch size must be odd and >= 1, got {s}")
    if not (0 <= h < H and 0 <= w < W):
        raise DataError(f"position ({h},{w}) outside {H}x{W} map")
    r = s // 2
    rows = [min(max(a, 0), H - 1) for a in range(h - r, h + r + 1)]
    cols = [min(max(b, 0), W - 1) for b in range(w - r, w + r + 1)]
    return [(a, b) for a in rows for b in cols]


def aggregate_hierarchy(y: np.ndarray, s: int) -> np.ndarray:
    """Channelwise mean over each position's s*s clamped neighborhood.

    Output spatial size equals input size (replicate padding at the border).
    """
    if s < 1 or s % 2 == 0:
        raise DataError(f"patch size must be odd and >= 1, got {s}")
    y = np.asarray(y)
    if y.ndim != 3:
        raise DataError(f"aggregate_hierarchy expects [c, h, w], got {y.shape}")
    if s == 1:
        return y.copy()
    r = s // 2
    padded = np.pad(y, ((0, 0), (r, r), (r, r)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (s, s), axis=(1, 2))
    return windows.mean(axis=(-2, -1), dtype=np.float64).astype(y.dtype, copy=False)


def fuse_hierarchies(patches: list[np.ndarray], align_corners: bool = True) -> np.ndarray:
    """Resize deeper hierarchy maps to the first hierarchy's grid and concatenate.

    Output channel count is the sum over hierarchies, order preserved.
    """
    if not patches:
        raise DataError("fuse_hierarchies needs a non-empty hierarchy list")
    h1, w1 = patches[0].shape[1], patches[0].shape[2]
    resized = [
        p if p.shape[1:] == (h1, w1) else bilinear_resize(p, h1, w1, align_corners)
        for p in patches
    ]
    return concat_channels(resized)


def fuse_scales(
    per_scale: list[np.ndarray],
    base_size: tuple[int, int],
    scale_count: int,
    align_corners: bool = True,
) -> np.ndarray:
    """Resize each scale's fused map to the base grid and concatenate channels."""
    if len(per_scale) != scale_count:
        raise DataError(
            f"expected {scale_count} per-scale maps, got {len(per_scale)}"
        )
    h_g, w_g = base_size
    resized = [
        m if m.shape[1:] == (h_g, w_g) else bilinear_resize(m, h_g, w_g, align_corners)
        for m in per_scale
    ]
    return concat_channels(resized)


def build_patch_features(stack: FeatureStack, cfg: AggregationConfig) -> np.ndarray:
    """Full aggregation pipeline for one image: [S * C_f, H_g, W_g]."""
    cfg.validate()
    if stack.scale_count < cfg.scale_count:
        raise DataError(
            f"stack has {stack.scale_count} scales but config wants {cfg.scale_count}"
        )
    used = stack.scales[: cfg.scale_count]
    fused = [
        fuse_hierarchies(
            [aggregate_hierarchy(y, cfg.patch_size) for y in hierarchies],
            cfg.align_corners,
        )
        for hierarchies in used
    ]
    base = cfg.base_size if cfg.base_size is not None else fused[0].shape[1:]
    return fuse_scales(fused, tuple(base), cfg.scale_count, cfg.align_corners)
