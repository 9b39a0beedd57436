"""Anomaly scoring: per-patch negative log-likelihood, full-resolution maps,
image scores, threshold calibration, and grayscale/bitmap export.

The per-patch score keeps the log-determinant term (full NLL up to the
Gaussian constant), so it is exactly the per-patch training objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .numerics import bilinear_resize


@dataclass
class AnomalyResult:
    image_id: str
    map: np.ndarray  # [H, W] anomaly scores at input resolution
    image_score: float
    mask: np.ndarray | None = None  # binary [H, W], present once a threshold was applied
    label: str | None = None


@dataclass
class ThresholdPolicy:
    kind: str = "train-max"  # train-max | train-quantile | fixed
    parameter: float = 0.95

    def validate(self):
        if self.kind not in ("train-max", "train-quantile", "fixed"):
            raise ConfigError(f"unknown threshold policy {self.kind!r}")
        if self.kind == "train-quantile" and not (0 < self.parameter <= 1):
            raise ConfigError(f"quantile must be in (0, 1], got {self.parameter}")
        return self


def patch_scores(z_map: np.ndarray, logdet_map: np.ndarray) -> np.ndarray:
    """score(h, w) = ||z(h, w)||^2 / 2 - logdet(h, w) over a [C, H, W] latent map."""
    z_map = np.asarray(z_map)
    logdet_map = np.asarray(logdet_map)
    if z_map.ndim != 3 or logdet_map.shape != z_map.shape[1:]:
        raise DataError(
            f"shape mismatch: z {z_map.shape} vs logdet {logdet_map.shape}"
        )
    scores = 0.5 * np.square(z_map).sum(axis=0) - logdet_map
    if not np.isfinite(scores).all():
        raise NumericalError("non-finite patch scores")
    return scores


def anomaly_map(scores: np.ndarray, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """Bilinear upscale of the patch-score grid to the input resolution."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise DataError(f"anomaly_map expects [H_g, W_g], got {scores.shape}")
    if out_h < scores.shape[0] or out_w < scores.shape[1]:
        raise DataError(
            f"target {out_h}x{out_w} is smaller than the score grid {scores.shape}"
        )
    return bilinear_resize(scores[None], out_h, out_w, align_corners)[0]


def image_score(amap: np.ndarray) -> float:
    amap = np.asarray(amap)
    if amap.size == 0:
        raise DataError("empty anomaly map")
    return float(amap.max())


def calibrate_threshold(train_scores, policy: ThresholdPolicy) -> float:
    """Threshold from defect-free training image scores.

    train-quantile uses the nearest-rank definition: the ceil(q*n)-th smallest.
    """
    policy.validate()
    if policy.kind == "fixed":
        return float(policy.parameter)
    scores = np.asarray(list(train_scores), dtype=np.float64)
    if scores.size == 0:
        raise DataError("cannot calibrate a threshold from zero training scores")
    if policy.kind == "train-max":
        return float(scores.max())
    rank = max(1, math.ceil(policy.parameter * scores.size))
    return float(np.sort(scores)[rank - 1])


def apply_threshold(amap: np.ndarray, threshold: float) -> np.ndarray:
    """Binary mask: map strictly above the threshold."""
    return (np.asarray(amap) > threshold).astype(np.uint8)


# -- grayscale / bitmap export -----------------------------------------------


def write_pgm16(amap: np.ndarray, path) -> tuple[float, float]:
    """16-bit P5 graymap with linear min-max normalization.

    The (min, max) pair used for normalization is returned and recorded in a
    sidecar text file '<path>.txt' so raw scores stay recoverable.
    """
    amap = np.asarray(amap, dtype=np.float64)
    if amap.ndim != 2:
        raise DataError(f"PGM export expects a 2-D map, got {amap.shape}")
    lo, hi = float(amap.min()), float(amap.max())
    span = hi - lo
    norm = np.zeros_like(amap) if span == 0 else (amap - lo) / span
    pixels = np.round(norm * 65535).astype(">u2")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{amap.shape[1]} {amap.shape[0]}\n65535\n".encode("ascii"))
        f.write(pixels.tobytes())
    Path(str(path) + ".txt").write_text(f"min {lo!r}\nmax {hi!r}\n", encoding="ascii")
    return lo, hi


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(parts[3], dtype=dtype, count=h * w).reshape(h, w).astype(np.uint32)


def write_pbm(mask: np.ndarray, path) -> None:
    """1-bit P4 bitmap, rows packed MSB-first (1 = anomalous pixel)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"PBM export expects a 2-D mask, got {mask.shape}")
    bits = (mask > 0).astype(np.uint8)
    packed = np.packbits(bits, axis=1)
    with open(path, "wb") as f:
        f.write(f"P4\n{mask.shape[1]} {mask.shape[0]}\n".encode("ascii"))
        f.write(packed.tobytes())


def read_pbm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 2)
    if len(parts) < 3 or parts[0] != b"P4":
        raise DataError(f"{path}: not a binary PBM")
    w, h = (int(v) for v in parts[1].split())
    row_bytes = (w + 7) // 8
    raw = np.frombuffer(parts[2], dtype=np.uint8, count=h * row_bytes).reshape(h, row_bytes)
    return np.unpackbits(raw, axis=1)[:, :w]
