"""Synthetic feature-stack generator with ground-truth masks.

Stands in for a CNN backbone at desk scale: normal patch features are drawn
from a seeded Gaussian mixture (component chosen per image), anomalous test
images get a contiguous disc of positions whose feature vectors are shifted
by delta sigma along a fixed random direction. Files use the exact same
PFTN/Manifest formats as the real exporter, so the engine cannot tell them
apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import Rng
from .tensor_io import Manifest, ManifestEntry, save_manifest, write_tensor_file, write_tensor_sequence

# substream ids: dataset-level draws vs per-image draws
_STREAM_DATASET = 10
_STREAM_IMAGE_BASE = 1000


@dataclass
class SynthSpec:
    hierarchy_channels: list[int] = field(default_factory=lambda: [8, 12])
    base_size: list[int] = field(default_factory=lambda: [24, 24])
    scale_count: int = 3
    scale_factors: list[float] = field(default_factory=lambda: [1.0, 0.75, 0.5])
    hierarchy_stride: int = 2
    mixture_components: int = 2
    mixture_spread: float = 0.2
    sigma: float = 1.0
    anomaly_shift: float = 3.0  # delta, in units of sigma
    blob_radius: float = 7.0  # in base-grid units
    train_count: int = 60
    test_normal_count: int = 20
    test_anomalous_count: int = 20
    image_size: list[int] = field(default_factory=lambda: [128, 128])
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if not self.hierarchy_channels or any(c < 1 for c in self.hierarchy_channels):
            raise ConfigError("hierarchy_channels must be positive")
        if self.scale_count < 1 or self.scale_count > len(self.scale_factors):
            raise ConfigError(
                f"scale_count {self.scale_count} needs that many scale_factors"
            )
        if self.hierarchy_stride < 1:
            raise ConfigError("hierarchy_stride must be >= 1")
        if self.mixture_components < 1:
            raise ConfigError("mixture needs at least one component")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.anomaly_shift < 0:
            raise ConfigError("anomaly_shift must be >= 0")
        if self.train_count < 1 or self.test_normal_count < 0 or self.test_anomalous_count < 0:
            raise ConfigError("invalid split counts")
        h, w = self.base_size
        if self.blob_radius <= 0 or 2 * self.blob_radius >= min(h, w):
            raise ConfigError(
                f"blob radius {self.blob_radius} does not fit a {h}x{w} base grid"
            )
        return self

    def grid_sizes(self) -> list[list[tuple[int, int]]]:
        """Spatial size of every (scale, hierarchy) map."""
        h0, w0 = self.base_size
        sizes = []
        for k in range(self.scale_count):
            factor = self.scale_factors[k]
            per_scale = []
            for j in range(len(self.hierarchy_channels)):
                div = self.hierarchy_stride**j
                per_scale.append(
                    (max(1, round(h0 * factor / div)), max(1, round(w0 * factor / div)))
                )
            sizes.append(per_scale)
        return sizes


def load_synth_spec(path) -> SynthSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"synth spec not found: {path}")
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    known = {f.name for f in fields(SynthSpec)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{path}: unknown synth spec fields {sorted(unknown)}")
    return SynthSpec(**values).validate()


def _disc_mask(h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2


def _align_scale(length_out: int, length_in: int) -> float:
    if length_in <= 1:
        return 1.0
    return (length_out - 1) / (length_in - 1)


def _generate_image(spec: SynthSpec, rng: Rng, means, directions, anomalous: bool):
    """One image's feature stack plus its (possibly empty) defect geometry."""
    h0, w0 = spec.base_size
    blob = None
    if anomalous:
        r = spec.blob_radius
        cy = float(rng.uniform(r, h0 - 1 - r, ()))
        cx = float(rng.uniform(r, w0 - 1 - r, ()))
        blob = (cy, cx, r)
    stack = []
    for k, per_scale in enumerate(spec.grid_sizes()):
        for j, (h, w) in enumerate(per_scale):
            c = spec.hierarchy_channels[j]
            # the mixture lives at patch level: each position draws its component
            component = rng.integers(0, spec.mixture_components, (h, w))
            mean_field = np.stack(means[j], axis=0)[component].transpose(2, 0, 1)
            y = mean_field + spec.sigma * rng.normal((c, h, w), dtype=np.float64)
            if blob is not None and spec.anomaly_shift > 0:
                sy = _align_scale(h, h0)
                sx = _align_scale(w, w0)
                cy, cx, r = blob
                inside = _disc_mask(h, w, cy * sy, cx * sx, r * max(sy, sx))
                shift = spec.anomaly_shift * spec.sigma * directions[j]
                y[:, inside] += shift[:, None]
            stack.append(y.astype(np.float32))
    return stack, blob


def blob_image_mask(spec: SynthSpec, blob) -> np.ndarray:
    """Ground-truth mask at nominal image size (align-corners geometry, so it
    lines up with the engine's upsampled anomaly maps)."""
    cy, cx, r = blob
    img_h, img_w = spec.image_size
    h0, w0 = spec.base_size
    sy = _align_scale(img_h, h0)
    sx = _align_scale(img_w, w0)
    return _disc_mask(img_h, img_w, cy * sy, cx * sx, r * max(sy, sx)).astype(np.float32)


def generate(spec: SynthSpec, out_dir) -> tuple[Path, Path]:
    """Write train/test trees (PFTN stacks, masks, manifests); returns the
    manifest paths. Same spec and seed produce identical bytes."""
    spec.validate()
    out_dir = Path(out_dir)
    train_dir = out_dir / "train"
    test_dir = out_dir / "test"
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)

    dataset_rng = Rng(spec.seed, _STREAM_DATASET)
    means = []
    directions = []
    for c in spec.hierarchy_channels:
        means.append(
            [
                spec.mixture_spread * spec.sigma * dataset_rng.normal(c, dtype=np.float64)
                for _ in range(spec.mixture_components)
            ]
        )
        direction = dataset_rng.normal(c, dtype=np.float64)
        # Defects deviate off the nominal variation axes: project the shift
        # direction out of the span of the component-mean differences so a
        # shifted patch cannot land inside another component's basin.
        center = np.mean(means[-1], axis=0)
        basis = []
        for m in means[-1]:
            v = m - center
            for b in basis:
                v = v - (v @ b) * b
            norm = np.linalg.norm(v)
            if norm > 1e-12:
                basis.append(v / norm)
        for b in basis:
            direction = direction - (direction @ b) * b
        directions.append(direction / np.linalg.norm(direction))

    train_entries = []
    for i in range(spec.train_count):
        rng = Rng(spec.seed, _STREAM_IMAGE_BASE + i)
        stack, _ = _generate_image(spec, rng, means, directions, anomalous=False)
        name = f"train_{i:04d}.pftn"
        write_tensor_sequence(stack, train_dir / name)
        train_entries.append(
            ManifestEntry(feature_path=name, label="normal", image_id=f"train_{i:04d}")
        )
    train_manifest = train_dir / "manifest.json"
    save_manifest(Manifest(split="train", entries=train_entries, root=train_dir), train_manifest)

    test_entries = []
    n_test = spec.test_normal_count + spec.test_anomalous_count
    for i in range(n_test):
        anomalous = i >= spec.test_normal_count
        rng = Rng(spec.seed, _STREAM_IMAGE_BASE + spec.train_count + i)
        stack, blob = _generate_image(spec, rng, means, directions, anomalous=anomalous)
        name = f"test_{i:04d}.pftn"
        write_tensor_sequence(stack, test_dir / name)
        mask_name = None
        if anomalous:
            mask_name = f"mask_{i:04d}.pftn"
            write_tensor_file(blob_image_mask(spec, blob), test_dir / mask_name)
        test_entries.append(
            ManifestEntry(
                feature_path=name,
                label="anomalous" if anomalous else "normal",
                image_id=f"test_{i:04d}",
                mask_path=mask_name,
            )
        )
    test_manifest = test_dir / "manifest.json"
    save_manifest(Manifest(split="test", entries=test_entries, root=test_dir), test_manifest)
    return train_manifest, test_manifest


def synth_run_config(spec: SynthSpec, **overrides) -> dict:
    """RunConfig field values matched to a synthetic dataset's geometry.

    Desk-scale hyperparameters: a 32-wide bottleneck and a slightly higher
    learning rate fit the 32-channel adapted features within a 30-epoch
    budget (the paper-scale defaults of RunConfig target 768 channels).
    """
    values = {
        "scale_count": spec.scale_count,
        "base_size": list(spec.base_size),
        "image_size": list(spec.image_size),
        "channels_out": 32,
        "bottleneck": 32,
        "learning_rate": 1e-3,
        "weight_decay": 1e-4,
        "epochs": 30,
        "seed": spec.seed,
    }
    values.update(overrides)
    return values
