"""Extract multi-hierarchy, multi-scale backbone features for image datasets
and write them in the engine's PFTN/manifest formats.

The backbone stays frozen in eval mode; raw (pre-aggregation) activations are
exported so all patch math lives in the engine. Hierarchies are tapped at
flattened MBConv block indices, counted 1-based across all stages: for
EfficientNet-B5 the default taps 12/19/35 give 64/128/304 channels at
strides 8/16/32, so a 768x768 input yields a 96x96 shallowest grid and a
3-scale channel total of 1488 after engine fusion.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from torchvision import models
from torchvision.transforms.functional import pil_to_tensor, resize

from patchnf.errors import ConfigError, DataError
from patchnf.tensor_io import Manifest, ManifestEntry, save_manifest, write_tensor_file

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ExportSpec:
    backbone: str = "efficientnet_b5"
    block_indices: list[int] = field(default_factory=lambda: [12, 19, 35])
    input_size: int = 768
    scale_factors: list[float] = field(default_factory=lambda: [1.0, 0.75, 0.5])
    weights: str = "pretrained"  # pretrained | none | path to a state dict
    seed: int = 0  # init seed when weights == "none"

    def validate(self) -> "ExportSpec":
        if self.backbone != "efficientnet_b5":
            raise ConfigError(f"unsupported backbone {self.backbone!r}")
        if not self.block_indices or any(
            a >= b for a, b in zip(self.block_indices, self.block_indices[1:])
        ):
            raise ConfigError("block_indices must be strictly increasing")
        if min(self.block_indices) < 1:
            raise ConfigError("block indices are 1-based")
        if self.input_size < 32:
            raise ConfigError(f"input_size too small: {self.input_size}")
        if not self.scale_factors or any(not (0 < f <= 1) for f in self.scale_factors):
            raise ConfigError("scale_factors must lie in (0, 1]")
        return self

    def meta(self) -> dict:
        return {
            "backbone": self.backbone,
            "block_indices": list(self.block_indices),
            "block_indexing": "flattened MBConv blocks, 1-based across stages",
            "input_size": self.input_size,
            "scale_factors": list(self.scale_factors),
            "weights": self.weights,
            "normalization": "none (raw [0,1] pixels)",
        }


def load_export_spec(path) -> ExportSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"export spec not found: {path}")
    values = json.loads(path.read_text(encoding="utf-8"))
    known = {f.name for f in fields(ExportSpec)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{path}: unknown export spec fields {sorted(unknown)}")
    return ExportSpec(**values).validate()


class FeatureTapper:
    """Frozen backbone with forward hooks on selected flattened MBConv blocks."""

    def __init__(self, spec: ExportSpec):
        spec.validate()
        self.spec = spec
        if spec.weights == "pretrained":
            try:
                model = models.efficientnet_b5(
                    weights=models.EfficientNet_B5_Weights.IMAGENET1K_V1
                )
            except Exception as exc:
                raise DataError(
                    f"pretrained weights unavailable ({exc}); pass weights='none' "
                    "or a local state-dict path"
                ) from exc
        else:
            torch.manual_seed(spec.seed)
            model = models.efficientnet_b5(weights=None)
            if spec.weights != "none":
                state_path = Path(spec.weights)
                if not state_path.is_file():
                    raise DataError(f"weights file not found: {state_path}")
                model.load_state_dict(torch.load(state_path, map_location="cpu"))
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model

        blocks = []
        for stage in model.features:
            if isinstance(stage, nn.Sequential):
                for b in stage:
                    if type(b).__name__ in ("MBConv", "FusedMBConv"):
                        blocks.append(b)
        if max(spec.block_indices) > len(blocks):
            raise ConfigError(
                f"block index {max(spec.block_indices)} exceeds {len(blocks)} blocks"
            )
        self._captures: dict[int, torch.Tensor] = {}
        for idx in spec.block_indices:
            blocks[idx - 1].register_forward_hook(self._make_hook(idx))

    def _make_hook(self, idx):
        def hook(module, inputs, output):
            self._captures[idx] = output.detach()

        return hook

    @torch.no_grad()
    def extract(self, image: torch.Tensor) -> list[np.ndarray]:
        """Hierarchy maps [c, h, w] (f32) for one [3, H, W] image in [0, 1]."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise DataError(f"expected a [3, H, W] image tensor, got {tuple(image.shape)}")
        self._captures.clear()
        self.model(image.unsqueeze(0))
        maps = []
        for idx in self.spec.block_indices:
            if idx not in self._captures:
                raise DataError(f"block {idx} produced no activation")
            maps.append(self._captures[idx][0].cpu().numpy().astype(np.float32))
        return maps

    def extract_stack(self, image: torch.Tensor) -> list[np.ndarray]:
        """All scales' hierarchy maps, scale-major, for one full-size image."""
        size = self.spec.input_size
        stack = []
        for factor in self.spec.scale_factors:
            target = max(32, round(size * factor))
            scaled = resize(image, [target, target], antialias=True)
            stack.extend(self.extract(scaled))
        return stack


def load_image(path, input_size: int) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
    except Exception as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    tensor = pil_to_tensor(im).float() / 255.0
    return resize(tensor, [input_size, input_size], antialias=True)


def load_mask(path, input_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
    except Exception as exc:
        raise DataError(f"unreadable mask {path}: {exc}") from exc
    tensor = pil_to_tensor(im)
    scaled = resize(tensor, [input_size, input_size], antialias=False)
    return (scaled[0].numpy() > 0).astype(np.float32)


def _atomic_write_sequence(tensors, path: Path) -> None:
    from patchnf.tensor_io import write_tensor_sequence

    tmp = path.with_suffix(path.suffix + ".tmp")
    write_tensor_sequence(tensors, tmp)
    os.replace(tmp, path)


def _atomic_write_tensor(tensor, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    write_tensor_file(tensor, tmp)
    os.replace(tmp, path)


def _category_images(category_root: Path):
    """MVTec-style layout: train/good, test/<kind>, ground_truth/<kind>."""
    for split in ("train", "test"):
        split_dir = category_root / split
        if not split_dir.is_dir():
            raise DataError(f"missing split directory: {split_dir}")
        for kind_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            kind = kind_dir.name
            if split == "train" and kind != "good":
                raise DataError(
                    f"train split must contain only 'good' images, found {kind_dir}"
                )
            for img in sorted(kind_dir.iterdir()):
                if img.suffix.lower() not in IMAGE_EXTENSIONS:
                    continue
                mask = None
                if kind != "good":
                    gt = category_root / "ground_truth" / kind / f"{img.stem}_mask.png"
                    if gt.is_file():
                        mask = gt
                yield split, kind, img, mask


def export(spec: ExportSpec, dataset_root, category: str, out_dir) -> tuple[Path, Path]:
    """Export one dataset category; returns the train/test manifest paths."""
    spec.validate()
    category_root = Path(dataset_root) / category
    if not category_root.is_dir():
        raise DataError(f"category directory not found: {category_root}")
    out_dir = Path(out_dir)
    tapper = FeatureTapper(spec)

    entries = {"train": [], "test": []}
    dirs = {}
    for split in ("train", "test"):
        dirs[split] = out_dir / split
        dirs[split].mkdir(parents=True, exist_ok=True)

    for split, kind, img_path, mask_path in _category_images(category_root):
        image_id = f"{kind}_{img_path.stem}"
        image = load_image(img_path, spec.input_size)
        stack = tapper.extract_stack(image)
        feature_name = f"{image_id}.pftn"
        _atomic_write_sequence(stack, dirs[split] / feature_name)
        mask_name = None
        if mask_path is not None:
            mask_name = f"{image_id}_mask.pftn"
            _atomic_write_tensor(load_mask(mask_path, spec.input_size), dirs[split] / mask_name)
        entries[split].append(
            ManifestEntry(
                feature_path=feature_name,
                label="normal" if kind == "good" else "anomalous",
                image_id=image_id,
                mask_path=mask_name,
            )
        )

    manifest_paths = []
    for split in ("train", "test"):
        manifest = Manifest(split=split, entries=entries[split], root=dirs[split])
        path = dirs[split] / "manifest.json"
        save_manifest(manifest, path)
        # record the extraction provenance next to the pinned schema fields
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc["meta"] = spec.meta()
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        manifest_paths.append(path)
    return tuple(manifest_paths)
