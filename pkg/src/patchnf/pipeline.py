"""End-to-end glue: feature files -> aggregation -> adapter -> flow -> scores,
checkpoint round-trips, evaluation reports, and the ablation harness.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .adapter import AdapterParams, adapt
from .aggregation import AggregationConfig, FeatureStack, build_patch_features
from .config import RunConfig, config_from_dict
from .errors import ConfigError, DataError
from .flow import CouplingBlock, FlowModel, FlowStep
from .metrics import aupro, auroc, confusion
from .scoring import (
    AnomalyResult,
    ThresholdPolicy,
    anomaly_map,
    apply_threshold,
    calibrate_threshold,
    image_score,
    patch_scores,
)
from .tensor_io import Checkpoint, Manifest, read_tensor_file, read_tensor_sequence
from .training import TrainResult, train_on_features


def split_scales(tensors: list[np.ndarray]) -> list[list[np.ndarray]]:
    """Group a flat scale-major tensor sequence into per-scale hierarchy lists.

    Within a scale the hierarchy maps shrink (h^j >= h^{j+1}); a new scale
    starts wherever the spatial size grows again relative to its predecessor.
    """
    groups: list[list[np.ndarray]] = []
    for t in tensors:
        if t.ndim != 3:
            raise DataError(f"feature tensors must be [c, h, w], got {t.shape}")
        if groups and (
            t.shape[1] > groups[-1][-1].shape[1] or t.shape[2] > groups[-1][-1].shape[2]
        ):
            groups.append([t])
        elif not groups:
            groups.append([t])
        else:
            groups[-1].append(t)
    return groups


def load_feature_stack(path) -> FeatureStack:
    return FeatureStack(scales=split_scales(read_tensor_sequence(path)))


def aggregation_config(cfg: RunConfig) -> AggregationConfig:
    base = tuple(cfg.base_size) if cfg.base_size is not None else None
    return AggregationConfig(
        patch_size=cfg.patch_size,
        scale_count=cfg.scale_count,
        base_size=base,
        align_corners=cfg.align_corners,
    )


def featurize(stack: FeatureStack, cfg: RunConfig) -> np.ndarray:
    return build_patch_features(stack, aggregation_config(cfg))


def model_from_checkpoint(ck: Checkpoint) -> tuple[FlowModel, RunConfig]:
    """Rebuild the flow and adapter exactly as serialized."""
    raw = dict(ck.config)
    threshold = raw.pop("threshold", None)
    raw.pop("c_total", None)
    cfg = config_from_dict(raw, "checkpoint config")

    tensors = ck.tensors
    if "adapter.weight" not in tensors or "adapter.bias" not in tensors:
        raise DataError("checkpoint is missing adapter tensors")
    adapter = AdapterParams(
        weight=tensors["adapter.weight"],
        bias=tensors["adapter.bias"],
        mode=cfg.adapter_mode,
    )
    steps = []
    for si in range(cfg.flow_steps):
        perms = []
        blocks = []
        for bi in range(2):
            pname = f"flow.step{si}.perm{bi}"
            if pname not in tensors:
                raise DataError(f"checkpoint is missing {pname}")
            perms.append(tensors[pname].astype(np.intp))
            layer = {}
            for lname in ("fc1", "fc2", "fc3"):
                for part in ("weight", "bias"):
                    key = f"flow.step{si}.block{bi}.{lname}.{part}"
                    if key not in tensors:
                        raise DataError(f"checkpoint is missing {key}")
                    layer[f"{lname}.{part}"] = tensors[key]
            blocks.append(
                CouplingBlock(
                    parity=bi,
                    w1=layer["fc1.weight"],
                    b1=layer["fc1.bias"],
                    w2=layer["fc2.weight"],
                    b2=layer["fc2.bias"],
                    w3=layer["fc3.weight"],
                    b3=layer["fc3.bias"],
                    clamp=cfg.clamp,
                )
            )
        steps.append(FlowStep(perms=perms, blocks=blocks))
    model = FlowModel(
        steps=steps, channels=cfg.channels_out, adapter=adapter, clamp=cfg.clamp
    )
    if threshold is not None:
        ck.config["threshold"] = threshold
    return model, cfg


def score_features(model: FlowModel, fused: np.ndarray, cfg: RunConfig,
                   image_id: str, threshold: float | None = None,
                   label: str | None = None) -> AnomalyResult:
    """Adapted features -> latent -> per-patch NLL -> full-resolution map."""
    if model.adapter is None:
        raise ConfigError("model has no adapter attached")
    g = adapt(fused.astype(model.adapter.weight.dtype), model.adapter)
    z_map, logdet_map = model.forward_map(g)
    scores = patch_scores(z_map, logdet_map)
    h, w = (int(v) for v in cfg.image_size)
    amap = anomaly_map(scores, h, w, cfg.align_corners)
    result = AnomalyResult(
        image_id=image_id,
        map=amap,
        image_score=image_score(amap),
        label=label,
    )
    if threshold is not None:
        result.mask = apply_threshold(amap, threshold)
    return result


def score_stack_file(model: FlowModel, cfg: RunConfig, path, image_id: str,
                     threshold: float | None = None,
                     label: str | None = None) -> AnomalyResult:
    stack = load_feature_stack(path)
    fused = featurize(stack, cfg)
    return score_features(model, fused, cfg, image_id, threshold, label)


def score_manifest(model: FlowModel, cfg: RunConfig, manifest: Manifest,
                   threshold: float | None = None,
                   threads: int | None = None) -> list[AnomalyResult]:
    """Score every manifest entry; per-image work is independent, so thread
    count cannot change the numbers."""
    workers = threads if threads is not None else cfg.threads

    def one(entry):
        return score_stack_file(
            model, cfg, manifest.resolve(entry.feature_path), entry.image_id,
            threshold, entry.label,
        )

    if workers <= 1:
        return [one(e) for e in manifest.entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, manifest.entries))


def train_from_manifest(manifest: Manifest, cfg: RunConfig) -> TrainResult:
    """Full training entry point: aggregate, fit, calibrate the threshold."""
    if manifest.split != "train":
        raise DataError(f"training requires the train split, got {manifest.split!r}")
    if not manifest.entries:
        raise DataError("training manifest has no entries")
    cfg.validate()
    feature_maps = []
    for entry in manifest.entries:
        stack = load_feature_stack(manifest.resolve(entry.feature_path))
        feature_maps.append(featurize(stack, cfg))
    result = train_on_features(feature_maps, cfg)

    policy = ThresholdPolicy(kind=cfg.threshold_policy, parameter=cfg.threshold_param)
    train_results = score_manifest(result.model, cfg, manifest)
    threshold = calibrate_threshold([r.image_score for r in train_results], policy)
    result.threshold = threshold
    result.checkpoint.config["threshold"] = threshold
    return result


def evaluate(model: FlowModel, cfg: RunConfig, manifest: Manifest,
             threshold: float | None = None,
             threads: int | None = None) -> dict:
    """Score a labeled test manifest and assemble the metrics report."""
    if not manifest.entries:
        raise DataError("evaluation manifest has no entries")
    results = score_manifest(model, cfg, manifest, threshold, threads)
    labels = np.array([1 if e.label == "anomalous" else 0 for e in manifest.entries])
    scores = np.array([r.image_score for r in results])
    report: dict = {
        "auroc": auroc(scores, labels),
        "per_image": [
            {"image_id": r.image_id, "label": e.label, "score": r.image_score}
            for r, e in zip(results, manifest.entries)
        ],
    }

    anomalous = [e for e in manifest.entries if e.label == "anomalous"]
    with_masks = [e for e in anomalous if e.mask_path]
    if anomalous and len(with_masks) == len(anomalous):
        maps = []
        masks = []
        for entry, result in zip(manifest.entries, results):
            maps.append(result.map)
            if entry.mask_path:
                mask = read_tensor_file(manifest.resolve(entry.mask_path))
                if mask.shape != result.map.shape:
                    raise DataError(
                        f"{entry.image_id}: mask {mask.shape} vs map {result.map.shape}"
                    )
                masks.append(mask)
            else:
                masks.append(np.zeros_like(result.map))
        report["aupro"] = aupro(maps, masks, cfg.fpr_limit)
    else:
        report["aupro"] = None
        report["aupro_note"] = "omitted: ground-truth masks absent"

    if threshold is not None:
        report["threshold"] = threshold
        report["confusion"] = confusion(scores, labels, threshold)
    return report


ABLATION_PARAMS = {"flow_steps": range(1, 6), "scales": range(1, 4)}


def run_ablation(train_manifest: Manifest, test_manifest: Manifest,
                 cfg: RunConfig, param: str, values: list[int]) -> list[dict]:
    """Retrain and evaluate along one hyperparameter axis (same seed per row)."""
    if param not in ABLATION_PARAMS:
        raise ConfigError(f"unknown ablation parameter {param!r}")
    rows = []
    for value in values:
        if param == "flow_steps":
            row_cfg = replace(cfg, flow_steps=value)
        else:
            row_cfg = replace(cfg, scale_count=value)
            # fewer scales can leave fewer fused channels than channels_out;
            # cap the adapter width at the largest even count available
            first = load_feature_stack(
                train_manifest.resolve(train_manifest.entries[0].feature_path)
            )
            available = value * first.channels_per_scale()
            if available < row_cfg.channels_out:
                row_cfg = replace(row_cfg, channels_out=available - (available % 2))
        row_cfg.validate()
        result = train_from_manifest(train_manifest, row_cfg)
        model, loaded_cfg = model_from_checkpoint(result.checkpoint)
        report = evaluate(model, loaded_cfg, test_manifest, result.threshold)
        rows.append(
            {
                param: value,
                "auroc": report["auroc"],
                "aupro": report.get("aupro"),
                "train_loss": result.history[result.best_epoch][1],
            }
        )
    return rows
