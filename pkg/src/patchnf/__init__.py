"""Patch-level anomaly detection with an exact-likelihood normalizing flow.

Pipeline: hierarchy feature stacks -> neighborhood-aware aggregation ->
linear channel adapter -> affine coupling flow -> per-patch NLL scores ->
anomaly maps, image scores, and AUROC/AUPRO evaluation.
"""

from .adapter import AdapterParams, adapt, init_adapter
from .aggregation import (
    AggregationConfig,
    FeatureStack,
    aggregate_hierarchy,
    build_patch_features,
    fuse_hierarchies,
    fuse_scales,
    neighborhood,
)
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericalError, PatchnfError
from .flow import (
    CouplingBlock,
    FlowModel,
    FlowStep,
    coupling_forward,
    coupling_inverse,
    flow_forward,
    flow_inverse,
    init_flow,
)
from .metrics import ProCurve, RocCurve, aupro, auroc, confusion, roc_curve
from .numerics import Rng, bilinear_resize, concat_channels, matmul
from .pipeline import (
    evaluate,
    featurize,
    load_feature_stack,
    model_from_checkpoint,
    score_manifest,
    train_from_manifest,
)
from .scoring import (
    AnomalyResult,
    ThresholdPolicy,
    anomaly_map,
    calibrate_threshold,
    image_score,
    patch_scores,
)
from .synth import SynthSpec, generate
from .tensor_io import (
    Checkpoint,
    Manifest,
    ManifestEntry,
    load_checkpoint,
    load_manifest,
    read_tensor,
    save_checkpoint,
    save_manifest,
    write_tensor,
)
from .training import AdamW, loss, loss_and_grads, train_on_features

__version__ = "0.1.0"
