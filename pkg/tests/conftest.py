import numpy as np
import pytest

from patchnf.config import config_from_dict
from patchnf.synth import SynthSpec, generate, synth_run_config
from patchnf.tensor_io import load_manifest


@pytest.fixture(scope="session")
def benchmark_dataset(tmp_path_factory):
    """The acceptance benchmark: K=2 mixture, delta=3 sigma blobs, 60/40 split."""
    root = tmp_path_factory.mktemp("synth_benchmark")
    spec = SynthSpec(seed=0)
    train_path, test_path = generate(spec, root)
    cfg = config_from_dict(synth_run_config(spec))
    return {
        "spec": spec,
        "cfg": cfg,
        "train_manifest": load_manifest(train_path),
        "test_manifest": load_manifest(test_path),
        "train_path": train_path,
        "test_path": test_path,
    }


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A few-image dataset for fast CLI and pipeline tests."""
    root = tmp_path_factory.mktemp("synth_tiny")
    spec = SynthSpec(
        seed=5,
        hierarchy_channels=[6, 8],
        base_size=[12, 12],
        blob_radius=3.0,
        train_count=8,
        test_normal_count=4,
        test_anomalous_count=4,
        image_size=[48, 48],
    )
    train_path, test_path = generate(spec, root)
    cfg = config_from_dict(
        synth_run_config(spec, channels_out=16, bottleneck=16, epochs=4, batch_size=4)
    )
    return {
        "spec": spec,
        "cfg": cfg,
        "train_manifest": load_manifest(train_path),
        "test_manifest": load_manifest(test_path),
        "train_path": train_path,
        "test_path": test_path,
    }


def rng(seed=0):
    return np.random.default_rng(seed)
