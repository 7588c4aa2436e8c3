import copy

import numpy as np
import pytest

from configreader import DEFAULTS
from configreader import deep_merge
from configreader import save_config
from data_io import load_dataset
from data_io import make_stream
from supernet import build_supernet

TINY = {
    "seed": 3,
    "dataset": {"source": "blobs", "shape": [1, 4, 4], "train": 48, "test": 24, "classes": 3, "noise": 0.5},
    "space": {
        "template": "cnn",
        "layers": [{"name": "conv1", "channels": 4}, {"name": "conv2", "channels": 4, "stride": 2}],
        "width": [0.5, 1.0],
        "sparsity": [0.25, 1.0],
        "bitwidth": [2, 4],
        "operators": ["conv3x3", "conv1x1"],
        "kappa": {"width": "K", "sparsity": 2, "bitwidth": 2, "operator": 1},
    },
    "target": {"fraction_of_dense8": 0.3},
    "search": {"samples": 2, "batch_size": 16, "warmup_epochs": 1, "epochs": 2, "rejection_samples": 4,
               "mask_refresh_every": 2, "log_every": 1000},
    "finetune": {"epochs": [1, 1, 1], "batch_size": 16, "lr_stage1": {"high": 0.05, "low": 1e-4,
                                                                        "first_cycle_epochs": 1, "cycle_mult": 2}},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return deep_merge(DEFAULTS, copy.deepcopy(TINY))


@pytest.fixture
def tiny_data(tiny_cfg):
    return load_dataset(tiny_cfg["dataset"], tiny_cfg["seed"])


@pytest.fixture
def tiny_net(tiny_cfg, tiny_data):
    return build_supernet(tiny_cfg["space"], tiny_data.input_shape, tiny_data.num_outputs, tiny_data.task,
                          rng=make_stream(tiny_cfg["seed"], "init"))


@pytest.fixture
def mlp_space():
    return {
        "template": "mlp",
        "layers": [{"name": "fc1", "channels": 6}],
        "width": [0.5, 1.0],
        "sparsity": [0.5, 1.0],
        "bitwidth": [1, 4, 32],
        "operators": ["dense"],
        "kappa": {},
    }


@pytest.fixture
def tiny_config_file(tmp_path, monkeypatch):
    for name in ("UDC_CONFIG", "UDC_SEED"):
        monkeypatch.delenv(name, raising=False)
    path = tmp_path / "tiny.json"
    save_config(dict(TINY, output={"dir": str(tmp_path / "run")}), path)
    return path
