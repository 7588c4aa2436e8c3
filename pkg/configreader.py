import copy
import hashlib
import json
import logging
import os
from pathlib import Path

from errors import ConfigError
from operators import OPERATORS
from schedules import SCHEDULE_KINDS

logger = logging.getLogger(__name__)

BUNDLED_CONFIG = Path(__file__).resolve().parent / "configs" / "toy_cnn.json"
ENV_CONFIG = "UDC_CONFIG"
ENV_PREFIX = "UDC_"

SECTIONS = ("dataset", "space", "target", "search", "finetune", "codec", "output")
# what a search checkpoint depends on
SEARCH_SECTIONS = ("seed", "dataset", "space", "target", "search")
DATASET_SOURCES = ("blobs", "sr", "idx", "csv")
MASK_CODECS = ("arithmetic", "rle", "raw")
VALUE_CODECS = ("raw", "golomb", "arithmetic")


# ----------------------------
# Defaults
# ----------------------------

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "source": "blobs",
        "shape": [1, 8, 8],
        "train": 512,
        "test": 256,
        "classes": 4,
        "noise": 1.0,
        "normalize": True,
    },
    "space": {
        "template": "cnn",
        "layers": [
            {"name": "conv1", "channels": 8},
            {"name": "conv2", "channels": 16, "stride": 2},
            {"name": "conv3", "channels": 16},
        ],
        "width": [0.25, 0.5, 0.75, 1.0],
        "sparsity": [0.1, 0.3, 0.5, 1.0],
        "bitwidth": [2, 4, 8],
        "operators": ["conv3x3", "conv1x1"],
        "kappa": {"width": "K", "sparsity": 2, "bitwidth": 2, "operator": 1},
        "head": {},
    },
    "target": {"fraction_of_dense8": 0.25},
    "search": {
        "samples": 4,
        "batch_size": 32,
        "warmup_epochs": 2,
        "epochs": 8,
        "flip": False,
        "crop_pad": 0,
        "tau": {"kind": "exponential", "start": 0.66, "end": 0.1},
        "exploitation": {"kind": "linear", "start": 0.1, "end": 1.0},
        "theta_mix": {"kind": "linear", "start": 0.0, "end": 0.5},
        "lr_theta": {"kind": "cosine", "start": 0.1, "end": 1e-4},
        "lr_pi": {"kind": "constant", "value": 1e-3},
        "theta_optimizer": "sgd",
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "rejection": True,
        "rejection_samples": 16,
        "projection": True,
        "regularizer": "sample",
        "normalize": True,
        "lambda": 1.0,
        "mask_refresh_every": 16,
        "workers": 1,
        "log_every": 50,
        "checkpoint_every": 0,
    },
    "finetune": {
        "epochs": [3, 2, 1],
        "batch_size": 32,
        "flip": False,
        "crop_pad": 0,
        "lr_stage1": {"high": 0.1, "low": 1e-4, "first_cycle_epochs": 1, "cycle_mult": 2},
        "lr_stage2": {"kind": "cosine", "start": 0.1, "end": 1e-4},
        "lr_stage3": {"kind": "cosine", "start": 1e-4, "end": 0.0},
        "alpha": {"kind": "linear", "start": 0.5, "end": 1.0},
        "deploy_bits": 8,
        "number_format": "qhat",
        "weight_decay": 5e-4,
        "momentum": 0.9,
        "mask_refresh_every": 16,
    },
    "codec": {"mask_codec": "arithmetic", "value_codec": "golomb"},
    "output": {"dir": "runs/toy"},
}


# ----------------------------
# Config file helpers
# ----------------------------

def get_config_path(explicit: str | None = None) -> Path:
    """
    --config wins, then the UDC_CONFIG environment variable, then the bundled
    toy configuration.
    """
    if explicit:
        return Path(explicit).expanduser()
    override = os.environ.get(ENV_CONFIG)
    if override:
        return Path(override).expanduser()
    return BUNDLED_CONFIG


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _decode(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(cfg: dict, environ=None) -> dict:
    """UDC_<SECTION>_<KEY>=value, JSON-decoded when it parses; UDC_SEED sets the seed."""
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name == ENV_CONFIG:
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest == "seed":
            cfg["seed"] = _decode(raw)
            continue
        section, _, key = rest.partition("_")
        if section not in SECTIONS or not key:
            logger.warning("ignoring environment override %s: unknown section", name)
            continue
        cfg.setdefault(section, {})[key] = _decode(raw)
        logger.info("environment override %s.%s", section, key)
    return cfg


def load_config(path: str | None = None, environ=None) -> dict:
    """Defaults, deep-merged with the config file, then environment overrides; validated."""
    cfg_path = get_config_path(path)
    try:
        with open(cfg_path, encoding="utf-8") as f:
            user = json.load(f) or {}
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {cfg_path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"{cfg_path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError("<file>", f"{cfg_path}: top level must be an object")
    cfg = apply_env_overrides(deep_merge(DEFAULTS, user), environ)
    validate_config(cfg)
    logger.info("loaded config %s", cfg_path)
    return cfg


def save_config(cfg: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp_path, path)


def config_hash(cfg: dict, sections=None) -> str:
    """SHA-256 of the canonical JSON, restricted to `sections` when given."""
    if sections is not None:
        cfg = {key: cfg[key] for key in sections}
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ----------------------------
# Validation
# ----------------------------

def _positive_int(value, path: str):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(path, f"must be a positive integer, got {value!r}")


def _schedule(spec, path: str):
    if not isinstance(spec, dict):
        raise ConfigError(path, f"schedule must be an object, got {spec!r}")
    kind = spec.get("kind", "constant")
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"{path}.kind", f"unknown schedule kind '{kind}', expected one of {SCHEDULE_KINDS}")
    if "start" not in spec and "value" not in spec:
        raise ConfigError(path, "needs 'start' (or 'value' for constants)")
    if kind == "exponential" and (spec.get("start", 0) <= 0 or spec.get("end", spec.get("start", 0)) <= 0):
        raise ConfigError(path, "exponential schedules need positive endpoints")


def _option_list(options, path: str, check):
    if not isinstance(options, list) or not options:
        raise ConfigError(path, "option list is empty")
    for i, value in enumerate(options):
        message = check(value)
        if message:
            raise ConfigError(f"{path}[{i}]", message)


def _width(v):
    return None if isinstance(v, (int, float)) and 0 < v <= 1 else f"width fraction must be in (0, 1], got {v!r}"


def _sparsity(v):
    return None if isinstance(v, (int, float)) and 0 < v <= 1 else f"kept fraction must be in (0, 1], got {v!r}"


def _bitwidth(v):
    ok = isinstance(v, int) and not isinstance(v, bool) and 1 <= v <= 32
    return None if ok else f"bitwidth must be an integer in [1, 32], got {v!r}"


def _operator(v):
    return None if v in OPERATORS else f"unknown operator '{v}'"


def _validate_space(space: dict):
    checks = {"width": _width, "sparsity": _sparsity, "bitwidth": _bitwidth, "operators": _operator}
    for key, check in checks.items():
        _option_list(space.get(key), f"space.{key}", check)
    layers = space.get("layers")
    if not isinstance(layers, list) or not layers:
        raise ConfigError("space.layers", "no layers declared")
    for i, layer in enumerate(layers):
        _positive_int(layer.get("channels"), f"space.layers[{i}].channels")
        for key, check in checks.items():
            if key in layer:
                _option_list(layer[key], f"space.layers[{i}].{key}", check)
    for key, check in (("sparsity", _sparsity), ("bitwidth", _bitwidth)):
        if key in space.get("head", {}):
            _option_list(space["head"][key], f"space.head.{key}", check)


def validate_config(cfg: dict):
    """Raises ConfigError naming the dotted key path of the first problem."""
    if isinstance(cfg.get("seed"), bool) or not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        raise ConfigError("seed", f"must be a nonnegative integer, got {cfg.get('seed')!r}")
    if cfg["dataset"].get("source") not in DATASET_SOURCES:
        raise ConfigError("dataset.source", f"unknown source {cfg['dataset'].get('source')!r}")
    _validate_space(cfg["space"])

    given = [k for k in ("bytes", "bits", "fraction_of_dense8", "macs") if cfg["target"].get(k) is not None]
    if len(given) != 1:
        raise ConfigError("target", f"give exactly one of bytes, bits, fraction_of_dense8, macs (got {given})")
    value = cfg["target"][given[0]]
    if not isinstance(value, (int, float)) or value <= 0:
        raise ConfigError(f"target.{given[0]}", f"must be positive, got {value!r}")

    search = cfg["search"]
    for key in ("samples", "batch_size", "rejection_samples", "mask_refresh_every", "workers", "log_every"):
        _positive_int(search.get(key), f"search.{key}")
    for key in ("tau", "exploitation", "theta_mix", "lr_theta", "lr_pi"):
        _schedule(search.get(key), f"search.{key}")
    if search["regularizer"] not in ("sample", "expected"):
        raise ConfigError("search.regularizer", f"expected 'sample' or 'expected', got {search['regularizer']!r}")
    if search["theta_optimizer"] not in ("sgd", "adam"):
        raise ConfigError("search.theta_optimizer", f"expected 'sgd' or 'adam', got {search['theta_optimizer']!r}")
    if search["lambda"] < 0:
        raise ConfigError("search.lambda", f"must be >= 0, got {search['lambda']}")

    finetune = cfg["finetune"]
    epochs = finetune.get("epochs")
    if not isinstance(epochs, list) or len(epochs) != 3:
        raise ConfigError("finetune.epochs", f"need three stage lengths, got {epochs!r}")
    for i, e in enumerate(epochs):
        _positive_int(e, f"finetune.epochs[{i}]")
    _positive_int(finetune.get("batch_size"), "finetune.batch_size")
    for key in ("lr_stage2", "lr_stage3", "alpha"):
        _schedule(finetune.get(key), f"finetune.{key}")
    for key in ("high", "low", "first_cycle_epochs"):
        if key not in finetune["lr_stage1"]:
            raise ConfigError(f"finetune.lr_stage1.{key}", "missing")
    if finetune["number_format"] not in ("qhat", "q"):
        raise ConfigError("finetune.number_format", f"expected 'qhat' or 'q', got {finetune['number_format']!r}")
    bits = finetune["deploy_bits"]
    if isinstance(bits, bool) or not isinstance(bits, int) or not 1 <= bits < 32:
        raise ConfigError("finetune.deploy_bits", f"must be an integer in [1, 32), got {bits!r}")

    if cfg["codec"]["mask_codec"] not in MASK_CODECS:
        raise ConfigError("codec.mask_codec", f"expected one of {MASK_CODECS}")
    if cfg["codec"]["value_codec"] not in VALUE_CODECS:
        raise ConfigError("codec.value_codec", f"expected one of {VALUE_CODECS}")
