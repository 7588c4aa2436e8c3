"""
Dataset ingestion, random streams, checkpoints and metrics files.
"""

import csv
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from errors import CheckpointError
from errors import CheckpointMismatchError
from errors import ConfigError
from errors import DatasetFormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "UDC-CHECKPOINT"
CHECKPOINT_VERSION = 1
MODULE_VERSIONS = {"tensor_engine": 1, "search_space": 1, "dnas_search": 1, "finetune": 1}

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


# ----------------------------
# Atomic writes
# ----------------------------

def atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)


def atomic_write_json(path, data: dict):
    atomic_write_bytes(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# ----------------------------
# Random streams
# ----------------------------

# every consumer of randomness gets its own counter-based stream
STREAMS = {
    "init": 0,
    "data": 1,
    "coin": 2,
    "sample": 3,
    "quant": 4,
    "trial": 5,
    "dataset": 6,
}


def make_stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    if name not in STREAMS:
        raise ValueError(f"unknown random stream '{name}'")
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], int(index)))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, name: str, index: int) -> int:
    """A child run seed, disjoint from every stream `make_stream` hands out for `seed`."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream '{name}'")
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], int(index), 0))
    return int(seq.generate_state(1, np.uint32)[0])


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return {"__array__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value):
    if isinstance(value, dict):
        if "__array__" in value:
            return np.array(value["__array__"], dtype=value["dtype"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def set_rng_state(rng: np.random.Generator, state: dict):
    rng.bit_generator.state = _from_jsonable(state)


# ----------------------------
# Datasets
# ----------------------------

@dataclass
class Dataset:
    name: str
    task: str  # classification | regression
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_outputs: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def _stats_shape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        return (x - self.mean.reshape(self._stats_shape(x))) / self.std.reshape(self._stats_shape(x))

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        return x * self.std.reshape(self._stats_shape(x)) + self.mean.reshape(self._stats_shape(x))


def _channel_stats(x: np.ndarray):
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetFormatError(str(path), "byte 0", "file shorter than the IDX magic")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DatasetFormatError(str(path), "byte 0", f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetFormatError(str(path), "byte 4", "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) != header_end + count:
        raise DatasetFormatError(str(path), f"byte {header_end}",
                                 f"expected {count} data bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def read_csv(path, shape=None):
    """Rows of `label,feature,...`; every row must have the arity of the first."""
    labels, rows = [], []
    arity = None
    with open(path, newline="", encoding="utf-8") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if arity is None:
                arity = len(row)
            if len(row) != arity:
                raise DatasetFormatError(str(path), f"line {line_no}", f"expected {arity} fields, found {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise DatasetFormatError(str(path), f"line {line_no}", str(e)) from None
    x = np.asarray(rows, dtype=np.float64)
    if shape:
        x = x.reshape((-1,) + tuple(shape))
    return x, np.asarray(labels, dtype=np.int64)


def make_blobs(n_train: int, n_test: int, classes: int, shape, noise: float, rng) -> tuple:
    """Class prototypes plus Gaussian noise; train and test are drawn separately."""
    shape = tuple(shape)
    prototypes = rng.normal(0.0, 1.0, size=(classes,) + shape)
    if len(shape) == 3:
        # smooth the prototypes so convolutions have spatial structure to find
        prototypes = ndimage.gaussian_filter(prototypes, sigma=(0, 0, 1.0, 1.0))
        prototypes /= prototypes.std(axis=tuple(range(1, prototypes.ndim)), keepdims=True)

    def draw(n):
        y = rng.integers(0, classes, size=n)
        x = prototypes[y] + rng.normal(0.0, noise, size=(n,) + shape)
        return x, y

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return x_train, y_train, x_test, y_test


def make_sr_patches(n_train: int, n_test: int, size: int, factor: int, channels: int, rng) -> tuple:
    """Smooth random patches; input is the block-downsampled patch upsampled bilinearly."""
    if size % factor:
        raise ConfigError("dataset.size", f"patch size {size} is not a multiple of factor {factor}")

    def draw(n):
        hi = ndimage.gaussian_filter(rng.normal(size=(n, channels, size, size)), sigma=(0, 0, 1.5, 1.5))
        lo = hi.reshape(n, channels, size // factor, factor, size // factor, factor).mean(axis=(3, 5))
        up = ndimage.zoom(lo, (1, 1, factor, factor), order=1)
        return up, hi

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return x_train, y_train, x_test, y_test


def load_dataset(spec: dict, seed: int) -> Dataset:
    source = spec.get("source", "blobs")
    rng = make_stream(seed, "dataset")
    if source == "blobs":
        shape = tuple(spec.get("shape", (1, 8, 8)))
        x_train, y_train, x_test, y_test = make_blobs(
            spec.get("train", 512), spec.get("test", 256), spec.get("classes", 4), shape, spec.get("noise", 1.0), rng)
        task, outputs = "classification", spec.get("classes", 4)
    elif source == "sr":
        x_train, y_train, x_test, y_test = make_sr_patches(
            spec.get("train", 256), spec.get("test", 64), spec.get("size", 16), spec.get("factor", 4),
            spec.get("channels", 1), rng)
        task, outputs = "regression", spec.get("channels", 1)
    elif source == "idx":
        x_train, y_train, x_test, y_test = _load_idx_split(spec)
        task, outputs = "classification", int(spec.get("classes", int(y_train.max()) + 1))
    elif source == "csv":
        x_train, y_train = read_csv(spec["train_path"], spec.get("shape"))
        x_test, y_test = read_csv(spec["test_path"], spec.get("shape"))
        task, outputs = "classification", int(spec.get("classes", int(y_train.max()) + 1))
    else:
        raise ConfigError("dataset.source", f"unknown source '{source}'")

    if task == "classification":
        for part, y in (("train", y_train), ("test", y_test)):
            if y.size and (y.min() < 0 or y.max() >= outputs):
                raise DatasetFormatError(source, part, f"labels outside [0, {outputs})")

    data = Dataset(source, task, np.asarray(x_train, np.float64), y_train, np.asarray(x_test, np.float64), y_test,
                   int(outputs))
    if spec.get("normalize", True):
        data.mean, data.std = _channel_stats(data.x_train)
        data.x_train = data.normalize(data.x_train)
        data.x_test = data.normalize(data.x_test)
        if task == "regression":
            data.y_train = data.normalize(np.asarray(y_train, np.float64))
            data.y_test = data.normalize(np.asarray(y_test, np.float64))
    logger.info("dataset %s: %d train, %d test, input %s", source, len(data.x_train), len(data.x_test),
                data.input_shape)
    return data


def _load_idx_split(spec: dict):
    parts = []
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if key not in spec:
            raise ConfigError(f"dataset.{key}", "required for idx sources")
        parts.append(read_idx(spec[key]))
    x_train, y_train, x_test, y_test = parts
    limit = spec.get("limit")
    if limit:
        x_train, y_train = x_train[:limit], y_train[:limit]
    # (N, H, W) -> (N, 1, H, W)
    x_train = x_train.reshape(x_train.shape[0], 1, *x_train.shape[1:]).astype(np.float64) / 255.0
    x_test = x_test.reshape(x_test.shape[0], 1, *x_test.shape[1:]).astype(np.float64) / 255.0
    return x_train, y_train.astype(np.int64), x_test, y_test.astype(np.int64)


# ----------------------------
# Minibatches
# ----------------------------

class BatchIterator:
    """
    Endless minibatches over a fixed permutation per epoch. Images may be
    flipped horizontally and randomly cropped after zero padding.
    """

    def __init__(self, x, y, batch_size: int, rng, flip: bool = False, crop_pad: int = 0):
        if batch_size < 1:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        self.x = x
        self.y = y
        self.batch_size = min(batch_size, len(x))
        self.rng = rng
        self.flip = flip and x.ndim == 4
        self.crop_pad = crop_pad if x.ndim == 4 else 0
        self.order = self.rng.permutation(len(x))
        self.position = 0
        self.epoch = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.x) / self.batch_size)

    def __iter__(self):
        return self

    def __next__(self):
        if self.position >= len(self.order):
            self.order = self.rng.permutation(len(self.x))
            self.position = 0
            self.epoch += 1
        idx = self.order[self.position:self.position + self.batch_size]
        self.position += self.batch_size
        x, y = self.x[idx], self.y[idx]
        if self.flip or self.crop_pad:
            x = self._augment(x)
        return x, y

    def _augment(self, x):
        x = x.copy()
        if self.flip:
            flips = self.rng.random(len(x)) < 0.5
            x[flips] = x[flips, :, :, ::-1]
        if self.crop_pad:
            p = self.crop_pad
            h, w = x.shape[2:]
            padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            offsets = self.rng.integers(0, 2 * p + 1, size=(len(x), 2))
            for i, (dy, dx) in enumerate(offsets):
                x[i] = padded[i, :, dy:dy + h, dx:dx + w]
        return x

    def state_dict(self) -> tuple[dict, dict]:
        return {"order": self.order.astype(np.float64)}, {
            "position": self.position, "epoch": self.epoch, "rng": rng_state(self.rng)}

    def load_state_dict(self, tensors: dict, meta: dict):
        self.order = np.asarray(tensors["order"]).astype(np.int64)
        self.position = int(meta["position"])
        self.epoch = int(meta["epoch"])
        set_rng_state(self.rng, meta["rng"])


# ----------------------------
# Checkpoints
# ----------------------------

def save_checkpoint(path, tensors: dict, meta: dict, config_hash: str):
    """
    Text header line, a JSON manifest line, then raw little-endian float64
    payload in manifest order.
    """
    manifest, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        nbytes = arr.nbytes
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": nbytes})
        chunks.append(arr.tobytes())
        offset += nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "modules": MODULE_VERSIONS,
        "config_hash": config_hash,
        "payload_bytes": offset,
        "manifest": manifest,
        "meta": _jsonable(meta),
    }
    text = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{json.dumps(header, sort_keys=True)}\n"
    atomic_write_bytes(path, text.encode("utf-8") + b"".join(chunks))
    logger.debug("checkpoint written to %s (%d tensors)", path, len(manifest))


def load_checkpoint(path, config_hash: str | None = None) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1) if first >= 0 else -1
    if first < 0 or second < 0:
        raise CheckpointError(f"{path}: truncated header")
    magic_line = raw[:first].decode("utf-8", errors="replace").split()
    if len(magic_line) != 2 or magic_line[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(magic_line[1]) != CHECKPOINT_VERSION:
        raise CheckpointMismatchError("version", str(CHECKPOINT_VERSION), magic_line[1])
    try:
        header = json.loads(raw[first + 1:second])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if header.get("modules") != MODULE_VERSIONS:
        raise CheckpointMismatchError("module versions", json.dumps(MODULE_VERSIONS, sort_keys=True),
                                      json.dumps(header.get("modules"), sort_keys=True))
    if config_hash is not None and header["config_hash"] != config_hash:
        raise CheckpointMismatchError("config hash", config_hash, header["config_hash"])

    payload = raw[second + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload, expected {header['payload_bytes']} bytes, "
                              f"found {len(payload)}")
    tensors, end = {}, 0
    for entry in sorted(header["manifest"], key=lambda e: e["offset"]):
        if entry["offset"] < end or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: manifest entry '{entry['name']}' overlaps or runs past the payload")
        end = entry["offset"] + entry["nbytes"]
        arr = np.frombuffer(payload, dtype="<f8", count=entry["nbytes"] // 8, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return tensors, _from_jsonable(header["meta"])


# ----------------------------
# Metrics
# ----------------------------

def _format(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


class MetricsWriter:
    """
    Append-only CSV with a header row. Reopening an existing file with the
    same columns appends; different columns are an error.
    """

    def __init__(self, path, fields):
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, newline="", encoding="utf-8") as f:
                existing = next(csv.reader(f), [])
            if existing != self.fields:
                raise ValueError(f"{self.path}: existing columns {existing} differ from {self.fields}")
        else:
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(self.fields)

    def write(self, row: dict):
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([_format(row.get(k, "")) for k in self.fields])


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
