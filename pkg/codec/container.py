"""
Binary containers for deployed networks.

A tensor record is a fixed-width little-endian header followed by the coded
mask stream and the coded stream of nonzero weight symbols:

    "UDCW" version:u16 ndim:u8 dims:u32*ndim
    bits:u8 grid_bits:u8 shifted:u8 nnz:u32 r:f64 beta:f64
    mask_codec:u8 value_codec:u8 k:u8
    mask_bits:u32 mask_bytes:u32 value_bits:u32 value_bytes:u32
    mask payload, value payload

Quantized layers store zigzag(q) of the signed levels q on their searched
b-bit grid, so every symbol lies in [0, 2^b). Float layers store float32.
A network container is "UDCNET01", a u32 layer count, one record per layer
and a trailing JSON block describing the network.
"""

import csv
import io
import json
import logging
import struct
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np

from codec.arithmetic import arithmetic_decode_mask
from codec.arithmetic import arithmetic_decode_symbols
from codec.arithmetic import arithmetic_encode_mask
from codec.arithmetic import arithmetic_encode_symbols
from codec.bitio import Bitstream
from codec.golomb import best_k
from codec.golomb import golomb_rice_decode
from codec.golomb import golomb_rice_encode
from codec.golomb import rle_decode_mask
from codec.golomb import rle_encode_mask
from codec.golomb import unzigzag
from codec.golomb import zigzag
from errors import CorruptStreamError
from finetune import DeployedLayer
from finetune import DeployedNetwork
from search_space import FLOAT_BITS
from size_model import binary_entropy
from size_model import empirical_entropy

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"UDCW"
NETWORK_MAGIC = b"UDCNET01"
FORMAT_VERSION = 1

MASK_CODECS = {"arithmetic": 0, "rle": 1, "raw": 2}
VALUE_CODECS = {"raw": 0, "golomb": 1, "arithmetic": 2, "float32": 3}


class _Cursor:
    def __init__(self, blob: bytes, offset: int = 0):
        self.blob = blob
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CorruptStreamError(8 * self.offset, f"truncated {what}: need {n} bytes, "
                                                      f"{len(self.blob) - self.offset} left")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        return self.take(n, what).decode("utf-8")


def _codec_name(table: dict, code: int, offset: int) -> str:
    for name, value in table.items():
        if value == code:
            return name
    raise CorruptStreamError(8 * offset, f"unknown codec id {code}")


# ----------------------------
# Tensors
# ----------------------------

@dataclass
class CompressedTensor:
    shape: tuple
    bits: int
    grid_bits: int
    shifted: bool
    nnz: int
    level_range: float
    beta: float
    mask_codec: str
    value_codec: str
    k: int
    mask_stream: Bitstream
    value_stream: Bitstream

    @property
    def elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def header_bytes(self) -> int:
        return 7 + 4 * len(self.shape) + 7 + 16 + 3 + 16

    @property
    def payload_bits(self) -> int:
        """Coded mask plus coded values, the quantity the size model predicts."""
        return self.mask_stream.bits + self.value_stream.bits

    def to_bytes(self) -> bytes:
        parts = [
            struct.pack("<4sHB", TENSOR_MAGIC, FORMAT_VERSION, len(self.shape)),
            struct.pack(f"<{len(self.shape)}I", *self.shape),
            struct.pack("<BBBI", self.bits, self.grid_bits, int(self.shifted), self.nnz),
            struct.pack("<dd", self.level_range, self.beta),
            struct.pack("<BBB", MASK_CODECS[self.mask_codec], VALUE_CODECS[self.value_codec], self.k),
            struct.pack("<IIII", self.mask_stream.bits, self.mask_stream.nbytes,
                        self.value_stream.bits, self.value_stream.nbytes),
            self.mask_stream.data,
            self.value_stream.data,
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["CompressedTensor", int]:
        """Parse one record starting at `offset`; returns it and the offset just past it."""
        cur = _Cursor(blob, offset)
        magic, version, ndim = cur.unpack("<4sHB", "tensor header")
        if magic != TENSOR_MAGIC:
            raise CorruptStreamError(8 * offset, f"bad tensor magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CorruptStreamError(8 * offset, f"unsupported tensor format version {version}")
        shape = cur.unpack(f"<{ndim}I", "tensor dims")
        bits, grid_bits, shifted, nnz = cur.unpack("<BBBI", "tensor header")
        level_range, beta = cur.unpack("<dd", "tensor header")
        codec_at = cur.offset
        mask_id, value_id, k = cur.unpack("<BBB", "tensor header")
        mask_bits, mask_bytes, value_bits, value_bytes = cur.unpack("<IIII", "stream lengths")
        for name, nbits, nbytes in (("mask", mask_bits, mask_bytes), ("value", value_bits, value_bytes)):
            if (nbits + 7) // 8 != nbytes:
                raise CorruptStreamError(8 * cur.offset, f"{name} stream declares {nbits} bits in {nbytes} bytes")
        if nnz > int(np.prod(shape)):
            raise CorruptStreamError(8 * offset, f"{nnz} nonzeros in a tensor of {int(np.prod(shape))}")
        mask_stream = Bitstream(cur.take(mask_bytes, "mask stream"), mask_bits)
        value_stream = Bitstream(cur.take(value_bytes, "value stream"), value_bits)
        tensor = cls(tuple(shape), bits, grid_bits, bool(shifted), nnz, level_range, beta,
                     _codec_name(MASK_CODECS, mask_id, codec_at), _codec_name(VALUE_CODECS, value_id, codec_at + 1),
                     k, mask_stream, value_stream)
        return tensor, cur.offset


def encode_mask(mask, codec: str) -> Bitstream:
    flat = (np.asarray(mask).reshape(-1) > 0).astype(np.uint8)
    if codec == "arithmetic":
        return arithmetic_encode_mask(flat)
    if codec == "rle":
        return rle_encode_mask(flat)
    if codec == "raw":
        return Bitstream(np.packbits(flat).tobytes(), flat.size)
    raise ValueError(f"unknown mask codec '{codec}'")


def decode_mask(stream: Bitstream, n: int, codec: str) -> np.ndarray:
    if codec == "arithmetic":
        return arithmetic_decode_mask(stream, n)
    if codec == "rle":
        return rle_decode_mask(stream, n)
    if stream.bits != n:
        raise CorruptStreamError(0, f"raw mask holds {stream.bits} bits for {n} elements")
    return np.unpackbits(np.frombuffer(stream.data, dtype=np.uint8))[:n]


def _raw_symbols(symbols: np.ndarray, width: int) -> Bitstream:
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((symbols[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return Bitstream(np.packbits(bits).tobytes(), int(bits.size))


def _raw_decode(stream: Bitstream, count: int, width: int) -> np.ndarray:
    if stream.bits != count * width:
        raise CorruptStreamError(0, f"raw value stream holds {stream.bits} bits for {count} x {width}")
    bits = np.unpackbits(np.frombuffer(stream.data, dtype=np.uint8))[:stream.bits].astype(np.int64)
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits.reshape(count, width) @ weights if count else np.zeros(0, dtype=np.int64)


def encode_values(symbols: np.ndarray, bits: int, codec: str) -> tuple[Bitstream, int]:
    """(stream, Golomb-Rice k) for nonnegative symbols below 2^bits."""
    if codec == "raw":
        return _raw_symbols(symbols, bits), 0
    if codec == "golomb":
        k = best_k(symbols, bits)
        return golomb_rice_encode(symbols, k), k
    if codec == "arithmetic":
        return arithmetic_encode_symbols(symbols, 1 << bits), 0
    raise ValueError(f"unknown value codec '{codec}'")


def decode_values(stream: Bitstream, count: int, bits: int, codec: str, k: int) -> np.ndarray:
    if codec == "raw":
        return _raw_decode(stream, count, bits)
    if codec == "golomb":
        return golomb_rice_decode(stream, count, k, (1 << bits) - 1)
    if codec == "arithmetic":
        return arithmetic_decode_symbols(stream, count, 1 << bits)
    raise CorruptStreamError(0, f"value codec '{codec}' cannot carry {bits}-bit symbols")


def layer_symbols(layer: DeployedLayer) -> np.ndarray:
    keep = layer.mask.reshape(-1) > 0
    return zigzag(layer.levels.reshape(-1)[keep])


def compress_tensor(layer: DeployedLayer, mask_codec: str = "arithmetic", value_codec: str = "golomb") -> CompressedTensor:
    mask = layer.mask
    keep = mask.reshape(-1) > 0
    nnz = int(keep.sum())
    mask_stream = encode_mask(mask, mask_codec)
    if layer.bits >= FLOAT_BITS:
        values = layer.weights.reshape(-1)[keep].astype("<f4")
        return CompressedTensor(mask.shape, FLOAT_BITS, FLOAT_BITS, False, nnz, 0.0, 0.0, mask_codec, "float32", 0,
                                mask_stream, Bitstream(values.tobytes(), 32 * nnz))
    value_stream, k = encode_values(layer_symbols(layer), layer.bits, value_codec)
    return CompressedTensor(mask.shape, layer.bits, layer.grid_bits, layer.shifted, nnz, layer.level_range,
                            layer.beta, mask_codec, value_codec, k, mask_stream, value_stream)


def decompress_tensor(tensor: CompressedTensor) -> tuple[np.ndarray, np.ndarray]:
    """(mask, levels) for quantized tensors, (mask, float weights) for float ones."""
    n = tensor.elements
    mask = decode_mask(tensor.mask_stream, n, tensor.mask_codec)
    keep = mask > 0
    if int(keep.sum()) != tensor.nnz:
        raise CorruptStreamError(0, f"mask decodes to {int(keep.sum())} nonzeros, header says {tensor.nnz}")
    if tensor.value_codec == "float32":
        if tensor.value_stream.bits != 32 * tensor.nnz:
            raise CorruptStreamError(0, f"float stream holds {tensor.value_stream.bits} bits for {tensor.nnz} values")
        values = np.zeros(n)
        values[keep] = np.frombuffer(tensor.value_stream.data, dtype="<f4").astype(np.float64)
        return mask.reshape(tensor.shape), values.reshape(tensor.shape)
    symbols = decode_values(tensor.value_stream, tensor.nnz, tensor.bits, tensor.value_codec, tensor.k)
    levels = np.zeros(n, dtype=np.int64)
    levels[keep] = unzigzag(symbols)
    return mask.reshape(tensor.shape), levels.reshape(tensor.shape)


# ----------------------------
# Size report
# ----------------------------

@dataclass
class LayerReport:
    name: str
    elements: int
    bits: int
    sparsity: float
    nonzeros: int
    original_bits: int  # 32 bits per element
    predicted_bits: float  # (b + H_b(s)) per element
    mask_entropy_bits: float  # n·H_b(ŝ) at the empirical nonzero rate
    empirical_bits: float  # n x plug-in entropy of Q(θ)⊙m
    arithmetic_mask_bits: int
    rle_mask_bits: int
    value_bits: int
    golomb_value_bits: int
    stored_bits: int  # mask + values of the configured codecs

    @property
    def arithmetic_bits(self) -> int:
        return self.arithmetic_mask_bits + self.value_bits

    @property
    def rle_golomb_bits(self) -> int:
        return self.rle_mask_bits + self.golomb_value_bits

    @property
    def ratio(self) -> float:
        """Achieved arithmetic-coded size over the prediction."""
        return self.arithmetic_bits / self.predicted_bits if self.predicted_bits else 1.0

    def as_dict(self) -> dict:
        row = asdict(self)
        row.update(arithmetic_bits=self.arithmetic_bits, rle_golomb_bits=self.rle_golomb_bits, ratio=self.ratio)
        return row


REPORT_FIELDS = ["name", "elements", "bits", "sparsity", "nonzeros", "original_bits", "predicted_bits",
                 "mask_entropy_bits", "empirical_bits", "arithmetic_mask_bits", "rle_mask_bits", "value_bits",
                 "golomb_value_bits", "arithmetic_bits", "rle_golomb_bits", "stored_bits", "ratio"]


def report_layer(layer: DeployedLayer, tensor: CompressedTensor) -> LayerReport:
    n = tensor.elements
    mask = layer.mask.reshape(-1) > 0
    nnz = int(mask.sum())
    if tensor.value_codec == "float32":
        value_bits = golomb_bits = tensor.value_stream.bits
        combined = np.where(mask, layer.weights.reshape(-1), 0.0)
    else:
        symbols = layer_symbols(layer)
        value_bits = encode_values(symbols, layer.bits, "arithmetic")[0].bits \
            if tensor.value_codec != "arithmetic" else tensor.value_stream.bits
        golomb_bits = encode_values(symbols, layer.bits, "golomb")[0].bits \
            if tensor.value_codec != "golomb" else tensor.value_stream.bits
        # zero marks a pruned weight, symbol + 1 a kept one
        combined = np.zeros(n, dtype=np.int64)
        combined[mask] = symbols + 1
    ac_mask = tensor.mask_stream.bits if tensor.mask_codec == "arithmetic" else arithmetic_encode_mask(mask).bits
    rle_mask = tensor.mask_stream.bits if tensor.mask_codec == "rle" else rle_encode_mask(mask).bits
    return LayerReport(
        name=layer.name, elements=n, bits=layer.bits, sparsity=layer.sparsity, nonzeros=nnz,
        original_bits=FLOAT_BITS * n,
        predicted_bits=(layer.bits + binary_entropy(layer.sparsity)) * n,
        mask_entropy_bits=n * binary_entropy(nnz / n),
        empirical_bits=n * empirical_entropy(combined),
        arithmetic_mask_bits=ac_mask, rle_mask_bits=rle_mask, value_bits=value_bits, golomb_value_bits=golomb_bits,
        stored_bits=tensor.payload_bits,
    )


def report_totals(rows: list[LayerReport]) -> dict:
    totals = {name: sum(row.as_dict()[name] for row in rows) for name in REPORT_FIELDS[5:-1]}
    totals.update(name="total", elements=sum(r.elements for r in rows), bits="", sparsity="",
                  nonzeros=sum(r.nonzeros for r in rows))
    totals["ratio"] = totals["arithmetic_bits"] / totals["predicted_bits"] if totals["predicted_bits"] else 1.0
    return totals


def format_report(rows: list[LayerReport], fmt: str = "text") -> str:
    records = [row.as_dict() for row in rows] + [report_totals(rows)]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format '{fmt}'")
    lines = [f"{'layer':<16}{'orig KB':>10}{'predicted KB':>13}{'arith KB':>10}{'rle+gr KB':>11}{'ratio':>8}"]
    for rec in records:
        kb = [rec[key] / 8192 for key in ("original_bits", "predicted_bits", "arithmetic_bits", "rle_golomb_bits")]
        lines.append(f"{rec['name']:<16}{kb[0]:>10.2f}{kb[1]:>13.2f}{kb[2]:>10.2f}{kb[3]:>11.2f}{rec['ratio']:>8.3f}")
    return "\n".join(lines)


# ----------------------------
# Networks
# ----------------------------

def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def compress_network(net: DeployedNetwork, mask_codec: str = "arithmetic",
                     value_codec: str = "golomb") -> tuple[bytes, list[LayerReport]]:
    """Container bytes plus one report row per weighted layer, in layer order."""
    parts = [NETWORK_MAGIC, struct.pack("<I", len(net.layers))]
    rows = []
    for layer in net.layers:
        parts += [_text(layer.name), _text(layer.op),
                  struct.pack("<BBB", layer.stride, int(layer.activation), int(layer.weighted))]
        if not layer.weighted:
            continue
        tensor = compress_tensor(layer, mask_codec, value_codec)
        blob = tensor.to_bytes()
        bias = np.asarray(layer.bias, dtype="<f4")
        parts += [struct.pack("<dI", layer.sparsity, len(blob)), blob, struct.pack("<I", bias.size), bias.tobytes()]
        rows.append(report_layer(layer, tensor))
        logger.debug("%s: %d payload bits, %d predicted", layer.name, tensor.payload_bits, rows[-1].predicted_bits)
    meta = json.dumps({"input_shape": list(net.input_shape), "num_outputs": net.num_outputs, "task": net.task,
                       "template": net.template, "pool_at": net.pool_at}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta]
    return b"".join(parts), rows


def read_network(blob: bytes) -> tuple[DeployedNetwork, list[CompressedTensor]]:
    """The decoded network plus the stored record of every weighted layer."""
    cur = _Cursor(blob)
    tensors = []
    if cur.take(len(NETWORK_MAGIC), "network magic") != NETWORK_MAGIC:
        raise CorruptStreamError(0, "not a network container")
    (count,) = cur.unpack("<I", "layer count")
    layers = []
    for _ in range(count):
        name = cur.text("layer name")
        op = cur.text("operator name")
        stride, activation, weighted = cur.unpack("<BBB", "layer record")
        common = dict(name=name, op=op, stride=stride, activation=bool(activation))
        if not weighted:
            layers.append(DeployedLayer(**common, bits=0))
            continue
        sparsity, size = cur.unpack("<dI", "layer record")
        start = cur.offset
        tensor, end = CompressedTensor.from_bytes(blob, start)
        if end - start != size:
            raise CorruptStreamError(8 * start, f"tensor record is {end - start} bytes, layer says {size}")
        cur.offset = end
        tensors.append(tensor)
        (nbias,) = cur.unpack("<I", "bias count")
        bias = np.frombuffer(cur.take(4 * nbias, "biases"), dtype="<f4").astype(np.float64)
        mask, payload = decompress_tensor(tensor)
        if tensor.value_codec == "float32":
            layers.append(DeployedLayer(**common, bits=FLOAT_BITS, grid_bits=FLOAT_BITS, mask=mask, bias=bias,
                                        sparsity=sparsity, float_weights=payload))
        else:
            layers.append(DeployedLayer(**common, bits=tensor.bits, grid_bits=tensor.grid_bits, mask=mask,
                                        bias=bias, sparsity=sparsity, levels=payload,
                                        level_range=tensor.level_range, beta=tensor.beta, shifted=tensor.shifted))
    (meta_len,) = cur.unpack("<I", "network metadata")
    meta = json.loads(cur.take(meta_len, "network metadata").decode("utf-8"))
    if cur.offset != len(blob):
        raise CorruptStreamError(8 * cur.offset, f"{len(blob) - cur.offset} trailing bytes")
    net = DeployedNetwork(layers, tuple(meta["input_shape"]), meta["num_outputs"], meta["task"], meta["template"],
                          meta["pool_at"])
    return net, tensors


def decompress_network(blob: bytes) -> DeployedNetwork:
    return read_network(blob)[0]


@dataclass
class VerifyResult:
    rows: list
    payload_bits: int
    container_bits: int
    target_bits: float | None
    tolerance: float
    identical: bool | None

    @property
    def fits(self) -> bool:
        if self.target_bits is None:
            return True
        return self.payload_bits <= self.target_bits * (1.0 + self.tolerance)


def verify_container(blob: bytes, target_bits: float | None = None, tolerance: float = 0.02,
                     reference: DeployedNetwork | None = None, x: np.ndarray | None = None) -> VerifyResult:
    """
    Decode the container, rebuild the size report and, given a reference
    network and inputs, compare forward outputs bit for bit.
    """
    net, tensors = read_network(blob)
    rows = [report_layer(layer, tensor) for layer, tensor in zip(net.weighted_layers(), tensors)]
    identical = None
    if reference is not None and x is not None:
        identical = bool(np.array_equal(net.forward(x), reference.forward(x)))
    payload = sum(row.stored_bits for row in rows)
    return VerifyResult(rows, payload, 8 * len(blob), target_bits, tolerance, identical)
