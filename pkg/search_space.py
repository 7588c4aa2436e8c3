"""
Layers with shared weights and categorical decisions over width, sparsity,
bitwidth and operator, plus the quantizers and the Gumbel-softmax machinery.

A decision stores unconstrained logits; its distribution π is softmax(logits).
Every weighted operator of a layer owns its weights θ_k, a bank of sparsity
masks (one per sparsity option, rebuilt from θ_k by `refresh_masks`), one
trainable range r_b per quantized bitwidth and the shift β used by Q̂.
"""

import logging
import math
from dataclasses import dataclass
from dataclasses import field

import numpy as np

import tensor_engine as te
from errors import ShapeError
from operators import OPERATORS
from operators import is_weighted
from operators import weight_shape
from tensor_engine import Tensor

logger = logging.getLogger(__name__)

DECISION_KINDS = ("width", "sparsity", "bitwidth", "operator")
PROBABILITY_FLOOR = 1e-9
FLOAT_BITS = 32


def retained_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), immune to representation noise like 0.3 * 10 = 3.0000000000000004."""
    return int(math.ceil(round(fraction * n, 9)))


# ----------------------------
# Decision variables
# ----------------------------

class DecisionVariable:
    def __init__(self, kind: str, options, kappa: int | None = None, name: str = ""):
        if kind not in DECISION_KINDS:
            raise ValueError(f"unknown decision kind '{kind}'")
        options = list(options)
        if not options:
            raise ValueError(f"decision '{name or kind}' has no options")
        if kind != "operator":
            options = [float(o) if kind != "bitwidth" else int(o) for o in options]
            if any(b <= a for a, b in zip(options, options[1:])):
                raise ValueError(f"decision '{name or kind}': options must be strictly increasing, got {options}")
        elif len(set(options)) != len(options):
            raise ValueError(f"decision '{name or kind}': duplicate operators {options}")
        kappa = len(options) if kappa is None else int(kappa)
        if not 1 <= kappa <= len(options):
            raise ValueError(f"decision '{name or kind}': kappa must be in [1, {len(options)}], got {kappa}")
        self.kind = kind
        self.name = name or kind
        self.options = options
        self.kappa = kappa
        self.logits = Tensor(np.zeros(len(options)), requires_grad=True, name=f"{self.name}.logits")

    def __len__(self):
        return len(self.options)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    def pi(self) -> Tensor:
        return te.softmax(self.logits)

    def set_probs(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(self.options),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"decision '{self.name}': not a simplex vector {probs}")
        self.logits.data = np.log(np.maximum(probs, np.finfo(np.float64).tiny))

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def values(self) -> np.ndarray:
        """Numeric option values (operators: index)."""
        if self.kind == "operator":
            return np.arange(len(self.options), dtype=np.float64)
        return np.asarray(self.options, dtype=np.float64)


# ----------------------------
# Masks
# ----------------------------

def make_width_mask(rho: float, n_channels: int) -> np.ndarray:
    if not 0 < rho <= 1:
        raise ValueError(f"width fraction must be in (0, 1], got {rho}")
    mask = np.zeros(n_channels)
    mask[:retained_count(rho, n_channels)] = 1.0
    return mask


def make_sparsity_mask(theta, s: float) -> np.ndarray:
    """
    Keep the ceil(s*|θ|) largest-magnitude elements of the full-precision θ.
    Ties: larger |θ| first, then lower flat index.
    """
    if not 0 < s <= 1:
        raise ValueError(f"sparsity (fraction of non-zeros) must be in (0, 1], got {s}")
    values = theta.data if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
    flat = np.abs(values).reshape(-1)
    keep = retained_count(s, flat.size)
    mask = np.zeros(flat.size)
    order = np.argsort(-flat, kind="stable")
    mask[order[:keep]] = 1.0
    return mask.reshape(values.shape)


def largest_pruned_magnitude(theta, mask: np.ndarray) -> float:
    values = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    pruned = np.abs(values)[mask == 0]
    return float(pruned.max()) if pruned.size else 0.0


# ----------------------------
# Quantizers
# ----------------------------

def quantize_Q(theta, b: int, r) -> Tensor:
    """
    b > 1:  d * round(clip(θ, -r, r) / d),  d = r / (2^(b-1) - 1)
    b = 1:  sign(θ)
    b = 32: θ unchanged (float option; priced at 32 bits by the size model)
    """
    theta = te.as_tensor(theta)
    if b < 1:
        raise ValueError(f"bitwidth must be >= 1, got {b}")
    if b == 1:
        return te.sign_ste(theta)
    if b >= FLOAT_BITS:
        return theta
    if r is None:
        raise ValueError(f"bitwidth {b} needs a quantization range")
    r_value = float(np.asarray(r.data if isinstance(r, Tensor) else r).reshape(-1)[0])
    if r_value <= 0:
        raise ValueError(f"quantization range must be positive for b > 1, got {r_value}")
    d = te.divide(r, float(2 ** (b - 1) - 1))
    clipped = te.clip(theta, -r_value, r_value)
    return te.multiply(d, te.round_ste(te.divide(clipped, d)))


def quantize_Qhat(theta, b: int, r, beta: float) -> Tensor:
    """Q(θ - sign(θ)β, b, r) + sign(θ)β: the codebook starts beyond the pruning boundary."""
    if b <= 1:
        raise ValueError("the shifted quantizer is defined for b > 1 only")
    if beta < 0:
        raise ValueError(f"shift must be >= 0, got {beta}")
    theta = te.as_tensor(theta)
    if b >= FLOAT_BITS:
        return theta
    shift = Tensor(te.sign_of(theta.data) * beta)
    return te.add(quantize_Q(te.subtract(theta, shift), b, r), shift)


def quantization_step(b: int, r: float) -> float:
    return r / (2 ** (b - 1) - 1)


# ----------------------------
# Sampling
# ----------------------------

def _floored_log(pi: Tensor) -> Tensor:
    return te.log(te.clip(pi, PROBABILITY_FLOOR, 1.0))


def gumbel_softmax_sample(pi, tau: float, rng=None, noise=None) -> Tensor:
    """ẑ = softmax((log π + g) / τ), g ~ Gumbel(0, 1). `noise` freezes g."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pi = te.as_tensor(pi)
    if noise is None:
        noise = rng.gumbel(size=pi.shape)
    return te.softmax(te.divide(te.add(_floored_log(pi), np.asarray(noise, dtype=np.float64)), tau))


def gumbel_softmax_batch(pi, tau: float, noise: np.ndarray) -> Tensor:
    """Rows of `noise` (S, K) give S independent samples (S, K)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pi = te.as_tensor(pi)
    return te.softmax(te.divide(te.add(_floored_log(pi), noise), tau), axis=-1)


def ste_forward(z_hat, kappa: int) -> Tensor:
    """
    Forward: keep the top-κ entries (ties to the lower index), zero the rest,
    renormalize by the l1 norm. Backward: straight through to ẑ.
    """
    z_hat = te.as_tensor(z_hat)
    k = z_hat.shape[-1]
    if not 1 <= kappa <= k:
        raise ValueError(f"kappa must be in [1, {k}], got {kappa}")
    if kappa == k:
        return z_hat
    order = np.argsort(-z_hat.data, kind="stable")
    kept = np.zeros(k)
    kept[order[:kappa]] = z_hat.data[order[:kappa]]
    value = kept / kept.sum()

    def backward(g):
        return (g,)

    return Tensor.from_op(value, (z_hat,), backward, "ste_topk")


def one_hot(k: int, n: int) -> Tensor:
    v = np.zeros(n)
    v[k] = 1.0
    return Tensor(v)


# ----------------------------
# Layers
# ----------------------------

@dataclass
class QuantSpec:
    ranges: dict = field(default_factory=dict)  # bitwidth -> Tensor r_b (b > 1 and b < 32)
    beta: float = 0.0
    deploy_bits: int = 8


@dataclass
class OperatorBranch:
    op: str
    theta: Tensor
    bias: Tensor
    masks: list  # one binary mask per sparsity option
    quant: QuantSpec
    mask_counts: list = field(default_factory=list)


class SearchLayer:
    def __init__(self, name: str, kind: str, in_channels: int, out_channels: int, widths, sparsities,
                 bitwidths, operators, kappa: dict | None = None, stride: int = 1, activation: bool = True):
        if kind not in ("dense", "conv"):
            raise ValueError(f"layer '{name}': kind must be 'dense' or 'conv', got '{kind}'")
        kappa = kappa or {}
        self.name = name
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.activation = activation
        self.width = DecisionVariable("width", widths, _kappa_for(kappa, "width", len(widths)), f"{name}.width")
        self.sparsity = DecisionVariable("sparsity", sparsities, _kappa_for(kappa, "sparsity", len(sparsities)),
                                         f"{name}.sparsity")
        self.bitwidth = DecisionVariable("bitwidth", bitwidths, _kappa_for(kappa, "bitwidth", len(bitwidths)),
                                         f"{name}.bitwidth")
        self.operator = DecisionVariable("operator", operators, _kappa_for(kappa, "operator", len(operators)),
                                         f"{name}.operator")
        self.width_masks = [make_width_mask(rho, out_channels) for rho in self.width.options]
        self.width_counts = [retained_count(rho, out_channels) for rho in self.width.options]
        self.branches: dict[str, OperatorBranch] = {}
        # output spatial positions; set by the network builder, used by the MAC cost
        self.positions = 1

    # decisions in a fixed order; everything that iterates them relies on it
    @property
    def decisions(self) -> list[DecisionVariable]:
        return [self.width, self.sparsity, self.bitwidth, self.operator]

    def init_weights(self, rng):
        self.branches = {}
        for op in self.operator.options:
            if not is_weighted(op):
                continue
            shape = weight_shape(op, self.out_channels, self.in_channels)
            fan_in = int(np.prod(shape)) // self.out_channels
            theta = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True,
                           name=f"{self.name}.{op}.theta")
            bias = Tensor(np.zeros(self.out_channels), requires_grad=True, name=f"{self.name}.{op}.bias")
            init_range = float(np.abs(theta.data).max())
            ranges = {
                b: Tensor(init_range, requires_grad=True, name=f"{self.name}.{op}.r{b}")
                for b in self.bitwidth.options if 1 < b < FLOAT_BITS
            }
            self.branches[op] = OperatorBranch(op, theta, bias, [], QuantSpec(ranges=ranges))
        refresh_masks(self)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for branch in self.branches.values():
            params[branch.theta.name] = branch.theta
            params[branch.bias.name] = branch.bias
            for r in branch.quant.ranges.values():
                params[r.name] = r
        return params

    def architecture_parameters(self) -> dict[str, Tensor]:
        return {d.logits.name: d.logits for d in self.decisions}

    def output_shape_ok(self) -> bool:
        """Identity needs matching channel counts and stride 1."""
        if "identity" not in self.operator.options:
            return True
        return self.in_channels == self.out_channels and self.stride == 1


def _kappa_for(kappa: dict, kind: str, n: int) -> int:
    value = kappa.get(kind)
    if value is None or value == "K":
        return n
    return min(int(value), n)


def refresh_masks(layer: SearchLayer):
    """Rebuild every sparsity-mask bank from θ, then recompute β (mask first, β second)."""
    k_star = layer.sparsity.argmax()
    for branch in layer.branches.values():
        branch.masks = [make_sparsity_mask(branch.theta, s) for s in layer.sparsity.options]
        branch.mask_counts = [int(m.sum()) for m in branch.masks]
        branch.quant.beta = largest_pruned_magnitude(branch.theta, branch.masks[k_star])


def apply_operator(op: str, x: Tensor, weight, stride: int) -> Tensor:
    meta = OPERATORS[op]
    if meta["kind"] == "dense":
        return te.matmul(x, weight)
    pad = meta["kernel"] // 2
    return te.conv2d(x, weight, stride=stride, padding=pad)


def channel_broadcast(vec: Tensor, ndim: int) -> Tensor:
    return vec if ndim == 2 else te.reshape(vec, (-1, 1, 1))


def branch_forward(x: Tensor, layer: SearchLayer, branch: OperatorBranch, effective_weight, width: Tensor,
                   stride: int | None = None) -> Tensor:
    out = apply_operator(branch.op, x, effective_weight, layer.stride if stride is None else stride)
    out = te.add(out, channel_broadcast(branch.bias, out.ndim))
    return te.multiply(out, channel_broadcast(width, out.ndim))


def layer_forward(x: Tensor, layer: SearchLayer, samples: dict) -> Tensor:
    """
    f(x, q(π_q) ⊙ m(π_s)) ⊙ w(π_w), mixed over operators by ẑ_f.
    `samples` maps decision kind -> sample vector already passed through `ste_forward`.
    Identity passes x through unchanged.
    """
    z_w, z_s, z_q, z_f = (samples[k] for k in DECISION_KINDS)
    width = te.weighted_sum(z_w, [Tensor(m) for m in layer.width_masks])
    outputs = []
    for op in layer.operator.options:
        if not is_weighted(op):
            outputs.append(x)
            continue
        branch = layer.branches[op]
        quantized = [
            quantize_Q(branch.theta, b, branch.quant.ranges.get(b)) for b in layer.bitwidth.options
        ]
        q = te.weighted_sum(z_q, quantized)
        m = te.weighted_sum(z_s, [Tensor(mk) for mk in branch.masks])
        outputs.append(branch_forward(x, layer, branch, te.multiply(q, m), width))
    shapes = {o.shape for o in outputs}
    if len(shapes) != 1:
        raise ShapeError(f"{layer.name}: operator candidates", *sorted(shapes))
    return te.weighted_sum(z_f, outputs)


# ----------------------------
# Argmax extraction
# ----------------------------

def extract_argmax_config(layers) -> list[dict]:
    """γ(π) for every decision; exact ties go to the lowest option index."""
    return config_from_indices(layers, [{d.kind: d.argmax() for d in layer.decisions} for layer in layers])


def config_from_indices(layers, indices) -> list[dict]:
    config = []
    for layer, idx in zip(layers, indices):
        config.append({
            "name": layer.name,
            "width": layer.width.options[idx["width"]],
            "sparsity": layer.sparsity.options[idx["sparsity"]],
            "bitwidth": layer.bitwidth.options[idx["bitwidth"]],
            "operator": layer.operator.options[idx["operator"]],
            "indices": idx,
        })
    return config


def config_indices_of(config) -> list[dict]:
    """Per-layer option indices from extract_argmax_config output or plain index dicts."""
    return [c["indices"] if "indices" in c else c for c in config]


# ----------------------------
# Integer levels and the deployment grid
# ----------------------------

def level_step(b: int, r: float) -> float:
    """Spacing d of the b-bit grid; 1-bit layers have none."""
    return 0.0 if b == 1 else r / (2 ** (b - 1) - 1)


def level_indices(theta, b: int, r: float, beta: float, shifted: bool) -> np.ndarray:
    """
    Signed integer level q of every element under Q (`shifted` False) or Q̂.
    Plain grid: value = d*q. Shifted grid: q >= 0 is +(β + d*q), q < 0 is
    -(β + d*(-q-1)), so 2^b symbols cover the codebook. 1-bit layers use the
    shifted form with β = 1 and d = 0. Elements are assumed to satisfy
    |θ| >= β, which holds for unpruned weights right after a mask refresh.
    """
    theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    if b == 1:
        return np.where(theta >= 0, 0, -1).astype(np.int64)
    d = level_step(b, r)
    if not shifted:
        return te._round_half_away(np.clip(theta, -r, r) / d).astype(np.int64)
    sign = te.sign_of(theta)
    mag = np.abs(te._round_half_away(np.clip(theta - sign * beta, -r, r) / d)).astype(np.int64)
    return np.where(sign > 0, mag, -mag - 1)


def level_values(q, beta: float, d: float, shifted: bool) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    if not shifted:
        return d * q
    sign = np.where(q >= 0, 1.0, -1.0)
    mag = np.where(q >= 0, q, -q - 1)
    return sign * (beta + d * mag)


def deploy_grid(values, mask, grid_bits: int) -> tuple[np.ndarray, float, float]:
    """
    Q(v, b*, r′) with r′ = max |v ⊙ m| as integer codes: returns
    (codes, step, r′) with weights = step * codes and zeros kept where m = 0.
    """
    keep = np.asarray(mask) > 0
    values = np.asarray(values, dtype=np.float64) * keep
    r_prime = float(np.abs(values).max()) if keep.any() else 0.0
    if r_prime == 0.0:
        return np.zeros(values.shape, dtype=np.int64), 0.0, 0.0
    if grid_bits == 1:
        return np.where(keep, te.sign_of(values), 0.0).astype(np.int64), r_prime, r_prime
    step = r_prime / (2 ** (grid_bits - 1) - 1)
    codes = te._round_half_away(np.clip(values, -r_prime, r_prime) / step) * keep
    return codes.astype(np.int64), step, r_prime
