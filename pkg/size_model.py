"""
Compressed-size model.

A layer stores (b + H_b(s)) bits per retained weight element, where the
retained element count is out-channels x in-channels x kernel area after width
selection of this layer and of the layer feeding it. The network size E is the
sum over layers. Soft decisions are composed before pricing: the layer is
priced at the convex combination of its options, never as an average of
per-option prices. Channel counts are composed as combinations of the integer
per-option counts, so one-hot samples reproduce the discrete price exactly.

Bias parameters are priced at 32 bits each and itemized apart from E.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from dataclasses import field

import numpy as np

import tensor_engine as te
from operators import is_weighted
from operators import kernel_area
from search_space import config_indices_of
from search_space import retained_count
from tensor_engine import Tensor

logger = logging.getLogger(__name__)

BIAS_BITS = 32
COST_KINDS = ("compressed-bits", "mac-count")


# ----------------------------
# Entropy
# ----------------------------

def binary_entropy(s: float) -> float:
    """H_b(s) in bits, with H_b(0) = H_b(1) = 0."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"binary entropy needs s in [0, 1], got {s}")
    if s == 0.0 or s == 1.0:
        return 0.0
    return -s * math.log2(s) - (1.0 - s) * math.log2(1.0 - s)


_EDGE = 1e-12


def binary_entropy_tensor(s) -> Tensor:
    """Differentiable H_b; the derivative log2((1-s)/s) is evaluated on s clipped to [1e-12, 1-1e-12]."""
    s = te.as_tensor(s)
    value = np.vectorize(binary_entropy, otypes=[np.float64])(np.clip(s.data, 0.0, 1.0))
    safe = np.clip(s.data, _EDGE, 1.0 - _EDGE)

    def backward(g):
        return (g * np.log2((1.0 - safe) / safe),)

    return Tensor.from_op(value, (s,), backward, "binary_entropy")


def empirical_entropy(values) -> float:
    """Plug-in entropy of the value histogram, bits per element."""
    values = np.asarray(values).reshape(-1)
    if values.size == 0:
        return 0.0
    _, counts = np.unique(values, return_counts=True)
    p = counts / values.size
    return float(-(p * np.log2(p)).sum())


# ----------------------------
# Geometry
# ----------------------------

@dataclass(frozen=True)
class LayerGeometry:
    out_channels: int
    in_channels: int
    kernel_area: int = 1
    positions: int = 1  # output spatial positions, used by the MAC cost


def compressed_bits(s: float, b: float, elements: float) -> float:
    return (b + binary_entropy(s)) * elements


def layer_size(s: float, b: int, rho: float, geometry: LayerGeometry, in_retained: int | None = None) -> float:
    """(b + H_b(s)) x retained elements; `in_retained` defaults to every input channel."""
    out_retained = retained_count(rho, geometry.out_channels)
    in_retained = geometry.in_channels if in_retained is None else in_retained
    return ((b + binary_entropy(s)) * out_retained) * in_retained * geometry.kernel_area


# ----------------------------
# Soft (differentiable) estimates
# ----------------------------

def _soft_value(z: Tensor, values) -> Tensor:
    return te.weighted_sum(z, [Tensor(float(v)) for v in values])


def expected_layer_size(z_s, z_q, z_w, z_f, layer, in_soft) -> tuple[Tensor, Tensor]:
    """
    Returns (ε, out_soft). `in_soft` is the producing layer's soft retained
    channel count (a constant for the first layer). Identity costs nothing
    and forwards `in_soft` unchanged.
    """
    in_soft = te.as_tensor(in_soft)
    s_bar = _soft_value(z_s, layer.sparsity.options)
    b_bar = _soft_value(z_q, layer.bitwidth.options)
    out_soft = _soft_value(z_w, layer.width_counts)
    per_element = te.add(b_bar, binary_entropy_tensor(s_bar))
    eps_terms, width_terms = [], []
    for op in layer.operator.options:
        if is_weighted(op):
            eps_terms.append(te.multiply(te.multiply(te.multiply(per_element, out_soft), in_soft),
                                         float(kernel_area(op))))
            width_terms.append(out_soft)
        else:
            eps_terms.append(Tensor(0.0))
            width_terms.append(in_soft)
    return te.weighted_sum(z_f, eps_terms), te.weighted_sum(z_f, width_terms)


def expected_layer_macs(z_w, z_f, layer, in_soft) -> tuple[Tensor, Tensor]:
    """Soft MAC count: positions x in x out x kernel area; identity is free."""
    in_soft = te.as_tensor(in_soft)
    out_soft = _soft_value(z_w, layer.width_counts)
    mac_terms, width_terms = [], []
    for op in layer.operator.options:
        if is_weighted(op):
            mac_terms.append(te.multiply(te.multiply(out_soft, in_soft), float(kernel_area(op) * layer.positions)))
            width_terms.append(out_soft)
        else:
            mac_terms.append(Tensor(0.0))
            width_terms.append(in_soft)
    return te.weighted_sum(z_f, mac_terms), te.weighted_sum(z_f, width_terms)


def network_size(layers, samples, input_channels: int, cost: str = "compressed-bits") -> tuple[Tensor, list]:
    """
    E over the network for per-layer `samples` (dicts of decision kind -> vector).
    Returns (E, per-layer terms). Works for soft, one-hot and STE samples alike.
    """
    if cost not in COST_KINDS:
        raise ValueError(f"unknown cost kind '{cost}'")
    in_soft = Tensor(float(input_channels))
    per_layer = []
    total = None
    for layer, z in zip(layers, samples):
        if cost == "compressed-bits":
            term, in_soft = expected_layer_size(z["sparsity"], z["bitwidth"], z["width"], z["operator"], layer, in_soft)
        else:
            term, in_soft = expected_layer_macs(z["width"], z["operator"], layer, in_soft)
        per_layer.append(term)
        total = term if total is None else te.add(total, term)
    return total, per_layer


def constraint_regularizer(estimates, target: float, normalize: bool = False) -> Tensor:
    """mean_s |E_s - e*| (divided by e* when `normalize`)."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("constraint regularizer needs at least one sample")
    if target <= 0:
        raise ValueError(f"target must be positive, got {target}")
    terms = []
    for e in estimates:
        gap = te.abs(te.subtract(e, float(target)))
        terms.append(te.divide(gap, float(target)) if normalize else gap)
    return te.mean(te.stack(terms))


def expectation_regularizer(estimates, target: float, normalize: bool = False) -> Tensor:
    """|mean_s E_s - e*|: the constraint-in-expectation form, kept for comparison runs."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("constraint regularizer needs at least one sample")
    gap = te.abs(te.subtract(te.mean(te.stack(estimates)), float(target)))
    return te.divide(gap, float(target)) if normalize else gap


# ----------------------------
# Discrete configurations
# ----------------------------

@dataclass
class SizeEstimate:
    per_layer: list
    total: float
    target: float | None = None
    cost: str = "compressed-bits"
    bias_bits: float = 0.0
    layer_names: list = field(default_factory=list)

    def relative_error(self) -> float:
        return abs(self.total - self.target) / self.target

    def within(self, tolerance: float) -> bool:
        return self.relative_error() <= tolerance

    def fits(self) -> bool:
        """Deployment view of the constraint: E must not exceed e*."""
        return self.total <= self.target

    def as_dict(self) -> dict:
        return {
            "cost": self.cost,
            "total": self.total,
            "target": self.target,
            "bias_bits": self.bias_bits,
            "per_layer": dict(zip(self.layer_names, self.per_layer)),
            "relative_error": self.relative_error() if self.target else None,
            "fits": self.fits() if self.target else None,
        }


def _discrete_terms(layer, idx: dict, in_count: int, cost: str) -> tuple[float, int, float]:
    """(cost term, out count, bias bits) for one layer under option indices `idx`."""
    op = layer.operator.options[idx["operator"]]
    if not is_weighted(op):
        return 0.0, in_count, 0.0
    out_count = layer.width_counts[idx["width"]]
    if cost == "mac-count":
        return float(layer.positions * in_count * out_count * kernel_area(op)), out_count, 0.0
    s = layer.sparsity.options[idx["sparsity"]]
    b = layer.bitwidth.options[idx["bitwidth"]]
    bits = ((b + binary_entropy(s)) * out_count) * in_count * kernel_area(op)
    return bits, out_count, float(BIAS_BITS * out_count)


def estimate_config(layers, config, input_channels: int, target: float | None = None,
                    cost: str = "compressed-bits") -> SizeEstimate:
    in_count = input_channels
    per_layer, bias = [], 0.0
    for layer, idx in zip(layers, config_indices_of(config)):
        term, in_count, bias_bits = _discrete_terms(layer, idx, in_count, cost)
        per_layer.append(term)
        bias += bias_bits
    return SizeEstimate(per_layer, float(sum(per_layer)), target, cost, bias, [layer.name for layer in layers])


def mac_cost(layers, config, input_channels: int) -> float:
    """Sum over layers of positions x retained in x retained out x kernel area."""
    return estimate_config(layers, config, input_channels, cost="mac-count").total


def one_hot_samples(layers, config) -> list[dict]:
    samples = []
    for layer, idx in zip(layers, config_indices_of(config)):
        z = {}
        for d in layer.decisions:
            v = np.zeros(len(d))
            v[idx[d.kind]] = 1.0
            z[d.kind] = Tensor(v)
        samples.append(z)
    return samples


def _layer_choices(layer):
    ranges = [range(len(d)) for d in layer.decisions]
    for combo in itertools.product(*ranges):
        yield dict(zip((d.kind for d in layer.decisions), combo))


def enumerate_space(layers):
    """Every configuration as a list of per-layer index dicts (brute force)."""
    for combo in itertools.product(*(list(_layer_choices(layer)) for layer in layers)):
        yield list(combo)


def space_cardinality(layers) -> int:
    return int(np.prod([np.prod([len(d) for d in layer.decisions]) for layer in layers], dtype=object))


def config_probability(layers, config) -> float:
    p = 1.0
    for layer, idx in zip(layers, config_indices_of(config)):
        for d in layer.decisions:
            p *= float(d.probs[idx[d.kind]])
    return p


def exact_regularizer(layers, target: float, input_channels: int, cost: str = "compressed-bits",
                      normalize: bool = False) -> float:
    """L_E^z = E_z[|E(z) - e*|] by full enumeration; only for small spaces."""
    total = 0.0
    for config in enumerate_space(layers):
        p = config_probability(layers, config)
        if p == 0.0:
            continue
        gap = abs(estimate_config(layers, config, input_channels, cost=cost).total - target)
        total += p * (gap / target if normalize else gap)
    return total


def space_bounds(layers, input_channels: int, cost: str = "compressed-bits") -> dict:
    """
    Exact (count, min E, max E) by dynamic programming over the retained
    channel count flowing between layers, with the argmin/argmax configs.
    """
    # state: in_count -> (min cost, min config, max cost, max config)
    frontier = {input_channels: (0.0, [], 0.0, [])}
    for layer in layers:
        nxt = {}
        for in_count, (lo, lo_cfg, hi, hi_cfg) in frontier.items():
            for idx in _layer_choices(layer):
                term, out_count, _ = _discrete_terms(layer, idx, in_count, cost)
                cand_lo, cand_hi = lo + term, hi + term
                cur = nxt.get(out_count)
                if cur is None:
                    nxt[out_count] = (cand_lo, lo_cfg + [idx], cand_hi, hi_cfg + [idx])
                    continue
                new_lo = (cand_lo, lo_cfg + [idx]) if cand_lo < cur[0] else (cur[0], cur[1])
                new_hi = (cand_hi, hi_cfg + [idx]) if cand_hi > cur[2] else (cur[2], cur[3])
                nxt[out_count] = (*new_lo, *new_hi)
        frontier = nxt
    lo_state = min(frontier.values(), key=lambda v: v[0])
    hi_state = max(frontier.values(), key=lambda v: v[2])
    return {
        "count": space_cardinality(layers),
        "min": lo_state[0],
        "min_config": lo_state[1],
        "max": hi_state[2],
        "max_config": hi_state[3],
    }


def dense8_bits(layers, input_channels: int) -> float:
    """Largest configuration priced dense at 8 bits per element."""
    in_count, total = input_channels, 0.0
    for layer in layers:
        best_term, best_out = 0.0, in_count
        for op in layer.operator.options:
            if not is_weighted(op):
                continue
            out_count = max(layer.width_counts)
            term = 8.0 * out_count * in_count * kernel_area(op)
            if term >= best_term:
                best_term, best_out = term, out_count
        total += best_term
        in_count = best_out
    return total


def expected_network_macs(layers, samples, input_channels: int) -> Tensor:
    """Differentiable MAC count of a soft configuration."""
    return network_size(layers, samples, input_channels, cost="mac-count")[0]
