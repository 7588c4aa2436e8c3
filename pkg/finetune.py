"""
Training of the extracted network in three stages:

  1. quantization only (no pruning), cosine learning rate with warm restarts
  2. pruning ramp: the pruned fraction grows linearly to the target
  3. joint sparse-quantized training at the target sparsity

Weights use the shifted number format Q̂ (or the plain Q for comparison runs)
and are quantized per element with probability α during training forward
passes. After training the network is re-quantized to a uniform b*-bit grid
for deployment.
"""

import copy
import logging
import math
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
from tqdm import tqdm

import tensor_engine as te
from data_io import BatchIterator
from data_io import MetricsWriter
from data_io import make_stream
from errors import ConfigError
from errors import NonFiniteError
from operators import OPERATORS
from operators import is_weighted
from optim import make_optimizer
from schedules import Schedule
from schedules import WarmRestartSchedule
from search_space import FLOAT_BITS
from search_space import apply_operator
from search_space import channel_broadcast
from search_space import config_indices_of
from search_space import deploy_grid
from search_space import largest_pruned_magnitude
from search_space import level_indices
from search_space import level_step
from search_space import level_values
from search_space import make_sparsity_mask
from search_space import quantize_Q
from search_space import quantize_Qhat
from search_space import retained_count
from supernet import run_layers

logger = logging.getLogger(__name__)

NUMBER_FORMATS = ("qhat", "q")


# ----------------------------
# Concrete network
# ----------------------------

@dataclass
class ConcreteLayer:
    name: str
    op: str
    in_channels: int
    out_channels: int
    sparsity: float
    bits: int
    stride: int = 1
    activation: bool = True
    positions: int = 1
    theta: te.Tensor | None = None
    bias: te.Tensor | None = None
    r: te.Tensor | None = None  # only for 1 < b < 32
    beta: float = 0.0
    mask: np.ndarray | None = None

    @property
    def weighted(self) -> bool:
        return is_weighted(self.op)

    @property
    def quantized(self) -> bool:
        return 1 < self.bits < FLOAT_BITS

    def range_value(self) -> float | None:
        return None if self.r is None else self.r.item()

    def refresh_mask(self, s: float):
        """Top-|θ| mask at sparsity s, then β from the new mask."""
        self.mask = make_sparsity_mask(self.theta, s)
        self.beta = largest_pruned_magnitude(self.theta, self.mask)


@dataclass
class ConcreteNetwork:
    layers: list
    input_shape: tuple
    num_outputs: int
    task: str
    template: str
    pool_at: int | None = None

    @property
    def input_channels(self) -> int:
        return self.input_shape[0]

    def weighted_layers(self):
        return [layer for layer in self.layers if layer.weighted]

    def parameters(self) -> dict:
        params = {}
        for layer in self.weighted_layers():
            params[layer.theta.name] = layer.theta
            params[layer.bias.name] = layer.bias
            if layer.r is not None:
                params[layer.r.name] = layer.r
        return params

    def forward(self, x, weights):
        """`weights[i]` is the effective weight of layer i (None for identity)."""
        return run_layers(x, self.layers, self.pool_at, lambda i, h: concrete_apply(self.layers[i], h, weights[i]))

    def weight_norm(self) -> float:
        """‖θ‖₂² over every weighted layer, on the raw trainable weights."""
        return float(sum(np.sum(layer.theta.data ** 2) for layer in self.weighted_layers()))

    def describe(self) -> list[dict]:
        return [
            {"name": layer.name, "operator": layer.op, "in": layer.in_channels, "out": layer.out_channels,
             "sparsity": layer.sparsity, "bitwidth": layer.bits}
            for layer in self.layers
        ]

    def state_dict(self) -> tuple[dict, dict]:
        tensors = {name: p.data for name, p in self.parameters().items()}
        meta = {"betas": {}}
        for layer in self.weighted_layers():
            tensors[f"mask/{layer.name}"] = layer.mask
            meta["betas"][layer.name] = layer.beta
        return tensors, meta

    def load_state_dict(self, tensors: dict, meta: dict):
        for name, p in self.parameters().items():
            p.data = np.array(tensors[name])
        for layer in self.weighted_layers():
            layer.mask = np.array(tensors[f"mask/{layer.name}"])
            layer.beta = float(meta["betas"][layer.name])


def concrete_apply(layer: ConcreteLayer, h, weight):
    if not layer.weighted:
        return h
    out = apply_operator(layer.op, h, weight, layer.stride)
    return te.add(out, channel_broadcast(layer.bias, out.ndim))


def _slice_weights(op: str, theta: np.ndarray, out_count: int, in_count: int) -> np.ndarray:
    if OPERATORS[op]["kind"] == "dense":
        return theta[:in_count, :out_count].copy()
    return theta[:out_count, :in_count].copy()


def extract_concrete(net, config) -> ConcreteNetwork:
    """
    Cut the chosen operator of every layer out of the supernet, keeping the
    retained leading channels. The sparsity mask is computed over the
    retained region only.
    """
    layers = []
    in_count = net.input_channels
    for layer, idx in zip(net.layers, config_indices_of(config)):
        op = layer.operator.options[idx["operator"]]
        s = layer.sparsity.options[idx["sparsity"]]
        b = layer.bitwidth.options[idx["bitwidth"]]
        if not is_weighted(op):
            layers.append(ConcreteLayer(layer.name, op, in_count, in_count, s, b, layer.stride, layer.activation,
                                        layer.positions))
            continue
        out_count = layer.width_counts[idx["width"]]
        branch = layer.branches[op]
        theta = te.Tensor(_slice_weights(op, branch.theta.data, out_count, in_count), requires_grad=True,
                          name=f"{layer.name}.theta")
        bias = te.Tensor(branch.bias.data[:out_count].copy(), requires_grad=True, name=f"{layer.name}.bias")
        r = None
        if 1 < b < FLOAT_BITS:
            init = branch.quant.ranges[b].item() if b in branch.quant.ranges else float(np.abs(theta.data).max())
            r = te.Tensor(init, requires_grad=True, name=f"{layer.name}.r")
        concrete = ConcreteLayer(layer.name, op, in_count, out_count, s, b, layer.stride, layer.activation,
                                 layer.positions, theta, bias, r)
        concrete.refresh_mask(1.0)
        layers.append(concrete)
        in_count = out_count
    return ConcreteNetwork(layers, net.input_shape, net.num_outputs, net.task, net.template, net.pool_at)


# ----------------------------
# Weights during training
# ----------------------------

def probabilistic_quantized_forward(theta, b: int, r, beta: float, alpha: float, rng=None,
                                    number_format: str = "qhat") -> te.Tensor:
    """
    Q̂(θ)⊙h + clip(θ, -(r+β), r+β)⊙(1-h), h ~ Bernoulli(α) per element.
    The plain format uses Q and clips to ±r. Float layers (b = 32) pass θ through.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"quantization probability must be in [0, 1], got {alpha}")
    if number_format not in NUMBER_FORMATS:
        raise ValueError(f"unknown number format '{number_format}'")
    theta = te.as_tensor(theta)
    if b >= FLOAT_BITS:
        return theta
    if b == 1:
        quantized, bound = quantize_Q(theta, 1, None), 1.0
    elif number_format == "qhat":
        quantized = quantize_Qhat(theta, b, r, beta)
        bound = float(np.asarray(te.as_tensor(r).data)) + beta
    else:
        quantized = quantize_Q(theta, b, r)
        bound = float(np.asarray(te.as_tensor(r).data))
    if alpha == 1.0:
        return quantized
    clipped = te.clip(theta, -bound, bound)
    if alpha == 0.0:
        return clipped
    h = (rng.random(theta.shape) < alpha).astype(np.float64)
    return te.add(te.multiply(quantized, h), te.multiply(clipped, 1.0 - h))


def effective_weights(net: ConcreteNetwork, alpha: float, rng=None, number_format: str = "qhat") -> list:
    weights = []
    for layer in net.layers:
        if not layer.weighted:
            weights.append(None)
            continue
        beta = layer.beta if number_format == "qhat" else 0.0
        w = probabilistic_quantized_forward(layer.theta, layer.bits, layer.r, beta, alpha, rng, number_format)
        weights.append(te.multiply(w, layer.mask))
    return weights


# ----------------------------
# Plan
# ----------------------------

@dataclass
class FinetunePlan:
    epochs: tuple  # (quantize, prune ramp, joint)
    steps_per_epoch: int
    lr: list  # one schedule per stage, indexed by the step within the stage
    alpha: Schedule
    deploy_bits: int = 8
    number_format: str = "qhat"
    weight_decay: float = 5e-4
    momentum: float = 0.9
    mask_refresh_every: int = 16

    def __post_init__(self):
        if len(self.epochs) != 3 or any(int(e) < 1 for e in self.epochs):
            raise ConfigError("finetune.epochs", f"need three positive stage lengths, got {list(self.epochs)}")
        if self.number_format not in NUMBER_FORMATS:
            raise ConfigError("finetune.number_format", f"expected one of {NUMBER_FORMATS}")
        if not 1 <= self.deploy_bits < FLOAT_BITS:
            raise ConfigError("finetune.deploy_bits", f"must be in [1, {FLOAT_BITS}), got {self.deploy_bits}")

    @property
    def stage_steps(self) -> list[int]:
        return [int(e) * self.steps_per_epoch for e in self.epochs]

    @property
    def total_steps(self) -> int:
        return sum(self.stage_steps)

    def stage_of(self, step: int) -> tuple[int, int]:
        """(stage number 1..3, step within that stage)."""
        start = 0
        for stage, n in enumerate(self.stage_steps, start=1):
            if step < start + n or stage == 3:
                return stage, step - start
            start += n
        raise AssertionError("unreachable")

    def ramp_fraction(self, step: int) -> float:
        """Share of the target pruning at `step`: 0 up to stage 2 step 0, 1 from its last step on."""
        stage, inner = self.stage_of(step)
        if stage == 1:
            return 0.0
        n = self.stage_steps[1]
        if stage == 3 or n == 1:
            return 1.0
        return inner / (n - 1)

    def learning_rate(self, step: int) -> float:
        stage, inner = self.stage_of(step)
        return self.lr[stage - 1].value(inner)

    @classmethod
    def from_config(cls, spec: dict, steps_per_epoch: int) -> "FinetunePlan":
        epochs = tuple(int(e) for e in spec["epochs"])
        steps = [e * steps_per_epoch for e in epochs]
        first = spec["lr_stage1"]
        lr = [
            WarmRestartSchedule(first["high"], first["low"], int(first["first_cycle_epochs"]) * steps_per_epoch,
                                int(first.get("cycle_mult", 2))),
            Schedule.from_dict(spec["lr_stage2"], steps[1]),
            Schedule.from_dict(spec["lr_stage3"], steps[2]),
        ]
        return cls(
            epochs=epochs, steps_per_epoch=steps_per_epoch, lr=lr,
            alpha=Schedule.from_dict(spec["alpha"], sum(steps)),
            deploy_bits=int(spec.get("deploy_bits", 8)), number_format=spec.get("number_format", "qhat"),
            weight_decay=float(spec.get("weight_decay", 5e-4)), momentum=float(spec.get("momentum", 0.9)),
            mask_refresh_every=int(spec.get("mask_refresh_every", 16)),
        )


def pruning_ramp(step: int, plan: FinetunePlan, target: float) -> float:
    """Current fraction of non-zeros: 1 before stage 2, linear in pruned fraction, `target` from its end."""
    return 1.0 - (1.0 - target) * plan.ramp_fraction(step)


# ----------------------------
# Metrics
# ----------------------------

def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((pred - target) ** 2))
    peak = float(target.max() - target.min())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def score(task: str, out: np.ndarray, y: np.ndarray) -> float:
    return accuracy(out, y) if task == "classification" else psnr(out, y)


def _flatten(net, x):
    return x.reshape(x.shape[0], -1) if net.template == "mlp" and x.ndim > 2 else x


def predict(net: ConcreteNetwork, x: np.ndarray, number_format: str = "qhat", batch_size: int = 256) -> np.ndarray:
    """Forward pass with fully quantized weights (α = 1)."""
    weights = [None if w is None else w.detach() for w in effective_weights(net, 1.0, None, number_format)]
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(net.forward(_flatten(net, x[i:i + batch_size]), weights).data)
    return np.concatenate(outs)


def evaluate(net: ConcreteNetwork, x, y, number_format: str = "qhat") -> float:
    return score(net.task, predict(net, x, number_format), y)


# ----------------------------
# Training
# ----------------------------

@dataclass
class FinetuneResult:
    net: ConcreteNetwork
    metric: float
    weight_norm_before: float
    weight_norm_after: float
    history: list = field(default_factory=list)

    @property
    def weight_norm_growth(self) -> float:
        return self.weight_norm_after / self.weight_norm_before if self.weight_norm_before else math.inf


EPOCH_FIELDS = ["epoch", "stage", "loss", "metric", "sparsity_fraction", "weight_norm", "alpha"]


def hold_shift_bound(layer: ConcreteLayer):
    """Project kept weights of a shifted-format layer back onto |θ| >= β."""
    if not layer.quantized or layer.beta <= 0.0:
        return
    theta = layer.theta.data
    inside = (layer.mask > 0) & (np.abs(theta) < layer.beta)
    if inside.any():
        layer.theta.data = np.where(inside, te.sign_of(theta) * layer.beta, theta)


def _refresh_due(layer: ConcreteLayer, s: float, step: int, every: int) -> bool:
    if retained_count(s, layer.theta.size) != int(layer.mask.sum()):
        return True
    return step % every == 0


def run_finetune(net: ConcreteNetwork, plan: FinetunePlan, data, seed: int, batch_size: int = 32,
                 out_dir=None, flip: bool = False, crop_pad: int = 0, progress: bool = True) -> FinetuneResult:
    batches = BatchIterator(data.x_train, data.y_train, batch_size, make_stream(seed, "data", 1), flip, crop_pad)
    quant_rng = make_stream(seed, "quant")
    opt = make_optimizer("sgd", net.parameters(), plan.learning_rate(0), weight_decay=plan.weight_decay,
                         momentum=plan.momentum, decay_filter=lambda name: name.endswith(".theta"))
    writer = MetricsWriter(Path(out_dir) / "finetune_metrics.csv", EPOCH_FIELDS) if out_dir else None
    norm_before = net.weight_norm()
    history, losses = [], []
    spe = plan.steps_per_epoch

    with tqdm(total=plan.total_steps, desc="finetune", disable=not progress) as bar:
        for step in range(plan.total_steps):
            stage, _ = plan.stage_of(step)
            fraction = plan.ramp_fraction(step)
            if stage > 1:
                for layer in net.weighted_layers():
                    s = 1.0 - (1.0 - layer.sparsity) * fraction
                    if _refresh_due(layer, s, step, plan.mask_refresh_every):
                        layer.refresh_mask(s)
            alpha = plan.alpha.value(step)
            x, y = next(batches)
            weights = effective_weights(net, alpha, quant_rng, plan.number_format)
            out = net.forward(_flatten(net, x), weights)
            loss = te.cross_entropy_loss(out, y) if net.task == "classification" else te.mse_loss(out, y)
            params = net.parameters()
            try:
                grads = te.gradients(loss, params)
            except NonFiniteError as e:
                raise NonFiniteError(f"stage {stage}, step {step}", e.detail) from None
            opt.lr = plan.learning_rate(step)
            opt.step(grads)
            for layer in net.weighted_layers():
                if layer.r is not None:
                    # keep the range strictly positive
                    layer.r.data = np.maximum(layer.r.data, 1e-8)
                if plan.number_format == "qhat":
                    hold_shift_bound(layer)
            for name, p in params.items():
                if not p.is_finite():
                    raise NonFiniteError(f"stage {stage}, step {step}", f"{name} is not finite")
            losses.append(loss.item())
            bar.update(1)

            if (step + 1) % spe == 0:
                metric = evaluate(net, data.x_test, data.y_test, plan.number_format)
                row = {
                    "epoch": (step + 1) // spe - 1,
                    "stage": stage,
                    "loss": float(np.mean(losses)),
                    "metric": metric,
                    "sparsity_fraction": float(np.mean([l.mask.mean() for l in net.weighted_layers()])),
                    "weight_norm": net.weight_norm(),
                    "alpha": alpha,
                }
                losses = []
                history.append(row)
                if writer:
                    writer.write(row)
                logger.info("epoch %d (stage %d): loss %.4f, metric %.4f", row["epoch"], stage, row["loss"], metric)

    # masks and β stay as the last step trained them
    metric = evaluate(net, data.x_test, data.y_test, plan.number_format)
    return FinetuneResult(net, metric, norm_before, net.weight_norm(), history)


# ----------------------------
# Deployment
# ----------------------------

@dataclass
class DeployedLayer:
    """
    One layer of the deployed network. Quantized layers are stored as signed
    integer levels on their searched b-bit grid (see `level_indices`); the
    b*-bit deployment codes and the weights are derived from them, so a
    decoded container rebuilds the same floats.
    """
    name: str
    op: str
    stride: int
    activation: bool
    bits: int  # searched bitwidth
    grid_bits: int = 0  # b* of the deployment grid, 32 for float layers
    mask: np.ndarray | None = None
    bias: np.ndarray | None = None
    sparsity: float = 1.0
    levels: np.ndarray | None = None  # zero where pruned
    level_range: float = 0.0  # r of the b-bit grid
    beta: float = 0.0
    shifted: bool = False
    float_weights: np.ndarray | None = None  # float32-rounded θ⊙m for b = 32
    codes: np.ndarray | None = field(default=None, init=False)
    step_size: float = field(default=0.0, init=False)
    range_prime: float = field(default=0.0, init=False)
    weights: np.ndarray | None = field(default=None, init=False)

    def __post_init__(self):
        if not self.weighted:
            return
        if self.float_weights is not None:
            self.weights = np.asarray(self.float_weights, dtype=np.float64)
            self.range_prime = float(np.abs(self.weights).max()) if self.weights.size else 0.0
            return
        self.codes, self.step_size, self.range_prime = deploy_grid(self.level_weights(), self.mask, self.grid_bits)
        self.weights = self.step_size * self.codes

    @property
    def weighted(self) -> bool:
        return is_weighted(self.op)

    @property
    def level_step(self) -> float:
        return level_step(self.bits, self.level_range)

    def level_weights(self) -> np.ndarray:
        """The trained quantized weights Q̂(θ)⊙m (or Q(θ)⊙m) rebuilt from the levels."""
        return level_values(self.levels, self.beta, self.level_step, self.shifted) * (self.mask > 0)


@dataclass
class DeployedNetwork:
    layers: list
    input_shape: tuple
    num_outputs: int
    task: str
    template: str
    pool_at: int | None = None

    @property
    def input_channels(self) -> int:
        return self.input_shape[0]

    def weighted_layers(self):
        return [layer for layer in self.layers if layer.weighted]

    def forward(self, x: np.ndarray) -> np.ndarray:
        def apply(i, h):
            layer = self.layers[i]
            if not layer.weighted:
                return h
            out = apply_operator(layer.op, h, te.Tensor(layer.weights), layer.stride)
            return te.add(out, channel_broadcast(te.Tensor(layer.bias), out.ndim))

        return run_layers(_flatten(self, x), self.layers, self.pool_at, apply).data

    def evaluate(self, x, y) -> float:
        return score(self.task, self.forward(x), y)


def deploy_layer(layer: ConcreteLayer, grid_bits: int, number_format: str = "qhat") -> DeployedLayer:
    common = dict(name=layer.name, op=layer.op, stride=layer.stride, activation=layer.activation, bits=layer.bits)
    if not layer.weighted:
        return DeployedLayer(**common)
    bias = layer.bias.data.astype(np.float32).astype(np.float64)
    if layer.bits >= FLOAT_BITS:
        w = (layer.theta.data * layer.mask).astype(np.float32).astype(np.float64)
        return DeployedLayer(**common, grid_bits=FLOAT_BITS, mask=layer.mask.copy(), bias=bias,
                             sparsity=layer.sparsity, float_weights=w)
    if layer.bits == 1:
        r, beta, shifted = 0.0, 1.0, True
    else:
        r = layer.range_value()
        shifted = number_format == "qhat"
        beta = layer.beta if shifted else 0.0
    levels = level_indices(layer.theta.data, layer.bits, r, beta, shifted) * (layer.mask > 0)
    return DeployedLayer(**common, grid_bits=grid_bits, mask=layer.mask.copy(), bias=bias, sparsity=layer.sparsity,
                         levels=levels, level_range=r, beta=beta, shifted=shifted)


def deploy_quantize(net: ConcreteNetwork, grid_bits: int = 8, number_format: str = "qhat") -> DeployedNetwork:
    """
    Q(Q̂(θ, b, r, β), b*, r′) with r′ = max |Q̂(θ)⊙m|, masked so pruned weights
    stay zero. Float layers keep their values rounded to float32.
    """
    if not 1 <= grid_bits < FLOAT_BITS:
        raise ValueError(f"deployment bitwidth must be in [1, {FLOAT_BITS}), got {grid_bits}")
    layers = [deploy_layer(layer, grid_bits, number_format) for layer in net.layers]
    return DeployedNetwork(layers, net.input_shape, net.num_outputs, net.task, net.template, net.pool_at)


def effective_weights_of(layer: ConcreteLayer, number_format: str = "qhat") -> np.ndarray:
    beta = layer.beta if number_format == "qhat" else 0.0
    return probabilistic_quantized_forward(layer.theta, layer.bits, layer.r, beta, 1.0, None, number_format).data


def integer_decomposition_check(x, theta, b: int, r: float, beta: float, op: str = "conv3x3", stride: int = 1) -> float:
    """
    max |f(x, Q̂(θ)) - (f(x, Q(θ - sign(θ)β)) + β·f(x, sign(θ)))| for a linear
    operator f; the second form needs only integer weights plus one shared
    sign tensor.
    """
    x = te.as_tensor(x)
    theta = np.asarray(theta, dtype=np.float64)
    sign = te.sign_of(theta)
    lhs = apply_operator(op, x, quantize_Qhat(theta, b, r, beta), stride).data
    shifted = quantize_Q(theta - sign * beta, b, r)
    rhs = apply_operator(op, x, shifted, stride).data + beta * apply_operator(op, x, te.Tensor(sign), stride).data
    return float(np.max(np.abs(lhs - rhs)))


def decomposed_forward(trained: ConcreteNetwork, x: np.ndarray, number_format: str = "qhat") -> np.ndarray:
    """The integer-decomposition deployment path evaluated on the trained network, for comparison."""
    weights = []
    for layer in trained.layers:
        if not layer.weighted:
            weights.append(None)
            continue
        if not layer.quantized:
            weights.append(te.Tensor(effective_weights_of(layer, number_format) * layer.mask))
            continue
        beta = layer.beta if number_format == "qhat" else 0.0
        sign = te.sign_of(layer.theta.data)
        shifted = quantize_Q(layer.theta.data - sign * beta, layer.bits, layer.range_value()).data
        weights.append(te.Tensor((shifted + beta * sign) * layer.mask))
    return trained.forward(_flatten(trained, x), weights).data


def clone(net: ConcreteNetwork) -> ConcreteNetwork:
    return copy.deepcopy(net)
