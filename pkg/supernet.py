"""
Network assembly from the `space` section of a config.

Three templates are supported:
  cnn  conv stack (relu) -> global average pool -> dense head
  mlp  dense stack (relu) -> dense head
  sr   conv stack (relu) -> 3x3 conv head back to the input channels, no pooling

The head keeps its width fixed (one option, 1.0) but searches sparsity and
bitwidth like every other layer, so it is priced by the size model.
"""

import logging
import math
from dataclasses import dataclass

import tensor_engine as te
from errors import ConfigError
from operators import OPERATORS
from operators import validate_operators
from search_space import DECISION_KINDS
from search_space import SearchLayer
from search_space import layer_forward

logger = logging.getLogger(__name__)

TEMPLATES = {
    "cnn": {"layer_kind": "conv", "head_op": "dense", "pooled": True},
    "mlp": {"layer_kind": "dense", "head_op": "dense", "pooled": False},
    "sr": {"layer_kind": "conv", "head_op": "conv3x3", "pooled": False},
}

TASKS = ("classification", "regression")


@dataclass
class Supernet:
    layers: list
    input_shape: tuple  # (C, H, W) for conv templates, (F,) for mlp
    num_outputs: int
    task: str
    template: str
    pool_at: int | None = None  # global pooling runs right before this layer

    @property
    def input_channels(self) -> int:
        return self.input_shape[0]

    def parameters(self) -> dict:
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def architecture_parameters(self) -> dict:
        params = {}
        for layer in self.layers:
            params.update(layer.architecture_parameters())
        return params

    def decisions(self):
        for layer in self.layers:
            yield from layer.decisions

    def forward(self, x, samples):
        """`samples[i]` maps decision kind -> STE sample for layer i."""
        return run_layers(x, self.layers, self.pool_at,
                          lambda i, h: layer_forward(h, self.layers[i], samples[i]))


def run_layers(x, layers, pool_at, apply):
    """Shared traversal for the supernet and the concrete network."""
    h = te.as_tensor(x)
    for i, layer in enumerate(layers):
        if i == pool_at:
            h = te.global_avg_pool(h)
        h = apply(i, h)
        if layer.activation:
            h = te.relu(h)
    return h


def _conv_output_side(side: int, stride: int) -> int:
    # odd kernels with padding k // 2
    return (side - 1) // stride + 1


def _options(layer_spec: dict, space: dict, kind: str, path: str) -> list:
    options = layer_spec.get(kind, space.get(kind))
    if not options:
        raise ConfigError(f"{path}.{kind}", "option list is empty")
    return list(options)


def build_supernet(space: dict, input_shape, num_outputs: int, task: str = "classification", rng=None) -> Supernet:
    """
    Build the search layers. `rng` (a numpy Generator) initializes weights;
    without it the layers carry no weights yet.
    """
    template = space.get("template", "cnn")
    if template not in TEMPLATES:
        raise ConfigError("space.template", f"unknown template '{template}', expected one of {sorted(TEMPLATES)}")
    if task not in TASKS:
        raise ConfigError("dataset.task", f"unknown task '{task}'")
    meta = TEMPLATES[template]
    input_shape = tuple(int(d) for d in input_shape)
    if meta["layer_kind"] == "conv" and len(input_shape) != 3:
        raise ConfigError("space.template", f"template '{template}' needs (C, H, W) inputs, dataset has {input_shape}")
    if template == "mlp":
        input_shape = (int(math.prod(input_shape)),)
    if template == "sr" and task != "regression":
        raise ConfigError("dataset.task", "the sr template needs a regression dataset")

    specs = list(space.get("layers", []))
    if not specs:
        raise ConfigError("space.layers", "no layers declared")
    kappa = space.get("kappa", {})

    layers = []
    channels = input_shape[0]
    side = input_shape[1] if len(input_shape) == 3 else 1
    for i, spec in enumerate(specs):
        path = f"space.layers[{i}]"
        name = spec.get("name", f"{meta['layer_kind']}{i + 1}")
        out_channels = int(spec.get("channels", 0))
        if out_channels < 1:
            raise ConfigError(f"{path}.channels", f"must be a positive integer, got {spec.get('channels')}")
        stride = int(spec.get("stride", 1))
        operators = _options(spec, space, "operators", path)
        bad = validate_operators(operators, meta["layer_kind"])
        if bad:
            raise ConfigError(f"{path}.operators", f"not usable in a {meta['layer_kind']} layer: {bad}")
        try:
            layer = SearchLayer(
                name, meta["layer_kind"], channels, out_channels,
                _options(spec, space, "width", path), _options(spec, space, "sparsity", path),
                _options(spec, space, "bitwidth", path), operators, kappa=kappa, stride=stride,
            )
        except ValueError as e:
            raise ConfigError(path, str(e)) from None
        if not layer.output_shape_ok():
            raise ConfigError(f"{path}.operators", "identity needs equal in/out channels and stride 1")
        if meta["layer_kind"] == "conv":
            side = _conv_output_side(side, stride)
            layer.positions = side * side
        layers.append(layer)
        channels = out_channels

    head_spec = dict(space.get("head", {}))
    head_out = input_shape[0] if template == "sr" else num_outputs
    head_kind = OPERATORS[meta["head_op"]]["kind"]
    head = SearchLayer(
        head_spec.get("name", "head"), head_kind, channels, head_out, [1.0],
        _options(head_spec, space, "sparsity", "space.head"), _options(head_spec, space, "bitwidth", "space.head"),
        [meta["head_op"]], kappa=kappa, activation=False,
    )
    if head_kind == "conv":
        head.positions = side * side
    layers.append(head)

    net = Supernet(layers, input_shape, num_outputs, task, template,
                   pool_at=len(layers) - 1 if meta["pooled"] else None)
    if rng is not None:
        for layer in layers:
            layer.init_weights(rng)
    logger.info("built %s supernet: %d layers, %d decisions", template, len(layers),
                len(layers) * len(DECISION_KINDS))
    return net


def flatten_inputs(net: Supernet, x):
    """MLP templates take flattened rows."""
    if net.template == "mlp" and x.ndim > 2:
        return x.reshape(x.shape[0], -1)
    return x
