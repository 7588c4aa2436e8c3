# ----------------------------
# Candidate layer operators
# ----------------------------

OPERATORS = {
    "dense": {
        "label": "Fully connected",
        "kind": "dense",
        "kernel": 1,
    },
    "conv1x1": {
        "label": "1x1 convolution",
        "kind": "conv",
        "kernel": 1,
    },
    "conv3x3": {
        "label": "3x3 convolution",
        "kind": "conv",
        "kernel": 3,
    },
    "conv5x5": {
        "label": "5x5 convolution",
        "kind": "conv",
        "kernel": 5,
    },
    "identity": {
        "label": "Identity (skip layer)",
        "kind": "identity",
        "kernel": 0,
    },
}


def is_weighted(op: str) -> bool:
    return OPERATORS[op]["kind"] != "identity"


def weight_shape(op: str, out_channels: int, in_channels: int) -> tuple:
    """Shape of the weight tensor θ_k of operator `op`; () for identity."""
    meta = OPERATORS[op]
    if meta["kind"] == "dense":
        return (in_channels, out_channels)
    if meta["kind"] == "conv":
        k = meta["kernel"]
        return (out_channels, in_channels, k, k)
    return ()


def kernel_area(op: str) -> int:
    meta = OPERATORS[op]
    if meta["kind"] == "conv":
        return meta["kernel"] * meta["kernel"]
    return 1 if meta["kind"] == "dense" else 0


def validate_operators(ops, layer_kind: str) -> list[str]:
    """Return unknown/ill-placed operator names for a layer of `layer_kind` ('dense' or 'conv')."""
    bad = []
    for op in ops:
        meta = OPERATORS.get(op)
        if meta is None or meta["kind"] not in (layer_kind, "identity"):
            bad.append(op)
    return bad
