# ----------------------------
# Exceptions shared by every module
# ----------------------------


class UDCError(Exception):
    """Base class for every error this toolkit raises on purpose."""


class ShapeError(UDCError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphConsumedError(UDCError):
    def __init__(self):
        super().__init__("backward() already ran on this graph; run a new forward pass first")


class NonFiniteError(UDCError):
    """
    Raised when a loss or parameter turns NaN/Inf.
    `where` names the layer/decision (search) or stage/step (finetune).
    """

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        self.detail = detail
        msg = f"non-finite value at {where}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(UDCError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"config error at '{path}': {message}")


class CorruptStreamError(UDCError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"corrupt stream at bit {offset}: {message}")


class DatasetFormatError(UDCError):
    def __init__(self, source: str, where: str, message: str):
        self.source = source
        self.where = where
        super().__init__(f"{source}: {where}: {message}")


class CheckpointError(UDCError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, what: str, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"checkpoint {what} mismatch: expected {expected}, found {found}")


class InfeasibleTargetError(UDCError):
    def __init__(self, target: float, floor: float, unit: str = "bits"):
        self.target = target
        self.floor = floor
        super().__init__(
            f"target {target:.1f} {unit} is below the smallest achievable configuration ({floor:.1f} {unit})"
        )
