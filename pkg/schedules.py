import math
from dataclasses import dataclass


SCHEDULE_KINDS = ("constant", "linear", "cosine", "exponential")


@dataclass(frozen=True)
class Schedule:
    """
    value(0) = start, value(total_steps) = end, monotone in between.
    Steps past `total_steps` hold the end value.
    """
    kind: str
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind '{self.kind}', expected one of {SCHEDULE_KINDS}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.kind == "exponential" and (self.start <= 0 or self.end <= 0):
            raise ValueError("exponential schedule needs positive start and end")

    def value(self, step: int) -> float:
        if self.kind == "constant":
            return self.start
        if self.total_steps == 0 or step >= self.total_steps:
            return self.end
        frac = max(step, 0) / self.total_steps
        if self.kind == "linear":
            return self.start + (self.end - self.start) * frac
        if self.kind == "cosine":
            return self.end + (self.start - self.end) * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.start * (self.end / self.start) ** frac

    def with_steps(self, total_steps: int) -> "Schedule":
        return Schedule(self.kind, self.start, self.end, total_steps)

    @classmethod
    def from_dict(cls, spec: dict, total_steps: int) -> "Schedule":
        kind = spec.get("kind", "constant")
        start = float(spec["start"]) if "start" in spec else float(spec.get("value", 0.0))
        end = float(spec.get("end", start))
        return cls(kind, start, end, total_steps)


@dataclass(frozen=True)
class WarmRestartSchedule:
    """
    Cosine decay with warm restarts: each cycle decays from `high` to `low`,
    the first cycle lasts `first_cycle` steps and every next one is
    `cycle_mult` times longer. Not monotone.
    """
    high: float
    low: float
    first_cycle: int
    cycle_mult: int = 2

    def value(self, step: int) -> float:
        length = max(self.first_cycle, 1)
        pos = max(step, 0)
        while pos >= length:
            pos -= length
            length *= self.cycle_mult
        return self.low + (self.high - self.low) * 0.5 * (1.0 + math.cos(math.pi * pos / length))
