"""Resource vectors and the quota arithmetic behind admission.

CPU is counted in millicores, memory in bytes, and GPUs per model name
because the local pool mixes several accelerator generations and jobs
must be routed by model, not by a scalar count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping


class ResourceError(ValueError):
    """Invalid resource arithmetic (negative component or underflow)."""


@dataclass(frozen=True)
class ResourceVector:
    cpu_millicores: int = 0
    memory_bytes: int = 0
    gpus: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.cpu_millicores < 0 or self.memory_bytes < 0:
            raise ResourceError(f"negative resource component: {self}")
        cleaned = {}
        for model, count in self.gpus.items():
            if count < 0:
                raise ResourceError(f"negative gpu count for {model!r}")
            if count > 0:
                cleaned[model] = int(count)
        # zero-count entries are dropped so equality and serialization
        # do not depend on how the vector was written
        object.__setattr__(self, "gpus", cleaned)

    def add(self, other: "ResourceVector") -> "ResourceVector":
        gpus = dict(self.gpus)
        for model, count in other.gpus.items():
            gpus[model] = gpus.get(model, 0) + count
        return ResourceVector(
            self.cpu_millicores + other.cpu_millicores,
            self.memory_bytes + other.memory_bytes,
            gpus,
        )

    def subtract(self, other: "ResourceVector") -> "ResourceVector":
        """Componentwise difference; underflow is an error, never a clamp."""
        if not fits(other, self):
            raise ResourceError(f"cannot subtract {other} from {self}")
        gpus = dict(self.gpus)
        for model, count in other.gpus.items():
            gpus[model] = gpus.get(model, 0) - count
        return ResourceVector(
            self.cpu_millicores - other.cpu_millicores,
            self.memory_bytes - other.memory_bytes,
            gpus,
        )

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return self.add(other)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        return self.subtract(other)

    def is_zero(self) -> bool:
        return self.cpu_millicores == 0 and self.memory_bytes == 0 and not self.gpus

    def to_json_obj(self) -> dict:
        return {
            "cpu_millicores": self.cpu_millicores,
            "memory_bytes": self.memory_bytes,
            "gpus": {model: self.gpus[model] for model in sorted(self.gpus)},
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "ResourceVector":
        return cls(
            cpu_millicores=int(obj.get("cpu_millicores", 0)),
            memory_bytes=int(obj.get("memory_bytes", 0)),
            gpus={str(k): int(v) for k, v in dict(obj.get("gpus") or {}).items()},
        )


ZERO = ResourceVector()


def fits(demand: ResourceVector, free: ResourceVector) -> bool:
    """True iff demand <= free componentwise, over every GPU model in demand."""
    if demand.cpu_millicores > free.cpu_millicores:
        return False
    if demand.memory_bytes > free.memory_bytes:
        return False
    for model, count in demand.gpus.items():
        if count > free.gpus.get(model, 0):
            return False
    return True
