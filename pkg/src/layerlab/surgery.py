"""Layer plans: the executable order of layer blocks for one forward pass."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterator, Sequence

from .errors import PlanError


class Provenance(str, enum.Enum):
    IDENTITY = "identity"
    SKIP = "skip"
    SWAP = "swap"
    REPEAT = "repeat"
    EXIT = "exit"
    CUSTOM = "custom"


@dataclass(frozen=True)
class LayerPlan:
    layers: tuple[int, ...]
    n_layers: int
    provenance: Provenance = Provenance.CUSTOM
    args: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        validate_plan(self.layers, self.n_layers)
        is_identity = self.layers == tuple(range(self.n_layers))
        if self.provenance is Provenance.IDENTITY and not is_identity:
            raise PlanError(f"plan tagged identity but has order {self.layers}")
        if is_identity:
            object.__setattr__(self, "provenance", Provenance.IDENTITY)
            object.__setattr__(self, "args", ())

    def __iter__(self) -> Iterator[int]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def is_identity(self) -> bool:
        return self.layers == tuple(range(self.n_layers))

    def label(self) -> str:
        """Compact report string: ``identity``, ``skip:2``, ``swap:1-3``, ``repeat:1x3``, ``exit:2``."""
        p, a = self.provenance, self.args
        if p is Provenance.IDENTITY:
            return "identity"
        if p is Provenance.SKIP:
            return f"skip:{a[0]}"
        if p is Provenance.SWAP:
            return f"swap:{a[0]}-{a[1]}"
        if p is Provenance.REPEAT:
            return f"repeat:{a[0]}x{a[1]}"
        if p is Provenance.EXIT:
            return f"exit:{a[0]}"
        return "custom:" + ",".join(map(str, self.layers))


def validate_plan(layers: Sequence[int], n_layers: int) -> None:
    if n_layers < 1:
        raise PlanError(f"layer count must be >= 1, got {n_layers}")
    bad = [i for i in layers if not 0 <= i < n_layers]
    if bad:
        raise PlanError(f"plan entries {bad} outside [0, {n_layers})")


def _check_index(name: str, i: int, n_layers: int) -> None:
    if not 0 <= i < n_layers:
        raise PlanError(f"{name}={i} outside [0, {n_layers})")


def plan_identity(n_layers: int) -> LayerPlan:
    return LayerPlan(tuple(range(n_layers)), n_layers, Provenance.IDENTITY)


def plan_skip(n_layers: int, i: int) -> LayerPlan:
    _check_index("i", i, n_layers)
    return LayerPlan(tuple(j for j in range(n_layers) if j != i), n_layers, Provenance.SKIP, (i,))


def plan_swap(n_layers: int, i: int, j: int) -> LayerPlan:
    _check_index("i", i, n_layers)
    _check_index("j", j, n_layers)
    if i == j:
        return plan_identity(n_layers)
    order = list(range(n_layers))
    order[i], order[j] = order[j], order[i]
    return LayerPlan(tuple(order), n_layers, Provenance.SWAP, (min(i, j), max(i, j)))


def plan_repeat(n_layers: int, i: int, k: int) -> LayerPlan:
    _check_index("i", i, n_layers)
    if k < 1:
        raise PlanError(f"repeat count must be >= 1, got {k}")
    if k == 1:
        return plan_identity(n_layers)
    order = list(range(i)) + [i] * k + list(range(i + 1, n_layers))
    return LayerPlan(tuple(order), n_layers, Provenance.REPEAT, (i, k))


def plan_exit(n_layers: int, exit_after: int) -> LayerPlan:
    """Truncated plan ``[0..exit_after]`` (early exit)."""
    _check_index("exit_after", exit_after, n_layers)
    if exit_after == n_layers - 1:
        return plan_identity(n_layers)
    return LayerPlan(tuple(range(exit_after + 1)), n_layers, Provenance.EXIT, (exit_after,))


def apply_plan(plan: LayerPlan, other: LayerPlan) -> LayerPlan:
    """Compose two permutation plans: run ``plan``'s order over the blocks listed by ``other``."""
    if plan.n_layers != other.n_layers or len(plan) != len(other):
        raise PlanError("can only compose plans of equal length over the same layer count")
    return LayerPlan(tuple(other.layers[i] for i in plan.layers), plan.n_layers)


_LABEL = re.compile(r"^(identity|skip:(\d+)|swap:(\d+)-(\d+)|repeat:(\d+)x(\d+)|exit:(\d+))$")


def parse_plan(label: str, n_layers: int) -> LayerPlan:
    """Inverse of :meth:`LayerPlan.label` for the non-custom provenances."""
    m = _LABEL.match(label.strip())
    if not m:
        raise PlanError(f"unrecognised plan string {label!r}")
    if m.group(1) == "identity":
        return plan_identity(n_layers)
    if m.group(2) is not None:
        return plan_skip(n_layers, int(m.group(2)))
    if m.group(3) is not None:
        return plan_swap(n_layers, int(m.group(3)), int(m.group(4)))
    if m.group(5) is not None:
        return plan_repeat(n_layers, int(m.group(5)), int(m.group(6)))
    return plan_exit(n_layers, int(m.group(7)))


def skip_grid(n_layers: int) -> list[LayerPlan]:
    return [plan_skip(n_layers, i) for i in range(n_layers)]


def swap_grid(n_layers: int) -> list[LayerPlan]:
    """All unordered pairs i < j."""
    return [plan_swap(n_layers, i, j) for i in range(n_layers) for j in range(i + 1, n_layers)]


def repeat_grid(n_layers: int, k: int = 2) -> list[LayerPlan]:
    return [plan_repeat(n_layers, i, k) for i in range(n_layers)]
