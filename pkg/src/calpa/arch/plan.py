"""Shrink plans: per-conv retained-channel fractions and their application."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from calpa._util import round_half_up, snap
from calpa.arch.graph import ArchGraph

PROVENANCE = ("thinet", "l1_direct", "l1_transformed", "l1", "fixed")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ShrinkPlan:
    """Map conv id -> shrinking rate (fraction of output channels kept).

    ``keep`` optionally records which channel indices the search retained so
    that weights can later be sliced identically.
    """

    rates: dict[str, float]
    provenance: dict[str, str] = field(default_factory=dict)
    step: float = 0.05
    keep: dict[str, list[int]] = field(default_factory=dict)

    def validate(self, graph: ArchGraph) -> None:
        missing = [c.id for c in graph.prunable_convs() if c.id not in self.rates]
        if missing:
            raise PlanError(f"plan misses prunable convs: {missing}")
        for lid, rate in self.rates.items():
            layer = graph.layer(lid)
            if layer.kind != "conv" or not layer.prunable:
                raise PlanError(f"{lid!r} is not a prunable conv")
            if not 0 < rate <= 1:
                raise PlanError(f"rate for {lid!r} outside (0, 1]: {rate}")
            if not math.isclose(snap(rate, self.step), rate, abs_tol=1e-9):
                raise PlanError(f"rate {rate} for {lid!r} is off the {self.step} grid")
        for group in graph.groups:
            rates = {self.rates[m] for m in group.members if m in self.rates}
            if len(rates) > 1:
                raise PlanError(f"group {group.members} carries unequal rates {sorted(rates)}")

    def mean_rate(self) -> float:
        return sum(self.rates.values()) / len(self.rates)


def identity_plan(graph: ArchGraph, step: float = 0.05) -> ShrinkPlan:
    return ShrinkPlan({c.id: 1.0 for c in graph.prunable_convs()},
                      {c.id: "fixed" for c in graph.prunable_convs()}, step)


def uniform_plan(graph: ArchGraph, rate: float, step: float = 0.05, provenance: str = "fixed") -> ShrinkPlan:
    return ShrinkPlan({c.id: rate for c in graph.prunable_convs()},
                      {c.id: provenance for c in graph.prunable_convs()}, step)


def shrunk_width(k: int, rate: float) -> int:
    return max(1, round_half_up(k * rate))


def apply_shrink_plan(graph: ArchGraph, plan: ShrinkPlan) -> ArchGraph:
    """New architecture with each prunable conv narrowed to ``round(K * rate)``."""
    plan.validate(graph)
    widths = {lid: shrunk_width(graph.layer(lid).out_channels, r) for lid, r in plan.rates.items()}
    shrunk = graph.with_out_channels(widths)
    if any(r != 1 for r in plan.rates.values()):
        name = graph.name if graph.name.startswith("calpa-") else f"calpa-{graph.name}"
        shrunk = ArchGraph(name, shrunk.input_size, shrunk.layers, shrunk.groups, shrunk.input_channels)
    return shrunk
