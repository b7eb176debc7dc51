"""Per-layer shrinking-rate determination and the bottom-up traversal.

:func:`run_rate_loop` is the pure decision procedure: it only sees a callback
mapping a pruning rate to a validation accuracy.  :func:`determine_rate`
wires that callback to real channel pruning of a trained network.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from calpa._util import snap
from calpa.arch import ArchGraph, ShrinkPlan, shrunk_width, sole_conv_consumer
from calpa.criteria import SampleSpec, l1_rank, sample_instance, thinet_greedy
from calpa.network import Network, prune_channels

log = logging.getLogger(__name__)

EXIT_REASONS = ("sudden_drop", "cumulative_drop", "cap")

# accuracy differences are compared with this slack so that e.g. 0.89 - 0.84
# is not read as exceeding 0.05 because of binary rounding
_SLACK = 1e-9


@dataclass(frozen=True)
class SearchConfig:
    step: float = 0.05
    tolerance: float = 0.05
    sample_spec: SampleSpec = field(default_factory=SampleSpec)
    gamma_cap: float | None = None
    cumulative: bool = True
    val_subsample: int | None = None
    disable_exits: bool = False

    @property
    def cap(self) -> float:
        return 1.0 - self.step if self.gamma_cap is None else self.gamma_cap

    @property
    def max_steps(self) -> int:
        return int(np.floor(self.cap / self.step + 1e-9))

    def validate(self) -> None:
        if not 0 < self.step <= self.cap < 1:
            raise ValueError(f"need 0 < step <= gamma_cap < 1, got step={self.step} cap={self.cap}")
        if not 0 <= self.tolerance <= 1:
            raise ValueError(f"tolerance must lie in [0, 1], got {self.tolerance}")

    def gamma(self, i: int) -> float:
        return round(i * self.step, 10)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gamma_cap"] = self.cap
        return d


@dataclass
class RateLoopResult:
    zeta: float
    gammas: list[float]
    accs: list[float]
    exit_reason: str
    accepted_steps: int

    @property
    def accepted_gamma(self) -> float:
        return self.gammas[self.accepted_steps - 1] if self.accepted_steps else 0.0


def run_rate_loop(evaluate: Callable[[float], float], acc0: float, config: SearchConfig) -> RateLoopResult:
    """Raise the pruning rate by ``step`` until accuracy falls off, then roll back.

    Exits on a sudden drop (previous minus current accuracy above the
    tolerance), on a cumulative drop (baseline minus current above the
    tolerance), or when the next step would exceed ``gamma_cap``; the cap exit
    keeps the last rate.
    """
    config.validate()
    acc_p1 = acc0
    gammas: list[float] = []
    accs: list[float] = []
    for i in range(1, config.max_steps + 1):
        gamma = config.gamma(i)
        acc_p2 = float(evaluate(gamma))
        gammas.append(gamma)
        accs.append(acc_p2)
        if not config.disable_exits:
            reason = None
            if acc_p1 - acc_p2 > config.tolerance + _SLACK:
                reason = "sudden_drop"
            elif acc0 - acc_p2 > config.tolerance + _SLACK:
                reason = "cumulative_drop"
            if reason:
                return RateLoopResult(round(1.0 - config.gamma(i - 1), 10), gammas, accs, reason, i - 1)
        acc_p1 = acc_p2
    n = config.max_steps
    return RateLoopResult(round(1.0 - config.gamma(n), 10), gammas, accs, "cap", n)


def dispatch_criterion(graph: ArchGraph, layer_id: str) -> str:
    """Criterion used when ``layer_id`` is searched.

    Raises for shortcut-group members that inherit their rate instead of being
    searched (non-lowest direct members and 1x1 shortcut convs).
    """
    layer = graph.layer(layer_id)
    if layer.kind != "conv" or not layer.prunable:
        raise ValueError(f"{layer_id!r} is not a prunable conv")
    group = graph.group_of(layer_id)
    if group is None:
        return "thinet" if sole_conv_consumer(graph, layer_id) else "l1"
    if layer_id != group.lowest:
        raise ValueError(f"{layer_id!r} inherits its rate from {group.lowest!r} and is not searched")
    return "l1_direct" if group.kind == "direct" else "l1_transformed"


def search_unit(graph: ArchGraph, layer_id: str) -> tuple[str, list[str]]:
    """``(searched layer, all convs sharing its rate)`` for any prunable conv."""
    group = graph.group_of(layer_id)
    if group is None:
        return layer_id, [layer_id]
    members = [m for m in group.members if graph.layer(m).prunable]
    return group.lowest, members


@dataclass
class LayerTrace:
    layer_id: str
    criterion: str
    members: list[str]
    acc0: float
    gammas: list[float]
    accs: list[float]
    exit_reason: str
    zeta: float
    keep: list[int]
    accepted_acc: float


@dataclass
class SearchTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    acc0: float | None = None
    final_acc: float | None = None
    config: dict = field(default_factory=dict)

    def to_csv(self, provenance: dict | None = None) -> str:
        buf = io.StringIO()
        for key, value in (provenance or {}).items():
            buf.write(f"# {key}: {value}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "gamma", "acc", "exit_reason"])
        for lt in self.layers:
            for i, (g, a) in enumerate(zip(lt.gammas, lt.accs)):
                reason = lt.exit_reason if i == len(lt.gammas) - 1 else ""
                w.writerow([lt.layer_id, f"{g:.2f}", f"{a:.6f}", reason])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"acc0": self.acc0, "final_acc": self.final_acc, "config": self.config,
                "layers": [asdict(lt) for lt in self.layers]}


@dataclass
class RateDecision:
    zeta: float
    trace: LayerTrace
    model: Network


def _prepare(validator, net: Network, changed):
    prep = getattr(validator, "prepare", None)
    if prep is not None:
        prep(net, changed)


def _release(validator):
    rel = getattr(validator, "release", None)
    if rel is not None:
        rel()


def determine_rate(model: Network, layer_id: str, validator, config: SearchConfig,
                   sample_images: np.ndarray | None = None, assigned=(), acc0: float | None = None) -> RateDecision:
    """Shrinking rate for ``layer_id`` and every conv sharing its rate.

    ``validator(net)`` returns an accuracy in [0, 1].  Pruned models are
    physically sliced copies of ``model``; candidates with the same retained
    width are validated once.
    """
    graph = model.graph
    criterion = dispatch_criterion(graph, layer_id)
    _, members = search_unit(graph, layer_id)
    clash = [m for m in members if m in set(assigned)]
    if clash:
        raise ValueError(f"layers already assigned: {clash}")
    width = graph.layer(layer_id).out_channels
    if criterion == "thinet":
        if sample_images is None:
            raise ValueError("ThiNet criterion needs sample images")
        inst = sample_instance(model, layer_id, sample_images, config.sample_spec)
        order, _ = thinet_greedy(inst.contributions(), width - 1)
    else:
        order = l1_rank(model.params[f"{layer_id}.weight"])
    if acc0 is None:
        acc0 = float(validator(model))
    _prepare(validator, model, members)
    cache: dict[int, tuple[float, list[int], Network]] = {width: (acc0, list(range(width)), model)}

    def candidate(gamma: float):
        kept = shrunk_width(width, 1.0 - gamma)
        if kept not in cache:
            weak = set(order[:width - kept])
            keep = [i for i in range(width) if i not in weak]
            pruned = prune_channels(model, members, keep)
            cache[kept] = (float(validator(pruned)), keep, pruned)
        return cache[kept]

    try:
        result = run_rate_loop(lambda g: candidate(g)[0], acc0, config)
    finally:
        _release(validator)
    if result.accepted_steps:
        accepted_acc, keep, final = candidate(result.accepted_gamma)
    else:
        accepted_acc, keep, final = acc0, list(range(width)), model
    trace = LayerTrace(layer_id, criterion, members, acc0, result.gammas, result.accs, result.exit_reason,
                       result.zeta, keep, accepted_acc)
    log.info("%s (%s): zeta %.2f via %s", layer_id, criterion, result.zeta, result.exit_reason)
    return RateDecision(result.zeta, trace, final)


@dataclass
class SearchResult:
    plan: ShrinkPlan
    trace: SearchTrace
    model: Network


def bottom_up_search(model: Network, validator, config: SearchConfig,
                     sample_images: np.ndarray | None = None) -> SearchResult:
    """Visit prunable convs bottom to top and determine every shrinking rate."""
    config.validate()
    graph = model.graph
    rates: dict[str, float] = {}
    provenance: dict[str, str] = {}
    keep: dict[str, list[int]] = {}
    trace = SearchTrace(config=config.to_dict())
    current = model
    for layer in graph.prunable_convs():
        if layer.id in rates:
            continue
        searched, members = search_unit(graph, layer.id)
        base = current if config.cumulative else model
        acc0 = None if config.cumulative or trace.acc0 is None else trace.acc0
        decision = determine_rate(base, searched, validator, config, sample_images, rates, acc0)
        if trace.acc0 is None:
            trace.acc0 = decision.trace.acc0
        trace.layers.append(decision.trace)
        for m in members:
            rates[m] = decision.zeta
            provenance[m] = decision.trace.criterion
            keep[m] = list(decision.trace.keep)
        if config.cumulative:
            current = decision.model
    if not config.cumulative and rates:
        for lt in trace.layers:
            if len(lt.keep) < graph.layer(lt.layer_id).out_channels:
                current = prune_channels(current, lt.members, lt.keep)
        trace.final_acc = float(validator(current))
    elif trace.layers:
        trace.final_acc = trace.layers[-1].accepted_acc
    plan = ShrinkPlan(rates, provenance, config.step, keep)
    plan.validate(graph)
    return SearchResult(plan, trace, current)


def sweep(model: Network, layer_ids, validator, config: SearchConfig,
          sample_images: np.ndarray | None = None) -> list[tuple[str, float, float]]:
    """Accuracy versus pruning rate for each layer alone, exits disabled."""
    cfg = SearchConfig(config.step, config.tolerance, config.sample_spec, config.gamma_cap,
                       False, config.val_subsample, True)
    acc0 = float(validator(model))
    rows = []
    for lid in layer_ids:
        decision = determine_rate(model, lid, validator, cfg, sample_images, acc0=acc0)
        rows.append((lid, 0.0, acc0))
        rows.extend((lid, g, a) for g, a in zip(decision.trace.gammas, decision.trace.accs))
    return rows


def baseline_plan(plan: ShrinkPlan, kind: str, quantize: bool = True) -> ShrinkPlan:
    """Uniform plan at the minimum (``aggr``) or mean (``avg``) searched rate.

    The mean is rounded half-up to the plan's step grid unless ``quantize`` is
    false.
    """
    if not plan.rates:
        raise ValueError("baseline plans need a non-empty plan")
    values = list(plan.rates.values())
    if kind == "aggr":
        rate = min(values)
    elif kind == "avg":
        rate = sum(values) / len(values)
        if quantize:
            rate = min(1.0, max(plan.step, snap(rate, plan.step)))
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return ShrinkPlan({k: rate for k in plan.rates}, {k: "fixed" for k in plan.rates}, plan.step)
