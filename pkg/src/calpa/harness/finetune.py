"""Weight-inheriting shrink: slice a trained model by a plan, then train on."""

from __future__ import annotations

from calpa.arch import PlanError, ShrinkPlan, apply_shrink_plan, shrunk_width
from calpa.criteria import l1_rank
from calpa.harness.checkpoint import ModelCheckpoint
from calpa.harness.train import TrainConfig, TrainResult, train
from calpa.network import Network, prune_channels
from calpa.search import search_unit


def slice_by_plan(net: Network, plan: ShrinkPlan) -> Network:
    """Physically narrow ``net`` to the widths of ``plan``.

    Retained channels come from ``plan.keep`` when recorded (search output);
    otherwise the l1 ranking of each unit's searched conv decides.  Members of
    a shortcut group always keep identical indices.
    """
    graph = net.graph
    try:
        plan.validate(graph)
    except PlanError as exc:
        raise PlanError(f"plan does not match the checkpoint graph: {exc}") from exc
    done: set[str] = set()
    out = net
    for layer in graph.prunable_convs():
        if layer.id in done:
            continue
        searched, members = search_unit(graph, layer.id)
        done.update(members)
        width = graph.layer(searched).out_channels
        kept = shrunk_width(width, plan.rates[searched])
        keep = plan.keep.get(searched)
        if keep is None:
            weak = set(l1_rank(net.params[f"{searched}.weight"])[:width - kept])
            keep = [i for i in range(width) if i not in weak]
        elif len(keep) != kept:
            raise PlanError(f"{searched!r}: recorded keep list has {len(keep)} channels, rate implies {kept}")
        if len(keep) < width:
            out = prune_channels(out, members, keep)
    expected = apply_shrink_plan(graph, plan)
    if list(out.graph.layers) != list(expected.layers):
        raise PlanError("sliced model disagrees with the shrunk architecture")
    return out


def finetune(checkpoint: ModelCheckpoint, plan: ShrinkPlan, dataset, config: TrainConfig) -> TrainResult:
    """Slice ``checkpoint`` by ``plan`` and keep training the surviving weights.

    A fresh optimizer state and iteration counter are used; with an identity
    plan this equals :func:`train` started from the checkpoint weights.
    """
    sliced = slice_by_plan(checkpoint.network(), plan)
    return train(sliced, dataset, config)
