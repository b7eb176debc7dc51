"""JSON architecture and shrink-plan files."""

from __future__ import annotations

import json
from pathlib import Path

from calpa.arch.graph import ArchGraph, LayerSpec, ShortcutGroup
from calpa.arch.plan import ShrinkPlan

FORMAT_VERSION = 1

_OPTIONAL = ("padding", "prunable", "role", "block", "activation", "threshold", "bias")
_DEFAULTS = {f: getattr(LayerSpec("x", "input"), f) for f in _OPTIONAL}


def graph_to_dict(graph: ArchGraph) -> dict:
    layers = []
    for layer in graph.layers:
        entry = {
            "id": layer.id,
            "kind": layer.kind,
            "in": layer.in_channels,
            "out": layer.out_channels,
            "kernel": layer.kernel,
            "stride": layer.stride,
            "out_height": layer.out_height,
            "out_width": layer.out_width,
        }
        for f in _OPTIONAL:
            value = getattr(layer, f)
            if value != _DEFAULTS[f]:
                entry[f] = list(value) if isinstance(value, tuple) else value
        layers.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "name": graph.name,
        "input_size": graph.input_size,
        "input_channels": graph.input_channels,
        "layers": layers,
        "edges": graph.edges,
        "groups": [
            {"kind": g.kind, "members": list(g.members), "lowest": g.lowest,
             "transform_layer": g.transform_layer}
            for g in graph.groups
        ],
    }


def graph_from_dict(data: dict) -> ArchGraph:
    edges = data.get("edges", {})
    layers = []
    for entry in data["layers"]:
        kw = {f: entry[f] for f in _OPTIONAL if f in entry}
        if isinstance(kw.get("padding"), list):
            kw["padding"] = tuple(kw["padding"])
        layers.append(LayerSpec(
            id=entry["id"],
            kind=entry["kind"],
            inputs=tuple(edges.get(entry["id"], ())),
            out_channels=entry.get("out", 0),
            kernel=entry.get("kernel", 1),
            stride=entry.get("stride", 1),
            **kw,
        ))
    graph = ArchGraph.resolve(data["name"], data["input_size"], layers, data.get("input_channels", 1))
    if "groups" in data:
        stored = {ShortcutGroup(g["kind"], tuple(g["members"]), g["lowest"], g.get("transform_layer"))
                  for g in data["groups"]}
        if stored != set(graph.groups):
            raise ValueError("stored shortcut groups disagree with the graph structure")
    return graph


def save_graph(graph: ArchGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), indent=1) + "\n", encoding="utf-8")


def load_graph(path) -> ArchGraph:
    return graph_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def plan_to_dict(plan: ShrinkPlan, meta: dict | None = None) -> dict:
    out = {
        "format_version": FORMAT_VERSION,
        "step": plan.step,
        "rates": dict(plan.rates),
        "provenance": dict(plan.provenance),
    }
    if plan.keep:
        out["keep"] = {k: list(map(int, v)) for k, v in plan.keep.items()}
    if meta:
        out["meta"] = meta
    return out


def plan_from_dict(data: dict) -> ShrinkPlan:
    return ShrinkPlan(
        {k: float(v) for k, v in data["rates"].items()},
        dict(data.get("provenance", {})),
        float(data.get("step", 0.05)),
        {k: list(v) for k, v in data.get("keep", {}).items()},
    )


def save_plan(plan: ShrinkPlan, path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan, meta), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_plan(path) -> ShrinkPlan:
    return plan_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
