from calpa.arch.builders import build_srnet, build_xunet2, dct4_filters, fixed_weights
from calpa.arch.cost import CostReport, CostRow, cost_ratio, cost_report
from calpa.arch.graph import (
    ArchGraph,
    GraphError,
    LayerSpec,
    ShortcutGroup,
    classify_shortcuts,
    sole_conv_consumer,
)
from calpa.arch.io import graph_from_dict, graph_to_dict, load_graph, load_plan, save_graph, save_plan
from calpa.arch.plan import (
    PlanError,
    ShrinkPlan,
    apply_shrink_plan,
    identity_plan,
    shrunk_width,
    uniform_plan,
)

__all__ = [
    "ArchGraph",
    "CostReport",
    "CostRow",
    "GraphError",
    "LayerSpec",
    "PlanError",
    "ShortcutGroup",
    "ShrinkPlan",
    "apply_shrink_plan",
    "build_srnet",
    "build_xunet2",
    "classify_shortcuts",
    "cost_ratio",
    "cost_report",
    "dct4_filters",
    "fixed_weights",
    "graph_from_dict",
    "graph_to_dict",
    "identity_plan",
    "load_graph",
    "load_plan",
    "save_graph",
    "save_plan",
    "shrunk_width",
    "sole_conv_consumer",
    "uniform_plan",
]
