"""Architecture graphs: layer specs, geometry resolution and shortcut groups."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

from calpa.tensor import ShapeError, _pads, conv_output_size

KINDS = (
    "input",
    "fixed_preproc",
    "conv",
    "bn",
    "activation",
    "pool",
    "global_pool",
    "fully_connected",
    "add",
)
CONV_KINDS = ("conv", "fixed_preproc")
# layers that carry channels through unchanged
PASS_THROUGH = ("bn", "activation", "pool")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int | tuple[int, int, int, int] = 0
    out_height: int = 0
    out_width: int = 0
    prunable: bool = False
    role: str | None = None  # "shortcut" marks a 1x1 projection conv
    block: str | None = None
    activation: str | None = None
    threshold: float | None = None
    bias: bool = False

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS


@dataclass(frozen=True)
class ShortcutGroup:
    """Convs whose outputs are element-wise linked by add nodes.

    ``lowest`` is the member the criterion runs on: the bottom-most conv of a
    direct group, or the main-branch conv of a transformed group.
    """

    kind: str  # "direct" | "transformed"
    members: tuple[str, ...]
    lowest: str
    transform_layer: str | None = None


@dataclass(frozen=True)
class ArchGraph:
    name: str
    input_size: int
    layers: tuple[LayerSpec, ...]
    groups: tuple[ShortcutGroup, ...] = field(default=())
    input_channels: int = 1

    @classmethod
    def resolve(cls, name: str, input_size: int, layers, input_channels: int = 1) -> "ArchGraph":
        """Fill in channel counts and spatial sizes, validate, classify shortcuts."""
        resolved = _resolve_geometry(list(layers), input_size, input_channels)
        graph = cls(name, input_size, tuple(resolved), (), input_channels)
        return replace(graph, groups=tuple(classify_shortcuts(graph)))

    @cached_property
    def _index(self) -> dict[str, LayerSpec]:
        return {layer.id: layer for layer in self.layers}

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self._index[layer_id]
        except KeyError:
            raise GraphError(f"unknown layer {layer_id!r}") from None

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    @cached_property
    def successors(self) -> dict[str, tuple[str, ...]]:
        succ: dict[str, list[str]] = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for src in layer.inputs:
                succ[src].append(layer.id)
        return {k: tuple(v) for k, v in succ.items()}

    @cached_property
    def depth(self) -> dict[str, int]:
        """Longest path length from the input; independent of list order."""
        d: dict[str, int] = {}
        for layer in self.layers:
            d[layer.id] = 1 + max((d[s] for s in layer.inputs), default=-1)
        return d

    @property
    def edges(self) -> dict[str, list[str]]:
        return {layer.id: list(layer.inputs) for layer in self.layers if layer.inputs}

    def convs(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.is_conv]

    def prunable_convs(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv" and layer.prunable]

    def group_of(self, layer_id: str) -> ShortcutGroup | None:
        for group in self.groups:
            if layer_id in group.members:
                return group
        return None

    def output_layer(self) -> LayerSpec:
        return self.layers[-1]

    def with_out_channels(self, widths: dict[str, int]) -> "ArchGraph":
        """Copy with new output widths for the given convs; downstream J follows."""
        layers = [
            replace(layer, out_channels=int(widths[layer.id])) if layer.id in widths else layer
            for layer in self.layers
        ]
        return ArchGraph.resolve(self.name, self.input_size, layers, self.input_channels)

    def structurally_equal(self, other: "ArchGraph") -> bool:
        return (
            self.name == other.name
            and self.input_size == other.input_size
            and self.input_channels == other.input_channels
            and sorted(self.layers, key=lambda x: x.id) == sorted(other.layers, key=lambda x: x.id)
            and set(self.groups) == set(other.groups)
        )


def _resolve_geometry(layers: list[LayerSpec], input_size: int, input_channels: int) -> list[LayerSpec]:
    seen: dict[str, LayerSpec] = {}
    out = []
    inputs = [layer for layer in layers if layer.kind == "input"]
    if len(inputs) != 1:
        raise GraphError(f"graph needs exactly one input layer, found {len(inputs)}")
    for layer in layers:
        if layer.kind not in KINDS:
            raise GraphError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
        if layer.id in seen:
            raise GraphError(f"duplicate layer id {layer.id!r}")
        for src in layer.inputs:
            if src not in seen:
                raise GraphError(f"layer {layer.id!r} uses {src!r} before it is defined (cycle or bad order)")
        preds = [seen[s] for s in layer.inputs]
        kind = layer.kind
        expected = {"input": 0, "add": 2}.get(kind, 1)
        if len(preds) != expected:
            raise GraphError(f"layer {layer.id!r} ({kind}) needs {expected} inputs, got {len(preds)}")

        if kind == "input":
            new = replace(layer, in_channels=input_channels, out_channels=input_channels,
                          out_height=input_size, out_width=input_size)
        elif kind in CONV_KINDS:
            p = preds[0]
            if layer.out_channels < 1 or layer.kernel < 1:
                raise GraphError(f"conv {layer.id!r} needs K >= 1 and kernel >= 1")
            top, bottom, left, right = _pads(layer.padding)
            h = conv_output_size(p.out_height, layer.kernel, layer.stride, top, bottom)
            w = conv_output_size(p.out_width, layer.kernel, layer.stride, left, right)
            new = replace(layer, in_channels=p.out_channels, out_height=h, out_width=w)
        elif kind in ("bn", "activation"):
            p = preds[0]
            new = replace(layer, in_channels=p.out_channels, out_channels=p.out_channels,
                          out_height=p.out_height, out_width=p.out_width)
        elif kind == "pool":
            p = preds[0]
            top, bottom, left, right = _pads(layer.padding)
            if layer.kernel > p.out_height + top + bottom:
                raise GraphError(f"pool {layer.id!r}: kernel exceeds spatial extent")
            h = conv_output_size(p.out_height, layer.kernel, layer.stride, top, bottom)
            w = conv_output_size(p.out_width, layer.kernel, layer.stride, left, right)
            new = replace(layer, in_channels=p.out_channels, out_channels=p.out_channels,
                          out_height=h, out_width=w)
        elif kind == "global_pool":
            p = preds[0]
            new = replace(layer, in_channels=p.out_channels, out_channels=p.out_channels,
                          out_height=1, out_width=1)
        elif kind == "fully_connected":
            p = preds[0]
            if p.out_height != 1 or p.out_width != 1:
                raise GraphError(f"fully connected {layer.id!r} needs a pooled 1x1 input")
            new = replace(layer, in_channels=p.out_channels, out_height=1, out_width=1)
        else:  # add
            a, b = preds
            sa = (a.out_channels, a.out_height, a.out_width)
            sb = (b.out_channels, b.out_height, b.out_width)
            if sa != sb:
                raise ShapeError(
                    f"add {layer.id!r}: inputs {a.id!r} {sa} and {b.id!r} {sb} differ", "shape"
                )
            new = replace(layer, in_channels=a.out_channels, out_channels=a.out_channels,
                          out_height=a.out_height, out_width=a.out_width)
        if new.kind == "fixed_preproc" and new.prunable:
            raise GraphError(f"fixed preprocessing layer {new.id!r} cannot be prunable")
        seen[new.id] = new
        out.append(new)
    return out


def _trace_source(graph: ArchGraph, layer_id: str) -> LayerSpec:
    node = graph.layer(layer_id)
    while node.kind in PASS_THROUGH:
        node = graph.layer(node.inputs[0])
    return node


def classify_shortcuts(graph: ArchGraph) -> list[ShortcutGroup]:
    """Group convs linked through add nodes (transitive closure).

    Identity links merge groups; a conv marked ``role="shortcut"`` makes the
    group a transformed one.
    """
    parent: dict[str, str] = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    adds = [layer for layer in graph.layers if layer.kind == "add"]
    for add_node in adds:
        parent.setdefault(add_node.id, add_node.id)
    members_of: dict[str, list[str]] = {}
    for add_node in adds:
        shapes = set()
        for src in add_node.inputs:
            pred = graph.layer(src)
            shapes.add((pred.out_channels, pred.out_height, pred.out_width))
            origin = _trace_source(graph, src)
            if origin.kind == "add":
                union(add_node.id, origin.id)
            elif origin.kind == "conv":
                members_of.setdefault(add_node.id, []).append(origin.id)
        if len(shapes) > 1:
            raise ShapeError(f"add {add_node.id!r}: predecessor shapes differ {sorted(shapes)}", "shape")

    collected: dict[str, set[str]] = {}
    for add_id, convs in members_of.items():
        collected.setdefault(find(add_id), set()).update(convs)

    depth = graph.depth
    groups = []
    for convs in collected.values():
        ordered = sorted(convs, key=lambda c: (depth[c], c))
        shortcuts = [c for c in ordered if graph.layer(c).role == "shortcut"]
        if shortcuts:
            main = [c for c in ordered if c not in shortcuts]
            members = tuple(main + shortcuts)
            lowest = main[0] if main else shortcuts[0]
            groups.append(ShortcutGroup("transformed", members, lowest, shortcuts[0]))
        else:
            groups.append(ShortcutGroup("direct", tuple(ordered), ordered[0]))
    groups.sort(key=lambda g: (depth[g.lowest], g.lowest))
    return groups


def sole_conv_consumer(graph: ArchGraph, layer_id: str) -> str | None:
    """The single conv consuming ``layer_id`` through bn/activation, if any.

    Returns ``None`` when the output also feeds adds, pools, heads or more than
    one conv: the receptive-field criterion is then undefined.
    """
    frontier = [layer_id]
    found = []
    while frontier:
        node = frontier.pop()
        for succ_id in graph.successors[node]:
            succ = graph.layer(succ_id)
            if succ.kind in ("bn", "activation"):
                frontier.append(succ_id)
            elif succ.kind == "conv":
                found.append(succ_id)
            else:
                return None
    return found[0] if len(found) == 1 else None
