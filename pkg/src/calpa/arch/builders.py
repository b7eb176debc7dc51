"""Reference topologies: SRNet-style and XuNet2-style steganalyzers."""

from __future__ import annotations

import json
from fractions import Fraction
from importlib import resources

import numpy as np

from calpa._util import round_half_up
from calpa.arch.graph import ArchGraph, GraphError, LayerSpec


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = [LayerSpec("input", "input")]

    def _add(self, **kw) -> str:
        self.layers.append(LayerSpec(**kw))
        return kw["id"]

    def conv(self, id, src, k, kernel=3, stride=1, padding=None, role=None, block=None):
        if padding is None:
            padding = kernel // 2
        return self._add(id=id, kind="conv", inputs=(src,), out_channels=k, kernel=kernel,
                         stride=stride, padding=padding, prunable=True, role=role, block=block)

    def bn(self, id, src, block=None):
        return self._add(id=id, kind="bn", inputs=(src,), block=block)

    def relu(self, id, src, block=None):
        return self._add(id=id, kind="activation", inputs=(src,), activation="relu", block=block)

    def conv_bn_relu(self, prefix, src, k, block, suffix=""):
        x = self.conv(f"{prefix}.conv{suffix}", src, k, block=block)
        x = self.bn(f"{prefix}.bn{suffix}", x, block=block)
        return self.relu(f"{prefix}.relu{suffix}", x, block=block)

    def add(self, id, a, b, block=None):
        return self._add(id=id, kind="add", inputs=(a, b), block=block)

    def head(self, src, classes=2):
        x = self._add(id="gap", kind="global_pool", inputs=(src,))
        return self._add(id="fc", kind="fully_connected", inputs=(x,), out_channels=classes, bias=True)


def _scale_width(base: int, scale: Fraction) -> int:
    return max(1, round_half_up(float(base * scale)))


def build_srnet(input_size: int = 256, width_scale=1) -> ArchGraph:
    """SRNet-style residual steganalyzer with blocks L1..L12.

    L1/L2 are plain conv-BN-ReLU layers, L3..L7 residual blocks with identity
    shortcuts, L8..L11 downsampling blocks (3x3 average pool on the main
    branch, strided 1x1 conv on the shortcut) and L12 ends in global pooling.
    Base widths 64, 16 (x6), 16, 64, 128, 256, 512 are multiplied by
    ``width_scale``.
    """
    scale = Fraction(width_scale).limit_denominator(10_000)
    if not 0 < scale <= 1:
        raise GraphError(f"width_scale must lie in (0, 1], got {width_scale}")
    if input_size % 16:
        raise GraphError(f"input_size must be divisible by 16, got {input_size}")

    def w(base):
        return _scale_width(base, scale)

    b = _Builder()
    x = b.conv_bn_relu("L1", "input", w(64), "L1")
    x = b.conv_bn_relu("L2", x, w(16), "L2")
    for i in range(3, 8):
        blk = f"L{i}"
        y = b.conv_bn_relu(blk, x, w(16), blk, suffix="1")
        y = b.conv(f"{blk}.conv2", y, w(16), block=blk)
        y = b.bn(f"{blk}.bn2", y, block=blk)
        x = b.add(f"{blk}.add", y, x, block=blk)
    for i, base in zip(range(8, 12), (16, 64, 128, 256)):
        blk = f"L{i}"
        y = b.conv_bn_relu(blk, x, w(base), blk, suffix="1")
        y = b.conv(f"{blk}.conv2", y, w(base), block=blk)
        y = b.bn(f"{blk}.bn2", y, block=blk)
        y = b._add(id=f"{blk}.pool", kind="pool", inputs=(y,), kernel=3, stride=2, padding=1, block=blk)
        s = b.conv(f"{blk}.sc_conv", x, w(base), kernel=1, stride=2, padding=0, role="shortcut", block=blk)
        s = b.bn(f"{blk}.sc_bn", s, block=blk)
        x = b.add(f"{blk}.add", y, s, block=blk)
    y = b.conv_bn_relu("L12", x, w(512), "L12", suffix="1")
    y = b.conv("L12.conv2", y, w(512), block="L12")
    y = b.bn("L12.bn2", y, block="L12")
    b.head(y)
    name = "srnet" if scale == 1 else f"srnet-x{scale}"
    return ArchGraph.resolve(name, input_size, b.layers)


def dct4_filters() -> np.ndarray:
    """The 16 orthonormal 4x4 DCT-II basis patterns, shape ``(16, 4, 4)``."""
    n = 4
    idx = np.arange(n)
    basis = np.empty((n * n, n, n))
    for u in range(n):
        cu = np.sqrt((1 if u == 0 else 2) / n)
        row = cu * np.cos((2 * idx + 1) * u * np.pi / (2 * n))
        for v in range(n):
            cv = np.sqrt((1 if v == 0 else 2) / n)
            col = cv * np.cos((2 * idx + 1) * v * np.pi / (2 * n))
            basis[u * n + v] = np.outer(row, col)
    return basis


def load_topology(name: str = "xunet2_topology.json") -> dict:
    text = resources.files("calpa.arch").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


def build_xunet2(input_size: int = 256, table: dict | None = None) -> ArchGraph:
    """XuNet2-style network driven by a topology table.

    A fixed 16-filter 4x4 DCT bank with truncation feeds a stem of plain
    conv layers and a sequence of stages; each stage opens with a strided
    block on a 1x1 projection shortcut followed by identity-shortcut blocks.
    """
    table = table or load_topology()
    stages = table["stages"]
    if input_size % (2 ** len(stages)):
        raise GraphError(f"input_size must be divisible by {2 ** len(stages)}, got {input_size}")
    pre = table["preproc"]
    b = _Builder()
    # even kernel: pad (1, 2) so the spatial size is kept
    x = b._add(id="dct", kind="fixed_preproc", inputs=("input",), out_channels=pre["filters"],
               kernel=pre["kernel"], padding=(1, 2, 1, 2), prunable=False, block="pre")
    x = b._add(id="trunc", kind="activation", inputs=(x,), activation="truncate",
               threshold=float(pre["truncate"]), block="pre")
    for i, width in enumerate(table["stem"], start=1):
        x = b.conv_bn_relu(f"S{i}", x, width, f"S{i}")
    for si, stage in enumerate(stages, start=1):
        blk = f"G{si}a"
        y = b.conv_bn_relu(blk, x, stage["width"], blk, suffix="1")
        y = b.conv(f"{blk}.conv2", y, stage["width"], stride=2, block=blk)
        y = b.bn(f"{blk}.bn2", y, block=blk)
        s = b.conv(f"{blk}.sc_conv", x, stage["width"], kernel=1, stride=2, padding=0,
                   role="shortcut", block=blk)
        s = b.bn(f"{blk}.sc_bn", s, block=blk)
        y = b.add(f"{blk}.add", y, s, block=blk)
        x = b.relu(f"{blk}.relu", y, block=blk)
        for d in range(stage.get("direct_blocks", 0)):
            blk = f"G{si}{chr(ord('b') + d)}"
            y = b.conv_bn_relu(blk, x, stage["width"], blk, suffix="1")
            y = b.conv(f"{blk}.conv2", y, stage["width"], block=blk)
            y = b.bn(f"{blk}.bn2", y, block=blk)
            y = b.add(f"{blk}.add", y, x, block=blk)
            x = b.relu(f"{blk}.relu", y, block=blk)
    b.head(x)
    return ArchGraph.resolve("xunet2", input_size, b.layers)


def fixed_weights(graph: ArchGraph) -> dict[str, np.ndarray]:
    """Weights of fixed preprocessing layers in ``(J, K, kh, kw)`` layout."""
    out = {}
    for layer in graph.layers:
        if layer.kind == "fixed_preproc":
            filters = dct4_filters()[: layer.out_channels]
            out[layer.id] = filters[None].repeat(layer.in_channels, axis=0).astype(np.float32)
    return out


BUILDERS = {"srnet": build_srnet, "xunet2": build_xunet2}
