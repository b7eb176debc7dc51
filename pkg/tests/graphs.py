"""Random residual graphs and mock validators shared by several test modules."""

import numpy as np

from calpa.arch import ArchGraph, LayerSpec


def random_residual_graph(rng, size=16, max_blocks=4):
    """Stem conv plus a random mix of plain, identity and projection blocks."""
    layers = [LayerSpec("in", "input")]
    n = [0]

    def nid(prefix):
        n[0] += 1
        return f"{prefix}{n[0]}"

    def conv(src, k, kernel=3, stride=1, role=None):
        lid = nid("c")
        layers.append(LayerSpec(lid, "conv", (src,), out_channels=k, kernel=kernel, stride=stride,
                                padding=kernel // 2, prunable=True, role=role))
        return lid

    def bn(src):
        lid = nid("b")
        layers.append(LayerSpec(lid, "bn", (src,)))
        return lid

    def relu(src):
        lid = nid("r")
        layers.append(LayerSpec(lid, "activation", (src,), activation="relu"))
        return lid

    width = int(rng.integers(2, 9))
    x = relu(bn(conv("in", width)))
    spatial = size
    for _ in range(int(rng.integers(1, max_blocks + 1))):
        kind = rng.choice(["plain", "identity", "projection"])
        if kind == "plain":
            width = int(rng.integers(2, 9))
            x = relu(bn(conv(x, width)))
        elif kind == "identity":
            y = relu(bn(conv(x, int(rng.integers(2, 9)))))
            y = bn(conv(y, width))
            lid = nid("a")
            layers.append(LayerSpec(lid, "add", (y, x)))
            x = relu(lid) if rng.random() < 0.5 else lid
        else:
            stride = 2 if spatial >= 8 and rng.random() < 0.6 else 1
            spatial //= stride
            width = int(rng.integers(2, 9))
            y = relu(bn(conv(x, int(rng.integers(2, 9)))))
            if stride == 2 and rng.random() < 0.5:
                y = bn(conv(y, width))
                pid = nid("p")
                layers.append(LayerSpec(pid, "pool", (y,), kernel=3, stride=2, padding=1))
                y = pid
            else:
                y = bn(conv(y, width, stride=stride))
            s = bn(conv(x, width, kernel=1, stride=stride, role="shortcut"))
            lid = nid("a")
            layers.append(LayerSpec(lid, "add", (y, s)))
            x = relu(lid)
    layers += [LayerSpec("gap", "global_pool", (x,)),
               LayerSpec("fc", "fully_connected", ("gap",), out_channels=2, bias=True)]
    return ArchGraph.resolve("random", size, layers)


class ParamValidator:
    """Accuracy that falls linearly with the fraction of removed parameters."""

    def __init__(self, reference_params, slope, base=0.9):
        self.n0 = reference_params
        self.slope = slope
        self.base = base
        self.calls = 0

    def __call__(self, net):
        self.calls += 1
        return self.base - self.slope * (1.0 - net.num_parameters() / self.n0)


class ScriptedValidator:
    """Returns a fixed sequence of accuracies, one per call."""

    def __init__(self, accs):
        self.accs = list(accs)
        self.calls = 0

    def __call__(self, net):
        acc = self.accs[min(self.calls, len(self.accs) - 1)]
        self.calls += 1
        return acc
