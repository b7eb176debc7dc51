"""Validation-split accuracy with reuse of unchanged activations."""

from __future__ import annotations

import numpy as np

from calpa import tensor as T
from calpa.harness.data import to_input
from calpa.network import Network


def descendants(graph, layer_ids) -> set[str]:
    out = set(layer_ids)
    for layer in graph.layers:
        if any(s in out for s in layer.inputs):
            out.add(layer.id)
    return out


class SplitValidator:
    """Accuracy of a network on a fixed labeled split.

    After :meth:`prepare` with a base network and the layers about to change,
    activations entering the changed region are computed once and reused, so
    each call only runs the downstream part of the graph.  Networks passed in
    the prepared state must agree with the base upstream of the changes.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int = 200,
                 subsample: int | None = None, seed: int = 0):
        images, labels = np.asarray(images), np.asarray(labels)
        if subsample is not None and subsample < len(images):
            idx = np.sort(np.random.default_rng(seed).choice(len(images), subsample, replace=False))
            images, labels = images[idx], labels[idx]
        if len(images) == 0:
            raise ValueError("validation split is empty")
        self.inputs = to_input(images)
        self.labels = labels
        self.batch_size = batch_size
        self.calls = 0
        self._frontier: list[dict] | None = None

    def prepare(self, base: Network, changed) -> None:
        graph = base.graph
        affected = descendants(graph, changed)
        ids = [l.id for l in graph.layers
               if l.id not in affected and any(s in affected for s in graph.successors[l.id])]
        self._frontier = [base.frontier(self.inputs[i:i + self.batch_size], ids)
                          for i in range(0, len(self.inputs), self.batch_size)]

    def release(self) -> None:
        self._frontier = None

    def scores(self, net: Network) -> np.ndarray:
        if self._frontier is None:
            return net.predict_scores(self.inputs.astype(net.dtype, copy=False), self.batch_size)
        out = [T.softmax(net.forward_from(start).astype(np.float64))[:, 1] for start in self._frontier]
        return np.concatenate(out)

    def __call__(self, net: Network) -> float:
        self.calls += 1
        return float(np.mean((self.scores(net) > 0.5) == (self.labels == 1)))
