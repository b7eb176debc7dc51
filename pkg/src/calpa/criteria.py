"""Channel-importance criteria: ThiNet greedy selection and l1 ranking.

Channel indices are 0-based throughout the code; a :class:`PruneSet` holds the
"weak" channels chosen for removal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from calpa import tensor as T
from calpa._util import round_half_up
from calpa.arch import sole_conv_consumer


@dataclass(frozen=True)
class SampleSpec:
    """``m`` images, ``n`` sampled output elements per image."""

    m: int = 32
    n: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"sample spec needs m, n >= 1, got m={self.m} n={self.n}")


@dataclass(frozen=True)
class PruneSet:
    indices: tuple[int, ...]
    size: int

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("prune set indices must be distinct")
        if len(self.indices) > self.size or any(not 0 <= i < self.size for i in self.indices):
            raise ValueError(f"prune set {self.indices} does not fit {self.size} channels")

    @property
    def keep(self) -> list[int]:
        """Surviving channels in ascending order."""
        weak = set(self.indices)
        return [i for i in range(self.size) if i not in weak]

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "size": self.size}


@dataclass(frozen=True)
class ThiNetInstance:
    """Sampled receptive fields and their consumer kernel cubes.

    ``patches[t]`` and ``filters[t]`` both have shape ``(J, kh, kw)``.
    """

    patches: np.ndarray
    filters: np.ndarray
    locations: tuple = ()

    def __post_init__(self):
        if self.patches.shape != self.filters.shape or self.patches.ndim != 4:
            raise ValueError(f"patches {self.patches.shape} and filters {self.filters.shape} must match (m, J, kh, kw)")

    @property
    def channels(self) -> int:
        return self.patches.shape[1]

    def contributions(self) -> np.ndarray:
        """``c[t, j]``: full-overlap response of channel ``j`` in sample ``t``."""
        return np.einsum("tjab,tjab->tj", self.patches.astype(np.float64), self.filters.astype(np.float64))

    def summary(self) -> dict:
        return {"samples": int(self.patches.shape[0]), "channels": self.channels,
                "kernel": list(self.patches.shape[2:]), "locations": [list(map(int, loc)) for loc in self.locations]}


def _target_size(count: int, gamma: float) -> int:
    if not 0 <= gamma < 1:
        raise ValueError(f"pruning rate must lie in [0, 1), got {gamma}")
    return round_half_up(count * gamma)


def sample_instance(model, layer_id: str, images: np.ndarray, spec: SampleSpec) -> ThiNetInstance:
    """Sample receptive fields of the conv consuming ``layer_id``'s output.

    ``images`` are network inputs ``(N, 1, H, W)``; the first ``spec.m`` are
    used.  For each image ``spec.n`` distinct output elements ``(k, y, x)`` of
    the consumer are drawn uniformly.
    """
    graph = model.graph
    consumer_id = sole_conv_consumer(graph, layer_id)
    if consumer_id is None:
        raise ValueError(f"{layer_id!r} has no single conv consumer; use the l1 criterion")
    if len(images) == 0:
        raise ValueError("sampling needs at least one image")
    consumer = graph.layer(consumer_id)
    source = consumer.inputs[0]
    images = images[:spec.m]
    acts = model.activations(images, [source])[source]
    weight = model.params[f"{consumer_id}.weight"]
    k_out, ho, wo = consumer.out_channels, consumer.out_height, consumer.out_width
    total = k_out * ho * wo
    rng = np.random.default_rng(spec.seed)
    patches, filters, locations = [], [], []
    for i in range(len(images)):
        flat = rng.choice(total, size=min(spec.n, total), replace=False)
        for f in flat:
            k, rem = divmod(int(f), ho * wo)
            y, x = divmod(rem, wo)
            patch = T.extract_patch(acts[i], consumer.kernel, (k, y, x), consumer.stride, consumer.padding,
                                    origin=(layer_id, i))
            patches.append(patch.values)
            filters.append(weight[:, k])
            locations.append((i, k, y, x))
    return ThiNetInstance(np.stack(patches), np.stack(filters), tuple(locations))


def thinet_greedy(contrib: np.ndarray, steps: int) -> tuple[list[int], list[float]]:
    """Greedy minimization of ``sum_t (sum_{j in T} c[t, j])**2``.

    Returns the channels in pick order and the objective after each pick.
    Ties go to the lowest channel index.
    """
    contrib = np.asarray(contrib, dtype=np.float64)
    m, j = contrib.shape
    if steps > j:
        raise ValueError(f"cannot pick {steps} of {j} channels")
    chosen: list[int] = []
    objectives: list[float] = []
    running = np.zeros(m)
    available = np.ones(j, dtype=bool)
    for _ in range(steps):
        trial = ((running[:, None] + contrib) ** 2).sum(axis=0)
        trial[~available] = np.inf
        pick = int(np.argmin(trial))
        chosen.append(pick)
        objectives.append(float(trial[pick]))
        available[pick] = False
        running += contrib[:, pick]
    return chosen, objectives


def thinet_select(instance: ThiNetInstance, gamma: float) -> PruneSet:
    """Weak channels of size ``round(J * gamma)`` chosen greedily."""
    steps = _target_size(instance.channels, gamma)
    chosen, _ = thinet_greedy(instance.contributions(), steps)
    return PruneSet(tuple(chosen), instance.channels)


def _weights(filters) -> np.ndarray:
    return filters.values if isinstance(filters, T.FilterBank) else np.asarray(filters)


def l1_norms(filters) -> np.ndarray:
    """``sum |W[:, k]|`` for every output channel ``k``."""
    w = _weights(filters)
    return np.abs(w.astype(np.float64)).sum(axis=(0, 2, 3))


def l1_rank(filters) -> list[int]:
    """Output channels sorted by ascending l1 norm, lower index first on ties."""
    return [int(i) for i in np.argsort(l1_norms(filters), kind="stable")]


def l1_select(filters, gamma: float) -> PruneSet:
    order = l1_rank(filters)
    return PruneSet(tuple(order[:_target_size(len(order), gamma)]), len(order))
