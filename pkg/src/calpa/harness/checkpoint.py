"""Model checkpoints: tensor blobs plus a JSON index."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from calpa import tensor as T
from calpa._util import digest
from calpa.arch import ArchGraph, graph_from_dict, graph_to_dict
from calpa.network import Network


@dataclass
class ModelCheckpoint:
    """Weights, optimizer state and progress counters of one model.

    Batch order is a pure function of ``(seed, iteration)``, so those two
    numbers are the complete sampler state.
    """

    graph: ArchGraph
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    seed: int = 0
    lr: float = 0.0
    val_acc: float | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, **kw) -> "ModelCheckpoint":
        return cls(net.graph, {k: v.copy() for k, v in net.params.items()},
                   {k: v.copy() for k, v in net.buffers.items()}, **kw)

    def network(self, dtype=np.float32) -> Network:
        return Network(self.graph, {k: v.astype(dtype, copy=True) for k, v in self.params.items()},
                       {k: v.astype(dtype, copy=True) for k, v in self.buffers.items()}, dtype)

    @property
    def graph_digest(self) -> str:
        return digest(graph_to_dict(self.graph))

    def weights_digest(self) -> str:
        return self.network().digest()


def save_checkpoint(ckpt: ModelCheckpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for section, store in (("params", ckpt.params), ("buffers", ckpt.buffers), ("optimizer", ckpt.optimizer)):
        for name in sorted(store):
            blob = T.to_blob(store[name])
            entries.append({"section": section, "name": name, "offset": offset, "length": len(blob)})
            chunks.append(blob)
            offset += len(blob)
    (directory / "tensors.bin").write_bytes(b"".join(chunks))
    index = {
        "format_version": 1,
        "graph_digest": ckpt.graph_digest,
        "iteration": ckpt.iteration,
        "rng": {"seed": ckpt.seed, "iteration": ckpt.iteration},
        "lr": ckpt.lr,
        "val_acc": ckpt.val_acc,
        "meta": ckpt.meta,
        "graph": graph_to_dict(ckpt.graph),
        "tensors": entries,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory) -> ModelCheckpoint:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    blob = (directory / "tensors.bin").read_bytes()
    graph = graph_from_dict(index["graph"])
    if digest(graph_to_dict(graph)) != index["graph_digest"]:
        raise ValueError(f"{directory}: graph digest mismatch")
    stores: dict[str, dict] = {"params": {}, "buffers": {}, "optimizer": {}}
    for entry in index["tensors"]:
        arr, end = T.from_blob(blob, entry["offset"])
        if end - entry["offset"] != entry["length"]:
            raise ValueError(f"{directory}: corrupt tensor {entry['name']!r}")
        stores[entry["section"]][entry["name"]] = arr
    return ModelCheckpoint(graph, stores["params"], stores["buffers"], stores["optimizer"],
                           index["iteration"], index["rng"]["seed"], index["lr"], index["val_acc"],
                           index.get("meta", {}))
