"""Executable networks over an :class:`ArchGraph`.

A :class:`Network` pairs a graph with its weights and runs forward/backward
passes using the kernels in :mod:`calpa.tensor`.  Inputs and captured
activations are NCHW; activations are held channel-major while running.  Parameters are keyed
``"<layer id>.<name>"``.
"""

from __future__ import annotations

import hashlib

import numpy as np

from calpa import tensor as T
from calpa.arch import ArchGraph, fixed_weights

BN_MOMENTUM = 0.9


class Network:
    def __init__(self, graph: ArchGraph, params: dict, buffers: dict, dtype=np.float32):
        self.graph = graph
        self.params = params
        self.buffers = buffers
        self.dtype = dtype
        self._cache: dict | None = None

    @classmethod
    def init(cls, graph: ArchGraph, seed: int = 0, dtype=np.float32) -> "Network":
        """Fresh He-initialized weights for ``graph``."""
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}
        fixed = fixed_weights(graph)
        for layer in graph.layers:
            lid = layer.id
            if layer.kind == "conv":
                fan_in = layer.in_channels * layer.kernel * layer.kernel
                shape = (layer.in_channels, layer.out_channels, layer.kernel, layer.kernel)
                params[f"{lid}.weight"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
                if layer.bias:
                    params[f"{lid}.bias"] = np.zeros(layer.out_channels, dtype)
            elif layer.kind == "fixed_preproc":
                buffers[f"{lid}.weight"] = fixed[lid].astype(dtype)
            elif layer.kind == "bn":
                c = layer.out_channels
                params[f"{lid}.gamma"] = np.ones(c, dtype)
                params[f"{lid}.beta"] = np.zeros(c, dtype)
                buffers[f"{lid}.running_mean"] = np.zeros(c, dtype)
                buffers[f"{lid}.running_var"] = np.ones(c, dtype)
            elif layer.kind == "fully_connected":
                shape = (layer.in_channels, layer.out_channels)
                params[f"{lid}.weight"] = (rng.standard_normal(shape) * 0.01).astype(dtype)
                params[f"{lid}.bias"] = np.zeros(layer.out_channels, dtype)
        return cls(graph, params, buffers, dtype)

    def copy(self) -> "Network":
        return Network(self.graph, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()}, self.dtype)

    def astype(self, dtype) -> "Network":
        return Network(self.graph, {k: v.astype(dtype) for k, v in self.params.items()},
                       {k: v.astype(dtype) for k, v in self.buffers.items()}, dtype)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        for key in sorted(self.buffers):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.buffers[key]).tobytes())
        return h.hexdigest()[:16]

    # -- forward ---------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        g = self.graph
        expected = (g.input_channels, g.input_size, g.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise T.ShapeError(f"network expects (N, {expected[0]}, {expected[1]}, {expected[2]}) input, "
                               f"got {x.shape}", "input")
        return x

    def forward(self, x: np.ndarray, train: bool = False, capture=()) -> np.ndarray:
        """Run the graph; returns logits ``(N, classes)``.

        With ``train=True`` batch statistics are used, running averages are
        updated and a cache for :meth:`backward` is kept.  Layer outputs named
        in ``capture`` are stored (NCHW) in ``self.captured``.
        """
        x = self._check_input(x)
        out, raw = self._run(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), train, capture, {})
        self.captured = {k: (v.transpose(1, 0, 2, 3) if v.ndim == 4 else v) for k, v in raw.items()}
        return out

    def frontier(self, x: np.ndarray, layer_ids) -> dict[str, np.ndarray]:
        """Raw (channel-major) eval-mode outputs of ``layer_ids``, for :meth:`forward_from`."""
        x = self._check_input(x)
        _, raw = self._run(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), False, layer_ids, {})
        return raw

    def forward_from(self, start: dict[str, np.ndarray]) -> np.ndarray:
        """Eval-mode logits resuming from stored frontier values.

        Layers whose inputs are neither in ``start`` nor computable from it are
        skipped, so only the part of the graph downstream of ``start`` runs.
        """
        out, _ = self._run(None, False, (), start)
        return out

    def _run(self, x, train: bool, capture, start: dict):
        g = self.graph
        remaining = {lid: len(s) for lid, s in g.successors.items()}
        capture = set(capture)
        captured = {}
        values: dict[str, np.ndarray] = {}
        extra: dict[str, object] = {}
        p, b = self.params, self.buffers
        out = None
        for layer in g.layers:
            lid, kind = layer.id, layer.kind
            if lid in start:
                values[lid] = out = start[lid]
                continue
            if any(s not in values for s in layer.inputs) or (kind == "input" and x is None):
                continue
            ins = [values[s] for s in layer.inputs]
            if kind == "input":
                out = x
            elif kind == "fixed_preproc":
                out, _ = T.conv_cnhw(ins[0], b[f"{lid}.weight"], layer.stride, layer.padding)
            elif kind == "conv":
                out, cols = T.conv_cnhw(ins[0], p[f"{lid}.weight"], layer.stride, layer.padding)
                if layer.bias:
                    out += p[f"{lid}.bias"].reshape(-1, 1, 1, 1)
                if train:
                    extra[lid] = (ins[0].shape, cols)
            elif kind == "bn":
                gamma, beta = p[f"{lid}.gamma"], p[f"{lid}.beta"]
                if train:
                    out, cache = T.batch_norm_train(ins[0], gamma, beta, axis=0)
                    rm, rv = b[f"{lid}.running_mean"], b[f"{lid}.running_var"]
                    rm *= BN_MOMENTUM
                    rm += (1 - BN_MOMENTUM) * cache["mean"].astype(self.dtype)
                    rv *= BN_MOMENTUM
                    rv += (1 - BN_MOMENTUM) * cache["var"].astype(self.dtype)
                    extra[lid] = cache
                else:
                    out = T.batch_norm(ins[0], b[f"{lid}.running_mean"], b[f"{lid}.running_var"], gamma, beta,
                                       axis=0)
            elif kind == "activation":
                if layer.activation == "truncate":
                    out = T.truncate(ins[0], layer.threshold)
                    if train:
                        extra[lid] = np.abs(ins[0]) < layer.threshold
                else:
                    out = T.relu(ins[0])
                    if train:
                        extra[lid] = out > 0
            elif kind == "pool":
                out = T.avg_pool(ins[0], layer.kernel, layer.stride, layer.padding)
                if train:
                    extra[lid] = ins[0].shape
            elif kind == "global_pool":
                out = T.global_avg_pool(ins[0])
                if train:
                    extra[lid] = ins[0].shape
            elif kind == "fully_connected":
                flat = ins[0].reshape(ins[0].shape[0], -1).T
                out = T.linear(flat, p[f"{lid}.weight"], p.get(f"{lid}.bias"))
                if train:
                    extra[lid] = flat
            elif kind == "add":
                out = T.add(ins[0], ins[1])
            values[lid] = out
            if lid in capture:
                captured[lid] = out
            for s in layer.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s not in capture and s in values:
                    del values[s]
        self._cache = extra if train else None
        return out, captured

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for the last ``forward(train=True)`` call."""
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward(train=True)")
        extra = self._cache
        g = self.graph
        p = self.params
        grads: dict[str, np.ndarray] = {}
        gout: dict[str, np.ndarray] = {g.layers[-1].id: grad_logits.astype(self.dtype)}

        def push(src, value):
            if g.layer(src).kind in ("input", "fixed_preproc"):
                return
            if src in gout:
                gout[src] = gout[src] + value
            else:
                gout[src] = value

        for layer in reversed(g.layers):
            lid, kind = layer.id, layer.kind
            if lid not in gout:
                continue
            go = gout.pop(lid)
            if kind == "conv":
                in_shape, cols = extra[lid]
                src = layer.inputs[0]
                need_dx = g.layer(src).kind not in ("input", "fixed_preproc")
                dx, dw, db = T.conv_cnhw_backward(in_shape, p[f"{lid}.weight"], go, layer.stride,
                                                  layer.padding, cols, need_dx)
                grads[f"{lid}.weight"] = dw
                if layer.bias:
                    grads[f"{lid}.bias"] = db
                if need_dx:
                    push(src, dx)
            elif kind == "bn":
                dx, dgamma, dbeta = T.batch_norm_backward(go, p[f"{lid}.gamma"], extra[lid])
                grads[f"{lid}.gamma"] = dgamma
                grads[f"{lid}.beta"] = dbeta
                push(layer.inputs[0], dx)
            elif kind == "activation":
                push(layer.inputs[0], go * extra[lid])
            elif kind == "pool":
                push(layer.inputs[0], T.avg_pool_backward(extra[lid], go, layer.kernel, layer.stride, layer.padding))
            elif kind == "global_pool":
                push(layer.inputs[0], T.global_avg_pool_backward(extra[lid], go))
            elif kind == "fully_connected":
                flat = extra[lid]
                w = p[f"{lid}.weight"]
                grads[f"{lid}.weight"] = flat.T @ go
                if f"{lid}.bias" in p:
                    grads[f"{lid}.bias"] = go.sum(axis=0)
                src_shape = (w.shape[0], go.shape[0], 1, 1)
                push(layer.inputs[0], (w @ go.T).reshape(src_shape))
            elif kind == "add":
                push(layer.inputs[0], go)
                push(layer.inputs[1], go)
        self._cache = None
        return grads

    # -- inference helpers -------------------------------------------------

    def predict_scores(self, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
        """Stego-class probability for each image."""
        scores = []
        for i in range(0, len(images), batch_size):
            logits = self.forward(images[i:i + batch_size])
            scores.append(T.softmax(logits.astype(np.float64))[:, 1])
        return np.concatenate(scores) if scores else np.empty(0)

    def activations(self, images: np.ndarray, layer_ids) -> dict[str, np.ndarray]:
        self.forward(images, capture=layer_ids)
        return dict(self.captured)


def prune_channels(net: Network, conv_ids, keep) -> Network:
    """Physically remove output channels of ``conv_ids`` keeping ``keep``.

    BN parameters downstream are sliced and every consuming conv or fully
    connected layer loses the matching input slices.  All convs sharing an add
    node must be pruned together, otherwise the resulting graph is rejected.
    """
    keep = np.asarray(sorted(int(i) for i in keep), dtype=np.int64)
    if keep.size == 0:
        raise ValueError("cannot prune every channel of a layer")
    g = net.graph
    params, buffers = dict(net.params), dict(net.buffers)
    conv_ids = list(conv_ids)
    for cid in conv_ids:
        if g.layer(cid).kind != "conv":
            raise ValueError(f"{cid!r} is not a conv layer")
        params[f"{cid}.weight"] = params[f"{cid}.weight"][:, keep].copy()
        if f"{cid}.bias" in params:
            params[f"{cid}.bias"] = params[f"{cid}.bias"][keep].copy()
    visited: set[str] = set()
    frontier = list(conv_ids)
    while frontier:
        node = frontier.pop()
        for succ_id in g.successors[node]:
            if succ_id in visited:
                continue
            visited.add(succ_id)
            succ = g.layer(succ_id)
            if succ.kind == "bn":
                for name in ("gamma", "beta"):
                    params[f"{succ_id}.{name}"] = params[f"{succ_id}.{name}"][keep].copy()
                for name in ("running_mean", "running_var"):
                    buffers[f"{succ_id}.{name}"] = buffers[f"{succ_id}.{name}"][keep].copy()
                frontier.append(succ_id)
            elif succ.kind in ("activation", "pool", "global_pool", "add"):
                frontier.append(succ_id)
            elif succ.kind in ("conv", "fully_connected"):
                params[f"{succ_id}.weight"] = params[f"{succ_id}.weight"][keep].copy()
            else:
                raise ValueError(f"cannot propagate channel pruning into {succ.kind} {succ_id!r}")
    new_graph = g.with_out_channels({cid: len(keep) for cid in conv_ids})
    return Network(new_graph, params, buffers, net.dtype)
