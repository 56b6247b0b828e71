"""Reverse-mode execution of lowered layer graphs on float64 numpy arrays.

Spatial tensors are ``(batch, channels, height, width)``; dense tensors are
``(batch, features)``. Nodes are evaluated in id order (lowering emits them
topologically) and the backward pass walks the same order in reverse,
accumulating upstream gradients per node.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import CONV_KINDS, KERNEL_SIZE, LayerGraph, LayerNode
from .errors import DivergenceError, ShapeError, WorkbenchError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    velocity: np.ndarray
    decay: bool = True

    @classmethod
    def of(cls, value, decay=True):
        value = np.asarray(value, dtype=np.float64)
        return cls(value, np.zeros_like(value), np.zeros_like(value), decay)


@dataclass
class ParamStore:
    """Trainable tensors and batchnorm running statistics, keyed by layer id."""

    params: dict[int, dict[str, Param]] = field(default_factory=dict)
    buffers: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def items(self):
        for lid in sorted(self.params):
            for name, p in self.params[lid].items():
                yield lid, name, p

    def zero_grad(self):
        for _, _, p in self.items():
            p.grad.fill(0.0)

    def num_params(self) -> int:
        return sum(p.value.size for _, _, p in self.items())

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for _, _, p in self.items()])

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> ParamStore:
        return load_checkpoint(path)


def init_params(graph: LayerGraph, seed: int = 0) -> ParamStore:
    """He-normal conv/dense weights (variance 2/fan_in), zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for node in graph.nodes:
        if node.kind in CONV_KINDS:
            k = KERNEL_SIZE[node.kind]
            fan_in = node.in_channels * k * k
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (node.out_channels, node.in_channels, k, k))
            store.params[node.id] = {"weight": Param.of(w)}
        elif node.kind in ("dense", "classifier"):
            w = rng.normal(0.0, math.sqrt(2.0 / node.in_channels), (node.out_channels, node.in_channels))
            entry = {"weight": Param.of(w)}
            if node.bias:
                entry["bias"] = Param.of(np.zeros(node.out_channels), decay=False)
            store.params[node.id] = entry
        elif node.kind == "batchnorm":
            c = node.out_channels
            store.params[node.id] = {
                "scale": Param.of(np.ones(c), decay=False),
                "shift": Param.of(np.zeros(c), decay=False),
            }
            store.buffers[node.id] = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
    return store


# -- convolution helpers ----------------------------------------------------

def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k), ho, wo


def _col2im(col, shape, k, stride, pad, ho, wo):
    n, c, h, w = shape
    col = col.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += col[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _as_dense(x, node):
    if x.ndim == 4:
        if x.shape[2:] != (1, 1):
            raise ShapeError(f"dense node {node.id} needs 1x1 spatial input, got {x.shape}")
        return x.reshape(x.shape[0], -1)
    return x


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bcast(v, x):
    return v if x.ndim == 2 else v.reshape(1, -1, 1, 1)


# -- forward / backward -----------------------------------------------------

@dataclass
class Pass:
    """Activations and per-node caches of one forward evaluation."""

    graph: LayerGraph
    params: ParamStore
    mode: str
    outputs: dict[int, np.ndarray]
    caches: dict[int, tuple]
    logits: np.ndarray
    labels: np.ndarray | None = None
    loss: float | None = None
    probs: np.ndarray | None = None


def _forward_node(node: LayerNode, ins, params: ParamStore, mode: str):
    kind = node.kind
    if kind == "input":
        return ins[0], ()
    if kind in CONV_KINDS:
        x = ins[0]
        if x.ndim != 4:
            raise ShapeError(f"conv node {node.id} needs a 4-d input, got {x.shape}")
        k = KERNEL_SIZE[kind]
        w = params.params[node.id]["weight"].value
        col, ho, wo = _im2col(x, k, node.stride, (k - 1) // 2)
        out = col @ w.reshape(w.shape[0], -1).T
        out = out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (col, x.shape, ho, wo)
    if kind in ("dense", "classifier"):
        x = _as_dense(ins[0], node)
        p = params.params[node.id]
        out = x @ p["weight"].value.T
        if "bias" in p:
            out = out + p["bias"].value
        return out, (x, ins[0].shape)
    if kind == "batchnorm":
        x = ins[0]
        axes = _bn_axes(x)
        p = params.params[node.id]
        buf = params.buffers[node.id]
        if mode == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            buf["running_mean"] = BN_MOMENTUM * buf["running_mean"] + (1 - BN_MOMENTUM) * mean
            buf["running_var"] = BN_MOMENTUM * buf["running_var"] + (1 - BN_MOMENTUM) * var
        else:
            mean, var = buf["running_mean"], buf["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - _bcast(mean, x)) * _bcast(inv, x)
        out = xhat * _bcast(p["scale"].value, x) + _bcast(p["shift"].value, x)
        return out, (xhat, inv)
    if kind == "relu":
        x = ins[0]
        mask = x > 0
        return x * mask, (mask,)
    if kind == "maxpool3x3s2":
        x = ins[0]
        n, c, h, w = x.shape
        ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        win = np.empty((9, n, c, ho, wo))
        for i in range(3):
            for j in range(3):
                win[3 * i + j] = xp[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2]
        arg = win.argmax(axis=0)
        out = np.take_along_axis(win, arg[None], axis=0)[0]
        return out, (arg, x.shape, ho, wo)
    if kind == "concat_channels":
        return np.concatenate(ins, axis=1), ([a.shape[1] for a in ins],)
    if kind == "global_avg_pool":
        x = ins[0]
        return x.mean(axis=(2, 3)), (x.shape,)
    if kind == "add_residual":
        if ins[0].shape != ins[1].shape:
            raise ShapeError(f"residual add {node.id}: {ins[0].shape} vs {ins[1].shape}")
        return ins[0] + ins[1], ()
    raise ShapeError(f"unsupported layer kind {kind!r}")


def _backward_node(node: LayerNode, dout, cache, params: ParamStore):
    """Return gradients w.r.t. the node's inputs; accumulate parameter grads."""
    kind = node.kind
    if kind == "input":
        return []
    if kind in CONV_KINDS:
        col, xshape, ho, wo = cache
        k = KERNEL_SIZE[kind]
        p = params.params[node.id]["weight"]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, dout.shape[1])
        p.grad += (d2.T @ col).reshape(p.value.shape)
        dcol = d2 @ p.value.reshape(p.value.shape[0], -1)
        return [_col2im(dcol, xshape, k, node.stride, (k - 1) // 2, ho, wo)]
    if kind in ("dense", "classifier"):
        x, xshape = cache
        p = params.params[node.id]
        p["weight"].grad += dout.T @ x
        if "bias" in p:
            p["bias"].grad += dout.sum(axis=0)
        return [(dout @ p["weight"].value).reshape(xshape)]
    if kind == "batchnorm":
        xhat, inv = cache
        axes = _bn_axes(dout)
        p = params.params[node.id]
        p["scale"].grad += (dout * xhat).sum(axis=axes)
        p["shift"].grad += dout.sum(axis=axes)
        dxhat = dout * _bcast(p["scale"].value, dout)
        m = dout.size // dout.shape[1]
        dx = (
            dxhat
            - _bcast(dxhat.sum(axis=axes) / m, dout)
            - xhat * _bcast((dxhat * xhat).sum(axis=axes) / m, dout)
        ) * _bcast(inv, dout)
        return [dx]
    if kind == "relu":
        return [dout * cache[0]]
    if kind == "maxpool3x3s2":
        arg, (n, c, h, w), ho, wo = cache
        dxp = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2] += dout * (arg == 3 * i + j)
        return [dxp[:, :, 1:-1, 1:-1]]
    if kind == "concat_channels":
        splits = np.cumsum(cache[0])[:-1]
        return np.split(dout, splits, axis=1)
    if kind == "global_avg_pool":
        (n, c, h, w), = cache
        return [np.broadcast_to(dout[:, :, None, None] / (h * w), (n, c, h, w)).copy()]
    if kind == "add_residual":
        return [dout, dout]
    raise ShapeError(f"unsupported layer kind {kind!r}")


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the class probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), np.exp(logp)


def forward(graph: LayerGraph, params: ParamStore, x: np.ndarray, mode: str = "train",
            labels: np.ndarray | None = None) -> Pass:
    """Evaluate the graph; with ``labels`` the pass also carries the mean loss."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    h, w, c = graph.input_shape
    expected = (c,) if h * w == 1 and x.ndim == 2 else (c, h, w)
    if x.shape[1:] != expected:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {expected}")
    outputs: dict[int, np.ndarray] = {}
    caches: dict[int, tuple] = {}
    for node in graph.nodes:
        ins = [outputs[i] for i in node.inputs] if node.inputs else [x]
        outputs[node.id], caches[node.id] = _forward_node(node, ins, params, mode)
    logits = outputs[graph.output_id]
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite activations in forward pass")
    result = Pass(graph, params, mode, outputs, caches, logits)
    if labels is not None:
        labels = np.asarray(labels)
        result.labels = labels
        result.loss, result.probs = softmax_xent(logits, labels)
    return result


def backward(result: Pass, grad_output: np.ndarray | None = None) -> None:
    """Accumulate parameter gradients into ``result.params``.

    Without ``grad_output`` the pass must carry labels and the softmax
    cross-entropy loss is differentiated. Gradients add to whatever is
    already stored; call :meth:`ParamStore.zero_grad` between steps.
    """
    if not result.caches:
        raise WorkbenchError("backward called without a forward cache")
    if grad_output is None:
        if result.probs is None:
            raise WorkbenchError("backward needs labels on the forward pass or an explicit grad_output")
        grad_output = result.probs.copy()
        grad_output[np.arange(len(result.labels)), result.labels] -= 1.0
        grad_output /= len(result.labels)
    grads: dict[int, np.ndarray] = {result.graph.output_id: np.asarray(grad_output, dtype=np.float64)}
    for node in reversed(result.graph.nodes):
        dout = grads.pop(node.id, None)
        if dout is None:
            continue
        dins = _backward_node(node, dout, result.caches[node.id], result.params)
        for src, g in zip(node.inputs, dins):
            grads[src] = grads[src] + g if src in grads else g
    for _, _, p in result.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError("non-finite gradient")


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Classic momentum SGD: ``v = m*v + g + wd*w; w -= lr*v``.

    Weight decay applies to conv/dense weights only, not to batchnorm
    scale/shift or biases.
    """
    for _, _, p in params.items():
        g = p.grad + weight_decay * p.value if (weight_decay and p.decay) else p.grad
        p.velocity *= momentum
        p.velocity += g
        update = lr * p.velocity
        if not np.all(np.isfinite(update)):
            raise DivergenceError("non-finite parameter update")
        p.value -= update


def lr_at(epoch: int, base_lr: float, milestones=(), factor: float = 0.2) -> float:
    """Step schedule: multiply by ``factor`` at each milestone epoch reached (0-based)."""
    return base_lr * factor ** sum(1 for m in milestones if epoch >= m)


# -- checkpoints ------------------------------------------------------------
#
# little-endian layout
#   header:  4s magic "BTNP" | u32 version (1) | u32 record count
#   record:  i64 layer id | u8 tensor code | u8 ndim | ndim x i64 dims | f64 data

MAGIC = b"BTNP"
VERSION = 1
TENSOR_CODES = {"weight": 0, "bias": 1, "scale": 2, "shift": 3, "running_mean": 4, "running_var": 5}
_CODE_NAMES = {v: k for k, v in TENSOR_CODES.items()}


def _records(store: ParamStore):
    for lid, name, p in store.items():
        yield lid, name, p.value
    for lid in sorted(store.buffers):
        for name, arr in store.buffers[lid].items():
            yield lid, name, arr


def save_checkpoint(store: ParamStore, path) -> None:
    records = list(_records(store))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MAGIC, VERSION, len(records)))
        for lid, name, arr in records:
            fh.write(struct.pack("<qBB", lid, TENSOR_CODES[name], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    data = Path(path).read_bytes()
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != MAGIC or version != VERSION:
        raise WorkbenchError(f"not a parameter checkpoint (magic={magic!r}, version={version})")
    off = struct.calcsize("<4sII")
    store = ParamStore()
    for _ in range(count):
        lid, code, ndim = struct.unpack_from("<qBB", data, off)
        off += struct.calcsize("<qBB")
        shape = struct.unpack_from(f"<{ndim}q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
        name = _CODE_NAMES[code]
        if name.startswith("running_"):
            store.buffers.setdefault(lid, {})[name] = arr
        else:
            store.params.setdefault(lid, {})[name] = Param.of(arr, decay=name == "weight")
    if off != len(data):
        raise WorkbenchError(f"trailing bytes in checkpoint: {len(data) - off}")
    return store
