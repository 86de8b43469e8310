"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor; ``Tensor.backward`` walks that graph once in reverse
topological order.  Graph edges are only recorded when at least one input
requires a gradient, so frozen-weight inference never builds a graph.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError("implicit gradient only for scalar outputs, got shape %s" % (self.shape,))
            grad = np.ones(self.shape)
        order = ComputeGraph.from_output(self).nodes
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        # release the graph; each forward pass builds a fresh one
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result; record the edge only when some parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


@dataclass
class ComputeGraph:
    """Topologically ordered view of the graph feeding one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        ids = {id(n): i for i, n in enumerate(self.nodes)}
        return [(n.op, tuple(ids[id(p)] for p in n._parents), ids[id(n)]) for n in self.nodes]


# ---------------------------------------------------------------------------
# elementwise and scalar-broadcast ops


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: ((a, _reduce_to(g, a)), (b, _reduce_to(g, b))), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: ((a, _reduce_to(g, a)), (b, _reduce_to(-g, b))), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_scalar(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: ((a, _reduce_to(g * b.data, a)), (b, _reduce_to(g * a.data, b))), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: ((a, g * c),), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[N×k] + b[k], the one explicit row broadcast."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: {x.shape} and {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: ((x, g), (b, g.sum(axis=0))), "add_bias")


def channel_affine(x: Tensor, scale_c, shift_c) -> Tensor:
    """x[N×C×H×W]·scale[c] + shift[c] with constant per-channel coefficients."""
    a = np.asarray(scale_c, dtype=np.float64).reshape(1, -1, 1, 1)
    b = np.asarray(shift_c, dtype=np.float64).reshape(1, -1, 1, 1)
    if x.data.ndim != 4 or x.shape[1] != a.shape[1]:
        raise DimensionError(f"channel_affine: {x.shape} with {a.shape[1]} channel coefficients")
    return _make(x.data * a + b, (x,), lambda g: ((x, g * a),), "channel_affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: ((x, g * mask),), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: ((x, g * y),), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: ((x, g / x.data),), "log")


def sign(x: Tensor) -> Tensor:
    """sign with sign(0) = 0; a gradient stop point."""
    return Tensor(np.sign(x.data))


def clamp(x: Tensor, lo, hi) -> Tensor:
    """Projection onto [lo, hi]; a gradient stop point."""
    return Tensor(np.clip(x.data, lo, hi))


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T if a.requires_grad else None),
                (b, a.data.T @ g if b.requires_grad else None))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.data.ndim != 2:
            raise DimensionError(f"transpose without axes needs a matrix, got {x.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inv)),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(v) for v in shape)
    if shape.count(-1) == 1:
        known = int(np.prod([v for v in shape if v != -1]))
        shape = tuple(x.size // known if v == -1 else v for v in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: {x.shape} -> {shape}")
    return _make(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(x.shape)),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(s)) if i != axis % len(s)):
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(zip(parts, np.split(g, cuts, axis=axis)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return ((table, out),)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


def pad_rows(x: Tensor, total: int) -> Tensor:
    """Zero-pad a matrix with extra rows up to ``total``."""
    n = x.shape[0]
    if n > total:
        raise DimensionError(f"pad_rows: {n} rows exceed {total}")
    out = np.zeros((total,) + x.shape[1:])
    out[:n] = x.data
    return _make(out, (x,), lambda g: ((x, g[:n]),), "pad_rows")


# ---------------------------------------------------------------------------
# reductions and row ops


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _make(np.sum(x.data), (x,), lambda g: ((x, np.broadcast_to(g, x.shape).copy()),), "sum")
    y = np.sum(x.data, axis=axis)
    return _make(y, (x,), lambda g: ((x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((x, (g - y * dot) / norm),)

    return _make(y, (x,), backward, "l2_normalize")


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, p * (g - np.sum(g * p, axis=-1, keepdims=True))),)

    return _make(p, (x,), backward, "softmax")


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    return y


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row softmax, max-shifted."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be N×K, got {logits.shape}")
    n, k = logits.shape
    y = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), y])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return ((logits, g * p / n),)

    return _make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def nll(probs: Tensor, labels, eps: float = 1e-12) -> Tensor:
    """Mean negative log of the labelled entry of probability rows."""
    n, k = probs.shape
    y = _check_labels(labels, n, k)
    picked = np.maximum(probs.data[np.arange(n), y], eps)

    def backward(g):
        out = np.zeros_like(probs.data)
        out[np.arange(n), y] = -g / (n * picked)
        return ((probs, out),)

    return _make(np.asarray(np.mean(-np.log(picked))), (probs,), backward, "nll")


# ---------------------------------------------------------------------------
# convolutions


def conv2d_fixed(x: Tensor, kernel) -> Tensor:
    """Depthwise same-size convolution of every channel with one k×k kernel.

    Zero padding, stride 1, cross-correlation orientation (no kernel flip).
    Differentiable with respect to ``x`` only.
    """
    k = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ConfigurationError(f"kernel must be square, got {k.shape}")
    if k.shape[0] % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k.shape[0]}")
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d_fixed expects N×C×H×W, got {x.shape}")
    y = _corr_same(x.data, k)
    return _make(y, (x,), lambda g: ((x, _corr_same(g, k[::-1, ::-1])),), "conv2d_fixed")


def _corr_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = k.shape[0] // 2
    h, w = x.shape[-2:]
    sep = _separable(k)
    if sep is not None and k.shape[0] > 1:
        col, row = sep
        xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)])
        tmp = np.zeros_like(x)
        for i, c in enumerate(col):
            tmp += c * xp[..., i:i + h, :]
        tp = np.pad(tmp, [(0, 0)] * (x.ndim - 2) + [(0, 0), (r, r)])
        out = np.zeros_like(x)
        for j, c in enumerate(row):
            out += c * tp[..., :, j:j + w]
        return out
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)])
    out = np.zeros_like(x)
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            if k[i, j] != 0.0:
                out += k[i, j] * xp[..., i:i + h, j:j + w]
    return out


def _separable(k: np.ndarray):
    """(column, row) factors when k is exactly rank one, else None."""
    i0, j0 = np.unravel_index(np.argmax(np.abs(k)), k.shape)
    if k[i0, j0] == 0.0:
        return None
    col = k[:, j0]
    row = k[i0, :] / k[i0, j0]
    if np.max(np.abs(np.outer(col, row) - k)) > 1e-15 * max(np.abs(k).max(), 1.0):
        return None
    return col, row


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    # rows: (n, ho, wo); cols: (c, k, k)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * k * k), ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = shape
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense learnable convolution, weight[C_out×C_in×k×k], via im2col."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    co, ci, k, _ = weight.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    y = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        res = [(x, _col2im(gm @ wmat, x.shape, k, stride, pad, ho, wo) if x.requires_grad else None),
               (weight, (gm.T @ cols).reshape(weight.shape))]
        if bias is not None:
            res.append((bias, gm.sum(axis=0)))
        return res

    return _make(np.ascontiguousarray(y), parents, backward, "conv2d")


def spatial_gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-image pixel remap of N×C×H×W.

    ``index[n]`` is an H×W array of flat source positions into image n's
    H×W plane, or -1 for zero fill.  Covers nearest-neighbour resizing and
    padding in one differentiable op.
    """
    n, c, h, w = x.shape
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (n, h, w):
        raise DimensionError(f"spatial_gather: index {index.shape} for input {x.shape}")
    flat = x.data.reshape(n, c, h * w)
    valid = index >= 0
    safe = np.where(valid, index, 0).reshape(n, 1, h * w)
    out = np.take_along_axis(flat, np.broadcast_to(safe, (n, c, h * w)), axis=2)
    out = out * valid.reshape(n, 1, h * w)

    def backward(g):
        gm = g.reshape(n, c, h * w) * valid.reshape(n, 1, h * w)
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
        target = (base + safe).ravel()
        gx = np.bincount(target, weights=gm.ravel(), minlength=n * c * h * w)
        return ((x, gx.reshape(x.shape)),)

    return _make(out.reshape(x.shape), (x,), backward, "spatial_gather")


def patchify(x: Tensor, p: int) -> Tensor:
    """N×C×H×W -> (N·P)×(C·p·p) non-overlapping patches, row-major patch order."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}×{w} not divisible by patch size {p}")
    t = reshape(x, (n, c, h // p, p, w // p, p))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (n * (h // p) * (w // p), c * p * p))


# ---------------------------------------------------------------------------
# named-tensor container


_MAGIC = b"GCT1"


def tensor_digest(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> dict:
    """Write a self-describing little-endian float64 container plus ``<path>.json``.

    Layout: magic, uint64 header length, JSON header of
    ``[{name, shape, offset}]``, then the concatenated payload.
    """
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(entries, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    manifest = dict(meta or {})
    manifest["tensors"] = entries
    manifest["sha256"] = tensor_digest(tensors)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a tensor container")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    entries = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    out = {}
    for e in entries:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        out[e["name"]] = np.frombuffer(raw[start:start + 8 * count], dtype="<f8").reshape(e["shape"]).copy()
    mpath = Path(str(path) + ".json")
    meta = json.loads(mpath.read_text()) if mpath.exists() else {}
    return out, meta


def parameters_digest(params: Iterable[Tensor]) -> str:
    return tensor_digest({str(i): p.data for i, p in enumerate(params)})
