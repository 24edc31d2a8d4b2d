"""Minimal dense-tensor reverse-mode autodiff engine.

Graphs are define-by-run tapes: while a ``Graph`` is active (used as a context
manager), every primitive records a node; with no active graph the primitives
just compute values. A fresh graph is built per forward pass, which keeps the
contract trivial for a search loop whose sampled structure changes every step.

Everything is float64. conv2d and resize_bilinear dispatch to the kernels
module (numba or numpy, see ``kernels.active_backend``); the rest is plain
numpy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape rule."""


class Tensor:
    """A dense float64 array plus a requires-grad flag.

    Tensors are plain value holders; graph membership is transient and lives
    on the recording ``Graph``.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # note: ascontiguousarray would promote 0-d to 1-d, so go via asarray
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("kind", "input_ids", "tensor", "vjp", "needs_grad")

    def __init__(self, kind, input_ids, tensor, vjp, needs_grad):
        self.kind = kind
        self.input_ids = input_ids
        self.tensor = tensor
        self.vjp = vjp
        self.needs_grad = needs_grad


_GRAPH_STACK: list["Graph"] = []


def _active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Append-only operation tape. Node inputs always precede the node."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}
        self._tensor_node: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self

    def _ensure_node(self, t: Tensor) -> int:
        nid = self._tensor_node.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), t, None, t.requires_grad))
            self._tensor_node[id(t)] = nid
        return nid

    def _record(self, kind: str, inputs: Sequence[Tensor], out: Tensor,
                vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        input_ids = tuple(self._ensure_node(t) for t in inputs)
        needs = any(self.nodes[i].needs_grad for i in input_ids)
        nid = len(self.nodes)
        self.nodes.append(_Node(kind, input_ids, out, vjp if needs else None, needs))
        self._tensor_node[id(out)] = nid
        return out

    def node_id(self, t: Tensor) -> int:
        """Node id of a tensor on this graph; KeyError if it never touched it."""
        return self._tensor_node[id(t)]

    def grad(self, t: Tensor) -> np.ndarray | None:
        g = self.gradients.get(self._tensor_node.get(id(t), -1))
        return None if g is None else g.data


def backward(graph: Graph, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns and stores the gradient map.

    Every requires-grad leaf ends up with a gradient of its own shape (zeros
    when the leaf does not influence the loss).
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss_id = graph.node_id(loss)
    acc: dict[int, np.ndarray] = {loss_id: np.ones(())}
    for nid in range(loss_id, -1, -1):
        g = acc.get(nid)
        node = graph.nodes[nid]
        if g is None or node.vjp is None:
            continue
        contribs = node.vjp(g)
        for in_id, contrib in zip(node.input_ids, contribs):
            if contrib is None or not graph.nodes[in_id].needs_grad:
                continue
            if in_id in acc:
                acc[in_id] = acc[in_id] + contrib
            else:
                acc[in_id] = contrib
    graph.gradients = {}
    for nid, g in acc.items():
        graph.gradients[nid] = Tensor(g)
    for nid, node in enumerate(graph.nodes):
        if node.kind == "leaf" and node.tensor.requires_grad and nid not in graph.gradients:
            graph.gradients[nid] = Tensor(np.zeros(node.tensor.shape))
    return graph.gradients


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind, inputs, out_data, vjp_builder) -> Tensor:
    out = Tensor(out_data)
    g = _active_graph()
    if g is not None:
        g._record(kind, inputs, out, vjp_builder())
        out.requires_grad = any(t.requires_grad for t in inputs) or out.requires_grad
    return out


def _reduce_broadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to a broadcast operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def build():
        ad, bd = a.data, b.data
        return lambda g: (g @ bd.T, ad.T @ g)

    return _emit("matmul", (a, b), out, build)


def conv2d(x: Tensor, kern: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    x, kern = _as_tensor(x), _as_tensor(kern)
    if x.data.ndim != 4 or kern.data.ndim != 4 or x.shape[1] != kern.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {kern.shape}")
    _, _, h, w = x.shape
    _, _, kh, kw = kern.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kern.shape} larger than padded input {x.shape} (padding={padding})")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = kernels.conv2d_forward(xp, kern.data, stride)

    def build():
        kd = kern.data
        hp, wp = xp.shape[2], xp.shape[3]

        def vjp(g):
            gx = kernels.conv2d_grad_input(g, kd, stride, hp, wp)
            if padding:
                gx = gx[:, :, padding:hp - padding, padding:wp - padding]
            gk = kernels.conv2d_grad_kernel(xp, g, stride, kh, kw)
            return gx, gk

        return vjp

    return _emit("conv2d", (x, kern), out, build)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def build():
        mask = x.data > 0
        return lambda g: (g * mask,)

    return _emit("relu", (x,), out, build)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def build():
        xd = x.data
        return lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _emit("silu", (x,), out, build)


def _broadcastable(sa, sb) -> bool:
    for da, db in zip(sa[::-1], sb[::-1]):
        if da != db and da != 1 and db != 1:
            return False
    return True


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data + b.data

    def build():
        sa, sb = a.shape, b.shape
        return lambda g: (_reduce_broadcast(g, sa), _reduce_broadcast(g, sb))

    return _emit("add", (a, b), out, build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data * b.data

    def build():
        ad, bd = a.data, b.data
        sa, sb = a.shape, b.shape
        return lambda g: (_reduce_broadcast(g * bd, sa), _reduce_broadcast(g * ad, sb))

    return _emit("mul", (a, b), out, build)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = x.data * c

    def build():
        return lambda g: (g * c,)

    return _emit("scale", (x,), out, build)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: needs at least one input")
    ndim = parts[0].data.ndim
    ax = axis % ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        if len(s) != ndim or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(
                f"concat: shapes {[p.shape for p in parts]} differ off axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)

    def build():
        sizes = [p.shape[ax] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(np.split(g, splits, axis=ax))

    return _emit("concat", tuple(parts), out, build)


def global_avg_pool(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (B,C,H,W), got {x.shape}")
    out = x.data.mean(axis=(2, 3))

    def build():
        b, c, h, w = x.shape
        return lambda g: (np.broadcast_to(g[:, :, None, None], (b, c, h, w)) / (h * w),)

    return _emit("global_avg_pool", (x,), out, build)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def build():
        s = out
        return lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, build)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def build():
        e = out
        return lambda g: (g * e,)

    return _emit("exp", (x,), out, build)


def mse(a: Tensor, b: Tensor, sample_weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all elements, as a scalar.

    ``sample_weights`` (optional, constant) re-weights along the leading batch
    axis before the batch mean; it is never differentiated.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    if sample_weights is None:
        out = np.mean(diff * diff) if diff.size else np.zeros(())

        def build():
            n = max(diff.size, 1)
            return lambda g: (g * 2.0 * diff / n, g * -2.0 * diff / n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if diff.ndim < 1 or w.shape != (a.shape[0],):
            raise ShapeError(
                f"mse: sample_weights shape {w.shape} does not match batch {a.shape}")
        sq = (diff * diff).reshape(a.shape[0], -1)
        per = sq.mean(axis=1) if sq.shape[1] else np.zeros(a.shape[0])
        out = np.asarray((w * per).mean())

        def build():
            bsz = a.shape[0]
            per_n = max(diff[0].size, 1)
            wexp = w.reshape((bsz,) + (1,) * (diff.ndim - 1))
            return lambda g: (g * 2.0 * wexp * diff / (per_n * bsz),
                              g * -2.0 * wexp * diff / (per_n * bsz))

    return _emit("mse", (a, b), out, build)


def l2norm(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(np.sqrt((x.data * x.data).sum()))

    def build():
        n = float(out)

        def vjp(g):
            if n == 0.0:
                return (np.zeros(x.shape),)
            return (g * x.data / n,)

        return vjp

    return _emit("l2norm", (x,), out, build)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def build():
        orig = x.shape
        return lambda g: (g.reshape(orig),)

    return _emit("reshape", (x,), out, build)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"resize_bilinear: expected (B,C,H,W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: bad target size ({out_h}, {out_w})")
    out = kernels.resize_bilinear(x.data, out_h, out_w)

    def build():
        h, w = x.shape[2], x.shape[3]
        return lambda g: (kernels.resize_bilinear_grad(g, h, w),)

    return _emit("resize_bilinear", (x,), out, build)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "silu": silu,
    "add": add,
    "mul": mul,
    "concat": concat,
    "global_avg_pool": global_avg_pool,
    "softmax": softmax,
    "scale": scale,
    "mse": mse,
    "exp": exp,
    "l2norm": l2norm,
    "resize_bilinear": resize_bilinear,
    "reshape": reshape,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Uniform dispatcher over the primitive set.

    Multi-input primitives take their operands positionally from ``inputs``;
    structural parameters (stride, axis, target size, ...) go in ``attrs``.
    """
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ShapeError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)
