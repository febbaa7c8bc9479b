"""Dense arrays with a small reverse-mode differentiation engine.

Plain tensors are C-ordered (row-major) numpy arrays. A :class:`Node` wraps
one such array together with the operation that produced it, so that
:func:`backward` can push gradients from a scalar root to every node it
depends on.

Only the operations needed by the part-loss network are provided. Apart from
the per-channel bias add in :func:`conv2d`, operands must have identical
shapes; nothing broadcasts.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Return `data` as a C-contiguous array of the given dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def row_major_offset(index: Sequence[int], shape: Sequence[int]) -> int:
    offset = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        offset = offset * n + i
    return offset


def unravel_offset(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    index = []
    for n in reversed(shape):
        offset, i = divmod(offset, n)
        index.append(i)
    return tuple(reversed(index))


class Node:
    """A value in a differentiable computation graph.

    ``grad`` has the shape of ``value`` and starts at zero. ``op`` names the
    producing operation (``"leaf"`` for inputs and parameters) and
    ``parents`` holds the input nodes in argument order.
    """

    __slots__ = ("value", "_grad", "op", "parents", "requires_grad", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Node", ...] = (),
        backward_fn: BackwardFn | None = None,
        dtype=None,
    ):
        if isinstance(value, np.ndarray) and dtype is None:
            self.value = np.ascontiguousarray(value)
        else:
            self.value = as_tensor(value, np.float64 if dtype is None else dtype)
        self._grad = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        g = np.asarray(g, dtype=self.value.dtype)
        if g.shape != self.value.shape:
            raise ConfigurationError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"


def _make(value: np.ndarray, op: str, parents: tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    requires_grad = any(p.requires_grad for p in parents)
    return Node(
        value,
        requires_grad,
        op=op,
        parents=parents,
        backward_fn=backward_fn if requires_grad else None,
    )


def custom_op(value: np.ndarray, op: str, parents: tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    """Record an operation defined outside this module.

    `backward_fn` receives the upstream gradient and returns one gradient (or
    None) per parent, in order.
    """
    return _make(np.ascontiguousarray(value), op, parents, backward_fn)


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, factor: float) -> Node:
    return _make(a.value * factor, "scale", (a,), lambda g: (g * factor,))


def total(a: Node) -> Node:
    """Sum of all entries, as a scalar node."""
    shape = a.shape
    return _make(
        np.asarray(a.value.sum(), dtype=a.dtype),
        "sum",
        (a,),
        lambda g: (np.full(shape, g, dtype=g.dtype),),
    )


def add_all(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ConfigurationError("add_all needs at least one node")
    shape = nodes[0].shape
    for n in nodes[1:]:
        _check_same_shape(nodes[0], n, "add_all")
    value = nodes[0].value.copy()
    for n in nodes[1:]:
        value = value + n.value
    return _make(value, "add_all", tuple(nodes), lambda g: tuple(g for _ in nodes))


def take(a: Node, i: int) -> Node:
    """Row ``i`` of a node along its leading axis."""
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[i] = g
        return (out,)

    return _make(a.value[i].copy(), "take", (a,), backward_fn)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    value = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[j], bounds[j + 1]), axis=axis) for j in range(len(nodes))
        )

    return _make(value, "concat", tuple(nodes), backward_fn)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def spatial_mean(x: Node) -> Node:
    """Average over the two trailing (row, column) axes."""
    h, w = x.shape[-2:]
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), shape).copy(),)

    return _make(x.value.mean(axis=(-2, -1)), "spatial_mean", (x,), backward_fn)


def _batched(x: Node, op: str) -> tuple[np.ndarray, bool]:
    if x.value.ndim == 3:
        return x.value[None], False
    if x.value.ndim == 4:
        return x.value, True
    raise ConfigurationError(f"{op}: expected C×H×W or N×C×H×W input, got shape {x.shape}")


def conv2d(x: Node, kernel: Node, bias: Node, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of `x` with `kernel`, plus a per-output-channel bias.

    `x` is Cin×H×W or N×Cin×H×W; `kernel` is Cout×Cin×kh×kw. The output has
    spatial extent floor((H + 2·pad − kh)/stride) + 1 (likewise for W).
    """
    xv, batched = _batched(x, "conv2d")
    kv, bv = kernel.value, bias.value
    if kv.ndim != 4:
        raise ConfigurationError(f"conv2d: kernel must be rank 4, got shape {kernel.shape}")
    cout, cin, kh, kw = kv.shape
    n, c, h, w = xv.shape
    if c != cin:
        raise ConfigurationError(f"conv2d: input has {c} channels but kernel expects {cin}")
    if bv.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and pad >= 0")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ConfigurationError(f"conv2d: kernel {kh}×{kw} larger than padded input {h}×{w}")

    if kh == kw == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, kernel, bias, batched)

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns: (n, ho, wo) rows by (cin, kh, kw) features
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ kv.reshape(cout, -1).T
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2) + bv[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (gmat.T @ cols).reshape(kv.shape) if kernel.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ kv.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx if batched else gx[0])
        return gx, gk, gb

    return _make(out if batched else out[0], "conv2d", (x, kernel, bias), backward_fn)


def _conv1x1(x: Node, kernel: Node, bias: Node, batched: bool) -> Node:
    # pointwise case as a channel matmul; same result as the general path
    xv = x.value if batched else x.value[None]
    n, cin, h, w = xv.shape
    kmat = kernel.value.reshape(kernel.shape[0], cin)
    cols = xv.reshape(n, cin, h * w)
    out = np.matmul(kmat, cols) + bias.value[None, :, None]
    out = out.reshape(n, -1, h, w)

    def backward_fn(g):
        g3 = (g if batched else g[None]).reshape(n, -1, h * w)
        gk = np.einsum("nop,ncp->oc", g3, cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.matmul(kmat.T, g3).reshape(xv.shape)
            gx = gx if batched else gx[0]
        return gx, gk, gb

    return _make(out if batched else out[0], "conv2d", (x, kernel, bias), backward_fn)


def max_pool2d(x: Node, window: int, stride: int | None = None) -> Node:
    """Per-window maximum; ties resolve to the first cell in row-major order."""
    stride = window if stride is None else stride
    xv, batched = _batched(x, "max_pool2d")
    n, c, h, w = xv.shape
    if window > h or window > w:
        raise ConfigurationError(f"max_pool2d: window {window} larger than input {h}×{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    windows = sliding_window_view(xv, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # np.argmax returns the first maximum
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    nn_ = np.broadcast_to(nn_[:, :, None, None], arg.shape)
    cc = np.broadcast_to(cc[:, :, None, None], arg.shape)

    def backward_fn(g):
        g4 = g if batched else g[None]
        gx = np.zeros(xv.shape, dtype=g.dtype)
        if stride >= window:
            gx[nn_, cc, rows, cols] = g4
        else:
            np.add.at(gx, (nn_, cc, rows, cols), g4)
        return (gx if batched else gx[0],)

    return _make(out if batched else out[0], "max_pool2d", (x,), backward_fn)


def softmax_cross_entropy(logits: Node, label: int) -> Node:
    """Negative log-softmax probability of `label`, computed stably."""
    if logits.value.ndim != 1:
        raise ConfigurationError(f"softmax_cross_entropy: logits must be rank 1, got {logits.shape}")
    c = logits.shape[0]
    if not 0 <= int(label) < c:
        raise InputError(f"label {label} out of range for {c} classes")
    label = int(label)
    z = logits.value - logits.value.max()
    ez = np.exp(z)
    denom = ez.sum()
    loss = np.log(denom) - z[label]
    probs = ez / denom

    def backward_fn(g):
        d = probs.copy()
        d[label] -= 1.0
        return (d * g,)

    return _make(np.asarray(loss, dtype=logits.dtype), "softmax_cross_entropy", (logits,), backward_fn)


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from `root`, each once, inputs before consumers."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    Calling this twice without zeroing grads adds the gradient twice.
    """
    if root.value.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(topological_order(root)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


PLTN_MAGIC = b"PLTN"
PLTN_VERSION = 1


def save_pltn(path: str | Path, array) -> None:
    """Write an array as a PLTN file (little-endian float32, row-major)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(PLTN_MAGIC)
        fh.write(struct.pack("<II", PLTN_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_pltn(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != PLTN_MAGIC:
        raise InputError(f"{path}: not a PLTN file")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != PLTN_VERSION:
        raise InputError(f"{path}: unsupported PLTN version {version}")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    start = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - start != 4 * count:
        raise InputError(f"{path}: payload size does not match extents {shape}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).copy()

