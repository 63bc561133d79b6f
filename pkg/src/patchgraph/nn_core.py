"""Dense 2-D tensors with reverse-mode gradients, Glorot init and Adam.

Every op records its parents and a backward closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the recorded
graph in reverse topological order and *adds* into ``.grad``, so calling it
once per sample leaves the summed gradient on the parameters.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ShapeError, TrainingError
from .ingest.formats import atomic_write_bytes, atomic_write_text

_grad_enabled = True
_debug = os.environ.get("PATCHGRAPH_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Check every op output for non-finite values (slow)."""
    global _debug
    _debug = flag


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        a = np.asarray(data, dtype=np.float64)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(1, -1)
        elif a.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
        self.data = a
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.array(grad, dtype=np.float64).reshape(self.shape)
        for node in reversed(order):
            g = node.grad
            if node._backward is None or g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad += pg
            # intermediate buffers are released as soon as they are consumed
            node.grad = None
            node._parents = ()
            node._backward = None

    __add__ = lambda self, o: add(self, _as_tensor(o))
    __sub__ = lambda self, o: sub(self, _as_tensor(o))
    __mul__ = lambda self, o: mul(self, _as_tensor(o))
    __matmul__ = lambda self, o: matmul(self, _as_tensor(o))
    __neg__ = lambda self: scale(self, -1.0)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced in forward pass")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape {a.shape} cannot multiply {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(
        A @ B,
        (a, b),
        lambda g: (g @ B.T if need_a else None, A.T @ g if need_b else None),
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def add_broadcast_row(a: Tensor, row: Tensor) -> Tensor:
    """``a + row`` with ``row`` (1 x n) repeated over the rows of ``a``."""
    if row.shape[0] != 1 or row.shape[1] != a.shape[1]:
        raise ShapeError(f"add_broadcast_row: shape {a.shape} cannot take row {row.shape}")
    return _result(a.data + row.data, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericalError("log of a non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def rowwise_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(parts: list[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return _result(
        out, tuple(parts), lambda g: tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def _aggregate(m: np.ndarray, nbr: np.ndarray, mask: np.ndarray, beta: float):
    # padded slots read the column minimum (keeps the slot max exact), then get
    # weight exp(-inf) = 0; filler far below the max would hit slow denormals
    filler = m.min(axis=0, keepdims=True)
    x = np.concatenate([m, filler])[np.where(mask, nbr, m.shape[0])]  # (nodes, slots, ch)
    w = x - x.max(axis=1, keepdims=True)
    w[~mask] = -np.inf
    w *= beta
    np.exp(w, out=w)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("nsc,nsc->nc", w, x)
    return x, w, out


def segment_softmax_aggregate(messages: Tensor, index, beta: float = 1.0) -> Tensor:
    """Per-channel softmax-weighted mean of incoming messages.

    ``index`` is a :class:`~patchgraph.wsi_graph.MessageIndex`; node ``v``
    receives row ``messages[u]`` from every routed ``u -> v``. For each
    channel c, ``out[v, c] = sum_u a_u * m_u[c]`` with
    ``a = softmax_u(beta * m_u[c])``.
    """
    m = messages.data
    if index.num_nodes != m.shape[0]:
        raise ShapeError(
            f"segment_softmax_aggregate: {m.shape[0]} rows for {index.num_nodes} nodes"
        )
    if not (_grad_enabled and messages.requires_grad):
        return Tensor(_aggregate_chunked(m, index, beta))
    x, a, out = _aggregate(m, index.nbr, index.mask, beta)

    def backward(g):
        # d out_v / d x_vu = a_vu * (1 + beta * (x_vu - out_v)), per channel
        n, s, c = x.shape
        buf = np.empty((n * s + 1, c))
        buf[-1] = 0.0
        dx = buf[:-1].reshape(n, s, c)
        np.subtract(x, out[:, None, :], out=dx)
        dx *= beta
        dx += 1.0
        dx *= a
        dx *= g[:, None, :]
        return (buf[index.rev].sum(axis=1),)

    return _result(out, (messages,), backward)


def _aggregate_chunked(m: np.ndarray, index, beta: float, nodes: int = 8192) -> np.ndarray:
    # forward-only path; bounds peak memory on graphs with ~1e5 nodes
    out = np.empty_like(m)
    for lo in range(0, m.shape[0], nodes):
        hi = lo + nodes
        out[lo:hi] = _aggregate(m, index.nbr[lo:hi], index.mask[lo:hi], beta)[2]
    if _debug and not np.all(np.isfinite(out)):
        raise NumericalError("non-finite value produced in forward pass")
    return out


# ---------------------------------------------------------------- composites

def mlp_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two affine maps with a ReLU between them."""
    h = relu(add_broadcast_row(matmul(x, w1), b1))
    return add_broadcast_row(matmul(h, w2), b2)


def init_parameters(shape: tuple[int, int], seed: int) -> np.ndarray:
    """Glorot-uniform draw in +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return np.random.default_rng(seed).uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, accumulation_count: int = 1) -> None:
    """Apply one update from gradients summed over ``accumulation_count`` samples.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the Adam move.
    """
    if accumulation_count < 1:
        raise ValueError("accumulation_count must be >= 1")
    grads = []
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
        grads.append(g / accumulation_count)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    lr = state.learning_rate
    for p, g in zip(params, grads):
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.data)
            state.second_moment[p.name] = np.zeros_like(p.data)
        v = state.second_moment[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PGCNCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], hyperparams: dict) -> None:
    """Binary parameter blocks plus a ``<path>.json`` hyperparameter sidecar."""
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        if value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<II", *value.shape) + value.tobytes())
    atomic_write_bytes(path, b"".join(chunks))
    atomic_write_text(str(path) + ".json", json.dumps(hyperparams, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, params = 12, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4: pos + 4 + n].decode("utf-8")
            pos += 4 + n
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(buf):
                raise FormatError(f"{path}: truncated block {name!r}")
            params[name] = np.frombuffer(buf, "<f8", rows * cols, pos).reshape(rows, cols).copy()
            pos += size
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint") from None
    sidecar = Path(str(path) + ".json")
    hyper = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return params, hyper
