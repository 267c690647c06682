"""A small reverse-mode autodiff engine on numpy arrays.

Only the operations the cellular models need are provided. Each op computes
its forward value eagerly and, when any input requires a gradient, records a
closure mapping the output gradient to the input gradients. ``Tensor.backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .grid import window_offsets

_state = {"dtype": np.float32, "grad_enabled": True}


def default_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64`` for gradcheck)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None) -> None:
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = live
    out._parents = tuple(parents) if live else ()
    out._backward = backward if live else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


# -------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(count))


# ------------------------------------------------------------- structural

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return _make(np.array(x.data[idx]), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    return _make(data, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        # einsum beats batched matmul on the tiny per-cell matrices used here
        ga = np.einsum("...ik,...jk->...ij", g, b.data)
        gb = np.einsum("...ki,...kj->...ij", a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis; ``W`` is ``(in, out)``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    flat = x.data.reshape(-1, W.shape[0])
    y = flat @ W.data
    if b is not None:
        y += b.data
    y = y.reshape(x.shape[:-1] + (W.shape[1],))

    def back(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = flat.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(y, parents, back)


def neighborhoods(x: Tensor, radius: int = 1) -> Tensor:
    """Zero-padded windows ``(B, n, n, C) -> (B, n, n, (2r+1)**2, C)``, row-major."""
    if x.ndim != 4:
        raise ShapeError(f"neighborhoods: expected (B, n, n, C), got {x.shape}")
    B, H, W, C = x.shape
    r = radius
    offsets = window_offsets(r)
    padded = np.pad(x.data, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.empty((B, H, W, len(offsets), C), dtype=x.data.dtype)
    for k, (di, dj) in enumerate(offsets):
        out[:, :, :, k, :] = padded[:, r + di:r + di + H, r + dj:r + dj + W, :]

    def back(g):
        gp = np.zeros(padded.shape, dtype=g.dtype)
        for k, (di, dj) in enumerate(offsets):
            gp[:, r + di:r + di + H, r + dj:r + dj + W, :] += g[:, :, :, k, :]
        return (gp[:, r:r + H, r:r + W, :],)

    return _make(out, (x,), back)


def conv2d_1x1(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution on ``(B, n, n, Cin)`` with ``W`` of shape ``(Cin, Cout)``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_1x1: expected (B, n, n, C), got {x.shape}")
    return linear(x, W, b)


def conv2d_3x3(x: Tensor, K: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-size 3x3 cross-correlation, zero padding, ``K`` of shape ``(3, 3, Cin, Cout)``."""
    if x.ndim != 4 or K.shape[:2] != (3, 3) or K.shape[2] != x.shape[-1]:
        raise ShapeError(f"conv2d_3x3: input shape {x.shape} does not match kernel shape {K.shape}")
    B, H, W_, C = x.shape
    patches = reshape(neighborhoods(x, 1), (B, H, W_, 9 * C))
    return linear(patches, reshape(K, (9 * C, K.shape[3])), b)


# ------------------------------------------------------------------- losses

BCE_EPS = 1e-7


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.data.dtype)
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: prediction shape {p.shape} does not match target shape {y.shape}")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)

    def back(g):
        d = (pc - y) / (pc * (1.0 - pc)) / y.size
        return (g * d * inside,)

    return _make(np.asarray(loss, dtype=p.data.dtype), (p,), back)


# ---------------------------------------------------------- parameter store

def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named trainable tensors plus Adam moments."""

    def __init__(self) -> None:
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store (values only, no optimiser state) in ``dtype``."""
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(values)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, t in self.params.items():
            v = np.asarray(values[name])
            if v.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {v.shape} != model shape {t.shape}")
            t.data = v.astype(t.data.dtype)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter, then zero the grads."""
    for name, t in store:
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, t in store:
        g = t.grad
        if name not in store.m:
            store.m[name] = np.zeros_like(t.data)
            store.v[name] = np.zeros_like(t.data)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data = (t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(t.data.dtype)
    store.zero_grad()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    total = float(np.sqrt(np.sum([np.sum(np.square(t.grad, dtype=np.float64))
                                  for _, t in store if t.grad is not None])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for _, t in store:
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.grad.dtype)
    return total


def grad_check(f: Callable[[], Tensor], store: ParamStore, eps: float = 1e-5,
               max_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current values in ``store``; it is
    called once for the analytic gradient and twice per sampled coordinate.
    Tensors larger than ``max_coords`` are checked on a random sample.
    """
    rng = np.random.default_rng(seed)
    store.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()
    worst = 0.0
    for name, t in store:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(f().data)
            flat[c] = orig - eps
            down = float(f().data)
            flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}")
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    store.zero_grad()
    return worst


# ------------------------------------------------------- checkpoint files

PARAM_MAGIC = b"ARNP"
PARAM_VERSION = 1


def params_to_bytes(store: ParamStore) -> bytes:
    parts = [PARAM_MAGIC, struct.pack("<HI", PARAM_VERSION, len(store.params))]
    for name, t in store:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(raw: bytes) -> OrderedDict[str, np.ndarray]:
    if raw[:4] != PARAM_MAGIC:
        raise ValueError(f"bad parameter file magic {raw[:4]!r}")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    pos = 10
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + length].decode("utf-8")
            pos += length
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if len(raw) < pos + 4 * size:
                raise ValueError(f"parameter {name!r} truncated")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise ValueError("parameter file truncated") from exc
    return out


def save_params(store: ParamStore, path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(store))


def load_params(path: str | Path) -> OrderedDict[str, np.ndarray]:
    return params_from_bytes(Path(path).read_bytes())
