"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside of a
tape nothing is recorded, which is how evaluation-only code (PSNR logging,
operator preprocessing) is kept out of the gradient path::

    with Tape() as tape:
        loss = sq_norm(conv2d(x, w, b))
        tape.backward(loss)
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "NetworkParams", "AdamState",
    "add", "sub", "mul", "div", "neg", "tsum", "dot", "sq_norm", "reshape",
    "relu", "conv2d", "channel_affine", "linear", "as_tensor", "adam_step",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order; :meth:`backward` walks it once in reverse.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, op, out, inputs, backward):
        out._recorded = True
        self.nodes.append(_Node(op, out, tuple(inputs), backward))

    def backward(self, root: Tensor, params: "NetworkParams | None" = None) -> None:
        """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

        When ``params`` is given, each of its tensors ends up with a grad
        buffer, zero-filled if the parameter is not reachable from ``root``.
        """
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if not inp._recorded:
                    leaves[key] = inp
        if not root._recorded and root.requires_grad:
            leaves[id(root)] = root
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if params is not None:
            for _, t in params.items():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)


def _result(op, data, inputs, backward) -> Tensor:
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul", a.data * b.data, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    q = a.data / b.data
    return _result(
        "div", q, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * q / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- reductions

def tsum(x) -> Tensor:
    x = as_tensor(x)
    return _result(
        "sum", np.array(x.data.sum()), (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
    )


def dot(a, b) -> Tensor:
    """Real inner product of two same-shape tensors, as a 0-d tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape} differ")
    val = np.array(np.vdot(a.data.ravel(), b.data.ravel()))
    return _result(
        "dot", val, (a, b),
        lambda g: (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        ),
    )


def sq_norm(x) -> Tensor:
    x = as_tensor(x)
    val = np.array(np.vdot(x.data.ravel(), x.data.ravel()))
    return _result("sq_norm", val, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------- linear maps

def linear(x, forward: Callable[[np.ndarray], np.ndarray],
           adjoint: Callable[[np.ndarray], np.ndarray], op: str = "linear") -> Tensor:
    """Apply a fixed real-linear map given as a (forward, adjoint) pair.

    ``adjoint`` must be the transpose with respect to the real inner product;
    for complex operators stored as (re, im) channels that is the Hermitian
    adjoint.
    """
    x = as_tensor(x)
    return _result(op, forward(x.data), (x,), lambda g: (adjoint(g),))


# ---------------------------------------------------------------- convolution

def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, 3, 3, c, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, 9 * c, h * w)


def conv2d(x, weight, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (shape preserving)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d supports 3x3 kernels only, got {kh}x{kw}")
    if cw != c:
        raise DimensionError(f"conv2d: weight expects {cw} input channels, input has {c}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, w)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    out = (wmat @ cols + bias.data[None, :, None]).reshape(n, f, h, w)

    def backward(g):
        g = g.reshape(n, f, h * w)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (wmat.T @ g).reshape(n, 3, 3, c, h, w)
            gxp = np.zeros((n, c, h + 2, w + 2))
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, i, j]
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return _result("conv2d", out, (x, weight, bias), backward)


def channel_affine(x, scale, shift) -> Tensor:
    """Per-channel ``scale * x + shift`` on an (N, C, H, W) tensor."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"channel_affine: expected ({c},) scale/shift")
    s = scale.data[None, :, None, None]
    out = x.data * s + shift.data[None, :, None, None]
    return _result(
        "channel_affine", out, (x, scale, shift),
        lambda g: (
            g * s if x.requires_grad else None,
            (g * x.data).sum(axis=(0, 2, 3)) if scale.requires_grad else None,
            g.sum(axis=(0, 2, 3)) if shift.requires_grad else None,
        ),
    )


# ---------------------------------------------------------------- parameters

class NetworkParams:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, entries=()):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def num_values(self) -> int:
        return sum(t.size for t in self._entries.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._entries.items())

    def load_state(self, state) -> None:
        for name, t in self._entries.items():
            if name not in state:
                raise KeyError(name)
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {t.shape}"
                )
            t.data = arr.copy()

    def copy(self) -> "NetworkParams":
        return NetworkParams((k, Tensor(t.data.copy())) for k, t in self._entries.items())


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetworkParams, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
