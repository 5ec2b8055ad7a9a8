"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of operations needed by the attention summarizer are
provided. Every differentiable op records a :class:`Node` on its output;
:func:`backward` linearises the graph into a :class:`Tape` and replays the
backward rules in reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError, DimensionError, InvalidMaskError

_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


class Tensor:
    """A row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs, output and backward rule."""

    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Operations reachable from an output, in topological (forward) order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        if output._node is None:
            return cls(order)
        # iterative post-order DFS; graphs can be deeper than the recursion limit
        stack = [(output._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp._node, False))
        return cls(order)

    def run_backward(self, seed: np.ndarray) -> None:
        if not self.nodes:
            return
        grads: dict[int, np.ndarray] = {id(self.nodes[-1].output): seed}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += 1.0
        return
    Tape.from_output(loss).run_backward(np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ----------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record("matmul", A @ B, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum; the order is the caller's responsibility."""
    if not tensors:
        raise ConfigurationError("add_n needs at least one tensor")
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_columns(tensors: Sequence[Tensor]) -> Tensor:
    """Width-wise concatenation of T×d_k matrices."""
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.data.ndim != 2 for t in tensors):
        raise DimensionError(f"concat needs matrices with equal rows, got {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine shape mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine bias shape {b.shape} does not match w {w.shape}")
    X, W = x.data, w.data

    def bw(g):
        return (
            g @ W.T if x.requires_grad else None,
            X.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _record("affine", X @ W + b.data, (x, w, b), bw)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Row-wise softmax over the entries where ``mask`` is true.

    Masked-out entries are exactly zero and excluded from the stabilising
    row maximum.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape or scores.data.ndim != 2:
        raise DimensionError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise InvalidMaskError(f"mask rows {np.flatnonzero(empty).tolist()} have no true entry (check the aperture)")
    S = np.where(mask, scores.data, -np.inf)
    S = S - S.max(axis=1, keepdims=True)
    E = np.where(mask, np.exp(S), 0.0)
    A = E / E.sum(axis=1, keepdims=True)

    def bw(g):
        return (A * (g - (g * A).sum(axis=1, keepdims=True)),)

    return _record("masked_softmax", A, (scores,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match width {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    G = gain.data

    def bw(g):
        dxhat = g * G
        dx = None
        if x.requires_grad:
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        axes = tuple(range(g.ndim - 1))
        return (
            dx,
            (g * xhat).sum(axis=axes) if gain.requires_grad else None,
            g.sum(axis=axes) if bias.requires_grad else None,
        )

    return _record("layer_norm", xhat * G + bias.data, (x, gain, bias), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return _record("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    X = x.data
    # split by sign so exp never overflows
    z = np.exp(-np.abs(X))
    out = np.where(X >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise DimensionError(f"mse_loss length mismatch: pred {pred.shape} vs target {tgt.shape}")
    diff = pred.data - tgt
    n = diff.size

    def bw(g):
        return (float(g) * 2.0 * diff / n,)

    return _record("mse", np.array(np.mean(diff * diff)), (pred,), bw)


# ------------------------------------------------------------ gradient check


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments and must read the current values of
    ``params``; it is perturbed one coordinate at a time.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigurationError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss = f()
    again = f()
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.array_equal(loss.data, again.data):
        raise ContractError("grad_check requires a deterministic function (disable dropout)")
    backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
