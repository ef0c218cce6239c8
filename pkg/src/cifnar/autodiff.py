"""Tape-based reverse-mode automatic differentiation over small dense arrays.

Every operation executes eagerly and appends a node to the tape it was called
on (define-by-run), so graphs with data-dependent structure such as CIF firing
need no special handling. A recorded tape can be replayed with new input
bindings through :func:`evaluate`, which is what :func:`grad_check` uses for
its central differences.

All values are float64. Arrays have rank 0 to 3. Broadcasting is limited to
``bias_add`` (a trailing-shape bias added across leading axes); every other
binary op requires equal shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

MAX_RANK = 3


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class UnboundInputError(AutodiffError, KeyError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class StaleTapeError(AutodiffError, RuntimeError):
    pass


class Op:
    """Forward/backward rule pair.

    ``forward(*values, **attrs)`` returns ``(out, cache)``.
    ``backward(g, out, cache, *values, **attrs)`` returns one gradient (or
    ``None``) per parent, in parent order.
    """

    name = "op"

    def forward(self, *xs, **attrs):
        raise NotImplementedError

    def backward(self, g, out, cache, *xs, **attrs):
        raise NotImplementedError

    def __repr__(self):
        return f"<op {self.name}>"


@dataclass
class Node:
    op: Op | None
    parents: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    cache: Any = None
    name: str | None = None
    requires_grad: bool = False


@dataclass
class Tape:
    """Ordered node list with named input bindings and named outputs."""

    check_finite: bool = True
    nodes: list[Node] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, int] = field(default_factory=dict)
    stale: bool = False

    def input(self, name: str, value) -> "Var":
        """Bind a named, differentiable leaf."""
        if name in self.inputs:
            raise AutodiffError(f"input {name!r} already bound on this tape")
        value = _as_array(value)
        self.nodes.append(Node(None, (), {}, value, name=name, requires_grad=True))
        self.inputs[name] = len(self.nodes) - 1
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        value = _as_array(value)
        self.nodes.append(Node(None, (), {}, value))
        return Var(self, len(self.nodes) - 1)

    def output(self, name: str, var: "Var") -> "Var":
        self.outputs[name] = var.id
        return var

    def bind(self, name: str, value) -> None:
        """Replace the value of a named input; the tape must be re-evaluated."""
        if name not in self.inputs:
            raise UnboundInputError(name)
        node = self.nodes[self.inputs[name]]
        value = _as_array(value)
        if value.shape != node.value.shape:
            raise ShapeError(f"{name}: expected shape {node.value.shape}, got {value.shape}")
        node.value = value
        self.stale = True

    def record(self, op: Op, parents: Sequence["Var"], **attrs) -> "Var":
        ids = []
        for p in parents:
            if p.tape is not self:
                raise AutodiffError("operands live on different tapes")
            ids.append(p.id)
        nodes = self.nodes
        vals = [nodes[i].value for i in ids]
        with np.errstate(over="ignore", invalid="ignore"):
            out, cache = op.forward(*vals, **attrs)
        out = np.asarray(out, dtype=np.float64)
        self._check(op, out)
        rg = any(nodes[i].requires_grad for i in ids)
        nodes.append(Node(op, tuple(ids), attrs, out, cache, requires_grad=rg))
        return Var(self, len(nodes) - 1)

    def _check(self, op, out):
        if out.ndim > MAX_RANK:
            raise ShapeError(f"{op.name} produced rank {out.ndim} > {MAX_RANK}")
        if self.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(f"non-finite value produced by {op.name} (node {len(self.nodes)})")

    def var(self, key) -> "Var":
        if isinstance(key, Var):
            return key
        if isinstance(key, str):
            if key in self.outputs:
                return Var(self, self.outputs[key])
            if key in self.inputs:
                return Var(self, self.inputs[key])
            raise KeyError(key)
        return Var(self, int(key))


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.const(np.broadcast_to(np.asarray(other, dtype=np.float64), self.shape).copy())

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    return arr


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        _same_shape(self.name, a, b)
        return a + b, None

    def backward(self, g, out, cache, a, b):
        return g, g


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _same_shape(self.name, a, b)
        return a - b, None

    def backward(self, g, out, cache, a, b):
        return g, -g


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _same_shape(self.name, a, b)
        return a * b, None

    def backward(self, g, out, cache, a, b):
        return g * b, g * a


class _Scale(Op):
    name = "scale"

    def forward(self, a, c):
        return a * c, None

    def backward(self, g, out, cache, a, c):
        return (g * c,)


class _BiasAdd(Op):
    name = "bias_add"

    def forward(self, x, b):
        if b.ndim == 0 or b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
            raise ShapeError(f"bias_add: bias {b.shape} does not match trailing dims of {x.shape}")
        return x + b, None

    def backward(self, g, out, cache, x, b):
        lead = tuple(range(x.ndim - b.ndim))
        return g, (g.sum(axis=lead) if lead else g)


class _Abs(Op):
    name = "abs"

    def forward(self, x):
        return np.abs(x), None

    def backward(self, g, out, cache, x):
        # np.sign(0) == 0: subgradient 0 at the kink
        return (g * np.sign(x),)


class _Sigmoid(Op):
    name = "sigmoid"

    def forward(self, x):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return out, None

    def backward(self, g, out, cache, x):
        return (g * out * (1.0 - out),)


class _Relu(Op):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward(self, g, out, cache, x):
        return (g * (x > 0),)


_GELU_C = np.sqrt(2.0 / np.pi)


class _Gelu(Op):
    """tanh approximation."""

    name = "gelu"

    def forward(self, x):
        inner = _GELU_C * (x + 0.044715 * (x * x * x))
        t = np.tanh(inner)
        return 0.5 * x * (1.0 + t), t

    def backward(self, g, out, t, x):
        dinner = _GELU_C * (1.0 + (3 * 0.044715) * (x * x))
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return (g * d,)


class _RowMask(Op):
    name = "row_mask"

    def forward(self, x, keep):
        if keep.shape != x.shape[:-1]:
            raise ShapeError(f"row_mask: mask {keep.shape} vs rows of {x.shape}")
        k = keep[..., None]
        return x * k, k

    def backward(self, g, out, k, x, keep):
        return (g * k,)


# ---------------------------------------------------------------------------
# linear algebra and structure


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        ok = (
            (a.ndim == 2 and b.ndim == 2)
            or (a.ndim == 3 and b.ndim == 2)
            or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0])
            or (a.ndim == 1 and b.ndim == 2)
            or (a.ndim == 2 and b.ndim == 1)
        )
        if not ok or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        if a.ndim == 3 and b.ndim == 2:
            # one GEMM instead of a per-batch loop
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],)), None
        return np.matmul(a, b), None

    def backward(self, g, out, cache, a, b):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.T, a.T @ g
        if a.ndim == 3 and b.ndim == 2:
            k, m = b.shape
            g2 = g.reshape(-1, m)
            return (g2 @ b.T).reshape(a.shape), a.reshape(-1, k).T @ g2
        if a.ndim == 3:
            return g @ b.transpose(0, 2, 1), a.transpose(0, 2, 1) @ g
        if a.ndim == 1:
            return b @ g, np.outer(a, g)
        return np.outer(g, b), a.T @ g


class _Transpose(Op):
    name = "transpose"

    def forward(self, x, axes=None):
        if axes is None:
            if x.ndim < 2:
                raise ShapeError("transpose needs rank >= 2")
            axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
        return np.ascontiguousarray(x.transpose(axes)), axes

    def backward(self, g, out, perm, x, axes=None):
        return (g.transpose(np.argsort(perm)),)


class _Reshape(Op):
    name = "reshape"

    def forward(self, x, shape):
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return x.reshape(shape), None

    def backward(self, g, out, cache, x, shape):
        return (g.reshape(x.shape),)


class _Concat(Op):
    name = "concat"

    def forward(self, *xs, axis=0):
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError as e:
            raise ShapeError(f"concat: {e}") from None
        return out, np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(self, g, out, splits, *xs, axis=0):
        return tuple(np.split(g, splits, axis=axis))


class _Slice(Op):
    name = "slice"

    def forward(self, x, axis, start, stop):
        if not (0 <= start < stop <= x.shape[axis]):
            raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        return x[idx], idx

    def backward(self, g, out, idx, x, axis, start, stop):
        gx = np.zeros_like(x)
        gx[idx] = g
        return (gx,)


class _Gather(Op):
    name = "gather"

    def forward(self, x, index):
        if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
            raise ShapeError("gather: index out of range")
        return x[index], None

    def backward(self, g, out, cache, x, index):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)


# ---------------------------------------------------------------------------
# normalizations and reductions


def _masked_max(x, mask):
    if mask is None:
        return x.max(axis=-1, keepdims=True)
    return np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)


class _Softmax(Op):
    name = "softmax"

    def forward(self, x, mask=None):
        if mask is not None and mask.shape != x.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs {x.shape}")
        z = x - _masked_max(x, mask)
        e = np.exp(z) if mask is None else np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
        return e / e.sum(axis=-1, keepdims=True), None

    def backward(self, g, y, cache, x, mask=None):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class _LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, x, mask=None):
        if mask is not None:
            raise ShapeError("log_softmax does not take a mask")
        z = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return z - lse, None

    def backward(self, g, out, cache, x, mask=None):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


class _LayerNorm(Op):
    name = "layer_norm"

    def forward(self, x, gamma, beta, eps=1e-5):
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv)

    def backward(self, g, out, cache, x, gamma, beta, eps=1e-5):
        xhat, inv = cache
        lead = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta


class _DepthwiseConv1d(Op):
    """'same'-padded depthwise convolution along the time axis.

    x: (T, C) or (B, T, C); w: (K, C) with K odd; b: (C,).
    """

    name = "depthwise_conv1d"

    def forward(self, x, w, b):
        K, C = w.shape
        if K % 2 == 0 or x.shape[-1] != C or b.shape != (C,):
            raise ShapeError(f"depthwise_conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
        T = x.shape[-2]
        p = K // 2
        xp = self._pad(x, p)
        out = np.empty_like(x)
        out[...] = b
        for k in range(K):
            out += xp[..., k:k + T, :] * w[k]
        return out, xp

    @staticmethod
    def _pad(x, p):
        widths = [(0, 0)] * x.ndim
        widths[-2] = (p, p)
        return np.pad(x, widths)

    def backward(self, g, out, xp, x, w, b):
        K, C = w.shape
        T = x.shape[-2]
        p = K // 2
        lead = tuple(range(x.ndim - 1))
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gw[k] = (g * xp[..., k:k + T, :]).sum(axis=lead)
            gxp[..., k:k + T, :] += g * w[k]
        return gxp[..., p:p + T, :], gw, g.sum(axis=lead)


class _Sum(Op):
    name = "sum"

    def forward(self, x, axis=None):
        return np.asarray(x.sum(axis=axis)), None

    def backward(self, g, out, cache, x, axis=None):
        if axis is None:
            return (np.full_like(x, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


class _Mean(Op):
    name = "mean"

    def forward(self, x, axis=None):
        return np.asarray(x.mean(axis=axis)), None

    def backward(self, g, out, cache, x, axis=None):
        n = x.size if axis is None else x.shape[axis]
        if axis is None:
            return (np.full_like(x, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)


class _CrossEntropy(Op):
    """Mean negative log-likelihood of integer targets under softmax(logits).

    Targets are class indices in the last axis; positions where ``mask`` is
    False are ignored. The mean is over the unmasked positions.
    """

    name = "cross_entropy"

    def forward(self, logits, targets, mask=None):
        lead = logits.shape[:-1]
        if targets.shape != lead or (mask is not None and mask.shape != lead):
            raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
        keep = np.ones(lead, dtype=bool) if mask is None else mask.astype(bool)
        n = int(keep.sum())
        if n == 0:
            raise ShapeError("cross_entropy: no unmasked positions")
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        picked = np.take_along_axis(logp, targets[..., None].astype(np.intp), axis=-1)[..., 0]
        return -(picked * keep).sum() / n, (logp, keep, n)

    def backward(self, g, out, cache, logits, targets, mask=None):
        logp, keep, n = cache
        grad = np.exp(logp)
        np.put_along_axis(
            grad,
            targets[..., None].astype(np.intp),
            np.take_along_axis(grad, targets[..., None].astype(np.intp), axis=-1) - 1.0,
            axis=-1,
        )
        grad *= keep[..., None] * (float(g) / n)
        return (grad,)


ADD, SUB, MUL, SCALE, BIAS_ADD = _Add(), _Sub(), _Mul(), _Scale(), _BiasAdd()
ABS, SIGMOID, RELU, GELU, ROW_MASK = _Abs(), _Sigmoid(), _Relu(), _Gelu(), _RowMask()
MATMUL, TRANSPOSE, RESHAPE, CONCAT, SLICE, GATHER = (
    _MatMul(), _Transpose(), _Reshape(), _Concat(), _Slice(), _Gather()
)
SOFTMAX, LOG_SOFTMAX, LAYER_NORM, DWCONV = _Softmax(), _LogSoftmax(), _LayerNorm(), _DepthwiseConv1d()
SUM, MEAN, CROSS_ENTROPY = _Sum(), _Mean(), _CrossEntropy()


def add(a: Var, b: Var) -> Var:
    return a.tape.record(ADD, (a, b))


def sub(a: Var, b: Var) -> Var:
    return a.tape.record(SUB, (a, b))


def mul(a: Var, b: Var) -> Var:
    return a.tape.record(MUL, (a, b))


def scale(a: Var, c: float) -> Var:
    return a.tape.record(SCALE, (a,), c=float(c))


def bias_add(x: Var, b: Var) -> Var:
    return x.tape.record(BIAS_ADD, (x, b))


def abs(x: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    return x.tape.record(ABS, (x,))


def sigmoid(x: Var) -> Var:
    return x.tape.record(SIGMOID, (x,))


def relu(x: Var) -> Var:
    return x.tape.record(RELU, (x,))


def gelu(x: Var) -> Var:
    return x.tape.record(GELU, (x,))


def swish(x: Var) -> Var:
    return mul(x, sigmoid(x))


def row_mask(x: Var, keep: np.ndarray) -> Var:
    """Zero the rows (last-axis vectors) of ``x`` where ``keep`` is False."""
    return x.tape.record(ROW_MASK, (x,), keep=np.asarray(keep, dtype=np.float64))


def matmul(a: Var, b: Var) -> Var:
    return a.tape.record(MATMUL, (a, b))


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = matmul(x, w)
    return y if b is None else bias_add(y, b)


def transpose(x: Var, axes: tuple[int, ...] | None = None) -> Var:
    return x.tape.record(TRANSPOSE, (x,), axes=axes)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    return x.tape.record(RESHAPE, (x,), shape=tuple(int(s) for s in shape))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    return xs[0].tape.record(CONCAT, tuple(xs), axis=axis)


def slice_(x: Var, start: int, stop: int, axis: int = 0) -> Var:
    axis = axis % x.ndim
    return x.tape.record(SLICE, (x,), axis=axis, start=int(start), stop=int(stop))


def gather(x: Var, index) -> Var:
    return x.tape.record(GATHER, (x,), index=np.asarray(index, dtype=np.intp))


def softmax(x: Var, mask: np.ndarray | None = None) -> Var:
    return x.tape.record(SOFTMAX, (x,), mask=None if mask is None else np.asarray(mask, dtype=bool))


def log_softmax(x: Var) -> Var:
    return x.tape.record(LOG_SOFTMAX, (x,))


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    return x.tape.record(LAYER_NORM, (x, gamma, beta), eps=eps)


def depthwise_conv1d(x: Var, w: Var, b: Var) -> Var:
    return x.tape.record(DWCONV, (x, w, b))


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001
    return x.tape.record(SUM, (x,), axis=axis)


def mean(x: Var, axis: int | None = None) -> Var:
    return x.tape.record(MEAN, (x,), axis=axis)


def cross_entropy(logits: Var, targets, mask=None) -> Var:
    return logits.tape.record(
        CROSS_ENTROPY,
        (logits,),
        targets=np.asarray(targets, dtype=np.intp),
        mask=None if mask is None else np.asarray(mask, dtype=bool),
    )


# ---------------------------------------------------------------------------
# tape-level operations


def evaluate(tape: Tape, inputs: Mapping[str, Any]) -> dict[str, np.ndarray]:
    """Re-run every node with the given input bindings.

    All named inputs must be bound; extra names are rejected. Returns the
    values of the tape's named outputs.
    """
    missing = set(tape.inputs) - set(inputs)
    if missing:
        raise UnboundInputError(f"unbound inputs: {sorted(missing)}")
    extra = set(inputs) - set(tape.inputs)
    if extra:
        raise UnboundInputError(f"unknown inputs: {sorted(extra)}")
    for name, value in inputs.items():
        tape.bind(name, value)
    nodes = tape.nodes
    for i, node in enumerate(nodes):
        if node.op is None:
            continue
        vals = [nodes[p].value for p in node.parents]
        with np.errstate(over="ignore", invalid="ignore"):
            out, cache = node.op.forward(*vals, **node.attrs)
        out = np.asarray(out, dtype=np.float64)
        if tape.check_finite and not np.isfinite(out).all():
            raise NonFiniteError(f"non-finite value produced by {node.op.name} (node {i})")
        if out.shape != node.value.shape:
            raise ShapeError(f"node {i} ({node.op.name}) changed shape on replay")
        node.value, node.cache = out, cache
    tape.stale = False
    return {name: nodes[i].value for name, i in tape.outputs.items()}


def backward(tape: Tape, output) -> dict[str, np.ndarray]:
    """Gradients of a scalar node w.r.t. every named input.

    Inputs that the output does not depend on get zero gradients.
    """
    if tape.stale:
        raise StaleTapeError("tape inputs changed since the last evaluate")
    out = tape.var(output)
    if out.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
    for i in range(out.id, -1, -1):
        g = grads.pop(i, None) if nodes[i].op is not None else grads.get(i)
        node = nodes[i]
        if g is None or node.op is None or not node.requires_grad:
            continue
        vals = [nodes[p].value for p in node.parents]
        pgrads = node.op.backward(g, node.value, node.cache, *vals, **node.attrs)
        for p, gp in zip(node.parents, pgrads):
            if gp is None or not nodes[p].requires_grad:
                continue
            prev = grads.get(p)
            grads[p] = gp if prev is None else prev + gp
    return {
        name: grads.get(i, np.zeros_like(nodes[i].value)).reshape(nodes[i].value.shape)
        for name, i in tape.inputs.items()
    }


def grad_check(
    tape: Tape,
    output,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_per_input: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    For each named input the error is ``||analytic - numeric|| /
    max(1e-8, ||numeric||)`` over its (possibly subsampled) entries; the
    maximum over inputs is returned. The tape is restored afterwards.
    """
    if not (0 < eps <= 1e-3):
        raise ValueError("eps must lie in (0, 1e-3]")
    out = tape.var(output)
    base = {n: tape.nodes[i].value.copy() for n, i in tape.inputs.items()}
    evaluate(tape, base)
    analytic = backward(tape, out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for name in names if names is not None else list(tape.inputs):
            x0 = base[name]
            flat_idx = np.arange(x0.size)
            if max_per_input is not None and x0.size > max_per_input:
                flat_idx = np.sort(rng.choice(x0.size, max_per_input, replace=False))
            num = np.empty(len(flat_idx))
            for j, k in enumerate(flat_idx):
                vals = []
                for step in (eps, -eps):
                    x = x0.copy()
                    x.flat[k] += step
                    evaluate(tape, {**base, name: x})
                    v = float(out.value)
                    if not np.isfinite(v):
                        raise NonFiniteError(f"non-finite output perturbing {name}[{k}]")
                    vals.append(v)
                num[j] = (vals[0] - vals[1]) / (2 * eps)
            ana = analytic[name].ravel()[flat_idx]
            err = np.linalg.norm(ana - num) / max(1e-8, np.linalg.norm(num))
            worst = max(worst, float(err))
    finally:
        evaluate(tape, base)
    return worst


def value_and_grad(build: Callable[[Tape], Var], params: Mapping[str, np.ndarray]):
    """Build a fresh tape over ``params``, return (loss value, grads, tape)."""
    tape = Tape()
    for name, value in params.items():
        tape.input(name, value)
    loss = build(tape)
    return float(loss.value), backward(tape, loss), tape
