"""Minimal reverse-mode differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
walks the recorded graph in reverse topological order.

Broadcasting is deliberately restricted to equal shapes and scalar/size-1
operands.  Values are float32 unless :func:`precision` selects another dtype
(gradient checks run in float64).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericalError

_local = threading.local()


def _dtype():
    return getattr(_local, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = old


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


class Tensor:
    """An n-d array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        if not np.isfinite(out.data).all():
            raise NumericalError(f"{op} produced non-finite values")
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    if not graph.leaves():
        raise ContractError("loss is not connected to any tensor requiring grad")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad += g
        if node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return graph


# --------------------------------------------------------------------------
# elementwise


def _pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
                             "(only equal shapes or scalars are supported)")
    return a, b


def _fit(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return Tensor._result(a.data * b.data, (a, b),
                          lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
                          "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), bw, "div")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive (clamp first)")
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype)
    # derivative from |x| stays accurate where out rounds to exactly 1
    slope = e / (1.0 + e) ** 2
    return Tensor._result(out, (x,), lambda g: (g * slope,), "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype)
    e = np.exp(-np.abs(x.data))
    slope = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._result(out, (x,), lambda g: (g * slope,), "softplus")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return Tensor._result(np.where(on, x.data, 0), (x,), lambda g: (g * on,), "relu")


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.data.dtype)
    return Tensor._result(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return Tensor._result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor._result(out, (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        bad = [i for i in range(len(ref)) if i != axis and t.shape[i] != ref[i]]
        if len(t.shape) != len(ref) or bad:
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ on axes {bad}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant."""
    a, b = _pair(a, b, "where")
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), np.broadcast_shapes(a.shape, b.shape))
    out = np.where(cond, a.data, b.data)
    return Tensor._result(out, (a, b),
                          lambda g: (_fit(g * cond, a.shape), _fit(g * ~cond, b.shape)),
                          "where")


# --------------------------------------------------------------------------
# dense layers


def linear(x, weight, bias=None) -> Tensor:
    """x[N,D] @ weight[D,O] + bias[O]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._result(out, parents, bw, "linear")


def gram(x) -> Tensor:
    """Per-sample channel Gram matrix of x[N,C,H,W], normalised by C*H*W."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    f = x.data.reshape(n, c, h * w)
    norm = 1.0 / (c * h * w)
    out = np.matmul(f, f.transpose(0, 2, 1)) * norm

    def bw(g):
        return ((np.matmul(g + g.transpose(0, 2, 1), f) * norm).reshape(x.shape),)

    return Tensor._result(out, (x,), bw, "gram")


# --------------------------------------------------------------------------
# convolution and friends


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Returns the output and the unfolded input [C*k*k, N*Ho*Wo] for backward."""
    n, c, h, wd = x.shape
    f, cw, k, k2 = w.shape
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels (axis 1) but weight expects {cw}")
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {k}x{k2} (axes 2,3)")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} exceeds padded input {h}x{wd} (axes 2,3)")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    xc = xp.transpose(1, 0, 2, 3)
    # channel-major unfold: every slice copy below is a plain strided block copy
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xc[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    out = (w.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    return out, cols


def _conv_backward(g: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray,
                   stride: int, padding: int, need_x: bool = True):
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    _, _, ho, wo = g.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = (g2 @ cols.T).reshape(w.shape)
    if not need_x:
        return None, dw
    dcols = (w.reshape(f, -1).T @ g2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += dcols[:, a, b]
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx.transpose(1, 0, 2, 3), dw


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with weight[F,C,k,k]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    out, cols = _conv_forward(x.data, weight.data, stride, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv2d: bias {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        dx, dw = _conv_backward(g, cols, x.shape, weight.data, stride, padding, x.requires_grad)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._result(out, parents, bw, "conv2d")


def maxpool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties route gradient to the first index."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"maxpool2d: spatial dims {h}x{w} (axes 2,3) not divisible by {k}")
    blocks = (x.data.reshape(n, c, h // k, k, w // k, k)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k))
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, idx, g[..., None], axis=-1)
        d = d.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (d.reshape(x.shape),)

    return Tensor._result(out, (x,), bw, "maxpool2d")


def nearest_upsample(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), bw, "nearest_upsample")


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of x[N,C,H,W].

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise DimensionError(f"batchnorm2d: {c} input channels (axis 1) but parameters "
                             f"{gamma.shape}, {beta.shape}, stats {running_mean.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = x.data.size // c

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), bw, "batchnorm2d")


# --------------------------------------------------------------------------
# losses built from the primitives above


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, stable for any logit magnitude."""
    y = Tensor(np.asarray(targets).reshape(logits.shape))
    return mean(softplus(logits) - logits * y)


def log_sigmoid(x) -> Tensor:
    return -softplus(-as_tensor(x))


# --------------------------------------------------------------------------
# optimisers


def _check_grads(params):
    for p in params:
        if not p.requires_grad or p.grad is None:
            raise ContractError(f"optimizer step on {p!r} without a gradient")


def sgd_step(params: Iterable[Tensor], lr: float):
    params = list(params)
    _check_grads(params)
    for p in params:
        p.data -= (lr * p.grad).astype(p.data.dtype)


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        sgd_step(self.params, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam:
    """Bias-corrected Adam; moment buffers persist between ``step`` calls."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        _check_grads(self.params)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class SharedAdam(Adam):
    """Adam whose second-moment estimate is one scalar per parameter tensor.

    Steps stay proportional to each entry's gradient (unlike per-entry Adam,
    which moves every entry at roughly ``lr`` whatever its gradient size) while
    the overall step is still scale-free.
    """

    def step(self):
        _check_grads(self.params)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * np.mean(p.grad ** 2)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
