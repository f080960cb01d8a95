"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result records its parents and a closure that pushes the upstream gradient
back to them; :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order.

Broadcasting is deliberately limited to adding a trailing-dimension bias.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, LabelError

IGNORE = -1

LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- basic views -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# -- graph traversal -------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss`` that requires one.

    Leaf gradients accumulate across calls on different graphs, so gradients of
    several losses can be summed by calling this on each. A single graph may only
    be backpropagated once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    # intermediate grads are per-pass; stale values from an earlier graph must not leak in
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    loss._consumed = True


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape or b.ndim == 0:
        lead = None
    elif b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = tuple(range(a.ndim - b.ndim))
    else:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not compatible")

    def fn(g):
        _accum(a, g)
        if b.ndim == 0 and a.ndim > 0:
            _accum(b, np.sum(g))
        else:
            _accum(b, g if lead is None else g.sum(axis=lead))

    return _result(a.data + b.data, (a, b), "add", fn)


def sub(a, b) -> Tensor:
    return add(a, mul(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def fn_scalar(g):
            _accum(a, g * c)

        return _result(a.data * c, (a,), "scale", fn_scalar)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", fn)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def fn(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        _accum(x, g * d)

    return _result(out, (x,), "gelu", fn)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def fn(g):
        _accum(x, g * s * (1.0 - s))

    return _result(s, (x,), "sigmoid", fn)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- shape ops -------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape

    def fn(g):
        _accum(x, g.reshape(src))

    return _result(x.data.reshape(shape), (x,), "reshape", fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        _accum(x, g.transpose(inv))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", fn)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], dtype=np.float64, copy=True)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _result(out, (x,), "getitem", fn)


# -- reductions --------------------------------------------------------------
def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _result(np.array(x.data.sum()), (x,), "sum", fn)


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = x.size

    def fn(g):
        _accum(x, np.full_like(x.data, float(g) / n))

    return _result(np.array(x.data.mean()), (x,), "mean", fn)


# -- linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation -----------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax: axis {axis} of shape {x.shape} is empty")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), "softmax", fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax: axis {axis} of shape {x.shape} is empty")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), "log_softmax", fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            _accum(
                x,
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)),
            )

    return _result(out, (x, gain, bias), "layer_norm", fn)


# -- attention ---------------------------------------------------------------
def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / √d) v for 2-D query/key/value matrices."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] < 1 or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: {k.shape[0]} keys vs {v.shape[0]} values")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax(scores, axis=-1), v)


# -- losses -----------------------------------------------------------------
def cross_entropy(logits: Tensor, target, weights=None, ignore_index: int = IGNORE) -> Tensor:
    """Mean negative log-likelihood of ``target`` rows; ``ignore_index`` rows are skipped.

    With per-class ``weights`` the mean is weighted, normalised by the summed
    weights of the kept rows.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, c] logits, got {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise DimensionError(f"cross_entropy needs at least 2 classes, got {c}")
    t = np.asarray(target).reshape(-1).astype(np.int64)
    if t.shape[0] != n:
        raise DimensionError(f"cross_entropy: {t.shape[0]} targets for {n} rows")
    keep = t != ignore_index
    bad = keep & ((t < 0) | (t >= c))
    if bad.any():
        raise LabelError(f"target {int(t[bad][0])} outside [0, {c})")
    if not keep.any():
        raise DegenerateInputError("every row is ignored")
    rows = np.nonzero(keep)[0]
    cls = t[rows]
    w = np.ones(rows.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)[cls]
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateInputError("kept rows carry zero total weight")

    x = logits.data[rows]
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(rows.shape[0]), cls]
    loss = float((w * nll).sum() / wsum)

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.shape[0]), cls] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (w / wsum)[:, None] * float(g)
        _accum(logits, full)

    return _result(np.array(loss), (logits,), "cross_entropy", fn)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: target {y.shape} vs logits {logits.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def fn(g):
        _accum(logits, (_stable_sigmoid(x) - y) * (float(g) / n))

    return _result(np.array(loss.mean()), (logits,), "bce", fn)


# -- resampling ------------------------------------------------------------
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows of linear-interpolation weights, half-pixel centres (align_corners=False)."""
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        a[i, lo] += 1.0 - frac
        a[i, hi] += frac
    return a


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample expects [c, h, w], got {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"bilinear_upsample: target size {out_h}x{out_w} is empty")
    _, h, w = x.shape
    if out_h < h or out_w < w:
        raise DimensionError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}")
    ay = interp_matrix(out_h, h)
    ax = interp_matrix(out_w, w)
    out = np.einsum("yh,chw,xw->cyx", ay, x.data, ax, optimize=True)

    def fn(g):
        _accum(x, np.einsum("yh,cyx,xw->chw", ay, g, ax, optimize=True))

    return _result(out, (x,), "upsample", fn)


# -- optimisation ----------------------------------------------------------
class AdamState:
    """First/second moment buffers plus the step counter."""

    def __init__(self, shapes: Iterable[tuple[int, ...]]):
        shapes = list(shapes)
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of the ``params`` arrays."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError(f"adam: {len(params)} params, {len(grads)} grads, {len(state.m)} state slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
