"""
Minimal dense tensors with reverse-mode autodiff.

Every op is a module-level function that computes its value with numpy and
records a backward closure on the output tensor (the node). Calling
`backward(loss)` walks the nodes reachable from `loss` in reverse topological
order, accumulates into the `.grad` of leaf tensors that require it, and then
releases the closures: the graph is consumed and cannot be walked twice.

Everything is float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GraphConsumedError
from errors import NonFiniteError
from errors import ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    # numpy scalars/arrays on the left must defer to Tensor's reflected ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    @classmethod
    def from_op(cls, value, parents, backward, op: str):
        """
        Register a node. `backward(g)` returns one gradient (or None) per parent.
        Other modules use this hook to define their own differentiable functions.
        """
        out = cls(value)
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def sign_of(x: np.ndarray) -> np.ndarray:
    """sign with sign(0) = +1, so the 1-bit codebook is exactly {-1, +1}."""
    return np.where(x >= 0, 1.0, -1.0)


# ----------------------------
# Elementwise arithmetic
# ----------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "multiply")


multiply_elementwise = multiply


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor.from_op(a.data / b.data, (a, b), backward, "divide")


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return Tensor.from_op(np.where(active, x.data, 0.0), (x,), backward, "relu")


def abs(x) -> Tensor:  # noqa: A001 - mirrors the op name
    x = as_tensor(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor.from_op(np.abs(x.data), (x,), backward, "abs")


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    return Tensor.from_op(np.log(x.data), (x,), backward, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return Tensor.from_op(y, (x,), backward, "exp")


def clip(x, lo, hi) -> Tensor:
    """
    Clamp to [lo, hi]. Bounds may be floats or tensors; they are treated as
    constants. Gradient is 1 inside the closed range and 0 where it saturates.
    """
    x = as_tensor(x)
    lo_v = lo.data if isinstance(lo, Tensor) else lo
    hi_v = hi.data if isinstance(hi, Tensor) else hi
    inside = (x.data >= lo_v) & (x.data <= hi_v)

    def backward(g):
        return (g * inside,)

    return Tensor.from_op(np.clip(x.data, lo_v, hi_v), (x,), backward, "clip")


def round_ste(x) -> Tensor:
    """Round half away from zero; identity gradient (saturation is masked by the clip upstream)."""
    x = as_tensor(x)

    def backward(g):
        return (g,)

    return Tensor.from_op(_round_half_away(x.data), (x,), backward, "round_ste")


def sign_ste(x, bound: float = 1.0) -> Tensor:
    """sign(x) with sign(0)=+1; identity gradient for |x| <= bound, zero outside."""
    x = as_tensor(x)
    inside = np.abs(x.data) <= bound

    def backward(g):
        return (g * inside,)

    return Tensor.from_op(sign_of(x.data), (x,), backward, "sign_ste")


# ----------------------------
# Reductions and shape plumbing
# ----------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return Tensor.from_op(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(np.atleast_1d(shape))) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(y, (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor.from_op(np.transpose(x.data, axes), (x,), backward, "transpose")


def take(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(x.data[index]), (x,), backward, "take")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *sorted(shapes))

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def weighted_sum(weights, tensors) -> Tensor:
    """
    sum_k weights[k] * tensors[k], accumulated left to right.
    With one-hot weights the result equals the selected tensor bit-exactly.
    """
    weights = as_tensor(weights)
    if weights.shape != (len(tensors),):
        raise ShapeError("weighted_sum", weights.shape, (len(tensors),))
    total = None
    for k, t in enumerate(tensors):
        term = multiply(weights[k], t)
        total = term if total is None else add(total, term)
    return total


# ----------------------------
# Linear algebra
# ----------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (N, C, H, W), w: (O, C, kh, kw) -> (N, O, H', W')."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", x.shape, w.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contrib
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + wd]
        return grad_x, grad_w

    return Tensor.from_op(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    return mean(x, axis=(2, 3))


# ----------------------------
# Softmax and losses
# ----------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), backward, "softmax")


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy_loss", logits.shape, labels.shape)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(log_p)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return Tensor.from_op(loss, (logits,), backward, "cross_entropy_loss")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data

    def backward(g):
        return g * 2.0 * diff / diff.size, -g * 2.0 * diff / diff.size

    return Tensor.from_op(np.mean(diff * diff), (pred, target), backward, "mse_loss")


# ----------------------------
# Backward pass
# ----------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def _propagate(loss: Tensor, deliver):
    """Walk the graph once; `deliver(leaf, g)` receives each leaf gradient."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    if loss._consumed:
        raise GraphConsumedError()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss", f"value {loss.data.reshape(-1)[0]}")
    if not loss.requires_grad:
        loss._consumed = True
        return

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                deliver(node, g)
            continue
        if node._consumed:
            raise GraphConsumedError()
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        node._consumed = True
        node._backward = None
        node._parents = ()


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    def deliver(leaf, g):
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    _propagate(loss, deliver)


def gradients(loss: Tensor, params: dict) -> dict:
    """
    d(loss)/d(param) for each named leaf, returned instead of written to
    `.grad`; leaves shared between concurrent graphs stay untouched.
    Leaves that do not influence the loss get zeros.
    """
    by_id = {}

    def deliver(leaf, g):
        prev = by_id.get(id(leaf))
        by_id[id(leaf)] = g.copy() if prev is None else prev + g

    _propagate(loss, deliver)
    return {name: by_id.get(id(p), np.zeros_like(p.data)) for name, p in params.items()}


# ----------------------------
# Deterministic gradient merging and checking
# ----------------------------

def tree_reduce(arrays):
    """Pairwise sum in a fixed tree: ((a0+a1)+(a2+a3))+... ; same inputs, same bits."""
    level = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not level:
        raise ValueError("tree_reduce needs at least one array")
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def check_gradients(fn, inputs, eps: float = 1e-5) -> float:
    """
    Compare analytic gradients of scalar `fn(*tensors)` with central finite
    differences. Returns the largest per-input relative error
    ||analytic - numeric|| / (||analytic|| + ||numeric||).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*params))

    worst = 0.0
    for idx, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            bumped = []
            for delta in (eps, -eps):
                trial = base.copy().reshape(-1)
                trial[i] += delta
                args = [Tensor(a) for a in arrays]
                args[idx] = Tensor(trial.reshape(base.shape))
                bumped.append(float(fn(*args).data))
            flat[i] = (bumped[0] - bumped[1]) / (2 * eps)
        analytic = params[idx].grad if params[idx].grad is not None else np.zeros_like(base)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
