"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable quantity in the package is a :class:`Tensor`. An op
records its inputs and a closure mapping the output gradient to input
gradients; :func:`backward` walks the recorded graph in reverse topological
order.

Values that are deliberately treated as constants during differentiation
(channel maxima used for map normalisation, discrete map-selection decisions)
pass through :func:`detached`. Inside :func:`frozen_detached` those values
are recorded once and replayed on later evaluations, which is what lets a
finite-difference check probe exactly the function the tape differentiates.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ShapeError, StaleTapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(data, parents, backward_fn) -> Tensor:
    if not _grad_enabled:
        return Tensor(data)
    if any(p._consumed for p in parents):
        raise StaleTapeError("input belongs to a tape already consumed by backward; re-run forward")
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def square(x: Tensor) -> Tensor:
    return _node(x.data ** 2, (x,), lambda g: (2.0 * x.data * g,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow or log(0)."""
    x = as_tensor(x)
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _node(out, (x,), lambda g: (g * _sigmoid(z),))


def clamp01(x: Tensor) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > 0.0) & (x.data < 1.0)
    return _node(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions

def sum_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _node(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def global_avg_pool(maps: Tensor) -> Tensor:
    """Spatial mean over the last two axes: (..., H, W) -> (...)."""
    maps = as_tensor(maps)
    if maps.ndim < 2:
        raise ShapeError(f"global_avg_pool needs (..., H, W), got {maps.shape}")
    h, w = maps.shape[-2:]
    out = maps.data.mean(axis=(-2, -1))

    def bw(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), maps.shape).copy(),)

    return _node(out, (maps,), bw)


def max_detached(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum as a constant: no gradient flows back through it."""
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("max_detached of an empty tensor")
    return Tensor(detached(x.data.max(axis=axis, keepdims=keepdims)))


# --------------------------------------------------------------- structural

def take(x: Tensor, idx) -> Tensor:
    """Basic indexing (ints and slices)."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape)
        full[idx] += g
        return (full,)

    return _node(np.array(out), (x,), bw)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts])
    return _node(out, tuple(ts), lambda g: tuple(g[i] for i in range(len(ts))))


def flip_lr(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),))


# -------------------------------------------------------------- convolution

def _im2col_nhwc(x: np.ndarray, k: int) -> np.ndarray:
    """N x H x W x C -> (N*H*W) x (k*k*C), zero 'same' padding, (i, j, c) order."""
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = (k - 1) // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x
    cols = np.empty((n, h, w, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def permute(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _check_conv_args(c_in, kernels: Tensor, bias: Tensor):
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3] or kernels.shape[2] % 2 == 0:
        raise ShapeError(f"kernels must be C_out x C_in x k x k with odd k, got {kernels.shape}")
    if kernels.shape[1] != c_in:
        raise ShapeError(f"input has {c_in} channels but kernels expect {kernels.shape[1]}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} output channels")


def conv2d_nhwc(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same as :func:`conv2d` on channels-last batches: N x H x W x C_in -> N x H x W x C_out."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d_nhwc input must be N x H x W x C, got {x.shape}")
    n, h, w, c_in = x.shape
    _check_conv_args(c_in, kernels, bias)
    c_out, _, k, _ = kernels.shape
    p = (k - 1) // 2

    cols = _im2col_nhwc(x.data, k)
    # kernel rows ordered (i, j, c) to match the columns
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in)
    out = (cols @ wmat.T + bias.data).reshape(n, h, w, c_out)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(n * h * w, c_out)
        dw = (g2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, h, w, k, k, c_in)
            if k == 1:
                dx = dcols[:, :, :, 0, 0, :]
            else:
                dxp = np.zeros((n, h + 2 * p, w + 2 * p, c_in))
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
                dx = dxp[:, p:p + h, p:p + w, :]
        return (dx, np.ascontiguousarray(dw), db)

    return _node(out, (x, kernels, bias), bw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' cross-correlation with zero padding.

    ``x`` is C_in x H x W or N x C_in x H x W; ``kernels`` is
    C_out x C_in x k x k with k odd; ``bias`` has length C_out.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    _check_conv_args(x.shape[-3], kernels, bias)
    x4 = x if x.ndim == 4 else take(x, (None,))
    out = permute(conv2d_nhwc(permute(x4, (0, 2, 3, 1)), kernels, bias), (0, 3, 1, 2))
    return out if x.ndim == 4 else take(out, 0)


# ------------------------------------------------------------------ backward

def _topo_order(root: Tensor) -> List[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor, params: Optional[Sequence[Tensor]] = None):
    """Reverse sweep from a scalar ``root``.

    Sets ``.grad`` on every reachable leaf that requires grad. If ``params``
    is given, returns their gradients in order (zeros for parameters the root
    does not depend on). The tape is released afterwards; a second call on
    the same root raises :class:`StaleTapeError`.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise StaleTapeError("tape already consumed by a previous backward; re-run forward")

    order = _topo_order(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    reached = {id(n) for n in order}
    for node in order:
        if node._parents:
            node._backward = None
            node._parents = ()
            node._consumed = True

    if params is None:
        return None
    return [p.grad if id(p) in reached and p.grad is not None else np.zeros(p.shape)
            for p in params]


# -------------------------------------------------------- detached recorder

class _DetachedRecorder:
    def __init__(self):
        self.values: List[np.ndarray] = []
        self.replaying = False
        self.cursor = 0

    def handle(self, value):
        if not self.replaying:
            self.values.append(np.copy(value))
            return value
        if self.cursor >= len(self.values):
            raise RuntimeError("replay asked for more detached values than were recorded")
        v = self.values[self.cursor]
        self.cursor += 1
        return np.copy(v)


_recorder: Optional[_DetachedRecorder] = None


def detached(value):
    """Route a constant-for-gradients value through the active recorder, if any."""
    if _recorder is None:
        return value
    return _recorder.handle(value)


@contextlib.contextmanager
def frozen_detached(recorder: Optional[_DetachedRecorder] = None, replay=False):
    global _recorder
    prev = _recorder
    rec = recorder if recorder is not None else _DetachedRecorder()
    rec.replaying = replay
    rec.cursor = 0
    _recorder = rec
    try:
        yield rec
    finally:
        _recorder = prev


# --------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: List[float]
    epsilon: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = max(self.max_rel_error, default=0.0) <= self.tolerance

    def __bool__(self):
        return self.passed


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      epsilon=1e-5, tolerance=1e-6, max_coords=None, seed=0,
                      grad_override: Optional[Sequence[np.ndarray]] = None) -> GradCheckReport:
    """Compare tape gradients with central differences.

    Relative error per parameter is ``max|a - n| / max(max|a|, max|n|, 1e-12)``.
    Detached values are recorded on the analytic pass and held fixed while
    perturbing. Tensors with more than ``max_coords`` entries (default: 64
    when the total parameter count exceeds 10k, else all) are sampled.
    ``grad_override`` substitutes the analytic gradients (negative controls).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    total = sum(p.size for p in params)
    if max_coords is None and total > 10_000:
        max_coords = 64
    rng = np.random.default_rng(seed)

    with frozen_detached() as rec:
        loss = loss_fn()
        analytic = backward(loss, params)
    if grad_override is not None:
        analytic = [np.asarray(g, dtype=np.float64) for g in grad_override]

    def value():
        with frozen_detached(rec, replay=True):
            out = loss_fn()
        return out.item() if isinstance(out, Tensor) else float(out)

    errors = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + epsilon
            fp = value()
            flat[c] = orig - epsilon
            fm = value()
            flat[c] = orig
            num[j] = (fp - fm) / (2.0 * epsilon)
        an = a_flat[coords]
        denom = max(np.abs(an).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        errors.append(float(np.abs(an - num).max(initial=0.0) / denom))
    return GradCheckReport(errors, epsilon, tolerance)


# ---------------------------------------------------------------- optimiser

class SGD:
    """Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, params: Sequence[Tensor], lr=0.01, momentum=0.9, lr_mult=None):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]
        self.lr_mult = list(lr_mult) if lr_mult is not None else [1.0] * len(self.params)
        if len(self.lr_mult) != len(self.params):
            raise ShapeError("one lr multiplier per parameter")

    def step(self, grads: Sequence[np.ndarray]):
        sgd_step(self.params, grads, self.lr, self.momentum, self.velocity, self.lr_mult)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float,
             momentum: float, velocity: Optional[List[np.ndarray]] = None,
             lr_mult: Optional[Sequence[float]] = None):
    """In-place update; ``velocity`` buffers are updated in place when given."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    if velocity is None:
        velocity = [np.zeros(p.shape) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        velocity[i] *= momentum
        velocity[i] += g
        p.data -= (lr if lr_mult is None else lr * lr_mult[i]) * velocity[i]
    return params
