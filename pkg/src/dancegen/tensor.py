"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a numpy array; the graph is a tape of vector-Jacobian closures
built during the forward pass and freed after ``backward``. Gradients are
first order only. Graph construction is single threaded; tensors that do
not track gradients are treated as immutable and are safe to share.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    """True while tape construction is globally active."""
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables tape construction inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad``
    when ``backward`` runs; repeated backward calls keep accumulating until
    the caller clears the gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars and ndarrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A leaf tensor registered with a module; always tracks gradients."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Create an op output, attaching the tape entry only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every requires_grad leaf reachable from
    ``loss`` and frees the tape so the graph cannot be reused.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            node._parents = ()
            node._vjp = None
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._vjp = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    s = np.sqrt(a.data)
    return _node(s, (a,), lambda g: (g * (0.5 / s),))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)
    sig = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _node(data, (a,), lambda g: (g * sig,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), composed from primitives."""
    return mul(a, sigmoid(a))


def stop_gradient(a: Tensor) -> Tensor:
    """Forward the value, block the gradient."""
    return Tensor(a.data)


def expm1_over(a: Tensor) -> Tensor:
    """(e^u - 1) / u, with a series branch for |u| < 1e-6.

    The series keeps the value and derivative finite through u = 0, which
    the discretized state-space update needs for very small step sizes.
    """
    u = a.data
    small = np.abs(u) < 1e-6
    safe = np.where(small, 1.0, u)
    val = np.where(small, 1.0 + u / 2.0 + u * u / 6.0, np.expm1(safe) / safe)

    def vjp(g):
        dval = np.where(
            small,
            0.5 + u / 3.0 + u * u / 8.0,
            (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe),
        )
        return (g * dval,)

    return _node(val, (a,), vjp)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(data, (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    dim = a.data.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ShapeError(f"narrow [{start}:{start + length}) outside axis of size {dim}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(a.data[idx], (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _node(data, parts, vjp)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax along the last axis. -inf entries get exactly zero weight.

    A row with every entry masked to -inf has no valid distribution and
    raises rather than returning NaNs.
    """
    rowmax = np.max(a.data, axis=-1, keepdims=True)
    if np.isneginf(rowmax).any():
        raise DegenerateInputError("softmax row with all entries masked to -inf")
    e = np.exp(a.data - rowmax)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _node(s, (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding ids outside [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _node(data, (table,), vjp)


def take_along_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis (e.g. target logits)."""
    ids = np.asarray(ids)
    data = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# Convolutions. Layout: activations [..., time, channels], weights
# [kernel, in_channels, out_channels]. Same-style padding keeps
# out_len = ceil(in_len / stride); the transposed op restores in_len exactly.


def _same_pad(t_in: int, kernel: int, stride: int):
    t_out = -(-t_in // stride)
    total = max((t_out - 1) * stride + kernel - t_in, 0)
    return t_out, total // 2, total - total // 2


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    if stride < 1:
        raise ContractError(f"conv1d stride must be >= 1, got {stride}")
    if x.ndim < 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x [..., T, Cin] and w [K, Cin, Cout], got {x.shape}, {w.shape}")
    kernel, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d channels mismatch: x has {x.shape[-1]}, w expects {c_in}")
    t_in = x.shape[-2]
    t_out, pad_l, pad_r = _same_pad(t_in, kernel, stride)

    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad_l, pad_r), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=-2)
    win = win[..., ::stride, :, :]  # [..., t_out, Cin, K]
    cols = np.swapaxes(win, -1, -2).reshape(x.shape[:-2] + (t_out, kernel * c_in))
    w2 = w.data.reshape(kernel * c_in, c_out)
    data = cols @ w2
    if b is not None:
        data = data + b.data

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gcols = (g @ w2.T).reshape(x.shape[:-2] + (t_out, kernel, c_in))
        gxp = np.zeros_like(xp)
        starts = stride * np.arange(t_out)
        for k in range(kernel):
            gxp[..., starts + k, :] += gcols[..., :, k, :]
        gx = gxp[..., pad_l:pad_l + t_in, :]
        gw = (cols.reshape(-1, kernel * c_in).T @ g.reshape(-1, c_out)).reshape(w.shape)
        if b is None:
            return gx, gw
        gb = g.reshape(-1, c_out).sum(axis=0)
        return gx, gw, gb

    return _node(data, parents, vjp)


def conv1d_transpose(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    if stride < 1:
        raise ContractError(f"conv1d_transpose stride must be >= 1, got {stride}")
    if x.ndim < 2 or w.ndim != 3:
        raise ShapeError(
            f"conv1d_transpose expects x [..., T, Cin] and w [K, Cin, Cout], got {x.shape}, {w.shape}"
        )
    kernel, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d_transpose channels mismatch: x has {x.shape[-1]}, w expects {c_in}")
    t_in = x.shape[-2]
    t_out = t_in * stride
    # Mirror the geometry of the same-padded conv that maps t_out -> t_in.
    _, pad_l, _ = _same_pad(t_out, kernel, stride)

    full_len = (t_in - 1) * stride + kernel
    full = np.zeros(x.shape[:-2] + (full_len, c_out))
    starts = stride * np.arange(t_in)
    for k in range(kernel):
        full[..., starts + k, :] += x.data @ w.data[k]
    data = full[..., pad_l:pad_l + t_out, :]
    if b is not None:
        data = data + b.data

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gfull = np.zeros(x.shape[:-2] + (full_len, c_out))
        gfull[..., pad_l:pad_l + t_out, :] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for k in range(kernel):
            gk = gfull[..., starts + k, :]
            gx += gk @ w.data[k].T
            gw[k] = x.data.reshape(-1, c_in).T @ gk.reshape(-1, c_out)
        if b is None:
            return gx, gw
        gb = g.reshape(-1, c_out).sum(axis=0)
        return gx, gw, gb

    return _node(data, parents, vjp)


# ---------------------------------------------------------------------------
# Linear recurrence (diagonal state-space scan)


def linear_recurrence(decay: Tensor, drive: Tensor) -> Tensor:
    """States of h_t = decay_t * h_{t-1} + drive_t along axis 0, h_{-1} = 0.

    Elementwise over trailing axes. The forward loop is the reference
    evaluation; ``parallel_linear_recurrence`` is the fast equivalent.
    """
    if decay.shape != drive.shape:
        raise ShapeError(f"recurrence shapes differ: {decay.shape} vs {drive.shape}")
    if decay.ndim < 1 or decay.shape[0] < 1:
        raise ShapeError("recurrence needs a nonempty leading time axis")
    steps = decay.shape[0]
    h = np.empty_like(drive.data)
    prev = np.zeros(drive.data.shape[1:])
    for t in range(steps):
        prev = decay.data[t] * prev + drive.data[t]
        h[t] = prev

    def vjp(g):
        gdecay = np.empty_like(decay.data)
        gdrive = np.empty_like(drive.data)
        lam = np.zeros(drive.data.shape[1:])
        for t in range(steps - 1, -1, -1):
            lam = g[t] + (decay.data[t + 1] * lam if t + 1 < steps else 0.0)
            gdrive[t] = lam
            gdecay[t] = lam * (h[t - 1] if t > 0 else 0.0)
        return gdecay, gdrive

    return _node(h, (decay, drive), vjp)


def parallel_linear_recurrence(decay: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """Blocked evaluation of the same recurrence via associative doubling.

    Pairs (a, b) represent affine maps h -> a*h + b; composing prefixes in
    log2(T) sweeps yields all states. Matches the sequential loop to
    floating-point accumulation order.
    """
    if decay.shape != drive.shape:
        raise ShapeError(f"recurrence shapes differ: {decay.shape} vs {drive.shape}")
    a = np.array(decay, dtype=np.float64, copy=True)
    b = np.array(drive, dtype=np.float64, copy=True)
    steps = a.shape[0]
    shift = 1
    while shift < steps:
        b[shift:] = b[shift:] + a[shift:] * b[:-shift]
        a[shift:] = a[shift:] * a[:-shift]
        shift *= 2
    return b


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute deviation between two tensors."""
    return reduce_mean(abs_(sub(a, b)))
