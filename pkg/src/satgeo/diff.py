"""Small reverse-mode differentiation engine over dense numpy arrays.

Every value that needs a gradient is a :class:`Tensor`.  Operations record
their parents and a vector-Jacobian product; :func:`backward` walks the graph
once in reverse topological order and returns a gradient map.  Tensors are
never mutated, so independent graphs can be built and differentiated from
different threads.
"""

import contextlib
import threading

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation (log, sqrt)."""


class ContractError(ValueError):
    """An API precondition was violated (e.g. non-scalar loss)."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _note_branch(mask):
    """Record which side of a kink each element took, while grad_check listens."""
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.packbits(mask))


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}, op={self.op})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like=None):
    """Wrap constants; numpy constants adopt the dtype of ``like``."""
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def make_op(data, parents, vjp, op):
    """Create an op result; records the graph only when a parent needs grads."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.op = op
    return out


def _binary(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _binary(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _binary(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _binary(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b):
    a, b = _binary(a, b)
    out = a.data / b.data

    def vjp(g):
        gb = b.data
        return unbroadcast(g / gb, a.shape), unbroadcast(-g * out / gb, b.shape)

    return make_op(out, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log needs positive input, min is {a.data.min()!r}")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt needs non-negative input, min is {a.data.min()!r}")
    out = np.sqrt(a.data)

    def vjp(g):
        # derivative at exactly 0 is taken as 0
        d = np.divide(0.5, out, out=np.zeros_like(out), where=out > 0)
        return (g * d,)

    return make_op(out, (a,), vjp, "sqrt")


def sin(a):
    a = as_tensor(a)
    return make_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    a = as_tensor(a)
    return make_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    _note_branch(a.data > 0)
    return make_op(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_op(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient passes only where the input is inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    _note_branch((a.data >= lo) & (a.data <= hi))
    return make_op(out, (a,), lambda g: (g * ((a.data >= lo) & (a.data <= hi)),), "clip")


# --- reductions ----------------------------------------------------------------


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    return make_op(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    out = (np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims) / n).astype(a.dtype)
    return make_op(out, (a,), lambda g: (_expand(g / n, a.shape, axis, keepdims),), "mean")


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; gradient at a zero vector is zero."""
    a = as_tensor(a)
    sq = np.sum(np.square(a.data, dtype=np.float64), axis=axis, keepdims=True)
    nk = np.sqrt(sq).astype(a.dtype)
    out = nk if keepdims else np.squeeze(nk, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        scale = np.divide(gk, nk, out=np.zeros(np.broadcast_shapes(gk.shape, nk.shape), a.dtype),
                          where=nk > 0)
        return (scale * a.data,)

    return make_op(out, (a,), vjp, "norm")


def cumprod_exclusive(a):
    """T[..., i] = prod_{j<i} a[..., j] along the last axis (T[..., 0] = 1)."""
    a = as_tensor(a)
    x = a.data
    out = np.ones_like(x)
    if x.shape[-1] > 1:
        out[..., 1:] = np.cumprod(x[..., :-1], axis=-1)

    def vjp(g):
        # d/da_k = T_k * S_k with S_k = g_{k+1} + a_{k+1} S_{k+1}; avoids dividing by a_k
        n = x.shape[-1]
        ga = np.empty_like(x)
        s = np.zeros(x.shape[:-1], dtype=x.dtype)
        for k in range(n - 1, -1, -1):
            ga[..., k] = out[..., k] * s
            s = g[..., k] + x[..., k] * s
        return (ga,)

    return make_op(out, (a,), vjp, "cumprod_exclusive")


# --- linear algebra / structure --------------------------------------------------


def matmul(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return make_op(out, (a, b), vjp, "matmul")


def _column_sum(g, block=64):
    """Sum over rows: float32 partial sums of ``block`` rows, accumulated in float64."""
    n = g.shape[0] - g.shape[0] % block
    total = g[n:].sum(axis=0, dtype=np.float64)
    if n:
        parts = np.ones(block, g.dtype) @ g[:n].reshape(n // block, block, -1)
        total += parts.sum(axis=0, dtype=np.float64)
    return total.astype(g.dtype)


def linear(x, w, b=None, activation=None):
    """Fused ``act(x @ w + b)`` for 2-D ``x``; ``activation`` is None or "relu"."""
    x = as_tensor(x, w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear expects (n,k)@(k,m), got {x.shape} and {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out += b.data
    if activation == "relu":
        np.maximum(out, 0, out=out)
        _note_branch(out > 0)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gz = g * (out > 0) if activation == "relu" else g
        gx = None
        if x.requires_grad:
            # a single output column makes the gemm an outer product, which BLAS does slowly
            gx = gz * w.data[:, 0] if w.shape[1] == 1 else gz @ w.data.T
        gw = x.data.T @ gz if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, _column_sum(gz)

    return make_op(out, parents, vjp, "linear")


def cross(a, b):
    """Cross product of 3-vectors along the last axis."""
    a, b = _binary(a, b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross needs trailing extent 3, got {a.shape} and {b.shape}")
    out = np.cross(a.data, b.data)
    return make_op(out, (a, b),
                   lambda g: (unbroadcast(np.cross(b.data, g), a.shape),
                              unbroadcast(np.cross(g, a.data), b.shape)),
                   "cross")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    dtype = tensors[0].dtype
    tensors = [t if t.dtype == dtype else as_tensor(t.data, tensors[0]) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    """Slicing and integer-array gathering; repeated indices accumulate."""
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return make_op(out, (a,), vjp, "getitem")


def reshape(a, shape):
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return make_op(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shape {a.shape} to {tuple(shape)}") from None
    return make_op(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


# --- differentiation -----------------------------------------------------------


def _topo_order(root):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, wrt=None):
    """Gradients of a scalar ``loss``.

    Returns a dict mapping every leaf tensor that requires grad to its
    gradient.  With ``wrt`` (a sequence of tensors) a list of gradients is
    returned instead, with exact zeros for tensors not connected to the loss.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {}
    leaves = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if node.vjp is None:
                leaves[id(node)] = node
                continue
            del grads[id(node)]
            if g is None:
                continue
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
    if wrt is not None:
        out = []
        for t in wrt:
            g = grads.get(id(t)) if id(t) in leaves else None
            out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
        return out
    return {node: np.asarray(grads.get(i, np.zeros_like(node.data)), dtype=node.dtype).reshape(node.shape)
            for i, node in leaves.items()}


def _eval_branches(f, x):
    _state.branches = []
    try:
        with no_grad():
            value = float(f(Tensor(x)).data.reshape(-1)[0])
        return value, _state.branches
    finally:
        _state.branches = None


def grad_check(f, x, eps=1e-3, indices=None, skip_kinks=True):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  The error per component is
    ``|analytic - numeric| / max(1, |analytic|)``.  ``indices`` restricts the
    check to a subset of flat component indices.  With ``skip_kinks`` a
    component is left out when some relu or clip takes a different branch at
    the two stencil points, since a central difference across a kink
    measures an average slope rather than the derivative.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if x0.dtype.kind != "f":
        x0 = x0.astype(DEFAULT_DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    (analytic,) = backward(f(xt), wrt=[xt])
    analytic = analytic.reshape(-1).astype(np.float64)
    idx = range(x0.size) if indices is None else indices
    worst = 0.0
    for k in idx:
        xp, xm = x0.copy(), x0.copy()
        xp.flat[k] += x0.dtype.type(eps)
        xm.flat[k] -= x0.dtype.type(eps)
        fp, bp = _eval_branches(f, xp)
        fm, bm = _eval_branches(f, xm)
        if skip_kinks and (len(bp) != len(bm) or any(not np.array_equal(a, b) for a, b in zip(bp, bm))):
            continue
        step = float(xp.flat[k]) - float(xm.flat[k])
        numeric = (fp - fm) / step
        err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]))
        worst = max(worst, err)
    return worst
