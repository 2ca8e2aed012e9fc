"""Dense float64 arrays with tape-based reverse-mode differentiation.

A :class:`Var` wraps an immutable ``numpy`` array. Operations on Vars that
require gradients record a node holding references to their parents and a
vector-Jacobian product. :func:`backward` walks the recorded graph once in
reverse topological order.

Broadcasting is limited to a scalar (size-1) operand against a full array.
"""

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _pykernels, kernels
from .errors import ContractError, DimensionError, DomainError

_ids = itertools.count()


# ------------------------------------------------------------ branch freezing

class BranchLog:
    """Discrete decisions (signs, masks, argmins, sampling cells) taken during one
    evaluation, in call order.

    Piecewise-smooth functions are differentiated on the active piece. Replaying
    a log evaluates that same piece at nearby inputs, which is what a finite
    difference must compare against.
    """

    def __init__(self):
        self.entries = []
        self._pos = None


_branches = None


@contextlib.contextmanager
def record_branches():
    global _branches
    prev, _branches = _branches, BranchLog()
    try:
        yield _branches
    finally:
        _branches = prev


@contextlib.contextmanager
def replay_branches(log):
    global _branches
    prev, _branches = _branches, log
    log._pos = 0
    try:
        yield log
        if log._pos != len(log.entries):
            raise ContractError("replay consumed fewer decisions than were recorded")
    finally:
        log._pos = None
        _branches = prev


def decision(value):
    """Pass ``value`` through, record it, or substitute the recorded one when replaying."""
    log = _branches
    if log is None:
        return value
    if log._pos is None:
        log.entries.append(value)
        return value
    if log._pos >= len(log.entries):
        raise ContractError("replay requested more decisions than were recorded")
    out = log.entries[log._pos]
    log._pos += 1
    return out


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "requires_grad", "grad", "id", "name", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, name=None):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self.name = name
        self._parents = ()
        self._vjp = None

    @classmethod
    def _node(cls, value, parents, vjp):
        out = cls.__new__(cls)
        arr = np.asarray(value, dtype=np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        out.value = arr
        out.grad = None
        out.id = next(_ids)
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def detach(self):
        return Var(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def const(x):
    """Wrap ``x`` as a Var that never receives gradient."""
    return Var(x.value if isinstance(x, Var) else x)


def param(x, name=None):
    return Var(x, requires_grad=True, name=name)


# ----------------------------------------------------------------- elementwise

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g)).reshape(shape)


def _operands(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        if bv.size == 1:
            bv = bv.reshape(())
        elif av.size == 1:
            av = av.reshape(())
        else:
            raise DimensionError(f"shape mismatch {av.shape} vs {bv.shape}")
    return a, b, av, bv


def add(a, b):
    a, b, av, bv = _operands(a, b)
    return Var._node(av + bv, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b, av, bv = _operands(a, b)
    return Var._node(av - bv, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b, av, bv = _operands(a, b)
    return Var._node(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b):
    a, b, av, bv = _operands(a, b)
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    out = av / bv

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Var._node(out, (a, b), vjp)


def neg(a):
    a = as_var(a)
    return Var._node(-a.value, (a,), lambda g: (-g,))


def _unary(a, f, df):
    a = as_var(a)
    x = a.value
    out = f(x)
    return Var._node(out, (a,), lambda g: (g * df(x, out),))


def log(a):
    a = as_var(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive value")
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = as_var(a)
    s = decision(np.sign(a.value))
    return Var._node(s * a.value, (a,), lambda g: (g * s,))


def sqrt(a):
    a = as_var(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt of negative value")
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def _sigmoid(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a):
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def relu(a):
    a = as_var(a)
    m = decision(a.value > 0.0)
    return Var._node(np.where(m, a.value, 0.0), (a,), lambda g: (np.where(m, g, 0.0),))


def elu(a):
    a = as_var(a)
    x = a.value
    m = decision(x > 0.0)
    neg = np.expm1(np.where(m, 0.0, x))
    return Var._node(np.where(m, x, neg), (a,), lambda g: (np.where(m, g, g * (neg + 1.0)),))


def clamp(a, lo=None, hi=None):
    """Clip to ``[lo, hi]``; gradient passes where ``lo <= x <= hi``."""
    a = as_var(a)
    x = a.value
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    below, above = decision((x < lo_, x > hi_))
    out = np.where(below, lo_, np.where(above, hi_, x))
    inside = ~(below | above)
    return Var._node(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def pow(a, p):  # noqa: A001
    a = as_var(a)
    p = float(p)
    if not p.is_integer() and np.any(a.value < 0.0):
        raise DomainError("fractional power of negative value")
    if p < 0 and np.any(a.value == 0.0):
        raise DomainError("negative power of zero")
    return _unary(a, lambda x: x ** p, lambda x, y: p * x ** (p - 1.0))


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "log": log, "exp": exp,
    "abs": abs, "clamp": clamp, "sigmoid": sigmoid, "softplus": softplus,
    "elu": elu, "relu": relu, "pow": pow,
}


def elementwise(kind, a, b=None):
    """Dispatch by name; unary kinds ignore ``b`` except clamp (``b=(lo, hi)``) and pow."""
    fn = ELEMENTWISE[kind]
    if kind in ("add", "sub", "mul", "div"):
        return fn(a, b)
    if kind == "clamp":
        lo, hi = b if b is not None else (None, None)
        return fn(a, lo, hi)
    if kind == "pow":
        return fn(a, b)
    return fn(a)


# ------------------------------------------------------------------ reductions

def _check_axis(a, axis):
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_var(a)
    _check_axis(a, axis)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var._node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_var(a)
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DomainError("mean of empty tensor")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _argreduce(a, axis, pick):
    a = as_var(a)
    _check_axis(a, axis)
    if a.size == 0:
        raise DomainError("reduction of empty tensor")
    idx = decision(pick(a.value, axis=axis))  # first occurrence on ties
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Var._node(out, (a,), vjp)


def min_axis(a, axis=0):
    """Minimum along ``axis``; gradient goes to the lowest-index argmin."""
    return _argreduce(a, axis, np.argmin)


def max_axis(a, axis=0):
    return _argreduce(a, axis, np.argmax)


def median(a, axis=None):
    """Median (evaluation only: the result carries no gradient)."""
    a = as_var(a)
    if a.size == 0:
        raise DomainError("median of empty tensor")
    return Var(np.median(a.value, axis=axis))


REDUCTIONS = {"sum": sum, "mean": mean, "min-over-axis": min_axis,
              "max-over-axis": max_axis, "median": median}


def reduce(kind, a, axis=None):
    fn = REDUCTIONS[kind]
    if kind in ("min-over-axis", "max-over-axis"):
        return fn(a, 0 if axis is None else axis)
    return fn(a, axis=axis)


# ------------------------------------------------------------------ structural

def reshape(a, shape):
    a = as_var(a)
    return Var._node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    a = as_var(a)

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return Var._node(a.value[idx], (a,), vjp)


def concat(vars_, axis=0):
    vars_ = [as_var(v) for v in vars_]
    if not vars_:
        raise DimensionError("concat of empty list")
    sizes = [v.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]
    return Var._node(np.concatenate([v.value for v in vars_], axis=axis), vars_,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(vars_, axis=0):
    vars_ = [as_var(v) for v in vars_]
    if not vars_:
        raise DimensionError("stack of empty list")
    shapes = {v.shape for v in vars_}
    if len(shapes) != 1:
        raise DimensionError(f"stack of unequal shapes {sorted(shapes)}")
    n = len(vars_)
    return Var._node(np.stack([v.value for v in vars_], axis=axis), vars_,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


PAD_MODES = ("zero", "reflect", "clamp-edge")


def _pad_index(n, p, mode):
    i = np.arange(-p, n + p)
    if mode == "reflect":
        i = np.abs(i)
        i = np.where(i > n - 1, 2 * (n - 1) - i, i)
    else:
        i = np.clip(i, 0, n - 1)
    return i


def pad(a, p, mode="zero"):
    """Pad the last two axes of a (C, H, W) Var by ``p`` on each side."""
    a = as_var(a)
    if mode not in PAD_MODES:
        raise ValueError(f"unknown pad mode {mode!r}")
    if p == 0:
        return a
    C, H, W = a.shape
    if mode == "zero":
        out = np.zeros((C, H + 2 * p, W + 2 * p))
        out[:, p:p + H, p:p + W] = a.value
        return Var._node(out, (a,), lambda g: (g[:, p:p + H, p:p + W].copy(),))
    if mode == "reflect" and (p >= H or p >= W):
        raise DimensionError(f"reflect pad {p} needs pad < input size {(H, W)}")
    ri = _pad_index(H, p, mode)
    ci = _pad_index(W, p, mode)
    flat = (ri[:, None] * W + ci[None, :]).ravel()

    def vjp(g):
        out = np.empty(a.shape)
        for c in range(C):
            out[c] = np.bincount(flat, weights=g[c].ravel(), minlength=H * W).reshape(H, W)
        return (out,)

    return Var._node(a.value[:, ri[:, None], ci[None, :]], (a,), vjp)


_pad = pad


# --------------------------------------------------------------------- imaging

def conv2d(x, kernel, stride=1, pad=0, pad_mode="zero", groups=1, bias=None):
    """2D cross-correlation of a (C, H, W) input with a (Cout, Cin/groups, k, k) kernel.

    Output size per axis is ``(n + 2*pad - k) // stride + 1``. ``bias`` is an
    optional (Cout,) Var added per output channel.
    """
    x, kernel = as_var(x), as_var(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError("conv2d expects (C,H,W) input and (Cout,Cin,k,k) kernel")
    C = x.shape[0]
    Cout, Cg, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {k}x{k2}")
    if C != Cg * groups or Cout % groups:
        raise DimensionError(f"channel mismatch: input {C}, kernel {kernel.shape}, groups {groups}")
    xp = _pad(x, pad, pad_mode)
    if xp.shape[1] < k or xp.shape[2] < k:
        raise DimensionError("kernel larger than padded input")
    xv, wv = xp.value, kernel.value
    out = kernels.conv2d_forward(xv, wv, stride, groups)

    def vjp(g):
        gx, gw = kernels.conv2d_backward(xv, wv, g, stride, groups)
        return gx, gw

    out = Var._node(out, (xp, kernel), vjp)
    if bias is not None:
        out = add_channel_bias(out, bias)
    return out


def add_channel_bias(x, bias):
    """``x[c] + bias[c]`` for a (C, H, W) ``x`` and (C,) ``bias``."""
    x, bias = as_var(x), as_var(bias)
    if bias.shape != (x.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {x.shape[0]} channels")
    return Var._node(x.value + bias.value[:, None, None], (x, bias),
                     lambda g: (g, g.sum(axis=(1, 2))))


def pixel_shuffle(x, r):
    """(C*r*r, H, W) -> (C, r*H, r*W) with out[c, r*y+dy, r*x+dx] = in[c*r*r + dy*r + dx, y, x]."""
    x = as_var(x)
    Cr, H, W = x.shape
    if Cr % (r * r):
        raise DimensionError(f"channels {Cr} not divisible by r^2={r * r}")
    C = Cr // (r * r)
    out = x.value.reshape(C, r, r, H, W).transpose(0, 3, 1, 4, 2).reshape(C, H * r, W * r)
    return Var._node(out, (x,), lambda g: (_unshuffle(g, r),))


def _unshuffle(v, r):
    C, Hr, Wr = v.shape
    H, W = Hr // r, Wr // r
    return v.reshape(C, H, r, W, r).transpose(0, 2, 4, 1, 3).reshape(C * r * r, H, W)


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle`."""
    x = as_var(x)
    C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise DimensionError(f"spatial size {(Hr, Wr)} not divisible by {r}")
    return Var._node(_unshuffle(x.value, r), (x,), lambda g: (pixel_shuffle(Var(g), r).value,))


def bilinear_sample(source, grid):
    """Sample a (C, H, W) source at pixel coordinates ``grid`` (2, H', W').

    ``grid[0]`` is x (column), ``grid[1]`` is y (row); (0, 0) is the centre of
    the top-left pixel. Coordinates outside the image clamp to the border.
    """
    source, grid = as_var(source), as_var(grid)
    if source.ndim != 3 or grid.ndim != 3 or grid.shape[0] != 2:
        raise DimensionError("bilinear_sample expects (C,H,W) source and (2,H',W') grid")
    src = source.value
    gx, gy = grid.value[0], grid.value[1]
    if _branches is not None:
        return _bilinear_frozen(source, grid)
    out = kernels.bilinear_forward(src, gx, gy)

    def vjp(g):
        gsrc, ggx, ggy = kernels.bilinear_backward(src, gx, gy, g)
        return gsrc, np.stack([ggx, ggy])

    return Var._node(out, (source, grid), vjp)


def _bilinear_frozen(source, grid):
    # reference path: sampling cells and clamp decisions go through the branch log
    src = source.value
    gx, gy = grid.value[0], grid.value[1]
    _, H, W = src.shape
    xc, yc = decision((_pykernels.cells(gx, W), _pykernels.cells(gy, H)))
    xc = _pykernels.refit_cells(xc, gx)
    yc = _pykernels.refit_cells(yc, gy)
    out = _pykernels.bilinear_forward_cells(src, xc, yc)

    def vjp(g):
        gsrc, ggx, ggy = _pykernels.bilinear_backward_cells(src, xc, yc, g)
        return gsrc, np.stack([ggx, ggy])

    return Var._node(out, (source, grid), vjp)


def identity_grid(H, W):
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([xs, ys])


# -------------------------------------------------------------------- backward

def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.id not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every requires-grad leaf reachable from ``loss`` and
    returns ``{leaf.id: gradient}``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads = {loss.id: np.ones(loss.shape)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            g = np.zeros(node.shape)
        if node._vjp is None:
            node.grad = g
            leaves[node.id] = g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return leaves


# ------------------------------------------------------------------ grad check

@dataclass
class GradCheckReport:
    max_relative_error: float
    per_param: list = field(default_factory=list)
    checked_entries: int = 0

    def passed(self, tol=1e-4):
        return self.max_relative_error < tol


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum.reduce(
        [np.abs(analytic), np.abs(numeric), np.full(np.shape(analytic), 1e-8)])


def grad_check(f, params, h=1e-5, max_entries=None, seed=0, freeze_branches=True):
    """Compare reverse-mode gradients of ``f(params)`` with central differences.

    ``f`` takes a list of Vars and returns a scalar Var. When ``max_entries``
    is given, only that many randomly chosen entries per parameter are probed.
    With ``freeze_branches`` every discrete decision (see :class:`BranchLog`)
    is taken from the base point, so the differences follow the same smooth
    piece that the analytic gradient describes.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = [Var(p.value, requires_grad=True, name=p.name) for p in params]
    with record_branches() as log:
        loss = f(params)
    if not np.isfinite(loss.value).all():
        raise DomainError("f is not finite at the base point")
    backward(loss)
    rng = np.random.default_rng(seed)

    def evaluate(i, flat_idx, delta):
        v = params[i].value.copy().reshape(-1)
        v[flat_idx] += delta
        trial = [Var(p.value) for p in params]
        trial[i] = Var(v.reshape(params[i].shape))
        if freeze_branches:
            with replay_branches(log):
                out = f(trial).value
        else:
            out = f(trial).value
        if not np.isfinite(out).all():
            raise DomainError("f is not finite at a perturbed point")
        return float(np.asarray(out).reshape(-1)[0])

    worst, per_param, count = 0.0, [], 0
    for i, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)
        entries = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            entries = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        errs = []
        for j in entries:
            numeric = (evaluate(i, j, h) - evaluate(i, j, -h)) / (2 * h)
            errs.append(float(relative_error(analytic[j], numeric)))
        count += len(entries)
        e = max(errs) if errs else 0.0
        per_param.append({"name": p.name or f"param{i}", "max_relative_error": e,
                          "entries": len(entries)})
        worst = max(worst, e)
    return GradCheckReport(worst, per_param, count)
