"""Minimal reverse-mode differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
walks the graph in reverse topological order. Values are 32-bit by default;
:func:`precision` switches the working dtype (the gradient checker runs in
64-bit so that central differences resolve small derivatives).

Non-smooth operations (relu, max, min, clamps) log their discrete decisions
while a :func:`record_branches` block is active. The gradient checker uses
the log to notice when a perturbation crosses a kink.
"""

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class InvalidShapeError(ValueError):
    pass


class InvalidConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_DTYPE = np.float32
_BRANCH_LOG = None
_DETACH_MODE = None  # None | ("record", list) | ("replay", list, [cursor])


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype that new tensors are created in."""
    global _DTYPE
    previous, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def record_branches():
    global _BRANCH_LOG
    previous, _BRANCH_LOG = _BRANCH_LOG, []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = previous


def _record(decision):
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(np.ascontiguousarray(decision).tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise InvalidShapeError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Param(Tensor):
    """A named leaf tensor that optimisers update."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def _as_tensor(v):
    return v if isinstance(v, Tensor) else Tensor(v)


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward=backward if needs else None)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def scale(a, c):
    out = a.data * a.data.dtype.type(c)
    return _result(out, (a,), lambda g: (g * g.dtype.type(c),))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def total(a):
    """Sum of all elements, accumulated in float64."""
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    return _result(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def detach(a):
    """Stop-gradient: the value passes through, no gradient flows back.

    Under :func:`grad_check` the value is also frozen at the base point, so the
    finite-difference oracle sees the same constant the analytic pass does.
    """
    if _DETACH_MODE is not None and _DETACH_MODE[0] == "replay":
        values, cursor = _DETACH_MODE[1], _DETACH_MODE[2]
        data = values[cursor[0]]
        cursor[0] += 1
        return Tensor(data.copy())
    if _DETACH_MODE is not None:
        _DETACH_MODE[1].append(a.data.copy())
    return Tensor(a.data.copy())


def relu(a):
    """Elementwise ``max(0, v)``; the subgradient at 0 is 0."""
    mask = a.data > 0
    _record(mask)
    out = np.where(mask, a.data, a.data.dtype.type(0))
    return _result(out, (a,), lambda g: (g * mask,))


def log_clamped(a, floor=1e-12):
    """``log(max(v, floor))``; zero gradient where the clamp is active."""
    live = a.data > floor
    _record(live)
    safe = np.where(live, a.data, a.data.dtype.type(floor))
    out = np.log(safe)
    return _result(out, (a,), lambda g: (np.where(live, g / safe, 0).astype(g.dtype),))


def pick(a, index):
    """``out[i] = a[i, index[i]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[rows, index] = g
        return (ga,)

    return _result(out, (a,), backward)


def masked_min(a, allowed):
    """Row-wise minimum of ``a[N, K]`` over entries where ``allowed[N, K]`` is true.

    Ties resolve to the smallest column index; the gradient goes only there.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != a.shape:
        raise InvalidShapeError(f"mask shape {allowed.shape} != {a.shape}")
    if not allowed.any(axis=1).all():
        raise InvalidConfigError("every row needs at least one admissible entry")
    filled = np.where(allowed, a.data, np.inf)
    idx = np.argmin(filled, axis=1)
    _record(idx)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[rows, idx] = g
        return (ga,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of ``x[N, Cin, H, W]`` with ``kernel[Cout, Cin, k, k]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise InvalidShapeError(f"conv2d wants 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin or k != k2:
        raise InvalidShapeError(f"kernel {kernel.shape} does not fit input {x.shape}")
    if bias.shape != (cout,):
        raise InvalidShapeError(f"bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise InvalidConfigError("stride must be positive and padding non-negative")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise InvalidShapeError(f"kernel size {k} exceeds padded input {hp}x{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if padding:
        xp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    cols = kernels.im2col(xp, k, stride, ho, wo).astype(np.float64)
    wmat = kernel.data.reshape(cout, -1).astype(np.float64)
    out = cols @ wmat.T + bias.data.astype(np.float64)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).astype(x.data.dtype)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            full = kernels.col2im(gmat @ wmat, n, cin, hp, wp, k, stride, ho, wo)
            gx = full[:, :, padding : padding + h, padding : padding + w]
        return tuple(None if v is None else v.astype(g.dtype) for v in (gx, gk, gb))

    return _result(out, (x, kernel, bias), backward)


def dense(x, weight, bias):
    """Affine map ``x[N, F] @ weight[F, O] + bias[O]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise InvalidShapeError(f"dense: bias {bias.shape} != ({weight.shape[1]},)")
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    out = (x64 @ w64 + bias.data).astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return (
            (g64 @ w64.T).astype(g.dtype),
            (x64.T @ g64).astype(g.dtype),
            g64.sum(axis=0).astype(g.dtype),
        )

    return _result(out, (x, weight, bias), backward)


def softmax(x):
    """Row softmax of ``x[N, K]`` with max subtraction."""
    z = x.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=1, keepdims=True)
    out = p64.astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        inner = (g64 * p64).sum(axis=1, keepdims=True)
        return ((p64 * (g64 - inner)).astype(g.dtype),)

    return _result(out, (x,), backward)


def global_avg_pool(x):
    """Mean over the two trailing spatial axes: ``[N, C, H, W] -> [N, C]``."""
    n, c, h, w = x.shape
    out = x.data.astype(np.float64).mean(axis=(2, 3)).astype(x.data.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),))


def sqdist_maps(features, prototypes):
    """Squared distances ``[N, M, h, w]`` from every feature vector to every prototype."""
    if features.data.ndim != 4 or prototypes.data.ndim != 2 or features.shape[1] != prototypes.shape[1]:
        raise InvalidShapeError(f"features {features.shape} and prototypes {prototypes.shape} disagree on D")
    dist = kernels.pairwise_sqdist(features.data, prototypes.data)
    out = dist.astype(features.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        f64 = features.data.astype(np.float64)
        p64 = prototypes.data.astype(np.float64)
        gf = gp = None
        if features.requires_grad:
            # d/dX = 2 * sum_m g[n,m] * (X - p_m)
            gsum = g64.sum(axis=1)
            gf = 2.0 * (f64 * gsum[:, None] - np.einsum("nmhw,md->ndhw", g64, p64))
            gf = gf.astype(g.dtype)
        if prototypes.requires_grad:
            gp = -2.0 * (np.einsum("nmhw,ndhw->md", g64, f64) - g64.sum(axis=(0, 2, 3))[:, None] * p64)
            gp = gp.astype(g.dtype)
        return gf, gp

    return _result(out, (features, prototypes), backward)


def sqdist_map(features, prototype):
    """Single-prototype version of :func:`sqdist_maps`: ``[N, D, h, w], [D] -> [N, h, w]``."""
    if prototype.data.ndim != 1:
        raise InvalidShapeError(f"prototype must be 1-D, got {prototype.shape}")
    maps = sqdist_maps(features, reshape(prototype, (1, -1)))
    return reshape(maps, (maps.shape[0],) + maps.shape[2:])


def exp_sim(dist, temperature):
    """Similarity ``exp(-dist / T)``, in (0, 1] for non-negative distances."""
    if not temperature > 0:
        raise InvalidConfigError(f"temperature must be positive, got {temperature}")
    s = np.exp(-dist.data.astype(np.float64) / temperature)
    # keep the open lower bound: far-away features never underflow to exactly 0
    out = np.maximum(s, np.finfo(dist.data.dtype).tiny).astype(dist.data.dtype)
    return _result(out, (dist,), lambda g: ((-g.astype(np.float64) * s / temperature).astype(g.dtype),))


def spatial_max(maps):
    """Max over the two trailing axes, first row-major index on ties.

    Returns the value tensor (leading shape) and an integer array of shape
    ``leading + (2,)`` holding (row, col) of each maximum.
    """
    *lead, h, w = maps.shape
    if h * w < 1:
        raise InvalidShapeError("spatial_max over an empty spatial extent")
    flat = maps.data.reshape(-1, h * w)
    idx = np.argmax(flat, axis=1)
    _record(idx)
    rows = np.arange(flat.shape[0])
    out = flat[rows, idx].reshape(lead)
    pos = np.stack(np.divmod(idx, w), axis=-1).reshape(tuple(lead) + (2,))

    def backward(g):
        gf = np.zeros(flat.shape, dtype=g.dtype)
        gf[rows, idx] = g.reshape(-1)
        return (gf.reshape(maps.shape),)

    return _result(out, (maps,), backward), pos


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinked: int
    retried: int


def _evaluate(function):
    with record_branches() as log:
        value = function()
    v = float(np.asarray(value.data, dtype=np.float64))
    if not math.isfinite(v):
        raise NumericError("objective evaluated to a non-finite value")
    return v, log


def _analytic(function, params):
    """Forward with detach values recorded, backward; returns (branch log, frozen values, grads)."""
    global _DETACH_MODE
    for p in params:
        p.zero_grad()
    frozen = []
    _DETACH_MODE = ("record", frozen)
    try:
        with record_branches() as log:
            out = function()
    finally:
        _DETACH_MODE = None
    if not np.isfinite(out.data).all():
        raise NumericError("objective evaluated to a non-finite value")
    out.backward()
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    for g in grads:
        _check_finite(g, "backward pass")
    return log, frozen, grads


def _central(function, flat, i, step, frozen, base_log, extrapolate=True):
    """Central difference along one coordinate; ``None`` if any probe crosses a kink.

    With ``extrapolate`` the estimates at ``step`` and ``step / 2`` are combined
    by Richardson extrapolation, cancelling the O(step^2) truncation term.
    """
    global _DETACH_MODE
    orig = flat[i]
    offsets = (step, -step, step / 2, -step / 2) if extrapolate else (step, -step)
    values = []
    smooth = True
    try:
        for off in offsets:
            flat[i] = orig + off
            _DETACH_MODE = ("replay", frozen, [0])
            try:
                v, log = _evaluate(function)
            finally:
                _DETACH_MODE = None
            if log != base_log:
                smooth = False
                break
            values.append(v)
    finally:
        flat[i] = orig
    if not smooth:
        return None
    coarse = (values[0] - values[1]) / (2.0 * step)
    if not extrapolate:
        return coarse
    fine = (values[2] - values[3]) / step
    return (4.0 * fine - coarse) / 3.0


def check_gradients(function, params, step=1e-3, retries=5, jitter=1e-2, seed=0, extrapolate=True):
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``function()`` must rebuild and return a scalar Tensor from the current
    values of ``params``. If a perturbation changes any recorded discrete
    decision (relu mask, argmax, argmin, clamp) the coordinate sits on a
    kink: all parameters are then jittered, the analytic gradient recomputed
    there, and that coordinate checked again, at most ``retries`` times. A
    coordinate still on a kink after that is counted in ``kinked`` and left
    out of the error maximum. Stop-gradient values are held at their base
    point, matching what the analytic pass differentiates.

    Everything runs in 64-bit: parameters are promoted for the duration of
    the check and put back untouched afterwards, so central differences are
    not swamped by 32-bit rounding.

    The relative error is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    The numeric estimate is Richardson-extrapolated from central differences
    at ``step`` and ``step / 2`` unless ``extrapolate=False``.
    """
    if not step > 0:
        raise InvalidConfigError(f"finite-difference step must be positive, got {step}")
    params = list(params)
    originals = [p.data for p in params]
    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
            return _check(function, params, step, retries, jitter, seed, extrapolate)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None


def _check(function, params, step, retries, jitter, seed, extrapolate):
    rng = np.random.default_rng(seed)
    base_log, frozen, analytic = _analytic(function, params)
    worst, checked, kinked, retried = 0.0, 0, 0, 0

    def rel(a, n):
        return abs(a - n) / max(1e-8, abs(n))

    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            numeric = _central(function, flat, i, step, frozen, base_log, extrapolate)
            if numeric is not None:
                worst = max(worst, rel(analytic[k].reshape(-1)[i], numeric))
                checked += 1
                continue
            retried += 1
            saved = [q.data.copy() for q in params]
            try:
                for _ in range(retries):
                    for q, orig in zip(params, saved):
                        q.data[...] = orig + (jitter * rng.standard_normal(q.shape)).astype(q.data.dtype)
                    log_j, frozen_j, grads_j = _analytic(function, params)
                    numeric = _central(function, flat, i, step, frozen_j, log_j, extrapolate)
                    if numeric is not None:
                        worst = max(worst, rel(grads_j[k].reshape(-1)[i], numeric))
                        checked += 1
                        break
                else:
                    kinked += 1
            finally:
                for q, orig in zip(params, saved):
                    q.data[...] = orig
    return GradCheckResult(worst, checked, kinked, retried)


def grad_check(function, params, step=1e-3, **kwargs):
    """Maximum relative error between analytic and central-difference gradients."""
    return check_gradients(function, params, step=step, **kwargs).max_rel_error
