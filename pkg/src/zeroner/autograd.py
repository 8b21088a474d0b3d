"""Minimal reverse-mode autodiff over numpy arrays, plus Adam and a
finite-difference gradient checker.

Everything is float64. Operations executed while a ``Tape`` is active are
recorded on it (execution order is already a topological order); calling
``Tape.backward(loss)`` walks the record in reverse and accumulates
``dLoss/dT`` into ``T.grad`` for every tensor that requires gradients.
Outside a tape the same ops run as plain numpy forward computations, which
is what evaluation and decoding use.

Tapes nest per thread.  Values computed under one tape must not be reused
as differentiable inputs under another: they enter the new graph as
constants.
"""

import math
import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(ValueError):
    """Misuse of the tape/backward machinery."""


class NumericsError(ArithmeticError):
    """A checked-mode forward pass produced a NaN or Inf."""


_STATE = threading.local()

# When True, every op output is checked for NaN/Inf.
_CHECKED = False


def set_checked(flag):
    """Globally enable or disable NaN/Inf checking of op outputs."""
    global _CHECKED
    _CHECKED = bool(flag)


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


class Tensor:
    """A float64 array with an optional gradient buffer.

    ``requires_grad=True`` marks a leaf parameter; outputs of recorded
    operations get the flag set automatically so gradients flow through.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- elementwise / reductions ----------------------------------------

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)


class Tape:
    """Ordered record of executed operations for one forward/backward pass.

    Used as a context manager; on exit the record is cleared so all
    intermediate nodes are released while parameters persist.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        self.clear()
        return False

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        self._nodes.clear()

    def backward(self, loss):
        """Populate grads of every requires_grad tensor reachable from loss.

        Gradients accumulate additively, both across multiple uses of a
        tensor inside the graph and across repeated backward calls.
        Propagation inside one call works on its own buffers, so a second
        call contributes exactly one more dLoss/dT to every .grad.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise GraphError("backward requires a scalar loss, got shape %s"
                             % (getattr(loss, "shape", None),))
        grads = {id(loss): (loss, np.ones_like(loss.data))}
        for out, parents, backward_fn in reversed(self._nodes):
            entry = grads.get(id(out))
            if entry is None:
                continue
            g = entry[1]
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                # accumulation always rebinds (never mutates in place), so
                # pg may safely alias g or a view of it
                held = grads.get(id(parent))
                grads[id(parent)] = (parent, pg if held is None
                                     else held[1] + pg)
        for tensor, g in grads.values():
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn):
    """Create the output tensor of an op, recording it on the active tape."""
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NumericsError("non-finite value in forward pass")
    stack = _tape_stack()
    tape = stack[-1] if stack else None
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._nodes.append((out, parents, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add: incompatible shapes %s and %s" % (a.shape, b.shape))

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul: incompatible shapes %s and %s" % (a.shape, b.shape))

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: incompatible shapes %s @ %s" % (a.shape, b.shape))
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), backward)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), backward)


def sigmoid(x):
    x = _as_tensor(x)
    # stable in both tails
    y = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward)


def exp(x):
    x = _as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _make(y, (x,), backward)


def log(x):
    x = _as_tensor(x)
    y = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(y, (x,), backward)


# -- shape manipulation ----------------------------------------------------


def getitem(x, key):
    """Basic indexing (ints, slices, tuples thereof)."""
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(data, (x,), backward)


def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _make(data, (x,), backward)


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix, got shape %s" % (x.shape,))
    data = x.data.T

    def backward(g):
        return (g.T,)

    return _make(data, (x,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes %s along axis %d"
                         % ([t.shape for t in tensors], axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward)


# -- reductions -------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(data, (x,), backward)


def tmean(x, axis=None):
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def logsumexp(x, axis=None, keepdims=False):
    """Overflow-safe log(sum(exp(x))) along an axis (or over everything)."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    y = m + np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True))
    soft = np.exp(x.data - y)
    if not keepdims:
        y = np.squeeze(y, axis=axis) if axis is not None else y.reshape(())

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(y, (x,), backward)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), backward)


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


# -- gather / lookup --------------------------------------------------------


def gather2d(x, rows, cols):
    """out[i] = x[rows[i], cols[i]]; gradient scatter-adds back."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape:
        raise ShapeError("gather2d: index shapes differ %s vs %s"
                         % (rows.shape, cols.shape))
    data = x.data[rows, cols]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _make(data, (x,), backward)


def embedding_lookup(table, indices):
    """Select rows of a [V x d] table; gradient scatter-adds into the rows."""
    indices = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup expects a matrix table, got %s"
                         % (table.shape,))
    data = table.data[indices]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return (gt,)

    return _make(data, (table,), backward)


def dropout(x, rate, rng=None, training=False):
    """Zero each element independently with probability `rate` and rescale.

    Identity in eval mode or at rate 0. Training mode draws the mask from
    `rng`, so determinism is inherited from the caller's generator.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1), got %r" % (rate,))
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    data = x.data * keep

    def backward(g):
        return (g * keep,)

    return _make(data, (x,), backward)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction. ``step`` consumes and clears gradients.

    Moment buffers and step counters are per parameter. By default a
    missing gradient is a contract error; with ``skip_missing=True`` such
    parameters are left untouched for that step (the usual treatment of
    parameters that did not participate in a batch, e.g. an unused
    embedding table).
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 skip_missing=False):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.skip_missing = skip_missing
        self.steps = [0] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def t(self):
        return max(self.steps, default=0)

    def step(self):
        if not self.skip_missing:
            for i, p in enumerate(self.params):
                if p.grad is None:
                    raise GraphError("adam step with missing gradient on "
                                     "parameter %d of shape %s" % (i, p.shape))
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.steps[i] += 1
            t = self.steps[i]
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1 ** t)
            v_hat = self.v[i] / (1.0 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


# -- gradient checking --------------------------------------------------------


class FdReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    def __init__(self, tol):
        self.tol = tol
        self.max_rel_error = {}
        self.failures = []

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def ok(self):
        return not self.failures

    def __repr__(self):
        status = "ok" if self.ok() else "%d failures" % len(self.failures)
        return "FdReport(worst=%.3e, tol=%.1e, %s)" % (self.worst, self.tol, status)


def finite_difference_check(f, params, h=1e-5, tol=1e-4, names=None):
    """Compare reverse-mode gradients of f() against central differences.

    f must be a deterministic zero-argument callable returning a scalar
    Tensor computed from `params`. Relative error per component is
    |a - b| / max(1, |a|, |b|).
    """
    params = list(params)
    if names is None:
        names = ["param%d" % i for i in range(len(params))]
    for p in params:
        p.grad = None
    with Tape() as tape:
        tape.backward(f())
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        p.grad = None

    report = FdReport(tol)
    for name, p, a in zip(names, params, analytic):
        worst = 0.0
        for j in range(p.data.size):
            orig = p.data.flat[j]
            p.data.flat[j] = orig + h
            up = f().item()
            p.data.flat[j] = orig - h
            down = f().item()
            p.data.flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            ana = a.flat[j]
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if rel > worst:
                worst = rel
            if rel > tol:
                report.failures.append((name, j, rel))
        report.max_rel_error[name] = worst
    return report


def uniform_init(rng, shape, fan_in):
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init for weight tensors.

    rng=None allocates zeros instead: the shape-only path used when a
    checkpoint load is about to overwrite every parameter.
    """
    if rng is None:
        return Tensor(np.zeros(shape), requires_grad=True)
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
