"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable primitive calls :func:`record`, which evaluates nothing
itself: it wraps the already computed output array in a :class:`Tensor` and,
when gradients are enabled and some input requires them, appends a
:class:`Node` (inputs, output, backward rule) to the thread-local
:class:`Tape`.  :func:`backward` walks the tape once in reverse.
"""

import contextlib
import threading

import numpy as np

_DTYPES = {"double": np.float64, "single": np.float32, "float64": np.float64, "float32": np.float32}


class ShapeError(ValueError):
    """Raised when a primitive receives operands with incompatible extents."""


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_default_dtype = np.float32


def set_default_dtype(dtype):
    """Switch the global floating precision ("single"/"double" or a numpy dtype)."""
    global _default_dtype
    _default_dtype = np.dtype(_DTYPES.get(dtype, dtype)).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default dtype, e.g. ``with precision("double"):``."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_grad_enabled():
    return _state.grad_enabled


class Node:
    __slots__ = ("id", "op", "inputs", "output", "backward_fn")

    def __init__(self, id, op, inputs, output, backward_fn):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.id}, {self.op})"


class Tape:
    """Ordered record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes = []

    def append(self, op, inputs, output, backward_fn):
        node = Node(len(self.nodes), op, inputs, output, backward_fn)
        self.nodes.append(node)
        return node

    def clear(self):
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_state = _State()


def get_tape():
    return _state.tape


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else _default_dtype
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    # -- operators (rules live in functional) -------------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op, out, inputs, backward_fn):
    """Wrap ``out`` and register ``backward_fn`` if any input needs a gradient.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per input.
    """
    result = Tensor(out, dtype=out.dtype)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = _state.tape.append(op, tuple(inputs), result, backward_fn)
    return result


def backward(loss):
    """Populate ``.grad`` on every leaf that requires one, then clear the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
        return
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[: loss._node.id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and t._node is None:
                    leaves.setdefault(id(t), t)
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            if t._node is None:
                leaves.setdefault(id(t), t)
                if gi is not None:
                    t.grad = _accumulate(t.grad, gi)
            elif gi is not None:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape.clear()


def checkpoint(fn, x, params, buffers=()):
    """Evaluate ``fn(x)`` keeping only its input and output on the tape.

    Intermediates are recomputed during backward on a private tape, trading
    one extra forward pass for memory.  ``params`` are the leaves ``fn`` reads;
    their gradients are accumulated directly by the recomputation.  ``buffers``
    are numpy arrays ``fn`` mutates (BN running statistics); they are restored
    after the recomputation so they see exactly one update per step.
    """
    with no_grad():
        out = fn(x)
    if not (_state.grad_enabled and (x.requires_grad or any(p.requires_grad for p in params))):
        return out

    def bw(g):
        from . import functional as F

        saved = [b.copy() for b in buffers]
        outer, was = _state.tape, _state.grad_enabled
        _state.tape, _state.grad_enabled = Tape(), True
        try:
            xi = Tensor(x.data, dtype=x.dtype, requires_grad=x.requires_grad)
            backward(F.sum(F.mul(fn(xi), Tensor(g, dtype=g.dtype))))
        finally:
            _state.tape, _state.grad_enabled = outer, was
            for b, s in zip(buffers, saved):
                b[...] = s
        return (xi.grad if x.requires_grad else None,) + (None,) * len(params)

    return record("checkpoint", out.data, (x, *params), bw)


def _accumulate(existing, g):
    if existing is None:
        return np.array(g, copy=True)
    existing += g
    return existing


def finite_diff_check(f, point, eps=1e-5, wrt=None):
    """Maximum relative error between autograd and central differences.

    ``f`` maps its tensors to a scalar Tensor.  ``point`` is a Tensor (or list
    of Tensors) to differentiate; ``wrt`` optionally restricts which of them
    are checked.  Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    Raises FloatingPointError naming the coordinate of any non-finite value.
    """
    points = list(point) if isinstance(point, (list, tuple)) else [point]
    targets = points if wrt is None else list(wrt)
    for p in points:
        p.grad = None
        p.requires_grad = True
    get_tape().clear()
    loss = f(*points)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"function value {loss.item()} is non-finite at the evaluation point")
    backward(loss)
    worst = 0.0
    for ti, p in enumerate(targets):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*points).item()
                flat[i] = orig - eps
                fm = f(*points).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                a = analytic.reshape(-1)[i]
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    raise FloatingPointError(
                        f"non-finite gradient at input {ti}, coordinate {tuple(int(j) for j in np.unravel_index(i, p.shape))}"
                    )
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
