"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends one entry to the active
computation tape: the entry holds the input tensors, the output tensor
and a backward rule. Because entries are appended in execution order,
the tape is topologically sorted by construction and ``backward`` can
replay it in reverse, visiting each recorded operation exactly once.

A tape and the tensors recorded on it belong to one logical thread of
execution; independent runs should each work inside ``fresh_tape()``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigurationError, DimensionError, EmptySetError, GradientError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "fresh_tape",
    "no_grad",
    "grad_enabled",
    "concat",
    "stack",
    "gather_rows",
    "segment_max",
    "segment_mean",
    "set_pool",
    "conv3d",
    "sparse_matmul",
    "dropout",
]


class _Entry:
    """One recorded operation: inputs, output and its backward rule."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of operations, topologically ordered."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def reset(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


_TAPE = Tape()
_GRAD_ENABLED = True


def current_tape() -> Tape:
    return _TAPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def fresh_tape():
    """Run a block on its own empty tape, restoring the previous one after."""
    global _TAPE
    previous = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = previous


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``data`` is row-major and owned by the tensor. Tensors are treated
    as immutable after creation except for the ``grad`` buffer; layers
    that mutate values (optimizer updates, running statistics) do so on
    leaf tensors between tape runs.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        a, b = self, _as_tensor(other)
        out = _make(np.add(a.data, b.data), (a, b))
        if out.requires_grad:
            _record(
                (a, b),
                out,
                lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
            )
        return out

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other)
        out = _make(np.subtract(a.data, b.data), (a, b))
        if out.requires_grad:
            _record(
                (a, b),
                out,
                lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
            )
        return out

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _as_tensor(other)
        out = _make(np.multiply(a.data, b.data), (a, b))
        if out.requires_grad:
            ad, bd = a.data, b.data
            _record(
                (a, b),
                out,
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
            )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other)
        out = _make(np.divide(a.data, b.data), (a, b))
        if out.requires_grad:
            ad, bd = a.data, b.data
            _record(
                (a, b),
                out,
                lambda g: (
                    _unbroadcast(g / bd, ad.shape),
                    _unbroadcast(-g * ad / (bd * bd), bd.shape),
                ),
            )
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            _record((self,), out, lambda g: (-g,))
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _make(self.data ** exponent, (self,))
        if out.requires_grad:
            ad = self.data
            _record((self,), out, lambda g: (g * exponent * ad ** (exponent - 1),))
        return out

    def __matmul__(self, other):
        a, b = self, _as_tensor(other)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise DimensionError(
                f"matmul requires (n,k) @ (k,m); got {a.data.shape} @ {b.data.shape}"
            )
        out = _make(a.data @ b.data, (a, b))
        if out.requires_grad:
            ad, bd = a.data, b.data
            _record((a, b), out, lambda g: (g @ bd.T, ad.T @ g))
        return out

    # -- elementwise functions ------------------------------------------

    def relu(self):
        out = _make(np.maximum(self.data, 0.0), (self,))
        if out.requires_grad:
            mask = self.data > 0.0
            _record((self,), out, lambda g: (g * mask,))
        return out

    def abs(self):
        out = _make(np.abs(self.data), (self,))
        if out.requires_grad:
            sign = np.sign(self.data)
            _record((self,), out, lambda g: (g * sign,))
        return out

    def sqrt(self):
        out = _make(np.sqrt(self.data), (self,))
        if out.requires_grad:
            od = out.data
            _record((self,), out, lambda g: (g / (2.0 * od),))
        return out

    # -- reductions and shape ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape
            _record(
                (self,),
                out,
                lambda g: (_spread(g, shape, axis, keepdims),),
            )
        return out

    def mean(self, axis=None, keepdims: bool = False):
        out = _make(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape
            count = self.data.size / out.data.size
            _record(
                (self,),
                out,
                lambda g: (_spread(g, shape, axis, keepdims) / count,),
            )
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            orig = self.data.shape
            _record((self,), out, lambda g: (g.reshape(orig),))
        return out

    def transpose(self):
        if self.data.ndim != 2:
            raise DimensionError(f"transpose expects a matrix, got {self.data.shape}")
        out = _make(self.data.T.copy(), (self,))
        if out.requires_grad:
            _record((self,), out, lambda g: (g.T,))
        return out


class Parameter(Tensor):
    """A leaf tensor that is learned; always requires a gradient."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


# -- recording helpers ----------------------------------------------------


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    return out


def _record(inputs, output, backward_rule):
    _TAPE.entries.append(_Entry(tuple(inputs), output, backward_rule))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _spread(grad: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        expanded = list(grad.shape)
        for a in sorted(axes):
            expanded.insert(a, 1)
        grad = grad.reshape(expanded)
    return np.broadcast_to(grad, shape).copy()


# -- backward --------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor with
    ``requires_grad`` reachable from ``loss``.

    Repeated calls without clearing gradients accumulate. Tensors that
    do not influence the loss are left untouched.
    """
    if loss.data.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = tape if tape is not None else _TAPE
    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }

    def _absorb(tensor: Tensor, grad: np.ndarray):
        key = id(tensor)
        held = pending.get(key)
        if held is None:
            pending[key] = (tensor, np.array(grad, copy=True))
        else:
            pending[key] = (tensor, held[1] + grad)

    for entry in reversed(tape.entries):
        held = pending.pop(id(entry.output), None)
        if held is None:
            continue
        tensor, grad = held
        if tensor.requires_grad:
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        input_grads = entry.backward(grad)
        for inp, ig in zip(entry.inputs, input_grads):
            if ig is not None and inp.requires_grad:
                _absorb(inp, ig)
    # whatever is left belongs to leaves that were never produced by an op
    for tensor, grad in pending.values():
        if tensor.requires_grad:
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


# -- structural ops ---------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        bounds = np.cumsum(sizes)[:-1]

        def _back(g):
            return tuple(np.split(g, bounds, axis=axis))

        _record(tensors, out, _back)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        def _back(g):
            return tuple(np.moveaxis(g, axis, 0))

        _record(tensors, out, _back)
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows ``x[indices]``; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    out = _make(x.data[idx], (x,))
    if out.requires_grad:
        n = x.data.shape[0]

        def _back(g):
            return (_scatter_add_rows(n, idx, g),)

        _record((x,), out, _back)
    return out


def _scatter_add_rows(n_rows: int, idx: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Sum gradient rows that map to the same source row.

    Sort + reduceat instead of np.add.at: the latter is an order of
    magnitude slower for the repeated index patterns mesh and point
    models produce.
    """
    out = np.zeros((n_rows,) + grad.shape[1:], dtype=grad.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate(([0], boundaries))
    sums = np.add.reduceat(grad[order], starts, axis=0)
    out[sorted_idx[starts]] = sums
    return out


# -- segment reductions ------------------------------------------------------


def _segment_bounds(offsets: np.ndarray):
    offsets = np.asarray(offsets, dtype=np.intp)
    starts = offsets[:-1]
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise EmptySetError("every segment must contain at least one row")
    return starts, counts


def segment_max(x: Tensor, offsets) -> Tensor:
    """Columnwise max within each contiguous row segment.

    ``offsets`` has length segments+1; segment ``i`` covers rows
    ``offsets[i]:offsets[i+1]`` and must be nonempty. The gradient is
    routed to the first row attaining the maximum in each column.
    """
    starts, counts = _segment_bounds(offsets)
    data = np.maximum.reduceat(x.data, starts, axis=0)
    out = _make(data, (x,))
    if out.requires_grad:
        seg_of_row = np.repeat(np.arange(len(starts)), counts)
        xd = x.data

        def _back(g):
            is_max = xd == data[seg_of_row]
            # first attaining row per segment and column: within-segment
            # cumulative hit count equals one exactly at the first hit
            hits = np.cumsum(is_max, axis=0)
            offset = np.zeros((len(starts),) + hits.shape[1:], dtype=hits.dtype)
            offset[1:] = hits[starts[1:] - 1]
            first = is_max & ((hits - offset[seg_of_row]) == 1)
            return (first * g[seg_of_row],)

        _record((x,), out, _back)
    return out


def segment_mean(x: Tensor, offsets) -> Tensor:
    """Columnwise mean within each contiguous row segment."""
    starts, counts = _segment_bounds(offsets)
    sums = np.add.reduceat(x.data, starts, axis=0)
    data = sums / counts[:, None] if x.data.ndim > 1 else sums / counts
    out = _make(data, (x,))
    if out.requires_grad:
        seg_of_row = np.repeat(np.arange(len(starts)), counts)
        inv = 1.0 / counts

        def _back(g):
            scaled = g * (inv[:, None] if g.ndim > 1 else inv)
            return (scaled[seg_of_row],)

        _record((x,), out, _back)
    return out


def set_pool(x: Tensor, mode: str) -> Tensor:
    """Pool an (n, d) set of feature rows to a single d-vector.

    ``max`` routes the gradient to the first row (by index) attaining
    each column maximum, which makes the backward pass deterministic.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"set_pool expects (n, d), got {x.data.shape}")
    if x.data.shape[0] == 0:
        raise EmptySetError("cannot pool an empty set")
    if mode == "mean":
        return x.mean(axis=0)
    if mode != "max":
        raise ConfigurationError(f"unknown pool mode {mode!r}")
    data = x.data.max(axis=0)
    out = _make(data, (x,))
    if out.requires_grad:
        winners = np.argmax(x.data, axis=0)
        shape = x.data.shape

        def _back(g):
            gx = np.zeros(shape)
            gx[winners, np.arange(shape[1])] = g
            return (gx,)

        _record((x,), out, _back)
    return out


# -- convolution -------------------------------------------------------------


def _triple(value, name: str) -> tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ConfigurationError(f"{name} must be an int or a 3-tuple")
    return value


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """3-D convolution of ``x`` with kernel ``w`` plus per-channel bias.

    ``x`` is (ch_in, X, Y, Z) for a single volume or (batch, ch_in, X,
    Y, Z); ``w`` is (ch_out, ch_in, A, B, C). The output value at each
    position is the quadruple sum over input channels and kernel
    offsets of weight times (zero-padded, strided) input, plus bias.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    batched = x.data.ndim == 5
    xd = x.data if batched else x.data[None]
    if xd.ndim != 5 or w.data.ndim != 5:
        raise DimensionError(
            f"conv3d expects (ch_in, X, Y, Z) input and 5-d kernel; "
            f"got {x.data.shape} and {w.data.shape}"
        )
    n, c_in, *spatial = xd.shape
    c_out, c_in_w, *kernel = w.data.shape
    if c_in != c_in_w:
        raise DimensionError(
            f"kernel expects {c_in_w} input channels, input has {c_in}"
        )
    out_spatial = []
    for dim, k, s, p in zip(spatial, kernel, stride, padding):
        padded = dim + 2 * p
        if k > padded:
            raise DimensionError(
                f"kernel extent {tuple(kernel)} exceeds padded input {tuple(spatial)} "
                f"with padding {padding}"
            )
        out_spatial.append((padded - k) // s + 1)
    ox, oy, oz = out_spatial
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(xd, pads)
    sx, sy, sz = stride
    a_, b_, c_ = kernel

    out_data = np.empty((n, c_out, ox, oy, oz))
    out_data[:] = b.data[None, :, None, None, None]
    for ka in range(a_):
        for kb in range(b_):
            for kc in range(c_):
                window = xp[
                    :, :,
                    ka : ka + ox * sx : sx,
                    kb : kb + oy * sy : sy,
                    kc : kc + oz * sz : sz,
                ]
                out_data += np.einsum(
                    "om,nmxyz->noxyz", w.data[:, :, ka, kb, kc], window,
                    optimize=True,
                )

    out = _make(out_data if batched else out_data[0], (x, w, b))
    if out.requires_grad:
        need_x = x.requires_grad
        wd = w.data

        def _back(g):
            gb = g if batched else g[None]
            grad_b = gb.sum(axis=(0, 2, 3, 4))
            grad_w = np.zeros_like(wd)
            grad_xp = np.zeros_like(xp) if need_x else None
            for ka in range(a_):
                for kb in range(b_):
                    for kc in range(c_):
                        window = xp[
                            :, :,
                            ka : ka + ox * sx : sx,
                            kb : kb + oy * sy : sy,
                            kc : kc + oz * sz : sz,
                        ]
                        grad_w[:, :, ka, kb, kc] = np.einsum(
                            "noxyz,nmxyz->om", gb, window, optimize=True
                        )
                        if need_x:
                            grad_xp[
                                :, :,
                                ka : ka + ox * sx : sx,
                                kb : kb + oy * sy : sy,
                                kc : kc + oz * sz : sz,
                            ] += np.einsum(
                                "om,noxyz->nmxyz", wd[:, :, ka, kb, kc], gb,
                                optimize=True,
                            )
            grad_x = None
            if need_x:
                px, py, pz = padding
                grad_x = grad_xp[
                    :, :,
                    px : px + spatial[0],
                    py : py + spatial[1],
                    pz : pz + spatial[2],
                ]
                if not batched:
                    grad_x = grad_x[0]
            return (grad_x, grad_w, grad_b)

        _record((x, w, b), out, _back)
    return out


# -- sparse aggregation -------------------------------------------------------


def sparse_matmul(matrix, x: Tensor) -> Tensor:
    """Multiply a fixed sparse matrix (scipy CSR) by a dense tensor.

    The matrix itself carries no gradient; the backward rule applies
    its transpose to the incoming gradient.
    """
    data = matrix @ x.data
    out = _make(data, (x,))
    if out.requires_grad:
        mt = matrix.T.tocsr()

        def _back(g):
            return (mt @ g,)

        _record((x,), out, _back)
    return out


# -- dropout ------------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero each element with probability ``p`` and rescale survivors.

    Identity in evaluation mode. ``rng`` must be supplied in training
    mode so masks are reproducible from the run seed.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)
