"""Dense tensors with reverse-mode automatic differentiation.

A minimal define-by-run engine on top of numpy, just large enough to train
the velocity networks in this package. Arrays are float32 by default; a
float64 mode exists for finite-difference gradient checking. The graph is
recorded on an explicit :class:`Tape` that is rebuilt for every forward pass,
so batches with different sequence lengths pose no problem.

Reductions use numpy's fixed evaluation order, so results are bitwise
reproducible for identical inputs.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class GradientStateError(RuntimeError):
    """Raised when backward() would overwrite existing gradients."""


class Tensor:
    """A dense n-dimensional array that can participate in autodiff.

    ``requires_grad`` marks leaf tensors (parameters) whose ``grad`` buffer
    is populated by :func:`backward`. Tensors produced by operations carry
    ``requires_grad=True`` transitively but never receive a ``grad`` buffer
    themselves.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

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

    def zero_grad(self):
        """Clear the gradient buffer. Required between backward passes."""
        self.grad = None

    def astensor(self):
        return self

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # Convenience operators; all route through the module-level ops so that
    # recording on the active tape stays in one place.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of operations for one forward pass.

    Operations are appended in execution order, so inputs of any record were
    produced earlier; the reverse sweep therefore sees gradients in valid
    topological order. Use as a context manager::

        with Tape() as tape:
            loss = ...
        grads = backward(loss, tape)
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_tape(self)
        return False

    def __len__(self):
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    popped = _TAPE_STACK.pop()
    if popped is not tape:
        raise RuntimeError("tape stack corrupted: exited tapes out of order")


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, dtype=a.dtype)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c, dtype=a.dtype)

    def bwd(g):
        return (g * c,)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional identical leading (stacked) dimensions.

    Supported shapes: (..., m, k) @ (..., k, n) with equal leading dims, and
    (..., m, k) @ (k, n) for applying a shared weight matrix.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul requires >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul leading dimensions differ: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd, dtype=a.dtype)

    def bwd(g):
        ga = g @ bd.swapaxes(-1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim - 1))))
        else:
            gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bwd)


def relu_squared(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0)
    out = Tensor(r * r, dtype=x.dtype)

    def bwd(g):
        return (g * (2 * r),)

    return _record(out, (x,), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each trailing-axis vector to unit root-mean-square, times gain."""
    if eps <= 0:
        raise ValueError(f"rms_norm eps must be > 0, got {eps}")
    xd = x.data
    n = xd.shape[-1]
    ms = np.mean(xd * xd, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + xd.dtype.type(eps))
    out = Tensor(xd * inv * gain.data, dtype=x.dtype)

    def bwd(g):
        gg = g * gain.data
        dot = np.sum(gg * xd, axis=-1, keepdims=True)
        gx = gg * inv - xd * (inv ** 3) * (dot / n)
        ggain = _unbroadcast(g * xd * inv, gain.shape)
        return gx, ggain

    return _record(out, (x, gain), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, dtype=x.dtype)

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), dtype=x.dtype)

    def bwd(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), dtype=x.dtype)
    inv = 1.0 / x.size

    def bwd(g):
        return (np.full(x.shape, g * x.dtype.type(inv), dtype=x.dtype),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes), dtype=x.dtype)

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), dtype=tensors[0].dtype)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl], dtype=x.dtype)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[sl] = g
        return (gx,)

    return _record(out, (x,), bwd)


def _rope_angles(positions, head_dim, base, dtype):
    if head_dim % 2 != 0:
        raise ValueError(f"rope requires an even head dimension, got {head_dim}")
    half = head_dim // 2
    freqs = np.asarray(base, dtype=np.float64) ** (-2.0 * np.arange(half) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive dimension pairs of each token by position-scaled angles.

    ``x`` has shape (..., n_tokens, head_dim); pair i is rotated by
    ``pos * base**(-2i/head_dim)``. The rotation preserves pair norms, so
    attention scores depend only on relative positions.
    """
    head_dim = x.shape[-1]
    cos, sin = _rope_angles(positions, head_dim, base, x.dtype)
    x1 = x.data[..., 0::2]
    x2 = x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = x1 * cos - x2 * sin
    y[..., 1::2] = x1 * sin + x2 * cos
    out = Tensor(y, dtype=x.dtype)

    def bwd(g):
        g1 = g[..., 0::2]
        g2 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    The loss must be scalar, and every leaf reached by the sweep must have a
    cleared gradient buffer; call :meth:`Tensor.zero_grad` between passes.
    Gradient accumulation across batches is the caller's responsibility.

    Returns the dict of leaf tensors to their freshly written gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, bwd in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if g.shape != out.shape:
            g = np.broadcast_to(g, out.shape)
        input_grads = bwd(g)
        for t, gi in zip(inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t
    dirty = [t for t in leaves.values() if t.grad is not None]
    if dirty:
        raise GradientStateError(
            "backward would overwrite existing gradients on "
            f"{len(dirty)} tensor(s); call zero_grad() first"
        )
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=t.dtype)
    return list(leaves.values())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second-moment buffers and step counter for Adam."""

    __slots__ = ("m", "v", "step", "lr", "beta1", "beta2", "eps")

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step shape mismatch for '{k}': param {p.data.shape} vs grad {g.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(fn, params: dict, h: float = 1e-4, max_entries: int | None = None,
                            rng: np.random.Generator | None = None):
    """Compare analytic gradients of ``fn(params) -> scalar Tensor`` with
    central finite differences evaluated in float64.

    Returns the worst relative error over all checked parameter entries.
    ``max_entries`` limits the number of randomly chosen entries per tensor
    (None checks every entry).
    """
    shadow = {k: Tensor(p.data.astype(np.float64), requires_grad=True, dtype=np.float64)
              for k, p in params.items()}
    with Tape() as tape:
        loss = fn(shadow)
    backward(loss, tape)

    worst = 0.0
    for k, p in shadow.items():
        flat = p.data.reshape(-1)
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        gflat = grad.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(shadow).item()
            flat[i] = orig - h
            fm = fn(shadow).item()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            ref = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / ref)
    return worst
