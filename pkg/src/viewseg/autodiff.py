"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Tensors wrap a C-ordered numpy array (the flat row-major buffer) plus an
optional gradient buffer of the same size. Differentiable primitives record
onto the innermost active :class:`Tape`; entries are appended in execution
order, so the tape is always topologically sorted and a single reverse sweep
in :func:`backward` suffices. Tapes are confined to one thread; forward rules
are pure, so distinct tapes may run concurrently on different threads.

With no active tape every primitive runs forward-only, which is how
inference/evaluation avoids graph bookkeeping.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class Tensor:
    """Dense float64 array with an attached differentiation record.

    ``data`` is always a C-contiguous float64 ndarray (``data.ravel()`` is the
    row-major flat buffer); ``grad`` is either None or an ndarray of the same
    shape. ``data`` must not be mutated while a tape referencing the tensor is
    still alive, except through :func:`backward` writing ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # asarray keeps 0-d shape (); ascontiguousarray would promote it to (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, or zeros if no gradient ever reached this tensor."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; everything routes through the recorded primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward_rule")

    def __init__(self, out, inputs, backward_rule):
        self.out = out
        self.inputs = inputs
        self.backward_rule = backward_rule


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Entries hold (inputs, output, backward rule) and are appended eagerly, so
    every input of entry k was produced by an entry < k or is a leaf. A tape
    is rebuilt for every training step; there is no graph reuse.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self.entries)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_rule) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append(_TapeEntry(out, inputs, backward_rule))
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every recorded tensor.

    ``root`` must be a scalar produced on a tape. Adjoints are computed in a
    scratch map and only added into ``grad`` at the end, so repeated calls
    without resetting grads accumulate independent contributions.
    """
    if root.shape != ():
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise ValueError("backward root was not produced on an active tape")
    adjoint: dict[int, np.ndarray] = {id(root): np.ones(())}
    holders: dict[int, Tensor] = {id(root): root}
    for entry in reversed(tape.entries):
        g_out = adjoint.get(id(entry.out))
        if g_out is None:
            continue
        for t, g in zip(entry.inputs, entry.backward_rule(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
                holders[key] = t
    for key, t in holders.items():
        if not t.requires_grad:
            continue
        contrib = adjoint[key]
        t.grad = contrib.copy() if t.grad is None else t.grad + contrib


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return scalar_mul(a, -1.0)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x); no tanh approximation."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * phi)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _record(out, (a,), rule)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    out = Tensor(r)
    return _record(out, (a,), lambda g: (g / (2.0 * r),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds out of order: {lo} > {hi}")
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * inside,))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward, zero backward: the result is a constant to the tape."""
    out = Tensor(a.data)
    out.requires_grad = False
    return out


def grad_reverse(a: Tensor) -> Tensor:
    """Identity forward; the backward pass negates the gradient."""
    out = Tensor(a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra / structural primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"concat axis {axis} out of range for ndim {ndim}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), rule)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_rows index out of range for axis length {a.shape[0]}")
    out = Tensor(a.data[idx])

    def rule(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), rule)


# ---------------------------------------------------------------------------
# reductions and normalizations


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.data.ndim


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(a.data.sum())
        return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = _check_axis(a, axis)
    out = Tensor(a.data.sum(axis=ax))

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _record(out, (a,), rule)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis(a, axis)]
    return scalar_mul(sum_(a, axis), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(s)

    def rule(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _record(out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    lp = shifted - lse
    out = Tensor(lp)

    def rule(g):
        return (g - np.exp(lp) * g.sum(axis=ax, keepdims=True),)

    return _record(out, (a,), rule)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis with a smooth sqrt(sum + eps) denominator."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    y = x / n
    out = Tensor(y)

    def rule(g):
        return (g / n - x * ((g * x).sum(axis=-1, keepdims=True) / (n * n * n)),)

    return _record(out, (a,), rule)


def adaptive_average_pool(a: Tensor, target_len: int) -> Tensor:
    """Average-pool the temporal axis (axis 0) down to ``target_len``.

    Window t spans input rows [floor(t*T/L), floor((t+1)*T/L)). The global
    mean of the output equals the mean of the window means by construction.
    """
    T = a.shape[0]
    if target_len < 1:
        raise ValueError(f"pool target length must be positive, got {target_len}")
    if target_len > T:
        raise ValueError(f"pool target length {target_len} exceeds source length {T}")
    bounds = [(t * T) // target_len for t in range(target_len + 1)]
    pooled = np.stack([a.data[lo:hi].mean(axis=0) for lo, hi in zip(bounds, bounds[1:])])
    out = Tensor(pooled)

    def rule(g):
        ga = np.zeros_like(a.data)
        for t, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
            ga[lo:hi] += g[t] / (hi - lo)
        return (ga,)

    return _record(out, (a,), rule)


def dilated_conv1d(inp: Tensor, kernel: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """Same-length 1-D convolution with dilation and symmetric zero padding.

    ``inp`` is [T, C_in], ``kernel`` is [k, C_in, C_out] with k odd, ``bias``
    is [C_out]. out[t, o] = bias[o] + sum_{j,c} inp[t + (j - (k-1)/2) * d, c]
    * kernel[j, c, o], with out-of-range input rows treated as zero.
    """
    if inp.data.ndim != 2 or kernel.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError(
            f"dilated_conv1d expects [T,Cin], [k,Cin,Cout], [Cout]; got "
            f"{inp.shape}, {kernel.shape}, {bias.shape}"
        )
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {k}")
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    if inp.shape[1] != c_in or bias.shape[0] != c_out:
        raise ShapeError(
            f"channel mismatch: input {inp.shape}, kernel {kernel.shape}, bias {bias.shape}"
        )
    T = inp.shape[0]
    center = (k - 1) // 2
    x = inp.data
    out_data = np.tile(bias.data, (T, 1))
    taps = []
    for j in range(k):
        shift = (j - center) * dilation
        lo, hi = max(0, -shift), min(T, T - shift)
        taps.append((j, shift, lo, hi))
        if lo < hi:
            out_data[lo:hi] += x[lo + shift:hi + shift] @ kernel.data[j]
    out = Tensor(out_data)

    def rule(g):
        gx = np.zeros_like(x)
        gk = np.zeros_like(kernel.data)
        for j, shift, lo, hi in taps:
            if lo < hi:
                gx[lo + shift:hi + shift] += g[lo:hi] @ kernel.data[j].T
                gk[j] = x[lo + shift:hi + shift].T @ g[lo:hi]
        return gx, gk, g.sum(axis=0)

    return _record(out, (inp, kernel, bias), rule)


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``f`` and central
    finite differences over every coordinate of every input.

    ``f`` must be a deterministic scalar-valued function of the given tensors.
    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step size h must lie in (0, 1e-2], got {h}")
    probes = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape():
        out = f(*probes)
        if out.shape != ():
            raise ValueError("finite_difference_check target must return a scalar")
        backward(out)
    analytic = [p.grad_array() for p in probes]

    worst = 0.0
    for p, ana in zip(probes, analytic):
        flat = p.data.ravel()
        ana_flat = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*probes).item()
            flat[i] = orig - h
            f_minus = f(*probes).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
