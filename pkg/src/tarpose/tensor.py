"""Dense tensors with tape-based reverse-mode differentiation.

Every kernel is a pure numpy function. When a :class:`Tape` is active and at
least one input requires a gradient, the op appends a node carrying its
backward rule to the tape; ``Tape.backward`` replays the nodes in reverse.

Broadcasting is deliberately narrow: bias-style suffix broadcasting in
``add``/``sub``/``mul`` and mask broadcasting in ``softmax_lastdim``. Every
other shape mismatch raises :class:`DimensionError`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

NEG_LARGE = -1e9
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class FullyMaskedRowError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPES: list["Tape | None"] = []
_FLOP_COUNTERS: list["FlopCounter"] = []


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded. A tape supports exactly one ``backward`` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.cleared = False

    def __enter__(self) -> "Tape":
        if self.cleared:
            raise TapeError("tape already consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

        Returns a mapping from each leaf tensor (one not produced by a node of
        this tape) to the gradient computed in this pass.
        """
        if self.cleared:
            raise TapeError("backward() called on a cleared tape")
        if loss.size != 1 or loss.ndim != 0:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise TapeError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    owners[key] = inp

        leaves: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            t = owners[key]
            g = g.astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
            if key not in produced:
                leaves[t] = g
        self.nodes = []
        self.cleared = True
        return leaves

    def first_nonfinite(self) -> str | None:
        """Name the first recorded op whose output holds NaN/Inf, if any."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                return f"op #{i} ({node.op}), output shape {node.output.shape}"
        return None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; outputs created inside are detached constants."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


class FlopCounter:
    """Counts 2 FLOPs per multiply-accumulate in matmul-like kernels."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def __enter__(self) -> "FlopCounter":
        _FLOP_COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _FLOP_COUNTERS.remove(self)

    def add(self, op: str, flops: int) -> None:
        self.total += flops
        self.by_op[op] = self.by_op.get(op, 0) + flops


def _count(op: str, flops: int) -> None:
    for c in _FLOP_COUNTERS:
        c.add(op, flops)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append(_Node(op, tuple(inputs), out, backward))
        return out
    return Tensor(data)


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not _is_suffix(b.shape, a.shape):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# elementwise and layout
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and _is_suffix(a.shape, b.shape):
        a, b = b, a
    _check_binary("add", a, b)

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)

    def backward(g):
        return g, -_reduce_to(g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and _is_suffix(a.shape, b.shape):
        a, b = b, a
    _check_binary("mul", a, b)

    def backward(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        return (g * s,)

    return _make("scale", a.data * a.dtype.type(s), (a,), backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return _make("gelu", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", np.transpose(a.data, axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise DimensionError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = (slice(None),) * ax + (slice(start, stop),)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make("slice", a.data[index], (a,), backward)


# --------------------------------------------------------------------------
# linear algebra and normalization
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    out = a.data @ b.data
    _count("matmul", 2 * out.size * a.shape[-1])

    def backward(g):
        if b.ndim == 2:
            da = g @ b.data.T
            db = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            da = g @ np.swapaxes(b.data, -1, -2)
            db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _make("matmul", out, (a, b), backward)


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with an optional mask.

    ``mask`` is either a boolean array (True = relevant) or an additive float
    array; either must broadcast against ``x``. Boolean masks become an
    additive ``NEG_LARGE`` so masked scores underflow to exactly zero weight.
    """
    z = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.dtype == bool:
            if not np.all(m.any(axis=-1)):
                raise FullyMaskedRowError("softmax_lastdim: a row has every entry masked")
            additive = np.where(m, 0.0, NEG_LARGE).astype(x.dtype)
        else:
            if np.any(np.all(m <= NEG_LARGE / 2, axis=-1)):
                raise FullyMaskedRowError("softmax_lastdim: a row has every entry masked")
            additive = m.astype(x.dtype)
        try:
            z = z + additive
        except ValueError as exc:
            raise DimensionError(f"softmax_lastdim: mask {m.shape} does not broadcast to {x.shape}") from exc
        if z.shape != x.shape:
            raise DimensionError(f"softmax_lastdim: mask {m.shape} would broadcast {x.shape} up to {z.shape}")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match last dim {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out.astype(x.dtype, copy=False), (x, gain, bias), backward)


# --------------------------------------------------------------------------
# convolutions and pooling (channel-first, optional leading batch dims)
# --------------------------------------------------------------------------

def conv2d_1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel linear map ``x[..., C_in, h, w] -> [..., C_out, h, w]``."""
    if x.ndim < 3 or w.ndim != 2 or w.shape[1] != x.shape[-3] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d_1x1: input {x.shape}, weight {w.shape}, bias {b.shape} disagree")
    lead = x.shape[:-3]
    cin, h, wd = x.shape[-3:]
    xf = x.data.reshape(-1, cin, h * wd)
    # stacked matmul runs one GEMM per sample, so results do not depend on batch size
    out = w.data @ xf + b.data[:, None]
    _count("conv2d_1x1", 2 * out.size * cin)

    def backward(g):
        gf = g.reshape(-1, w.shape[0], h * wd)
        dx = (w.data.T @ gf).reshape(x.shape)
        dw = np.einsum("nop,ncp->oc", gf, xf, optimize=True)
        return dx, dw, gf.sum(axis=(0, 2))

    return _make("conv2d_1x1", out.reshape(lead + (w.shape[0], h, wd)), (x, w, b), backward)


def deconv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, kernel: int = 4, pad: int = 1) -> Tensor:
    """Transposed convolution ``x[..., C_in, h, w]`` with ``w[C_in, C_out, k, k]``.

    Only geometries whose output is exactly twice the input are accepted.
    """
    if x.ndim < 3 or w.ndim != 4 or w.shape[0] != x.shape[-3] or w.shape[2:] != (kernel, kernel):
        raise DimensionError(f"deconv2d: input {x.shape} and weight {w.shape} disagree")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"deconv2d: bias {b.shape} does not match {w.shape[1]} output channels")
    lead = x.shape[:-3]
    cin, h, wd = x.shape[-3:]
    cout = w.shape[1]
    ho, wo = (h - 1) * stride - 2 * pad + kernel, (wd - 1) * stride - 2 * pad + kernel
    if ho != 2 * h or wo != 2 * wd:
        raise DimensionError(f"deconv2d: stride={stride} kernel={kernel} pad={pad} does not upsample {h}x{wd} by 2")
    xf = x.data.reshape(-1, cin, h, wd)
    n = xf.shape[0]
    # cols[n, o, ky, kx, i, j] = sum_c x[n, c, i, j] w[c, o, ky, kx], one GEMM per sample
    wt = w.data.reshape(cin, -1).T
    cols = (wt @ xf.reshape(n, cin, h * wd)).reshape(n, cout, kernel, kernel, h, wd)
    fh, fw = (h - 1) * stride + kernel, (wd - 1) * stride + kernel
    full = np.zeros((n, cout, fh, fw), dtype=np.result_type(x.dtype, w.dtype))
    for ky in range(kernel):
        for kx in range(kernel):
            full[:, :, ky:ky + (h - 1) * stride + 1:stride, kx:kx + (wd - 1) * stride + 1:stride] += cols[:, :, ky, kx]
    out = full[:, :, pad:pad + ho, pad:pad + wo] + b.data[:, None, None]
    _count("deconv2d", 2 * n * cin * cout * kernel * kernel * h * wd)

    def backward(g):
        gfull = np.zeros((n, cout, fh, fw), dtype=g.dtype)
        gfull[:, :, pad:pad + ho, pad:pad + wo] = g.reshape(n, cout, ho, wo)
        gcols = np.empty((n, cout, kernel, kernel, h, wd), dtype=g.dtype)
        for ky in range(kernel):
            for kx in range(kernel):
                gcols[:, :, ky, kx] = gfull[:, :, ky:ky + (h - 1) * stride + 1:stride, kx:kx + (wd - 1) * stride + 1:stride]
        dx = np.tensordot(gcols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(xf, gcols, axes=([0, 2, 3], [0, 4, 5]))
        return dx.reshape(x.shape), dw, g.reshape(n, cout, -1).sum(axis=(0, 2))

    return _make("deconv2d", out.reshape(lead + (cout, ho, wo)), (x, w, b), backward)


def max_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor``x``factor`` max pooling over the last two axes."""
    h4, w4 = x.shape[-2:]
    if factor < 1 or h4 % factor or w4 % factor:
        raise DimensionError(f"max_pool2d: spatial {h4}x{w4} not divisible by {factor}")
    h, w = h4 // factor, w4 // factor
    lead = x.shape[:-2]
    win = x.data.reshape(lead + (h, factor, w, factor))
    win = np.moveaxis(win, -3, -2).reshape(lead + (h, w, factor * factor))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(lead + (h, w, factor * factor), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = np.moveaxis(gw.reshape(lead + (h, w, factor, factor)), -2, -3)
        return (gw.reshape(x.shape),)

    return _make("max_pool2d", out, (x,), backward)


# --------------------------------------------------------------------------
# gradient oracle
# --------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        with no_grad():
            val = f(Tensor(arr.reshape(base.shape).astype(x.dtype), requires_grad=False))
        return val.item() if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(flat)
        flat[i] = orig - eps
        lo = evaluate(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return Tensor(grad)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences.

    ``f(*inputs)`` must return a scalar tensor. Inputs should be float64.
    Gradients below ``1e-5 * |f|`` are compared absolutely, since central
    differences carry roundoff of order ``|f| * 1e-16 / eps``.
    """
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = f(*leaves)
    tape.backward(out)
    floor = max(1e-6, 1e-5 * abs(out.item()))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def partial(xi, i=i):
            args = [t if j != i else xi for j, t in enumerate(leaves)]
            return f(*args)

        numeric = finite_diff_grad(partial, Tensor(leaf.data.copy()), eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, numeric.data, floor))
    return worst
