"""Dense reverse-mode autodiff over numpy arrays.

Only the operations the segmentation model and the training objectives need
are provided. Broadcasting is limited to scalar-vs-tensor and equal shapes.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


class Tensor:
    """Array with an optional gradient buffer and a link into the graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf with requires_grad."""
        if not self.requires_grad:
            raise RuntimeError("backward called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(_as_tensor(other, self), self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)


def _topo_order(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _default_dtype))


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


# ----------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise ValueError("div: zero in denominator")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: nonpositive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.data.dtype), (a,),
                 lambda g: (g * pos,), "relu")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"exp": exp, "log": log, "relu": relu}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the scalar factor for ``scale``."""
    if op in _ELEMENTWISE:
        return _ELEMENTWISE[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _conv_out(n: int, k: int, stride: int, pad: tuple) -> int:
    span = n + pad[0] + pad[1] - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: non-integral output extent ({n}+{pad[0]}+{pad[1]}-{k})/{stride}+1")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """Cross-correlation of ``x`` [B,C,H,W] with ``w`` [F,C,k,k], optional bias [F].

    ``pad`` is an int or a (before, after) pair applied to both spatial axes.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    F, C, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    B, _, H, W = x.shape
    pad = (pad, pad) if np.isscalar(pad) else tuple(pad)
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), pad, pad)) if any(pad) else x.data
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = cols.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C)
    else:
        patches = np.empty((B, Ho, Wo, C, k, k), dtype=x.data.dtype)
        for di in range(k):
            for dj in range(k):
                patches[..., di, dj] = xp[:, :, di:di + stride * Ho:stride,
                                          dj:dj + stride * Wo:stride].transpose(0, 2, 3, 1)
        cols = patches.reshape(B * Ho * Wo, C * k * k)
    wmat = w.data.reshape(F, C * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            gxp = np.zeros_like(xp)
            if k == 1:
                gxp[:, :, :stride * Ho:stride, :stride * Wo:stride] += \
                    gcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(B, Ho, Wo, C, k, k)
                for di in range(k):
                    for dj in range(k):
                        gxp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += \
                            gcols[..., di, dj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad[0]:pad[0] + H, pad[0]:pad[0] + W]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


# ----------------------------------------------------------------------------
# losses and reductions


def softmax_ce(logits: Tensor, targets, ignore_index: int = 255, mask=None) -> Tensor:
    """Mean cross-entropy of rows of ``logits`` [N,C] against integer ``targets``.

    Rows whose target equals ``ignore_index`` or whose ``mask`` entry is false do
    not contribute. Returns 0 when no row survives.
    """
    if logits.ndim != 2:
        raise ValueError(f"softmax_ce: logits must be 2-D, got {logits.shape}")
    N, C = logits.shape
    t = np.asarray(targets).reshape(-1).astype(np.int64)
    if t.shape[0] != N:
        raise ValueError(f"softmax_ce: {N} rows but {t.shape[0]} targets")
    bad = (t != ignore_index) & ((t < 0) | (t >= C))
    if np.any(bad):
        raise ValueError(f"softmax_ce: target {int(t[bad][0])} outside [0, {C})")
    valid = t != ignore_index
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).reshape(-1)
    n = int(valid.sum())
    dtype = logits.data.dtype
    if n == 0:
        return _make(np.zeros((), dtype=dtype), (logits,), lambda g: (np.zeros_like(logits.data),),
                     "softmax_ce")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.nonzero(valid)[0]
    tv = t[rows]
    loss = (logz[rows] - shifted[rows, tv]).sum() / n

    def backward(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(shifted[rows] - logz[rows, None])
        p[np.arange(rows.size), tv] -= 1.0
        grad[rows] = p * (g / n)
        return (grad,)

    return _make(np.asarray(loss, dtype=dtype), (logits,), backward, "softmax_ce")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def max(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first maximal entry."""
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]

        def backward(g):
            grad = np.zeros(a.size, dtype=a.data.dtype)
            grad[flat] = g
            return (grad.reshape(a.shape),)

        return _make(np.asarray(out), (a,), backward, "max")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward_axis(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out, (a,), backward_axis, "max")


def logsumexp_rows(a: Tensor, mask=None) -> Tensor:
    """Row-wise log(sum(exp)) of a 2-D tensor over entries where ``mask`` is true.

    Every row must keep at least one entry.
    """
    if a.ndim != 2:
        raise ValueError(f"logsumexp_rows: expected 2-D, got {a.shape}")
    if mask is None:
        keep = np.ones(a.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != a.shape:
            raise ValueError(f"logsumexp_rows: mask {keep.shape} vs input {a.shape}")
        if not keep.any(axis=1).all():
            raise ValueError("logsumexp_rows: a row has no unmasked entry")
    vals = np.where(keep, a.data, -np.inf)
    m = vals.max(axis=1, keepdims=True)
    e = np.exp(vals - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)

    def backward(g):
        return ((e / s) * g[:, None],)

    return _make(out, (a,), backward, "logsumexp_rows")


def l2_normalize(a: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    """Divide by the L2 norm along ``axis`` (norm floored at ``eps``)."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * dot) / denom, g / denom),)

    return _make(out, (a,), backward, "l2_normalize")


# ----------------------------------------------------------------------------
# views


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def gather_rows(a: Tensor, index) -> Tensor:
    """Select rows ``a[index]``; backward scatter-adds."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    idx = idx % n if idx.size else idx

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(a.data[idx], (a,), backward, "gather_rows")


def concat_rows(parts) -> Tensor:
    """Concatenate tensors along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward,
                 "concat_rows")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped at 0
    M = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(M, (rows, i0), 1 - frac)
    np.add.at(M, (rows, i1), frac)
    return M


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align-corners-false convention)."""
    H, W = x.shape[-2:]
    Ry = _interp_matrix(H, out_h, x.data.dtype)
    Rx = _interp_matrix(W, out_w, x.data.dtype)
    out = np.einsum("ih,...hw,jw->...ij", Ry, x.data, Rx, optimize=True)

    def backward(g):
        return (np.einsum("ih,...ij,jw->...hw", Ry, g, Rx, optimize=True),)

    return _make(out, (x,), backward, "bilinear_resize")


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable bilinear resize of a plain array."""
    Ry = _interp_matrix(x.shape[-2], out_h, x.dtype)
    Rx = _interp_matrix(x.shape[-1], out_w, x.dtype)
    return np.einsum("ih,...hw,jw->...ij", Ry, x, Rx, optimize=True)


# ----------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int = -1
    worst_index: tuple = ()
    message: str = ""
    per_input: list = field(default_factory=list)


def grad_check(f, inputs, eps: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` with central differences.

    The error for each input is normwise: max|analytic - numeric| divided by
    max(max|analytic|, max|numeric|, 1e-12). The report passes iff the largest
    such error is at most ``tol``.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
              for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, float("inf"), message="non-finite forward value")
    out.backward()
    worst = GradCheckReport(True, 0.0)
    for n, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    loc = np.unravel_index(i, t.shape)
                    return GradCheckReport(False, float("inf"), n, tuple(int(v) for v in loc),
                                           f"non-finite value at input {n} index {loc}")
                nflat[i] = (fp - fm) / (2 * eps)
        diff = np.abs(analytic - numeric)
        scale_ = np.max([np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), 1e-12])
        err = float(diff.max(initial=0) / scale_)
        worst.per_input.append(err)
        if err > worst.max_rel_error or n == 0:
            worst.max_rel_error = err
            worst.worst_input = n
            worst.worst_index = tuple(int(v) for v in
                                      np.unravel_index(int(np.argmax(diff)), t.shape)) if diff.size else ()
    worst.passed = worst.max_rel_error <= tol
    if not worst.passed:
        worst.message = (f"max relative error {worst.max_rel_error:.3e} at input "
                         f"{worst.worst_input} index {worst.worst_index}")
    return worst
